#!/usr/bin/env python3
"""Writes the synthetic restaurant fixture used by the end-to-end tests.

Output (SemEval-2014 XML layout plus an implicit-tag sidecar):
  restaurant_train.xml, restaurant_test.xml, implicit_tags.jsonl
"""

import argparse
import json
import random
from pathlib import Path
from xml.sax.saxutils import quoteattr, escape

ASPECTS = [
    "pasta", "pizza", "service", "waiter", "staff", "dessert", "wine list", "prices",
    "decor", "music", "sushi", "burger", "coffee", "menu", "portions", "bread",
    "soup", "steak", "salad", "atmosphere", "bartender", "patio", "noodles", "tacos",
]

EXPLICIT = {
    "positive": [
        "The {a} was excellent.",
        "I loved the {a} here.",
        "Great {a} and friendly people.",
        "The {a} is wonderful, we will be back.",
        "Honestly the {a} was delicious.",
        "Their {a} is the best in town.",
    ],
    "negative": [
        "The {a} was terrible.",
        "I hated the {a}.",
        "Awful {a}, never again.",
        "The {a} is overpriced and bland.",
        "Sadly the {a} was disappointing.",
        "Their {a} was rude and slow.",
    ],
    "neutral": [
        "We ordered the {a} at around eight.",
        "The {a} comes with the set lunch.",
        "They changed the {a} last month.",
        "My friend asked about the {a}.",
        "The {a} is listed on the back page.",
        "We sat near the {a} on Tuesday.",
    ],
}

# No opinion word; the polarity has to be inferred.
IMPLICIT = {
    "positive": [
        "The {a} vanished from our plates in five minutes.",
        "We asked for a second round of the {a} right away.",
        "After trying the {a} I booked the same table for next week.",
        "Everyone at the table wanted the recipe for the {a}.",
    ],
    "negative": [
        "We waited an hour for the {a} and then left.",
        "Half of the {a} stayed on the plate.",
        "I asked for a refund after the {a}.",
        "The {a} arrived cold and we sent it back twice.",
    ],
}


def sentence_xml(sid, text, terms):
    lines = [f'    <sentence id="{sid}">', f"        <text>{escape(text)}</text>"]
    if terms:
        lines.append("        <aspectTerms>")
        for term, pol in terms:
            start = text.find(term)
            lines.append(
                f"            <aspectTerm term={quoteattr(term)} polarity=\"{pol}\" "
                f'from="{start}" to="{start + len(term)}"/>'
            )
        lines.append("        </aspectTerms>")
    lines.append("    </sentence>")
    return "\n".join(lines)


def make_split(rng, prefix, n_sentences):
    sentences = []
    implicit_ids = []
    for i in range(n_sentences):
        sid = f"{prefix}{i:04d}"
        roll = rng.random()
        if roll < 0.30:
            pol = rng.choice(["positive", "negative"])
            a = rng.choice(ASPECTS)
            text = rng.choice(IMPLICIT[pol]).format(a=a)
            sentences.append(sentence_xml(sid, text, [(a, pol)]))
            implicit_ids.append(f"{sid}#0")
        elif roll < 0.85:
            pol = rng.choice(["positive", "negative", "neutral"])
            a = rng.choice(ASPECTS)
            text = rng.choice(EXPLICIT[pol]).format(a=a)
            sentences.append(sentence_xml(sid, text, [(a, pol)]))
        elif roll < 0.95:
            a, b = rng.sample(ASPECTS, 2)
            pa, pb = rng.sample(["positive", "negative", "neutral"], 2)
            text = rng.choice(EXPLICIT[pa]).format(a=a) + " " + rng.choice(EXPLICIT[pb]).format(a=b)
            sentences.append(sentence_xml(sid, text, [(a, pa), (b, pb)]))
        else:
            a, b = rng.sample(ASPECTS, 2)
            text = f"The {a} was great but the {a} was also awful, unlike the {b}."
            sentences.append(sentence_xml(sid, text, [(a, "conflict"), (b, "neutral")]))
    xml = '<?xml version="1.0" encoding="UTF-8"?>\n<sentences>\n' + "\n".join(sentences) + "\n</sentences>\n"
    return xml, implicit_ids


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "data" / "fixture"))
    ap.add_argument("--seed", type=int, default=2023)
    ap.add_argument("--train", type=int, default=220)
    ap.add_argument("--test", type=int, default=80)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_xml, train_imp = make_split(rng, "tr", args.train)
    test_xml, test_imp = make_split(rng, "te", args.test)
    (out / "restaurant_train.xml").write_text(train_xml, encoding="utf-8")
    (out / "restaurant_test.xml").write_text(test_xml, encoding="utf-8")
    with open(out / "implicit_tags.jsonl", "w", encoding="utf-8") as f:
        for ex_id in train_imp + test_imp:
            f.write(json.dumps({"id": ex_id, "implicit": True}) + "\n")


if __name__ == "__main__":
    main()
