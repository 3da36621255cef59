#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rvisa/error.hpp"
#include "rvisa/polarity.hpp"
#include "rvisa/prompts.hpp"

namespace rvisa {

struct PolarityMention {
  Polarity label = Polarity::neutral;
  std::size_t char_offset = 0;

  bool operator==(const PolarityMention&) const = default;
};

enum class VerificationReason { match, mismatch, unparseable };

constexpr std::string_view to_string(VerificationReason r) noexcept {
  switch (r) {
    case VerificationReason::match:
      return "match";
    case VerificationReason::mismatch:
      return "mismatch";
    case VerificationReason::unparseable:
      return "unparseable";
  }
  return "unparseable";
}

inline std::optional<VerificationReason> parse_verification_reason(std::string_view s) noexcept {
  for (auto r : {VerificationReason::match, VerificationReason::mismatch,
                 VerificationReason::unparseable}) {
    if (s == to_string(r)) return r;
  }
  return std::nullopt;
}

struct VerificationSignal {
  std::string example_id;
  bool value = false;
  VerificationReason reason = VerificationReason::unparseable;

  bool operator==(const VerificationSignal&) const = default;
};

/// A generated explanation with everything derived from its text.
struct Rationale {
  std::string example_id;
  PromptMode mode = PromptMode::th_re;
  std::string generator_id;
  std::string text;
  std::vector<PolarityMention> polarity_mentions;  // ascending char_offset
  std::optional<Polarity> resolved;                // polarity_mentions[0].label when present
  std::optional<std::string> aspect_span;
  std::optional<std::string> opinion_span;
};

namespace detail {

// Bytes >= 0x80 belong to multi-byte UTF-8 letters and count as word characters.
constexpr bool is_word_byte(unsigned char c) noexcept {
  return c >= 0x80 || std::isalnum(c) != 0 || c == '_';
}

inline bool iequals_at(std::string_view text, std::size_t pos, std::string_view word) noexcept {
  if (pos + word.size() > text.size()) return false;
  for (std::size_t i = 0; i < word.size(); ++i) {
    if (std::tolower(static_cast<unsigned char>(text[pos + i])) != word[i]) return false;
  }
  return true;
}

inline std::string lowercase(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace detail

/// Whole-word, case-insensitive scan for the three label words. Runs of the same
/// label are collapsed to their first occurrence.
inline std::vector<PolarityMention> extract_polarities(std::string_view text) {
  std::vector<PolarityMention> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (!detail::is_word_byte(c)) {
      ++i;
      continue;
    }
    std::size_t end = i;
    while (end < text.size() && detail::is_word_byte(static_cast<unsigned char>(text[end]))) ++end;
    for (auto p : kPolarities) {
      const auto w = to_string(p);
      if (end - i == w.size() && detail::iequals_at(text, i, w)) {
        if (out.empty() || out.back().label != p) out.push_back({p, i});
        break;
      }
    }
    i = end;
  }
  return out;
}

/// First come, first served: the earliest mention wins.
inline std::optional<Polarity> resolve_fcfs(const std::vector<PolarityMention>& mentions) {
  if (mentions.empty()) return std::nullopt;
  return mentions.front().label;
}

inline VerificationSignal verification_signal(std::optional<Polarity> resolved, Polarity gold,
                                              std::string example_id = {}) {
  if (!resolved) return {std::move(example_id), false, VerificationReason::unparseable};
  if (*resolved == gold) return {std::move(example_id), true, VerificationReason::match};
  return {std::move(example_id), false, VerificationReason::mismatch};
}

inline bool ambiguity_flag(const std::vector<PolarityMention>& mentions) {
  if (mentions.empty()) return false;
  return std::any_of(mentions.begin(), mentions.end(),
                     [&](const PolarityMention& m) { return m.label != mentions.front().label; });
}

namespace detail {

inline std::optional<std::string> clause_after(std::string_view text, std::string_view anchor) {
  const auto lower = lowercase(text);
  const auto pos = lower.find(lowercase(anchor));
  if (pos == std::string::npos) return std::nullopt;
  auto start = pos + anchor.size();
  while (start < text.size() && std::isspace(static_cast<unsigned char>(text[start]))) ++start;
  auto stop = text.find_first_of(".!?\n", start);
  if (stop == std::string_view::npos) stop = text.size();
  auto clause = text.substr(start, stop - start);
  while (!clause.empty() && std::isspace(static_cast<unsigned char>(clause.back()))) {
    clause.remove_suffix(1);
  }
  if (clause.empty()) return std::nullopt;
  return std::string(clause);
}

}  // namespace detail

struct RationaleSpans {
  std::optional<std::string> aspect;
  std::optional<std::string> opinion;
};

// Best effort; only the "... towards {term} is about" anchors are recognized.
inline RationaleSpans extract_spans(std::string_view text, std::string_view aspect_term) {
  const std::string term(aspect_term);
  return {detail::clause_after(text, "The mentioned aspect towards " + term + " is about"),
          detail::clause_after(text, "The underlying opinion towards " + term + " is about")};
}

inline Rationale parse_rationale(std::string example_id, PromptMode mode, std::string generator_id,
                                 std::string text, std::string_view aspect_term) {
  Rationale r;
  r.example_id = std::move(example_id);
  r.mode = mode;
  r.generator_id = std::move(generator_id);
  r.polarity_mentions = extract_polarities(text);
  r.resolved = resolve_fcfs(r.polarity_mentions);
  auto spans = extract_spans(text, aspect_term);
  r.aspect_span = std::move(spans.aspect);
  r.opinion_span = std::move(spans.opinion);
  r.text = std::move(text);
  return r;
}

// ---------------------------------------------------------------------------
// Rationale store: JSONL rows {example_id, mode, generator_id, text, resolved, verification}

struct StoredRationale {
  Rationale rationale;
  VerificationSignal signal;
};

inline nlohmann::ordered_json to_json(const StoredRationale& s) {
  nlohmann::ordered_json j;
  j["example_id"] = s.rationale.example_id;
  j["mode"] = to_string(s.rationale.mode);
  j["generator_id"] = s.rationale.generator_id;
  j["text"] = s.rationale.text;
  j["resolved"] = s.rationale.resolved ? nlohmann::ordered_json(to_string(*s.rationale.resolved))
                                       : nlohmann::ordered_json(nullptr);
  j["verification"] = {{"value", s.signal.value}, {"reason", to_string(s.signal.reason)}};
  return j;
}

/// Rationale store keyed by example id, in file order.
class RationaleStore {
 public:
  void add(StoredRationale row) {
    const auto id = row.rationale.example_id;
    if (index_.count(id)) throw ArgumentError("duplicate rationale for example '" + id + "'");
    index_[id] = rows_.size();
    rows_.push_back(std::move(row));
  }

  const StoredRationale* find(const std::string& id) const {
    auto it = index_.find(id);
    return it == index_.end() ? nullptr : &rows_[it->second];
  }

  const std::vector<StoredRationale>& rows() const noexcept { return rows_; }
  std::size_t size() const noexcept { return rows_.size(); }

 private:
  std::vector<StoredRationale> rows_;
  std::map<std::string, std::size_t> index_;
};

inline void write_rationale_store(const RationaleStore& store, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& row : store.rows()) out << to_json(row).dump() << '\n';
}

/// Loads a store. Mentions and spans are re-derived from the text; `aspect_terms`
/// maps example ids to their aspect term for span extraction (missing ids skip spans).
inline RationaleStore load_rationale_store(const std::filesystem::path& path,
                                           const std::map<std::string, std::string>& aspect_terms = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  RationaleStore store;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      const auto id = j.at("example_id").get<std::string>();
      const auto mode = parse_prompt_mode(j.at("mode").get<std::string>());
      if (!mode) throw ParseError(lineno, "unknown mode");
      auto term_it = aspect_terms.find(id);
      const std::string term = term_it == aspect_terms.end() ? std::string{} : term_it->second;
      StoredRationale row;
      row.rationale = parse_rationale(id, *mode, j.at("generator_id").get<std::string>(),
                                      j.at("text").get<std::string>(), term);
      if (term.empty()) {
        row.rationale.aspect_span.reset();
        row.rationale.opinion_span.reset();
      }
      const auto& v = j.at("verification");
      const auto reason = parse_verification_reason(v.at("reason").get<std::string>());
      if (!reason) throw ParseError(lineno, "unknown verification reason");
      row.signal = {id, v.at("value").get<bool>(), *reason};
      store.add(std::move(row));
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError(lineno, ex.what());
    }
  }
  return store;
}

}  // namespace rvisa
