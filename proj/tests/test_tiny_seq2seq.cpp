#include <gtest/gtest.h>

#include "rvisa/tiny_seq2seq.hpp"
#include "support.hpp"

using namespace rvisa;

namespace {

TaskSet toy_taskset() {
  TaskSet ts;
  ts.with_verification = false;
  const char* rows[][3] = {{"a", "predict: the food was great", "positive"},
                           {"b", "predict: the staff was rude", "negative"},
                           {"c", "predict: the menu is long", "neutral"}};
  for (const auto& r : rows) ts.instances.push_back({r[0], Task::predict, r[1], r[2]});
  return ts;
}

TinySeq2SeqConfig small() {
  TinySeq2SeqConfig c;
  c.embedding_dim = 8;
  c.hidden_dim = 16;
  c.seed = 4;
  return c;
}

std::vector<const TrainingInstance*> all_of(const TaskSet& ts) {
  std::vector<const TrainingInstance*> out;
  for (const auto& t : ts.instances) out.push_back(&t);
  return out;
}

}  // namespace

TEST(Tokenize, SplitsPunctuationKeepsCase) {
  EXPECT_EQ(tokenize("The food, was \"great\"!"),
            (std::vector<std::string>{"The", "food", ",", "was", "\"", "great", "\"", "!"}));
  EXPECT_TRUE(tokenize("   ").empty());
  EXPECT_EQ(tokenize("caf\xc3\xa9 ok"), (std::vector<std::string>{"caf\xc3\xa9", "ok"}));
}

TEST(Vocab, BuildEncodeAndRoundTrip) {
  const auto v = Vocabulary::build(toy_taskset());
  EXPECT_EQ(v.token(Vocabulary::kUnk), "<unk>");
  EXPECT_NE(v.id("food"), Vocabulary::kUnk);
  EXPECT_EQ(v.id("never-seen"), Vocabulary::kUnk);
  EXPECT_EQ(v.encode("the food the food", 3).size(), 3u);
  const auto back = Vocabulary::from_tokens(v.tokens());
  EXPECT_EQ(back.tokens(), v.tokens());
  EXPECT_THROW(Vocabulary::from_tokens({"x"}), Error);
}

TEST(TinySeq2Seq, RequiresPrepare) {
  TinySeq2Seq m(small());
  EXPECT_THROW(m.generate("x", 2), Error);
}

TEST(TinySeq2Seq, SmallStepAlongGradientLowersLoss) {
  const auto ts = toy_taskset();
  const auto batch = all_of(ts);
  TinySeq2Seq m(small());
  m.prepare(ts);
  const double before = m.accumulate(batch, 1.0);
  m.apply_update(1e-4);
  const double after = m.accumulate(batch, 0.0);
  EXPECT_LT(after, before);
}

TEST(TinySeq2Seq, LearnsToyMapping) {
  const auto ts = toy_taskset();
  const auto batch = all_of(ts);
  TinySeq2Seq m(small());
  m.prepare(ts);
  const double start = m.accumulate(batch, 0.0);
  for (int i = 0; i < 150; ++i) {
    m.accumulate(batch, 1.0);
    m.apply_update(0.02);
  }
  EXPECT_LT(m.accumulate(batch, 0.0), 0.1 * start);
  for (const auto& t : ts.instances) EXPECT_EQ(m.generate(t.input_text, 4), t.target_text);
}

TEST(TinySeq2Seq, ZeroWeightLeavesParametersAlone) {
  const auto ts = toy_taskset();
  const auto batch = all_of(ts);
  TinySeq2Seq m(small());
  m.prepare(ts);
  const double l0 = m.accumulate(batch, 0.0);
  m.apply_update(0.05);
  EXPECT_DOUBLE_EQ(m.accumulate(batch, 0.0), l0);
}

TEST(TinySeq2Seq, SaveLoadAndDeterminism) {
  testing_support::TempDir dir("seq2seq");
  const auto ts = toy_taskset();
  const auto batch = all_of(ts);
  TinySeq2Seq a(small()), b(small());
  a.prepare(ts);
  b.prepare(ts);
  for (int i = 0; i < 20; ++i) {
    a.accumulate(batch, 1.0);
    a.apply_update(0.02);
    b.accumulate(batch, 1.0);
    b.apply_update(0.02);
  }
  EXPECT_EQ(a.accumulate(batch, 0.0), b.accumulate(batch, 0.0));
  a.save(dir.path());
  TinySeq2Seq c;
  c.load(dir.path());
  EXPECT_EQ(c.parameter_count(), a.parameter_count());
  EXPECT_EQ(c.accumulate(batch, 0.0), a.accumulate(batch, 0.0));
  for (const auto& t : ts.instances) EXPECT_EQ(c.generate(t.input_text, 6), a.generate(t.input_text, 6));
  EXPECT_THROW(c.load(dir / "missing"), Error);
}
