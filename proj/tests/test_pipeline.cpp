#include <sstream>

#include <gtest/gtest.h>

#include "rvisa/pipeline.hpp"
#include "support.hpp"

using namespace rvisa;

namespace {

class PipelineTest : public ::testing::Test {
 protected:
  void SetUp() override {
    std::vector<Example> ex;
    const char* terms[] = {"food", "staff", "menu", "wine", "room"};
    for (int i = 0; i < 5; ++i) {
      ex.push_back({"p" + std::to_string(i), "The " + std::string(terms[i]) + " here, table " + std::to_string(i),
                    terms[i], kPolarities[i % 3], i % 2 == 1, i < 4 ? Split::train : Split::test});
    }
    write_canonical(Dataset(DatasetName::custom, ex), dir / "data.jsonl");
    write_config("");
  }

  void write_config(const std::string& extra_generator) {
    std::ofstream(dir / "run.toml") << "seed = 7\noutput_dir = \"out\"\n\n[dataset]\nname = \"custom\"\n"
                                       "canonical = \"data.jsonl\"\n\n[generator]\nbackoff_ms = 0\n"
                                    << extra_generator;
  }

  PipelineConfig load(const std::vector<std::string>& overrides = {}) {
    return load_pipeline_config(dir / "run.toml", overrides, std::string("t"));
  }

  testing_support::TempDir dir{"pipeline"};
};

}  // namespace

TEST_F(PipelineTest, PathsResolveAgainstConfigFile) {
  const auto cfg = load();
  EXPECT_EQ(cfg.dataset.canonical, (dir.path() / "data.jsonl").lexically_normal());
  EXPECT_EQ(cfg.output_dir, (dir.path() / "out").lexically_normal());
  EXPECT_EQ(cfg.generator.cache, cfg.output_dir / "cache" / "generations.jsonl");
  EXPECT_EQ(cfg.seed, 7u);
  EXPECT_EQ(cfg.train.seed, 7u);
}

TEST_F(PipelineTest, OverridesAndUnknownKeys) {
  const auto cfg = load({"train.alpha=0.5", "train.gamma=0", "generator.backend=local", "taskset.with_verification=false"});
  EXPECT_DOUBLE_EQ(cfg.train.weights.alpha, 0.5);
  EXPECT_DOUBLE_EQ(cfg.train.weights.gamma, 0.0);
  EXPECT_EQ(cfg.generator.backend, "local");
  EXPECT_FALSE(cfg.taskset.with_verification);
  EXPECT_THROW(load({"train.bogus=1"}), ConfigError);
  EXPECT_THROW(load({"nonsense"}), ConfigError);
  EXPECT_THROW(load({"train.alpha=0.8", "train.gamma=0.5"}), ConfigError);
  EXPECT_THROW(load({"train.epochs=\"three\""}), ConfigError);
  EXPECT_THROW(load_pipeline_config(dir / "absent.toml"), ConfigError);
}

TEST_F(PipelineTest, DefaultRunIdHashesEffectiveConfig) {
  const auto a = load_pipeline_config(dir / "run.toml");
  const auto b = load_pipeline_config(dir / "run.toml");
  const auto c = load_pipeline_config(dir / "run.toml", {"train.epochs=5"});
  EXPECT_EQ(a.run_id.size(), 12u);
  EXPECT_EQ(a.run_id, b.run_id);
  EXPECT_NE(a.run_id, c.run_id);
}

TEST_F(PipelineTest, MissingUpstreamArtifactNamesPath) {
  const auto cfg = load();
  std::ostringstream out, err;
  EXPECT_EQ(run_command([&] { return cmd_build(cfg, out); }, err), 2);
  EXPECT_NE(err.str().find("dataset.jsonl"), std::string::npos);
  EXPECT_NE(err.str().find("ingest"), std::string::npos);
}

TEST_F(PipelineTest, GenerateWritesOneRowPerExampleAndCaches) {
  const auto cfg = load();
  std::ostringstream out;
  ASSERT_EQ(cmd_ingest(cfg, false, out), 0);
  GenerateStats first, second;
  ASSERT_EQ(cmd_generate(cfg, out, nullptr, &first), 0);
  EXPECT_EQ(first.succeeded, 5u);
  EXPECT_EQ(first.backend_calls, 5u);
  const auto paths = run_paths(cfg);
  const auto rows = testing_support::read_file(paths.rationales());
  EXPECT_EQ(std::count(rows.begin(), rows.end(), '\n'), 5);
  ASSERT_EQ(cmd_generate(cfg, out, nullptr, &second), 0);
  EXPECT_EQ(second.backend_calls, 0u);
  EXPECT_EQ(testing_support::read_file(paths.rationales()), rows);
}

TEST_F(PipelineTest, RefusalIsRecordedWithoutAborting) {
  write_config("mock_refuse_ids = [\"p2\"]\n");
  const auto cfg = load();
  std::ostringstream out;
  ASSERT_EQ(cmd_ingest(cfg, false, out), 0);
  GenerateStats st;
  EXPECT_EQ(cmd_generate(cfg, out, nullptr, &st), 0);
  EXPECT_EQ(st.failed, 1u);
  EXPECT_EQ(st.succeeded, 4u);
  EXPECT_NE(out.str().find("failed: p2"), std::string::npos);
  const auto failures = testing_support::read_file(run_paths(cfg).failures());
  EXPECT_NE(failures.find("\"refusal\""), std::string::npos);

  // The strict build policy then rejects the example without a rationale.
  std::ostringstream err;
  EXPECT_EQ(run_command([&] { return cmd_build(cfg, out); }, err), 2);
  EXPECT_NE(err.str().find("p2"), std::string::npos);
}

TEST_F(PipelineTest, FailureRateAboveThresholdExitsNonZero) {
  write_config("mock_refuse_ids = [\"p0\", \"p1\"]\nfailure_threshold = 0.3\n");
  const auto cfg = load();
  std::ostringstream out;
  ASSERT_EQ(cmd_ingest(cfg, false, out), 0);
  EXPECT_EQ(cmd_generate(cfg, out), 1);
  EXPECT_NE(out.str().find("exceeds threshold"), std::string::npos);
}

TEST_F(PipelineTest, ValidateOnlyWritesNothing) {
  const auto cfg = load();
  std::ostringstream out;
  EXPECT_EQ(cmd_ingest(cfg, true, out), 0);
  EXPECT_FALSE(std::filesystem::exists(run_paths(cfg).dataset()));
}

TEST(MockPlans, RatesAreRoughlyHonoured) {
  std::vector<Example> ex;
  for (int i = 0; i < 2000; ++i) {
    ex.push_back({"m" + std::to_string(i), "dish " + std::to_string(i) + " food", "food", kPolarities[i % 3], false,
                  Split::train});
  }
  const Dataset d(DatasetName::custom, ex);
  GeneratorSettings g;
  g.mock_flip_rate = 0.2;
  g.mock_hedge_rate = 0.1;
  const auto plans = mock_plans(d, g, 1);
  std::size_t flipped = 0, hedged = 0;
  for (const auto& e : d.examples()) {
    const auto& p = plans.at(e.id);
    flipped += p.conclusion != e.polarity;
    hedged += p.hedge.has_value();
  }
  EXPECT_NEAR(static_cast<double>(flipped) / 2000.0, 0.2, 0.03);
  EXPECT_NEAR(static_cast<double>(hedged) / 2000.0, 0.1, 0.03);
}
