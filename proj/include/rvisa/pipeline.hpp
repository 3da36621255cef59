#pragma once

// Eigen (via tiny_seq2seq.hpp) must precede httplib; see http_backends.hpp.
#include "rvisa/tiny_seq2seq.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <toml.hpp>

#include "rvisa/corpus.hpp"
#include "rvisa/error.hpp"
#include "rvisa/evaluation.hpp"
#include "rvisa/hashing.hpp"
#include "rvisa/http_backends.hpp"
#include "rvisa/llm_gateway.hpp"
#include "rvisa/prompts.hpp"
#include "rvisa/rationale.hpp"
#include "rvisa/taskset.hpp"
#include "rvisa/training.hpp"

namespace rvisa {

// An upstream stage has not produced the file a command needs.
class MissingArtifactError : public ConfigError {
 public:
  explicit MissingArtifactError(const std::filesystem::path& expected)
      : ConfigError("missing upstream artifact: expected " + expected.string()), path_(expected) {}
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
};

struct DatasetSettings {
  DatasetName name = DatasetName::custom;
  std::filesystem::path train_xml;
  std::filesystem::path validation_xml;
  std::filesystem::path test_xml;
  std::filesystem::path implicit_tags;
  std::filesystem::path canonical;  // alternative to the XML sources
  double validation_fraction = 0.1;
};

struct GeneratorSettings {
  std::string backend = "templated_mock";  // templated_mock | openai | local
  std::string generator_id = "templated-mock";
  PromptMode prompt_mode = PromptMode::th_re;
  double temperature = 0.0;
  int max_new_tokens = 256;
  int max_in_flight = 4;
  int retries = 3;
  int backoff_ms = 500;
  std::string base_url;
  std::string api_key_env = "OPENAI_API_KEY";
  double failure_threshold = 0.5;
  std::optional<std::int64_t> seed;
  std::vector<Split> splits = {Split::train, Split::validation, Split::test};
  std::filesystem::path cache;
  // templated_mock only: share of rationales concluding a wrong label, share
  // with a trailing second polarity, and ids answered with a refusal.
  double mock_flip_rate = 0.2;
  double mock_hedge_rate = 0.1;
  std::vector<std::string> mock_refuse_ids;
};

struct PipelineConfig {
  std::filesystem::path config_path;
  std::string run_id;
  std::filesystem::path output_dir;
  std::uint64_t seed = 13;
  std::string effective_toml;  // after overrides; hashed into the default run id
  DatasetSettings dataset;
  GeneratorSettings generator;
  AssembleOptions taskset;
  TrainConfig train;
  TinySeq2SeqConfig model;
  std::optional<std::vector<LossWeights>> search_grid;
  int search_epochs = 1;
};

// ---------------------------------------------------------------------------
// Configuration loading

namespace detail {

inline void apply_override(toml::table& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must be key=value: " + assignment);
  const auto key = trim(assignment.substr(0, eq));
  const auto value = trim(assignment.substr(eq + 1));
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string part; std::getline(ss, part, '.');) parts.push_back(part);
  toml::table* t = &root;
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    auto* sub = (*t)[parts[i]].as_table();
    if (!sub) {
      t->insert_or_assign(parts[i], toml::table{});
      sub = (*t)[parts[i]].as_table();
    }
    t = sub;
  }
  toml::table parsed;
  try {
    parsed = toml::parse("v = " + value);
  } catch (const toml::parse_error&) {
    t->insert_or_assign(parts.back(), value);  // bare word: keep as string
    return;
  }
  parsed["v"].visit([&](auto&& node) { t->insert_or_assign(parts.back(), node); });
}

class ConfigReader {
 public:
  ConfigReader(const toml::table& root, std::filesystem::path base) : root_(root), base_(std::move(base)) {}

  template <typename T>
  std::optional<T> get(const std::string& path) const {
    auto node = root_.at_path(path);
    if (!node) return std::nullopt;
    if constexpr (std::is_same_v<T, double>) {
      if (auto v = node.value<double>()) return *v;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (node.is_boolean()) return node.value<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (node.is_integer()) return static_cast<T>(*node.value<std::int64_t>());
    } else {
      if (node.is_string()) return node.value<std::string>();
    }
    throw ConfigError("config key '" + path + "' has the wrong type");
  }

  template <typename T>
  void read(const std::string& path, T& out) const {
    if (auto v = get<T>(path)) out = *v;
  }

  void read_path(const std::string& key, std::filesystem::path& out) const {
    if (auto v = get<std::string>(key); v && !v->empty()) {
      std::filesystem::path p(*v);
      out = p.is_absolute() ? p : (base_ / p).lexically_normal();
    }
  }

  std::vector<std::string> strings(const std::string& path) const {
    std::vector<std::string> out;
    auto node = root_.at_path(path);
    if (!node) return out;
    const auto* arr = node.as_array();
    if (!arr) throw ConfigError("config key '" + path + "' must be an array of strings");
    for (const auto& el : *arr) {
      auto s = el.value<std::string>();
      if (!s) throw ConfigError("config key '" + path + "' must be an array of strings");
      out.push_back(*s);
    }
    return out;
  }

  const toml::table& root() const noexcept { return root_; }

 private:
  const toml::table& root_;
  std::filesystem::path base_;
};

inline void check_known_keys(const toml::table& root) {
  static const std::map<std::string, std::set<std::string>> known = {
      {"", {"seed", "run_id", "output_dir", "dataset", "generator", "taskset", "train", "search"}},
      {"dataset",
       {"name", "train_xml", "validation_xml", "test_xml", "implicit_tags", "canonical", "validation_fraction"}},
      {"generator",
       {"backend", "generator_id", "prompt_mode", "temperature", "max_new_tokens", "max_in_flight", "retries",
        "backoff_ms", "base_url", "api_key_env", "failure_threshold", "seed", "splits", "cache", "mock_flip_rate",
        "mock_hedge_rate", "mock_refuse_ids"}},
      {"taskset", {"mode", "with_verification", "seed", "missing", "allow_verification_with_ra"}},
      {"train",
       {"alpha", "gamma", "epochs", "batch_size", "learning_rate", "max_input_tokens", "max_target_tokens", "seed",
        "backend", "normalization", "predict_max_new_tokens", "embedding_dim", "hidden_dim"}},
      {"search", {"epochs", "grid"}},
  };
  for (const auto& [key, node] : root) {
    const std::string k(key.str());
    if (!known.at("").count(k)) throw ConfigError("unknown config key '" + k + "'");
    if (auto it = known.find(k); it != known.end()) {
      const auto* sub = node.as_table();
      if (!sub) throw ConfigError("config key '" + k + "' must be a table");
      for (const auto& [sk, sn] : *sub) {
        if (!it->second.count(std::string(sk.str()))) {
          throw ConfigError("unknown config key '" + k + "." + std::string(sk.str()) + "'");
        }
      }
    }
  }
}

inline double hashed_unit(std::uint64_t seed, std::string_view salt, std::string_view id) {
  const auto hex = sha256_hex(std::to_string(seed) + ":" + std::string(salt) + ":" + std::string(id));
  return static_cast<double>(std::stoull(hex.substr(0, 13), nullptr, 16)) / static_cast<double>(1ULL << 52);
}

}  // namespace detail

/// Reads a pipeline TOML file. `overrides` are "dotted.key=value" assignments applied
/// before interpretation; values parse as TOML and fall back to plain strings.
inline PipelineConfig load_pipeline_config(const std::filesystem::path& path,
                                           const std::vector<std::string>& overrides = {},
                                           std::optional<std::string> run_id = std::nullopt,
                                           std::optional<std::uint64_t> seed = std::nullopt) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  toml::table root;
  try {
    root = toml::parse_file(path.string());
  } catch (const toml::parse_error& ex) {
    throw ConfigError(path.string() + ": " + std::string(ex.description()));
  }
  for (const auto& o : overrides) detail::apply_override(root, o);
  if (seed) root.insert_or_assign("seed", static_cast<std::int64_t>(*seed));
  detail::check_known_keys(root);

  PipelineConfig cfg;
  cfg.config_path = std::filesystem::absolute(path);
  const auto base = cfg.config_path.parent_path();
  detail::ConfigReader r(root, base);
  {
    std::ostringstream os;
    os << toml::toml_formatter{root};
    cfg.effective_toml = os.str();
  }

  if (auto s = r.get<std::int64_t>("seed")) cfg.seed = static_cast<std::uint64_t>(*s);
  cfg.output_dir = base / "runs";
  r.read_path("output_dir", cfg.output_dir);
  cfg.run_id = run_id.value_or(r.get<std::string>("run_id").value_or(""));
  if (cfg.run_id.empty()) cfg.run_id = sha256_hex(cfg.effective_toml).substr(0, 12);

  auto& d = cfg.dataset;
  if (auto n = r.get<std::string>("dataset.name")) {
    auto parsed = parse_dataset_name(*n);
    if (!parsed) throw ConfigError("dataset.name must be restaurant, laptop or custom");
    d.name = *parsed;
  }
  r.read_path("dataset.train_xml", d.train_xml);
  r.read_path("dataset.validation_xml", d.validation_xml);
  r.read_path("dataset.test_xml", d.test_xml);
  r.read_path("dataset.implicit_tags", d.implicit_tags);
  r.read_path("dataset.canonical", d.canonical);
  r.read("dataset.validation_fraction", d.validation_fraction);

  auto& g = cfg.generator;
  r.read("generator.backend", g.backend);
  r.read("generator.generator_id", g.generator_id);
  if (auto m = r.get<std::string>("generator.prompt_mode")) {
    auto parsed = parse_prompt_mode(*m);
    if (!parsed || *parsed == PromptMode::verify) throw ConfigError("generator.prompt_mode '" + *m + "' is invalid");
    g.prompt_mode = *parsed;
  }
  r.read("generator.temperature", g.temperature);
  r.read("generator.max_new_tokens", g.max_new_tokens);
  r.read("generator.max_in_flight", g.max_in_flight);
  r.read("generator.retries", g.retries);
  r.read("generator.backoff_ms", g.backoff_ms);
  r.read("generator.base_url", g.base_url);
  r.read("generator.api_key_env", g.api_key_env);
  r.read("generator.failure_threshold", g.failure_threshold);
  if (auto s = r.get<std::int64_t>("generator.seed")) g.seed = *s;
  if (root.at_path("generator.splits")) {
    g.splits.clear();
    for (const auto& s : r.strings("generator.splits")) {
      auto parsed = parse_split(s);
      if (!parsed) throw ConfigError("generator.splits has unknown split '" + s + "'");
      g.splits.push_back(*parsed);
    }
  }
  g.cache = cfg.output_dir / "cache" / "generations.jsonl";
  r.read_path("generator.cache", g.cache);
  r.read("generator.mock_flip_rate", g.mock_flip_rate);
  r.read("generator.mock_hedge_rate", g.mock_hedge_rate);
  g.mock_refuse_ids = r.strings("generator.mock_refuse_ids");
  if (g.max_new_tokens < 1 || g.max_in_flight < 1 || g.retries < 0 || g.backoff_ms < 0) {
    throw ConfigError("generator limits must be positive");
  }

  auto& t = cfg.taskset;
  t.seed = cfg.seed;
  if (auto m = r.get<std::string>("taskset.mode")) {
    auto parsed = parse_explain_mode(*m);
    if (!parsed) throw ConfigError("taskset.mode must be re or ra");
    t.mode = *parsed;
  }
  r.read("taskset.with_verification", t.with_verification);
  if (auto s = r.get<std::int64_t>("taskset.seed")) t.seed = static_cast<std::uint64_t>(*s);
  if (auto m = r.get<std::string>("taskset.missing")) {
    if (*m == "strict") {
      t.missing = MissingRationalePolicy::strict;
    } else if (*m == "skip") {
      t.missing = MissingRationalePolicy::skip;
    } else {
      throw ConfigError("taskset.missing must be strict or skip");
    }
  }
  r.read("taskset.allow_verification_with_ra", t.allow_verification_with_ra);

  auto& tr = cfg.train;
  tr.seed = cfg.seed;
  r.read("train.alpha", tr.weights.alpha);
  r.read("train.gamma", tr.weights.gamma);
  r.read("train.epochs", tr.epochs);
  r.read("train.batch_size", tr.batch_size);
  r.read("train.learning_rate", tr.learning_rate);
  r.read("train.max_input_tokens", tr.max_input_tokens);
  r.read("train.max_target_tokens", tr.max_target_tokens);
  if (auto s = r.get<std::int64_t>("train.seed")) tr.seed = static_cast<std::uint64_t>(*s);
  r.read("train.backend", tr.backend_id);
  if (auto n = r.get<std::string>("train.normalization")) {
    auto parsed = parse_loss_normalization(*n);
    if (!parsed) throw ConfigError("train.normalization must be token_mean or sequence_mean");
    tr.normalization = *parsed;
  }
  r.read("train.predict_max_new_tokens", tr.predict_max_new_tokens);
  try {
    validate(tr);
  } catch (const ArgumentError& ex) {
    throw ConfigError(std::string("train: ") + ex.what());
  }
  if (tr.backend_id != "tiny_seq2seq") throw ConfigError("train.backend '" + tr.backend_id + "' is not available");

  auto& m = cfg.model;
  r.read("train.embedding_dim", m.embedding_dim);
  r.read("train.hidden_dim", m.hidden_dim);
  m.seed = tr.seed;
  m.max_input_tokens = tr.max_input_tokens;
  m.max_target_tokens = tr.max_target_tokens;
  m.normalization = tr.normalization;

  r.read("search.epochs", cfg.search_epochs);
  if (auto node = root.at_path("search.grid")) {
    const auto* arr = node.as_array();
    if (!arr) throw ConfigError("search.grid must be an array of [alpha, gamma] pairs");
    std::vector<LossWeights> grid;
    for (const auto& el : *arr) {
      const auto* pair = el.as_array();
      if (!pair || pair->size() != 2) throw ConfigError("search.grid entries must be [alpha, gamma]");
      auto a = (*pair)[0].value<double>();
      auto gm = (*pair)[1].value<double>();
      if (!a || !gm) throw ConfigError("search.grid entries must be numbers");
      grid.push_back({*a, *gm});
    }
    cfg.search_grid = grid;
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Run directory layout: {output_dir}/{run_id}/{stage}/...

struct RunPaths {
  std::filesystem::path root;

  std::filesystem::path stage(std::string_view name) const { return root / name; }
  std::filesystem::path dataset() const { return root / "ingest" / "dataset.jsonl"; }
  std::filesystem::path ingest_summary() const { return root / "ingest" / "summary.json"; }
  std::filesystem::path rationales() const { return root / "generate" / "rationales.jsonl"; }
  std::filesystem::path failures() const { return root / "generate" / "failures.jsonl"; }
  std::filesystem::path generate_summary() const { return root / "generate" / "summary.json"; }
  std::filesystem::path taskset() const { return root / "build" / "taskset.jsonl"; }
  std::filesystem::path taskset_manifest() const { return root / "build" / "manifest.json"; }
  std::filesystem::path train_dir() const { return root / "train"; }
  std::filesystem::path train_log() const { return root / "train" / "train_log.csv"; }
  std::filesystem::path train_manifest() const { return root / "train" / "manifest.json"; }
  std::filesystem::path search_table() const { return root / "search" / "search_table.csv"; }
  std::filesystem::path search_best() const { return root / "search" / "best.json"; }
  std::filesystem::path report_json() const { return root / "eval" / "report.json"; }
  std::filesystem::path results_csv() const { return root / "eval" / "results.csv"; }
  std::filesystem::path errors_csv() const { return root / "eval" / "errors.csv"; }
  std::filesystem::path predictions() const { return root / "eval" / "predictions.jsonl"; }
};

inline RunPaths run_paths(const PipelineConfig& cfg) { return {cfg.output_dir / cfg.run_id}; }

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

inline void require_file(const std::filesystem::path& p) {
  if (!std::filesystem::is_regular_file(p)) throw MissingArtifactError(p);
}

inline void require_input(const std::filesystem::path& p) {
  if (!std::filesystem::is_regular_file(p)) throw IngestionError("input file not found: " + p.string());
}

inline nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw MissingArtifactError(p);
  return nlohmann::json::parse(in);
}

inline Dataset load_run_dataset(const PipelineConfig& cfg) {
  const auto p = run_paths(cfg).dataset();
  require_file(p);
  return load_canonical(p, cfg.dataset.name);
}

inline std::map<std::string, std::string> aspect_terms(const Dataset& d) {
  std::map<std::string, std::string> m;
  for (const auto& e : d.examples()) m[e.id] = e.aspect_term;
  return m;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands. Each returns a process exit code: 0 success, 2 validation error or
// missing input/upstream artifact, 1 any other failure.

inline int cmd_ingest(const PipelineConfig& cfg, bool validate_only, std::ostream& out) {
  const auto& ds = cfg.dataset;
  Dataset dataset;
  std::size_t dropped_conflict = 0;
  std::size_t dropped_invalid = 0;
  std::vector<std::string> warnings;
  if (!ds.canonical.empty()) {
    detail::require_input(ds.canonical);
    dataset = load_canonical(ds.canonical, ds.name);
  } else {
    if (ds.train_xml.empty()) throw ConfigError("dataset.train_xml or dataset.canonical is required");
    std::vector<SemevalSource> sources{{ds.train_xml, Split::train}};
    if (!ds.validation_xml.empty()) sources.push_back({ds.validation_xml, Split::validation});
    if (!ds.test_xml.empty()) sources.push_back({ds.test_xml, Split::test});
    for (const auto& s : sources) detail::require_input(s.path);
    if (!ds.implicit_tags.empty()) detail::require_input(ds.implicit_tags);
    auto conv = convert_semeval(sources, ds.implicit_tags, ds.name);
    dataset = std::move(conv.dataset);
    dropped_conflict = conv.dropped_conflict;
    dropped_invalid = conv.dropped_invalid;
    warnings = std::move(conv.warnings);
  }
  dataset = hold_out_validation(dataset, ds.validation_fraction);

  nlohmann::ordered_json summary;
  summary["dataset"] = to_string(dataset.name());
  summary["examples"] = dataset.size();
  for (auto s : {Split::train, Split::validation, Split::test}) {
    summary["splits"][std::string(to_string(s))] = {{"all", slice(dataset, s, false).size()},
                                                    {"implicit", slice(dataset, s, true).size()}};
  }
  summary["dropped_conflict"] = dropped_conflict;
  summary["dropped_invalid"] = dropped_invalid;
  summary["warnings"] = warnings;
  summary["dataset_hash"] = dataset_hash(dataset);

  for (const auto& w : warnings) out << "warning: " << w << '\n';
  out << "examples: " << dataset.size() << " (train " << summary["splits"]["train"]["all"] << ", validation "
      << summary["splits"]["validation"]["all"] << ", test " << summary["splits"]["test"]["all"] << ")\n"
      << "dropped conflict: " << dropped_conflict << ", dropped invalid: " << dropped_invalid << '\n';
  if (validate_only) {
    out << "validate-only: no files written\n";
    return 0;
  }
  const auto paths = run_paths(cfg);
  write_canonical(dataset, paths.dataset());
  detail::write_text(paths.ingest_summary(), summary.dump(2) + "\n");
  out << "wrote " << paths.dataset().string() << '\n' << "wrote " << paths.ingest_summary().string() << '\n';
  return 0;
}

/// Per-example plans for the templated mock, derived deterministically from the seed.
inline std::map<std::string, MockPlan> mock_plans(const Dataset& dataset, const GeneratorSettings& g,
                                                  std::uint64_t seed) {
  std::map<std::string, MockPlan> plans;
  const std::set<std::string> refuse(g.mock_refuse_ids.begin(), g.mock_refuse_ids.end());
  for (const auto& e : dataset.examples()) {
    // Keyed on the prompt content: examples sharing a prompt share a cache entry.
    const auto key = e.sentence + '\x1f' + e.aspect_term;
    MockPlan p;
    p.aspect_term = e.aspect_term;
    p.conclusion = e.polarity;
    if (detail::hashed_unit(seed, "flip", key) < g.mock_flip_rate) {
      const auto shift = detail::hashed_unit(seed, "flip-to", key) < 0.5 ? 1 : 2;
      p.conclusion = kPolarities[(index_of(e.polarity) + shift) % 3];
    }
    if (detail::hashed_unit(seed, "hedge", key) < g.mock_hedge_rate) {
      p.hedge = kPolarities[(index_of(p.conclusion) + 1) % 3];
    }
    p.refuse = refuse.count(e.id) > 0;
    plans.emplace(e.id, std::move(p));
  }
  return plans;
}

inline std::shared_ptr<TextBackend> make_text_backend(const PipelineConfig& cfg, const Dataset& dataset) {
  const auto& g = cfg.generator;
  if (g.backend == "templated_mock") return std::make_shared<TemplatedMockBackend>(mock_plans(dataset, g, cfg.seed));
  if (g.backend == "openai") {
    return std::make_shared<OpenAiChatBackend>(g.base_url.empty() ? "https://api.openai.com/v1" : g.base_url,
                                               g.api_key_env);
  }
  if (g.backend == "local") {
    if (g.base_url.empty()) throw ConfigError("generator.base_url is required for the local backend");
    return std::make_shared<LocalGenerateBackend>(g.base_url);
  }
  throw ConfigError("generator.backend '" + g.backend + "' is not one of templated_mock, openai, local");
}

struct GenerateStats {
  std::size_t requested = 0;
  std::size_t succeeded = 0;
  std::size_t failed = 0;
  std::size_t backend_calls = 0;
};

inline int cmd_generate(const PipelineConfig& cfg, std::ostream& out,
                        std::shared_ptr<TextBackend> backend_override = nullptr, GenerateStats* stats = nullptr) {
  const auto paths = run_paths(cfg);
  const auto dataset = detail::load_run_dataset(cfg);
  const auto& g = cfg.generator;
  auto backend = backend_override ? std::move(backend_override) : make_text_backend(cfg, dataset);
  auto cache = std::make_shared<GenerationCache>(g.cache);
  LlmGateway gateway(backend, cache, {g.retries, std::chrono::milliseconds(g.backoff_ms), 2.0});

  std::vector<const Example*> targets;
  std::vector<GenerationRequest> requests;
  for (const auto& e : dataset.examples()) {
    if (std::find(g.splits.begin(), g.splits.end(), e.split) == g.splits.end()) continue;
    targets.push_back(&e);
    requests.push_back({render(e, g.prompt_mode), g.generator_id, g.temperature, g.max_new_tokens, g.seed});
  }
  auto results = gateway.generate_batch(requests, g.max_in_flight);

  RationaleStore store;
  std::string failures;
  std::map<std::string, std::size_t> reasons;
  std::size_t ambiguous = 0;
  GenerateStats st;
  st.requested = requests.size();
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& e = *targets[i];
    if (!results[i].ok()) {
      ++st.failed;
      nlohmann::ordered_json f;
      f["example_id"] = e.id;
      f["kind"] = results[i].error_kind == ItemErrorKind::refusal ? "refusal" : "error";
      f["error"] = results[i].error;
      f["raw_payload"] = results[i].raw_payload;
      failures += f.dump() + "\n";
      continue;
    }
    ++st.succeeded;
    StoredRationale row;
    row.rationale = parse_rationale(e.id, g.prompt_mode, g.generator_id, results[i].record->response_text,
                                    e.aspect_term);
    row.signal = verification_signal(row.rationale.resolved, e.polarity, e.id);
    ++reasons[std::string(to_string(row.signal.reason))];
    ambiguous += ambiguity_flag(row.rationale.polarity_mentions);
    store.add(std::move(row));
  }
  st.backend_calls = gateway.backend_calls();
  if (stats) *stats = st;

  write_rationale_store(store, paths.rationales());
  detail::write_text(paths.failures(), failures);
  nlohmann::ordered_json summary;
  summary["generator_id"] = g.generator_id;
  summary["prompt_mode"] = to_string(g.prompt_mode);
  summary["requested"] = st.requested;
  summary["succeeded"] = st.succeeded;
  summary["failed"] = st.failed;
  summary["verification"] = {{"match", reasons["match"]},
                             {"mismatch", reasons["mismatch"]},
                             {"unparseable", reasons["unparseable"]}};
  summary["ambiguous"] = ambiguous;
  detail::write_text(paths.generate_summary(), summary.dump(2) + "\n");

  out << "generated " << st.succeeded << "/" << st.requested << " rationales (backend calls: " << st.backend_calls
      << ", failures: " << st.failed << ")\n"
      << "verification: match " << reasons["match"] << ", mismatch " << reasons["mismatch"] << ", unparseable "
      << reasons["unparseable"] << "; ambiguous " << ambiguous << '\n';
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (!results[i].ok()) out << "failed: " << targets[i]->id << ": " << results[i].error << '\n';
  }
  out << "wrote " << paths.rationales().string() << '\n'
      << "wrote " << paths.failures().string() << '\n'
      << "wrote " << paths.generate_summary().string() << '\n';
  const double failure_rate =
      st.requested == 0 ? 0.0 : static_cast<double>(st.failed) / static_cast<double>(st.requested);
  if (failure_rate > g.failure_threshold) {
    out << "failure rate " << failure_rate << " exceeds threshold " << g.failure_threshold << '\n';
    return 1;
  }
  return 0;
}

inline int cmd_build(const PipelineConfig& cfg, std::ostream& out) {
  const auto paths = run_paths(cfg);
  const auto dataset = detail::load_run_dataset(cfg);
  detail::require_file(paths.rationales());
  const auto store = load_rationale_store(paths.rationales(), detail::aspect_terms(dataset));
  const auto ts = assemble(dataset, store, cfg.taskset);
  write_taskset(ts, paths.taskset(), paths.taskset_manifest());
  const auto& c = ts.counts;
  out << "instances: " << ts.instances.size() << " (predict " << c.predict << ", explain " << c.explain
      << ", verify " << c.verify << " [True " << c.verify_true << ", False " << c.verify_false << "], skipped "
      << c.skipped_examples << ")\n"
      << "wrote " << paths.taskset().string() << '\n'
      << "wrote " << paths.taskset_manifest().string() << '\n';
  return 0;
}

inline BackendFactory make_backend_factory(const PipelineConfig& cfg) {
  const auto model = cfg.model;
  return [model] { return std::make_unique<TinySeq2Seq>(model); };
}

inline TaskSet load_run_taskset(const PipelineConfig& cfg) {
  const auto paths = run_paths(cfg);
  detail::require_file(paths.taskset());
  detail::require_file(paths.taskset_manifest());
  return load_taskset(paths.taskset(), paths.taskset_manifest());
}

inline int cmd_train(const PipelineConfig& cfg, std::ostream& out) {
  const auto paths = run_paths(cfg);
  const auto dataset = detail::load_run_dataset(cfg);
  const auto ts = load_run_taskset(cfg);
  auto backend = make_backend_factory(cfg)();
  std::filesystem::create_directories(paths.train_dir());
  TrainOptions opts;
  opts.checkpoint_dir = paths.train_dir();
  const auto result = train(ts, dataset, cfg.train, *backend, opts);
  detail::write_text(paths.train_log(), train_log_csv(result.log));

  auto manifest = nlohmann::ordered_json::parse(std::ifstream(paths.train_manifest()));
  nlohmann::ordered_json full;
  full["run_id"] = cfg.run_id;
  for (auto& [k, v] : manifest.items()) full[k] = v;
  full["taskset"] = manifest_json(ts);
  full["outcome"]["created_at"] = utc_timestamp();
  detail::write_text(paths.train_manifest(), full.dump(2) + "\n");

  for (const auto& e : result.epochs) {
    out << "epoch " << e.epoch << ": mean combined loss " << e.mean_combined;
    if (e.val_macro_f1) out << ", val macro-F1 " << *e.val_macro_f1;
    out << '\n';
  }
  out << "parameters: " << backend->parameter_count() << '\n';
  if (result.best_epoch) out << "best epoch: " << *result.best_epoch << '\n';
  out << "wrote " << paths.train_log().string() << '\n';
  for (const auto& e : result.epochs) {
    out << "wrote " << (paths.train_dir() / ("epoch_" + std::to_string(e.epoch))).string() << '\n';
  }
  out << "wrote " << paths.train_manifest().string() << '\n';
  return 0;
}

inline int cmd_search(const PipelineConfig& cfg, std::ostream& out) {
  const auto paths = run_paths(cfg);
  const auto dataset = detail::load_run_dataset(cfg);
  const auto ts = load_run_taskset(cfg);
  auto train_cfg = cfg.train;
  train_cfg.epochs = cfg.search_epochs;
  const auto grid = cfg.search_grid.value_or(default_weight_grid());
  const auto result = search_weights(ts, dataset, grid, train_cfg, make_backend_factory(cfg));
  detail::write_text(paths.search_table(), search_table_csv(result));
  double best_f1 = 0.0;
  for (const auto& row : result.table) {
    if (row.weights == result.best && row.val_macro_f1) best_f1 = *row.val_macro_f1;
  }
  nlohmann::ordered_json best = {{"alpha", result.best.alpha}, {"gamma", result.best.gamma}, {"val_macro_f1", best_f1}};
  detail::write_text(paths.search_best(), best.dump(2) + "\n");
  out << search_table_csv(result) << "best: alpha=" << result.best.alpha << " gamma=" << result.best.gamma << '\n'
      << "wrote " << paths.search_table().string() << '\n'
      << "wrote " << paths.search_best().string() << '\n';
  return 0;
}

/// Loads the checkpoint marked best in the train manifest.
inline std::unique_ptr<Seq2SeqBackend> load_best_model(const PipelineConfig& cfg) {
  const auto paths = run_paths(cfg);
  const auto manifest = detail::read_json(paths.train_manifest());
  const auto& best = manifest.at("outcome").at("best_epoch");
  if (best.is_null()) throw MissingArtifactError(paths.train_dir() / "epoch_<best>");
  const auto dir = paths.train_dir() / ("epoch_" + std::to_string(best.get<int>()));
  if (!std::filesystem::is_directory(dir)) throw MissingArtifactError(dir);
  auto model = make_backend_factory(cfg)();
  model->load(dir);
  return model;
}

inline int cmd_eval(const PipelineConfig& cfg, SliceSelection which, std::ostream& out) {
  const auto paths = run_paths(cfg);
  const auto dataset = detail::load_run_dataset(cfg);
  detail::require_file(paths.train_manifest());
  auto model = load_best_model(cfg);
  auto report = evaluate(*model, dataset, cfg.train.predict_max_new_tokens);

  if (std::filesystem::is_regular_file(paths.rationales())) {
    const auto store = load_rationale_store(paths.rationales(), detail::aspect_terms(dataset));
    std::vector<Rationale> rationales;
    std::vector<Polarity> gold;
    for (const auto& e : slice(dataset, Split::test, false)) {
      if (const auto* row = store.find(e.id)) {
        rationales.push_back(row->rationale);
        gold.push_back(e.polarity);
      }
    }
    if (!rationales.empty()) report.ambiguity = ambiguity_report(rationales, gold);
  }

  const auto json = to_json(report);
  if (auto problems = validate_report_json(nlohmann::json::parse(json.dump())); !problems.empty()) {
    for (const auto& p : problems) out << "report schema violation: " << p << '\n';
    return 1;
  }
  detail::write_text(paths.report_json(), json.dump(2) + "\n");
  detail::write_text(paths.results_csv(), results_csv(report, which));
  detail::write_text(paths.errors_csv(), errors_csv(report));
  detail::write_text(paths.predictions(), predictions_jsonl(report));
  out << results_csv(report, which) << "fallbacks: " << report.fallback_count << '\n'
      << "wrote " << paths.report_json().string() << '\n'
      << "wrote " << paths.results_csv().string() << '\n'
      << "wrote " << paths.errors_csv().string() << '\n'
      << "wrote " << paths.predictions().string() << '\n';
  return 0;
}

inline int cmd_report(const PipelineConfig& cfg, std::ostream& out) {
  const auto paths = run_paths(cfg);
  const auto report = detail::read_json(paths.report_json());
  const auto manifest = detail::read_json(paths.train_manifest());
  const auto dir = paths.stage("report");

  std::string curve = "epoch,mean_combined,val_macro_f1\n";
  for (const auto& e : manifest.at("outcome").at("epochs")) {
    curve += std::to_string(e.at("epoch").get<int>()) + ',' + detail::format_double(e.at("mean_combined").get<double>()) +
             ',' + (e.at("val_macro_f1").is_null() ? std::string{} : detail::format_double(e.at("val_macro_f1").get<double>())) +
             '\n';
  }
  std::string ratios = "slice,gold_polarity,ratio\n";
  for (const auto& c : report.at("error_breakdown").at("cells")) {
    ratios += c.at("slice").get<std::string>() + ',' + c.at("gold_polarity").get<std::string>() + ',' +
              detail::format_double(c.at("ratio").get<double>()) + '\n';
  }
  auto pct = [](const nlohmann::json& v) {
    if (v.is_null()) return std::string("n/a");
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(2);
    os << 100.0 * v.get<double>();
    return os.str();
  };
  const auto& all = report.at("slices").at("all");
  const auto& isa = report.at("slices").at("isa");
  std::ostringstream md;
  md << "# Run " << cfg.run_id << "\n\n"
     << "| dataset | All_A | All_F | ISA_A | ISA_F |\n|---|---|---|---|---|\n"
     << "| " << report.at("dataset").get<std::string>() << " | " << pct(all.at("accuracy")) << " | "
     << pct(all.at("macro_f1")) << " | " << pct(isa.at("accuracy")) << " | " << pct(isa.at("macro_f1")) << " |\n\n"
     << "alpha = " << manifest.at("loss").at("alpha") << ", gamma = " << manifest.at("loss").at("gamma")
     << ", loss: " << manifest.at("loss").at("form").get<std::string>() << "\n\n"
     << "test examples: " << all.at("n") << " (implicit: " << isa.at("n")
     << "), total errors: " << report.at("error_breakdown").at("total_errors") << '\n';
  if (!report.at("ambiguity").is_null()) {
    const auto& a = report.at("ambiguity");
    md << "teacher rationales on test: " << a.at("total") << ", wrong: " << a.at("wrong_count")
       << ", ambiguous: " << a.at("ambiguous_count") << '\n';
  }
  detail::write_text(dir / "loss_curve.csv", curve);
  detail::write_text(dir / "error_ratios.csv", ratios);
  detail::write_text(dir / "summary.md", md.str());
  out << md.str() << "wrote " << (dir / "loss_curve.csv").string() << '\n'
      << "wrote " << (dir / "error_ratios.csv").string() << '\n'
      << "wrote " << (dir / "summary.md").string() << '\n';
  if (std::filesystem::is_regular_file(paths.search_table())) {
    std::filesystem::copy_file(paths.search_table(), dir / "search_table.csv",
                               std::filesystem::copy_options::overwrite_existing);
    out << "wrote " << (dir / "search_table.csv").string() << '\n';
  }
  return 0;
}

/// Maps library exceptions onto exit codes and prints the message to `err`.
template <typename Fn>
int run_command(Fn&& fn, std::ostream& err) {
  try {
    return fn();
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << '\n';
    return 2;
  } catch (const ValidationError& ex) {
    err << "validation error: " << ex.what() << '\n';
    return 2;
  } catch (const ParseError& ex) {
    err << "parse error: " << ex.what() << '\n';
    return 2;
  } catch (const IngestionError& ex) {
    err << "ingestion error: " << ex.what() << '\n';
    return 2;
  } catch (const AssemblyError& ex) {
    err << "assembly error: " << ex.what() << '\n';
    return 2;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return 1;
  }
}

}  // namespace rvisa
