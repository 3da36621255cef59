#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "rvisa/corpus.hpp"
#include "rvisa/error.hpp"
#include "rvisa/hashing.hpp"
#include "rvisa/metrics.hpp"
#include "rvisa/taskset.hpp"

namespace rvisa {

struct LossWeights {
  double alpha = 0.3;  // explanation
  double gamma = 0.3;  // verification

  double prediction() const noexcept { return 1.0 - alpha - gamma; }
  bool operator==(const LossWeights&) const = default;
};

inline void validate(const LossWeights& w) {
  // Slack absorbs binary rounding in sums such as 0.7 + 0.3.
  constexpr double kSlack = 1e-12;
  if (!std::isfinite(w.alpha) || !std::isfinite(w.gamma) || w.alpha < 0.0 || w.gamma < 0.0 ||
      w.alpha + w.gamma > 1.0 + kSlack) {
    throw ArgumentError("loss weights need 0 <= alpha, 0 <= gamma, alpha + gamma <= 1");
  }
}

/// alpha * l_exp + gamma * l_ver + (1 - alpha - gamma) * l_pre
inline double combine_losses(double l_exp, double l_ver, double l_pre, const LossWeights& w) {
  validate(w);
  for (double l : {l_exp, l_ver, l_pre}) {
    if (!std::isfinite(l) || l < 0.0) throw ArgumentError("component losses must be finite and >= 0");
  }
  return w.alpha * l_exp + w.gamma * l_ver + (1.0 - w.alpha - w.gamma) * l_pre;
}

/// Default search grid: alpha, gamma in {0, 0.1, 0.3, 0.5} with alpha + gamma <= 0.9.
inline std::vector<LossWeights> default_weight_grid() {
  std::vector<LossWeights> grid;
  for (double a : {0.0, 0.1, 0.3, 0.5}) {
    for (double g : {0.0, 0.1, 0.3, 0.5}) {
      if (a + g <= 0.9 + 1e-12) grid.push_back({a, g});
    }
  }
  return grid;
}

enum class LossNormalization { token_mean, sequence_mean };

constexpr std::string_view to_string(LossNormalization n) noexcept {
  return n == LossNormalization::token_mean ? "token_mean" : "sequence_mean";
}

inline std::optional<LossNormalization> parse_loss_normalization(std::string_view s) noexcept {
  if (s == "token_mean") return LossNormalization::token_mean;
  if (s == "sequence_mean") return LossNormalization::sequence_mean;
  return std::nullopt;
}

struct TrainConfig {
  LossWeights weights;
  int epochs = 3;
  int batch_size = 8;  // per task
  double learning_rate = 3e-3;
  int max_input_tokens = 128;
  int max_target_tokens = 96;
  std::uint64_t seed = 13;
  std::string backend_id = "tiny_seq2seq";
  LossNormalization normalization = LossNormalization::token_mean;
  int predict_max_new_tokens = 4;
};

inline void validate(const TrainConfig& c) {
  validate(c.weights);
  if (c.epochs < 0) throw ArgumentError("epochs must be >= 0");
  if (c.batch_size < 1) throw ArgumentError("batch_size must be >= 1");
  if (!(c.learning_rate > 0.0) || !std::isfinite(c.learning_rate)) {
    throw ArgumentError("learning_rate must be > 0");
  }
  if (c.max_input_tokens < 1 || c.max_target_tokens < 1 || c.predict_max_new_tokens < 1) {
    throw ArgumentError("token limits must be >= 1");
  }
}

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["alpha"] = c.weights.alpha;
  j["gamma"] = c.weights.gamma;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["max_input_tokens"] = c.max_input_tokens;
  j["max_target_tokens"] = c.max_target_tokens;
  j["seed"] = c.seed;
  j["backend_id"] = c.backend_id;
  j["normalization"] = to_string(c.normalization);
  j["predict_max_new_tokens"] = c.predict_max_new_tokens;
  return j;
}

inline std::string config_hash(const TrainConfig& c) { return sha256_hex(to_json(c).dump()); }

/// Contract for a trainable sequence-to-sequence model.
///
/// `accumulate` returns the teacher-forced cross-entropy of a batch and, when
/// `weight` > 0, adds `weight` times its gradient to an internal accumulator.
/// `apply_update` spends the accumulator in one optimizer step and clears it,
/// so several weighted task losses can share a single update.
class Seq2SeqBackend {
 public:
  virtual ~Seq2SeqBackend() = default;

  virtual std::string id() const = 0;
  // Builds vocabulary / initial parameters on first use; later calls keep state.
  virtual void prepare(const TaskSet& taskset) = 0;
  virtual double accumulate(std::span<const TrainingInstance* const> batch, double weight) = 0;
  virtual void apply_update(double learning_rate) = 0;
  virtual std::string generate(std::string_view input, int max_new_tokens) = 0;
  virtual void save(const std::filesystem::path& dir) const = 0;
  virtual void load(const std::filesystem::path& dir) = 0;
  virtual std::size_t parameter_count() const = 0;
};

using BackendFactory = std::function<std::unique_ptr<Seq2SeqBackend>()>;

// ---------------------------------------------------------------------------
// Inference

struct Prediction {
  Polarity label = Polarity::neutral;
  std::string raw;
  bool fallback = false;  // raw text did not map to a label
};

/// Lowercase and strip surrounding whitespace/punctuation.
inline std::string normalize_generation(std::string_view raw) {
  std::size_t b = 0;
  std::size_t e = raw.size();
  auto junk = [](char c) {
    const auto u = static_cast<unsigned char>(c);
    return u < 0x80 && (std::isspace(u) || std::ispunct(u));
  };
  while (b < e && junk(raw[b])) ++b;
  while (e > b && junk(raw[e - 1])) --e;
  std::string out(raw.substr(b, e - b));
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline Prediction map_generation(std::string raw) {
  Prediction p;
  if (auto label = parse_polarity(normalize_generation(raw))) {
    p.label = *label;
  } else {
    p.label = Polarity::neutral;
    p.fallback = true;
  }
  p.raw = std::move(raw);
  return p;
}

/// Runs the prediction task only.
inline Prediction predict(Seq2SeqBackend& model, const Example& example, int max_new_tokens = 4) {
  std::string raw;
  try {
    raw = model.generate(build_predict(example).input_text, max_new_tokens);
  } catch (const std::exception& ex) {
    throw InferenceError(std::string("generation failed: ") + ex.what(), example.id);
  }
  return map_generation(std::move(raw));
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainLogRow {
  long step = 0;
  int epoch = 0;
  std::optional<double> l_exp;
  std::optional<double> l_ver;
  std::optional<double> l_pre;
  double l_combined = 0.0;
  double lr = 0.0;

  bool operator==(const TrainLogRow&) const = default;
};

struct EpochSummary {
  int epoch = 0;
  double mean_combined = 0.0;
  std::optional<double> val_macro_f1;

  bool operator==(const EpochSummary&) const = default;
};

struct TrainResult {
  std::vector<TrainLogRow> log;
  std::vector<EpochSummary> epochs;
  std::optional<int> best_epoch;  // highest validation macro-F1, earliest on ties
};

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

// Endless stream over one task's instances: reshuffles on every wrap.
class TaskStream {
 public:
  TaskStream(std::vector<const TrainingInstance*> items, std::uint64_t seed)
      : items_(std::move(items)), seed_(seed) {
    reshuffle();
  }

  std::vector<const TrainingInstance*> next(std::size_t n) {
    std::vector<const TrainingInstance*> batch;
    batch.reserve(n);
    while (batch.size() < n) {
      if (cursor_ == items_.size()) reshuffle();
      batch.push_back(items_[cursor_++]);
    }
    return batch;
  }

  // Contiguous chunk that never crosses a pass boundary; starts a new pass when exhausted.
  std::vector<const TrainingInstance*> next_in_pass(std::size_t n) {
    if (cursor_ == items_.size()) reshuffle();
    const auto take = std::min(n, items_.size() - cursor_);
    std::vector<const TrainingInstance*> batch(items_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                               items_.begin() + static_cast<std::ptrdiff_t>(cursor_ + take));
    cursor_ += take;
    return batch;
  }

  std::size_t size() const noexcept { return items_.size(); }

 private:
  void reshuffle() {
    seeded_shuffle(items_, seed_ + 0x9e3779b97f4a7c15ULL * ++pass_);
    cursor_ = 0;
  }

  std::vector<const TrainingInstance*> items_;
  std::uint64_t seed_;
  std::uint64_t pass_ = 0;
  std::size_t cursor_ = 0;
};

inline std::vector<std::string> batch_ids(const std::vector<const TrainingInstance*>& batch) {
  std::vector<std::string> ids;
  for (const auto* t : batch) ids.push_back(t->example_id);
  return ids;
}

}  // namespace detail

inline double validation_macro_f1(Seq2SeqBackend& model, const std::vector<Example>& val,
                                  int max_new_tokens) {
  std::vector<Polarity> pred;
  std::vector<Polarity> gold;
  for (const auto& e : val) {
    pred.push_back(predict(model, e, max_new_tokens).label);
    gold.push_back(e.polarity);
  }
  return macro_f1(pred, gold);
}

struct TrainOptions {
  // When set, epoch_{k}/ checkpoints and manifest.json are written here.
  std::optional<std::filesystem::path> checkpoint_dir;
  std::function<void(const TrainLogRow&)> on_step;
};

inline nlohmann::ordered_json loss_json(const LossWeights& w) {
  nlohmann::ordered_json j;
  j["alpha"] = w.alpha;
  j["gamma"] = w.gamma;
  j["prediction_weight"] = w.prediction();
  j["form"] = w.gamma > 0.0 ? "alpha*L_exp + gamma*L_ver + (1-alpha-gamma)*L_pre"
                            : "alpha*L_exp + (1-alpha)*L_pre";
  nlohmann::ordered_json tasks = nlohmann::ordered_json::array();
  if (w.alpha > 0.0) tasks.push_back("explain");
  if (w.gamma > 0.0) tasks.push_back("verify");
  if (w.prediction() > 0.0) tasks.push_back("predict");
  j["active_tasks"] = tasks;
  return j;
}

inline nlohmann::ordered_json outcome_json(const TrainResult& r) {
  nlohmann::ordered_json j;
  j["best_epoch"] = r.best_epoch ? nlohmann::ordered_json(*r.best_epoch) : nlohmann::ordered_json(nullptr);
  auto epochs = nlohmann::ordered_json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"mean_combined", e.mean_combined},
                      {"val_macro_f1", e.val_macro_f1 ? nlohmann::ordered_json(*e.val_macro_f1)
                                                      : nlohmann::ordered_json(nullptr)}});
  }
  j["epochs"] = epochs;
  return j;
}

/// Multi-task fine-tuning. Each step draws one homogeneous batch per task with
/// a non-zero weight, combines the task losses and applies a single update.
/// An epoch is one pass over the predict instances.
inline TrainResult train(const TaskSet& taskset, const Dataset& val, const TrainConfig& config,
                         Seq2SeqBackend& backend, const TrainOptions& opts = {}) {
  validate(config);
  if (taskset.instances.empty()) throw ArgumentError("train: empty task set");
  const auto& w = config.weights;
  auto predict_items = taskset.of_task(Task::predict);
  auto explain_items = taskset.of_task(Task::explain);
  auto verify_items = taskset.of_task(Task::verify);
  if (w.gamma > 0.0 && (!taskset.with_verification || verify_items.empty())) {
    throw ConfigError("gamma > 0 needs a task set built with verification instances");
  }
  if (w.alpha > 0.0 && explain_items.empty()) {
    throw ConfigError("alpha > 0 needs explanation instances");
  }
  if (predict_items.empty()) throw ConfigError("task set has no predict instances");

  TrainResult result;
  const auto val_examples = slice(val, Split::validation, false);
  if (config.epochs == 0) return result;

  backend.prepare(taskset);
  const bool use_exp = w.alpha > 0.0;
  const bool use_ver = w.gamma > 0.0;
  const bool use_pre = w.prediction() > 0.0;
  detail::TaskStream pre_stream(predict_items, config.seed);
  detail::TaskStream exp_stream(explain_items.empty() ? predict_items : explain_items, config.seed + 1);
  detail::TaskStream ver_stream(verify_items.empty() ? predict_items : verify_items, config.seed + 2);

  const auto bs = static_cast<std::size_t>(config.batch_size);
  const auto steps_per_epoch = (predict_items.size() + bs - 1) / bs;
  long step = 0;
  std::optional<double> best_f1;

  auto run_task = [&](std::vector<const TrainingInstance*> batch, double weight) {
    const double l = backend.accumulate(batch, weight);
    if (!std::isfinite(l) || l < 0.0) {
      throw TrainingError("non-finite loss at step " + std::to_string(step), step, detail::batch_ids(batch));
    }
    return l;
  };

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    double epoch_sum = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      ++step;
      TrainLogRow row;
      row.step = step;
      row.epoch = epoch;
      row.lr = config.learning_rate;
      auto pre_batch = pre_stream.next_in_pass(bs);
      if (use_exp) row.l_exp = run_task(exp_stream.next(bs), w.alpha);
      if (use_ver) row.l_ver = run_task(ver_stream.next(bs), w.gamma);
      if (use_pre) row.l_pre = run_task(std::move(pre_batch), w.prediction());
      row.l_combined = combine_losses(row.l_exp.value_or(0.0), row.l_ver.value_or(0.0),
                                      row.l_pre.value_or(0.0), w);
      backend.apply_update(config.learning_rate);
      epoch_sum += row.l_combined;
      if (opts.on_step) opts.on_step(row);
      result.log.push_back(row);
    }

    EpochSummary summary{epoch, epoch_sum / static_cast<double>(steps_per_epoch), std::nullopt};
    if (!val_examples.empty()) {
      summary.val_macro_f1 = validation_macro_f1(backend, val_examples, config.predict_max_new_tokens);
      if (!best_f1 || *summary.val_macro_f1 > *best_f1) {
        best_f1 = summary.val_macro_f1;
        result.best_epoch = epoch;
      }
    } else {
      result.best_epoch = epoch;
    }
    result.epochs.push_back(summary);
    if (opts.checkpoint_dir) {
      backend.save(*opts.checkpoint_dir / ("epoch_" + std::to_string(epoch)));
    }
  }

  if (opts.checkpoint_dir) {
    nlohmann::ordered_json manifest;
    manifest["config_hash"] = config_hash(config);
    manifest["config"] = to_json(config);
    manifest["loss"] = loss_json(w);
    manifest["outcome"] = outcome_json(result);
    std::ofstream out(*opts.checkpoint_dir / "manifest.json", std::ios::binary | std::ios::trunc);
    out << manifest.dump(2) << '\n';
  }
  return result;
}

inline std::string train_log_csv(const std::vector<TrainLogRow>& log) {
  std::string out = "step,l_exp,l_ver,l_pre,l_combined,lr\n";
  auto opt = [](const std::optional<double>& v) { return v ? detail::format_double(*v) : std::string{}; };
  for (const auto& r : log) {
    out += std::to_string(r.step) + ',' + opt(r.l_exp) + ',' + opt(r.l_ver) + ',' + opt(r.l_pre) + ',' +
           detail::format_double(r.l_combined) + ',' + detail::format_double(r.lr) + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Weight search

struct SearchRow {
  LossWeights weights;
  std::optional<double> val_macro_f1;
  std::string error;
};

struct SearchResult {
  LossWeights best;
  std::vector<SearchRow> table;
};

/// Prefers the higher F1, then larger gamma, then larger alpha.
inline bool search_better(const SearchRow& a, const SearchRow& b) {
  if (*a.val_macro_f1 != *b.val_macro_f1) return *a.val_macro_f1 > *b.val_macro_f1;
  if (a.weights.gamma != b.weights.gamma) return a.weights.gamma > b.weights.gamma;
  return a.weights.alpha > b.weights.alpha;
}

/// One short training run per grid point, each on a fresh backend from `factory`.
/// A failing point is recorded in the table and the search continues.
inline SearchResult search_weights(const TaskSet& taskset, const Dataset& val,
                                   const std::vector<LossWeights>& grid, const TrainConfig& config,
                                   const BackendFactory& factory) {
  if (grid.empty()) throw ArgumentError("search_weights: empty grid");
  for (const auto& w : grid) validate(w);
  const auto val_examples = slice(val, Split::validation, false);

  SearchResult result;
  const SearchRow* best = nullptr;
  for (const auto& w : grid) {
    SearchRow row{w, std::nullopt, {}};
    try {
      if (val_examples.empty()) throw ConfigError("validation split is empty");
      auto cfg = config;
      cfg.weights = w;
      auto backend = factory();
      train(taskset, val, cfg, *backend);
      row.val_macro_f1 = validation_macro_f1(*backend, val_examples, cfg.predict_max_new_tokens);
    } catch (const std::exception& ex) {
      row.error = ex.what();
    }
    result.table.push_back(std::move(row));
  }
  for (const auto& row : result.table) {
    if (row.val_macro_f1 && (!best || search_better(row, *best))) best = &row;
  }
  if (!best) throw Error("search_weights: every grid point failed");
  result.best = best->weights;
  return result;
}

inline std::string search_table_csv(const SearchResult& r) {
  std::string out = "alpha,gamma,val_macro_f1,status\n";
  for (const auto& row : r.table) {
    std::string status = row.error.empty() ? "ok" : row.error;
    for (auto& c : status) {
      if (c == ',' || c == '\n') c = ';';
    }
    out += detail::format_double(row.weights.alpha) + ',' + detail::format_double(row.weights.gamma) + ',' +
           (row.val_macro_f1 ? detail::format_double(*row.val_macro_f1) : std::string{}) + ',' + status + '\n';
  }
  return out;
}

}  // namespace rvisa
