#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rvisa/corpus.hpp"
#include "rvisa/error.hpp"
#include "rvisa/prompts.hpp"
#include "rvisa/rationale.hpp"

namespace rvisa {

enum class Task { predict, explain, verify };

constexpr std::string_view to_string(Task t) noexcept {
  switch (t) {
    case Task::predict:
      return "predict";
    case Task::explain:
      return "explain";
    case Task::verify:
      return "verify";
  }
  return "predict";
}

inline std::optional<Task> parse_task(std::string_view s) noexcept {
  for (auto t : {Task::predict, Task::explain, Task::verify}) {
    if (s == to_string(t)) return t;
  }
  return std::nullopt;
}

inline std::string task_prefix(Task t) { return std::string(to_string(t)) + ": "; }

enum class ExplainMode { re, ra };

constexpr std::string_view to_string(ExplainMode m) noexcept {
  return m == ExplainMode::re ? "re" : "ra";
}

inline std::optional<ExplainMode> parse_explain_mode(std::string_view s) noexcept {
  if (s == "re") return ExplainMode::re;
  if (s == "ra") return ExplainMode::ra;
  return std::nullopt;
}

struct TrainingInstance {
  std::string example_id;
  Task task = Task::predict;
  std::string input_text;
  std::string target_text;

  bool operator==(const TrainingInstance&) const = default;
};

/// Throws ArgumentError when the instance breaks its task's target alphabet or prefix.
inline void validate(const TrainingInstance& t) {
  if (t.input_text.rfind(task_prefix(t.task), 0) != 0) {
    throw ArgumentError("instance for '" + t.example_id + "' lacks the " +
                        std::string(to_string(t.task)) + " prefix");
  }
  if (t.task == Task::predict && !parse_polarity(t.target_text)) {
    throw ArgumentError("predict target '" + t.target_text + "' is not a polarity");
  }
  if (t.task == Task::verify && t.target_text != "True" && t.target_text != "False") {
    throw ArgumentError("verify target '" + t.target_text + "' is not True/False");
  }
}

inline TrainingInstance build_predict(const Example& e) {
  return {e.id, Task::predict, task_prefix(Task::predict) + render_baseline(e, PromptMode::direct).text,
          std::string(to_string(e.polarity))};
}

/// The input is the question clause only; the three-hop scaffold is left for the
/// student to produce, since it is part of the teacher's target text.
inline TrainingInstance build_explain(const Example& e, const Rationale& r, ExplainMode mode) {
  if (r.text.empty()) throw ArgumentError("build_explain: empty rationale for '" + e.id + "'");
  const auto question =
      render_baseline(e, mode == ExplainMode::re ? PromptMode::re : PromptMode::ra).text;
  return {e.id, Task::explain, task_prefix(Task::explain) + question, r.text};
}

inline TrainingInstance build_verify(const Example& e, const Rationale& r,
                                     const VerificationSignal& signal) {
  if (signal.example_id != e.id) {
    throw ArgumentError("build_verify: signal for '" + signal.example_id + "' used with example '" +
                        e.id + "'");
  }
  return {e.id, Task::verify, task_prefix(Task::verify) + render_verify(r.text, e.id).text,
          signal.value ? "True" : "False"};
}

enum class MissingRationalePolicy { strict, skip };

struct AssembleOptions {
  ExplainMode mode = ExplainMode::re;
  bool with_verification = true;
  std::uint64_t seed = 0;
  MissingRationalePolicy missing = MissingRationalePolicy::strict;
  // Verification signals are meant to come from reasoning (RE) rationales.
  bool allow_verification_with_ra = false;
};

struct TaskSetCounts {
  std::size_t predict = 0;
  std::size_t explain = 0;
  std::size_t verify = 0;
  std::size_t verify_true = 0;
  std::size_t verify_false = 0;
  std::size_t skipped_examples = 0;

  bool operator==(const TaskSetCounts&) const = default;
};

struct TaskSet {
  std::vector<TrainingInstance> instances;
  ExplainMode mode = ExplainMode::re;
  bool with_verification = false;
  std::uint64_t seed = 0;
  TaskSetCounts counts;
  std::string source_dataset_hash;

  std::vector<const TrainingInstance*> of_task(Task t) const {
    std::vector<const TrainingInstance*> out;
    for (const auto& i : instances) {
      if (i.task == t) out.push_back(&i);
    }
    return out;
  }
};

/// Deterministic Fisher-Yates over mt19937_64 so the order is portable across standard libraries.
template <typename T>
void seeded_shuffle(std::vector<T>& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

/// Builds the multi-task training set from the train split.
inline TaskSet assemble(const Dataset& dataset, const RationaleStore& rationales,
                        const AssembleOptions& opts) {
  if (opts.with_verification && opts.mode != ExplainMode::re && !opts.allow_verification_with_ra) {
    throw ConfigError(
        "verification signals come from reasoning (re) rationales; set allow_verification_with_ra "
        "to override");
  }
  TaskSet ts;
  ts.mode = opts.mode;
  ts.with_verification = opts.with_verification;
  ts.seed = opts.seed;
  ts.source_dataset_hash = dataset_hash(dataset);

  std::vector<std::string> missing;
  for (const auto& e : dataset.examples()) {
    if (e.split != Split::train) continue;
    const auto* row = rationales.find(e.id);
    if (!row || row->rationale.text.empty()) missing.push_back(e.id);
  }
  if (!missing.empty() && opts.missing == MissingRationalePolicy::strict) {
    std::string msg = "missing rationale for " + std::to_string(missing.size()) + " example(s):";
    for (const auto& id : missing) msg += " " + id;
    throw AssemblyError(msg, missing);
  }

  for (const auto& e : dataset.examples()) {
    if (e.split != Split::train) continue;
    ts.instances.push_back(build_predict(e));
    ++ts.counts.predict;
    const auto* row = rationales.find(e.id);
    if (!row || row->rationale.text.empty()) {
      ++ts.counts.skipped_examples;
      continue;
    }
    ts.instances.push_back(build_explain(e, row->rationale, opts.mode));
    ++ts.counts.explain;
    if (opts.with_verification) {
      ts.instances.push_back(build_verify(e, row->rationale, row->signal));
      ++ts.counts.verify;
      ++(row->signal.value ? ts.counts.verify_true : ts.counts.verify_false);
    }
  }
  seeded_shuffle(ts.instances, opts.seed);
  return ts;
}

// ---------------------------------------------------------------------------
// Serialization: taskset.jsonl + manifest.json

inline nlohmann::ordered_json to_json(const TrainingInstance& t) {
  nlohmann::ordered_json j;
  j["example_id"] = t.example_id;
  j["task"] = to_string(t.task);
  j["input_text"] = t.input_text;
  j["target_text"] = t.target_text;
  return j;
}

inline nlohmann::ordered_json to_json(const TaskSetCounts& c) {
  return {{"predict", c.predict},           {"explain", c.explain},
          {"verify", c.verify},             {"verify_true", c.verify_true},
          {"verify_false", c.verify_false}, {"skipped_examples", c.skipped_examples}};
}

inline nlohmann::ordered_json manifest_json(const TaskSet& ts) {
  nlohmann::ordered_json j;
  j["mode"] = to_string(ts.mode);
  j["with_verification"] = ts.with_verification;
  j["seed"] = ts.seed;
  j["counts"] = to_json(ts.counts);
  j["source_dataset_hash"] = ts.source_dataset_hash;
  return j;
}

inline std::string to_jsonl(const TaskSet& ts) {
  std::string out;
  for (const auto& t : ts.instances) {
    out += to_json(t).dump();
    out += '\n';
  }
  return out;
}

inline void write_taskset(const TaskSet& ts, const std::filesystem::path& jsonl_path,
                          const std::filesystem::path& manifest_path) {
  std::filesystem::create_directories(jsonl_path.parent_path());
  {
    std::ofstream out(jsonl_path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + jsonl_path.string());
    out << to_jsonl(ts);
  }
  std::ofstream out(manifest_path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + manifest_path.string());
  out << manifest_json(ts).dump(2) << '\n';
}

inline TaskSet load_taskset(const std::filesystem::path& jsonl_path,
                            const std::filesystem::path& manifest_path) {
  TaskSet ts;
  {
    std::ifstream in(manifest_path, std::ios::binary);
    if (!in) throw Error("cannot open " + manifest_path.string());
    const auto m = nlohmann::json::parse(in);
    auto mode = parse_explain_mode(m.at("mode").get<std::string>());
    if (!mode) throw Error("manifest has unknown mode");
    ts.mode = *mode;
    ts.with_verification = m.at("with_verification").get<bool>();
    ts.seed = m.at("seed").get<std::uint64_t>();
    ts.source_dataset_hash = m.at("source_dataset_hash").get<std::string>();
    const auto& c = m.at("counts");
    ts.counts = {c.at("predict").get<std::size_t>(),      c.at("explain").get<std::size_t>(),
                 c.at("verify").get<std::size_t>(),       c.at("verify_true").get<std::size_t>(),
                 c.at("verify_false").get<std::size_t>(), c.at("skipped_examples").get<std::size_t>()};
  }
  std::ifstream in(jsonl_path, std::ios::binary);
  if (!in) throw Error("cannot open " + jsonl_path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      auto task = parse_task(j.at("task").get<std::string>());
      if (!task) throw ParseError(lineno, "unknown task");
      TrainingInstance t{j.at("example_id").get<std::string>(), *task,
                         j.at("input_text").get<std::string>(), j.at("target_text").get<std::string>()};
      validate(t);
      ts.instances.push_back(std::move(t));
    } catch (const nlohmann::json::exception& ex) {
      throw ParseError(lineno, ex.what());
    } catch (const ArgumentError& ex) {
      throw ParseError(lineno, ex.what());
    }
  }
  return ts;
}

}  // namespace rvisa
