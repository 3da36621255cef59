#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "rvisa/corpus.hpp"
#include "rvisa/error.hpp"
#include "rvisa/metrics.hpp"
#include "rvisa/rationale.hpp"
#include "rvisa/training.hpp"

namespace rvisa {

struct SliceResult {
  std::size_t n = 0;
  // Absent when the slice is empty.
  std::optional<double> accuracy;
  std::optional<double> macro_f1;
};

struct ErrorCell {
  bool implicit = false;
  Polarity gold = Polarity::neutral;
  std::size_t count = 0;
  double ratio = 0.0;
};

/// Misclassifications partitioned by (explicit/implicit, gold polarity).
/// Cells are ordered explicit positive/negative/neutral, then implicit.
struct ErrorBreakdown {
  std::array<ErrorCell, 6> cells{};
  std::size_t total_errors = 0;

  const ErrorCell& cell(bool implicit, Polarity gold) const {
    return cells[(implicit ? 3 : 0) + index_of(gold)];
  }
};

struct AmbiguityCounts {
  std::size_t wrong_count = 0;
  std::size_t ambiguous_count = 0;
  std::size_t total = 0;

  bool operator==(const AmbiguityCounts&) const = default;
};

struct PredictionRow {
  std::string example_id;
  Polarity gold = Polarity::neutral;
  Polarity pred = Polarity::neutral;
  bool implicit = false;
  bool fallback = false;
  std::string raw;
};

struct EvalReport {
  std::string dataset;
  SliceResult all;
  SliceResult isa;
  ErrorBreakdown errors;
  std::optional<AmbiguityCounts> ambiguity;
  std::size_t fallback_count = 0;
  std::vector<PredictionRow> predictions;
};

inline ErrorBreakdown error_breakdown(std::span<const Polarity> pred, std::span<const Polarity> gold,
                                      std::span<const bool> implicit_flags) {
  if (pred.size() != gold.size() || pred.size() != implicit_flags.size()) {
    throw ArgumentError("error_breakdown: sequences differ in length");
  }
  ErrorBreakdown b;
  for (std::size_t k = 0; k < 6; ++k) {
    b.cells[k].implicit = k >= 3;
    b.cells[k].gold = kPolarities[k % 3];
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == gold[i]) continue;
    ++b.cells[(implicit_flags[i] ? 3 : 0) + index_of(gold[i])].count;
    ++b.total_errors;
  }
  if (b.total_errors > 0) {
    for (auto& c : b.cells) c.ratio = static_cast<double>(c.count) / static_cast<double>(b.total_errors);
  }
  return b;
}

/// Wrong = FCFS prediction differs from gold or is missing; ambiguous = two or more distinct labels.
inline AmbiguityCounts ambiguity_report(std::span<const Rationale> rationales,
                                        std::span<const Polarity> gold) {
  if (rationales.size() != gold.size()) throw ArgumentError("ambiguity_report: sequences differ in length");
  AmbiguityCounts c;
  c.total = rationales.size();
  for (std::size_t i = 0; i < rationales.size(); ++i) {
    const auto resolved = resolve_fcfs(rationales[i].polarity_mentions);
    if (!resolved || *resolved != gold[i]) ++c.wrong_count;
    if (ambiguity_flag(rationales[i].polarity_mentions)) ++c.ambiguous_count;
  }
  return c;
}

inline SliceResult slice_result(std::span<const Polarity> pred, std::span<const Polarity> gold) {
  SliceResult r;
  r.n = pred.size();
  if (r.n > 0) {
    r.accuracy = accuracy(pred, gold);
    r.macro_f1 = macro_f1(pred, gold);
  }
  return r;
}

/// Builds a report from already-computed predictions (test split order).
inline EvalReport make_report(std::string dataset_name, std::vector<PredictionRow> rows) {
  EvalReport report;
  report.dataset = std::move(dataset_name);
  std::vector<Polarity> pred, gold, isa_pred, isa_gold;
  std::vector<char> flags_storage;
  for (const auto& r : rows) {
    pred.push_back(r.pred);
    gold.push_back(r.gold);
    flags_storage.push_back(r.implicit);
    if (r.implicit) {
      isa_pred.push_back(r.pred);
      isa_gold.push_back(r.gold);
    }
    report.fallback_count += r.fallback;
  }
  // std::vector<bool> has no contiguous storage to span over
  auto flags = std::make_unique<bool[]>(flags_storage.size());
  for (std::size_t i = 0; i < flags_storage.size(); ++i) flags[i] = flags_storage[i] != 0;
  report.all = slice_result(pred, gold);
  report.isa = slice_result(isa_pred, isa_gold);
  report.errors = error_breakdown(pred, gold, std::span<const bool>(flags.get(), flags_storage.size()));
  report.predictions = std::move(rows);
  return report;
}

/// Runs the prediction task on every test example.
inline EvalReport evaluate(Seq2SeqBackend& model, const Dataset& dataset, int max_new_tokens = 4) {
  const auto test = slice(dataset, Split::test, false);
  if (test.empty()) throw ArgumentError("evaluate: test split is empty");
  std::vector<PredictionRow> rows;
  rows.reserve(test.size());
  for (const auto& e : test) {
    auto p = predict(model, e, max_new_tokens);
    rows.push_back({e.id, e.polarity, p.label, e.implicit, p.fallback, std::move(p.raw)});
  }
  return make_report(std::string(to_string(dataset.name())), std::move(rows));
}

// ---------------------------------------------------------------------------
// Serialization

inline constexpr std::string_view kMetricConvention =
    "macro-F1 averages per-class F1 over the fixed alphabet {positive, negative, neutral}; a class "
    "absent from both gold and predictions contributes 0";

namespace detail {
inline nlohmann::ordered_json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}
inline nlohmann::ordered_json slice_json(const SliceResult& s) {
  return {{"n", s.n}, {"accuracy", opt_json(s.accuracy)}, {"macro_f1", opt_json(s.macro_f1)}};
}
}  // namespace detail

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["dataset"] = r.dataset;
  j["metric_convention"] = kMetricConvention;
  j["slices"] = {{"all", detail::slice_json(r.all)}, {"isa", detail::slice_json(r.isa)}};
  auto cells = nlohmann::ordered_json::array();
  for (const auto& c : r.errors.cells) {
    cells.push_back({{"slice", c.implicit ? "implicit" : "explicit"},
                     {"gold_polarity", to_string(c.gold)},
                     {"count", c.count},
                     {"ratio", c.ratio}});
  }
  j["error_breakdown"] = {{"total_errors", r.errors.total_errors}, {"cells", cells}};
  if (r.ambiguity) {
    j["ambiguity"] = {{"wrong_count", r.ambiguity->wrong_count},
                      {"ambiguous_count", r.ambiguity->ambiguous_count},
                      {"total", r.ambiguity->total}};
  } else {
    j["ambiguity"] = nullptr;
  }
  j["fallback_count"] = r.fallback_count;
  return j;
}

enum class SliceSelection { both, all, isa };

inline std::string results_csv(const EvalReport& r, SliceSelection which = SliceSelection::both) {
  auto num = [](const std::optional<double>& v) { return v ? detail::format_double(*v) : std::string{}; };
  std::string out = "dataset,slice,n,accuracy,macro_f1\n";
  auto row = [&](std::string_view name, const SliceResult& s) {
    out += r.dataset + ',' + std::string(name) + ',' + std::to_string(s.n) + ',' + num(s.accuracy) + ',' +
           num(s.macro_f1) + '\n';
  };
  if (which != SliceSelection::isa) row("all", r.all);
  if (which != SliceSelection::all) row("isa", r.isa);
  return out;
}

inline std::string errors_csv(const EvalReport& r) {
  std::string out = "slice,gold_polarity,count,ratio\n";
  for (const auto& c : r.errors.cells) {
    out += std::string(c.implicit ? "implicit" : "explicit") + ',' + std::string(to_string(c.gold)) + ',' +
           std::to_string(c.count) + ',' + detail::format_double(c.ratio) + '\n';
  }
  return out;
}

inline std::string predictions_jsonl(const EvalReport& r) {
  std::string out;
  for (const auto& p : r.predictions) {
    nlohmann::ordered_json j;
    j["example_id"] = p.example_id;
    j["gold"] = to_string(p.gold);
    j["pred"] = to_string(p.pred);
    j["implicit"] = p.implicit;
    j["fallback"] = p.fallback;
    j["raw"] = p.raw;
    out += j.dump();
    out += '\n';
  }
  return out;
}

/// Structural check of a report.json document; returns the list of violations.
inline std::vector<std::string> validate_report_json(const nlohmann::json& j) {
  std::vector<std::string> problems;
  auto need = [&](const nlohmann::json& obj, const char* key, auto pred, const char* what) {
    if (!obj.is_object() || !obj.contains(key) || !pred(obj.at(key))) {
      problems.push_back(std::string(key) + " must be " + what);
      return false;
    }
    return true;
  };
  auto is_unit = [](const nlohmann::json& v) {
    return v.is_number() && v.get<double>() >= 0.0 && v.get<double>() <= 1.0;
  };
  auto unit_or_null = [&](const nlohmann::json& v) { return v.is_null() || is_unit(v); };
  auto is_count = [](const nlohmann::json& v) { return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0); };

  if (!j.is_object()) return {"report must be an object"};
  need(j, "dataset", [](const auto& v) { return v.is_string(); }, "a string");
  need(j, "metric_convention", [](const auto& v) { return v.is_string(); }, "a string");
  if (need(j, "slices", [](const auto& v) { return v.is_object(); }, "an object")) {
    for (const char* name : {"all", "isa"}) {
      if (!need(j["slices"], name, [](const auto& v) { return v.is_object(); }, "an object")) continue;
      const auto& s = j["slices"][name];
      need(s, "n", is_count, "a non-negative integer");
      need(s, "accuracy", unit_or_null, "null or a number in [0,1]");
      need(s, "macro_f1", unit_or_null, "null or a number in [0,1]");
      if (s.contains("n") && is_count(s["n"]) && s["n"].get<long long>() > 0 &&
          (s.value("accuracy", nlohmann::json()).is_null() || s.value("macro_f1", nlohmann::json()).is_null())) {
        problems.push_back(std::string("slices.") + name + " has n > 0 but null metrics");
      }
    }
  }
  if (need(j, "error_breakdown", [](const auto& v) { return v.is_object(); }, "an object")) {
    const auto& eb = j["error_breakdown"];
    need(eb, "total_errors", is_count, "a non-negative integer");
    if (need(eb, "cells", [](const auto& v) { return v.is_array() && v.size() == 6; }, "an array of 6 cells")) {
      double sum = 0.0;
      for (const auto& c : eb["cells"]) {
        need(c, "slice", [](const auto& v) { return v.is_string() && (v == "explicit" || v == "implicit"); },
             "explicit or implicit");
        need(c, "gold_polarity",
             [](const auto& v) { return v.is_string() && parse_polarity(v.template get<std::string>()).has_value(); },
             "a polarity");
        need(c, "count", is_count, "a non-negative integer");
        if (need(c, "ratio", is_unit, "a number in [0,1]")) sum += c["ratio"].get<double>();
      }
      if (eb.contains("total_errors") && is_count(eb["total_errors"]) && eb["total_errors"].get<long long>() > 0 &&
          std::abs(sum - 1.0) > 1e-9) {
        problems.push_back("error_breakdown ratios must sum to 1");
      }
    }
  }
  if (!j.contains("ambiguity")) {
    problems.push_back("ambiguity must be present (null or object)");
  } else if (!j["ambiguity"].is_null()) {
    for (const char* k : {"wrong_count", "ambiguous_count", "total"}) {
      need(j["ambiguity"], k, is_count, "a non-negative integer");
    }
  }
  need(j, "fallback_count", is_count, "a non-negative integer");
  return problems;
}

}  // namespace rvisa
