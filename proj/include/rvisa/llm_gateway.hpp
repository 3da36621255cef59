#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rvisa/error.hpp"
#include "rvisa/hashing.hpp"
#include "rvisa/polarity.hpp"
#include "rvisa/prompts.hpp"

namespace rvisa {

struct GenerationRequest {
  RenderedPrompt prompt;
  std::string generator_id;
  double temperature = 0.0;
  int max_new_tokens = 256;
  std::optional<std::int64_t> seed;
};

inline void validate(const GenerationRequest& r) {
  if (r.max_new_tokens < 1) throw ArgumentError("max_new_tokens must be >= 1");
  if (!(r.temperature >= 0.0) || !std::isfinite(r.temperature)) {
    throw ArgumentError("temperature must be a finite value >= 0");
  }
}

/// SHA-256 over (generator_id, prompt text, temperature, seed). Other request
/// fields do not participate.
inline std::string fingerprint(const GenerationRequest& r) {
  nlohmann::ordered_json j;
  j["generator_id"] = r.generator_id;
  j["prompt"] = r.prompt.text;
  j["temperature"] = r.temperature;
  j["seed"] = r.seed ? nlohmann::ordered_json(*r.seed) : nlohmann::ordered_json(nullptr);
  return sha256_hex(j.dump());
}

struct GenerationRecord {
  std::string fingerprint;
  GenerationRequest request;
  std::string response_text;
  std::int64_t latency_ms = 0;
  std::string created_at;
  int attempt = 1;
};

inline nlohmann::ordered_json to_json(const GenerationRequest& r) {
  nlohmann::ordered_json j;
  j["generator_id"] = r.generator_id;
  j["mode"] = to_string(r.prompt.mode);
  j["example_id"] = r.prompt.example_id;
  j["prompt"] = r.prompt.text;
  j["temperature"] = r.temperature;
  j["max_new_tokens"] = r.max_new_tokens;
  j["seed"] = r.seed ? nlohmann::ordered_json(*r.seed) : nlohmann::ordered_json(nullptr);
  return j;
}

inline GenerationRequest request_from_json(const nlohmann::json& j) {
  GenerationRequest r;
  r.generator_id = j.at("generator_id").get<std::string>();
  auto mode = parse_prompt_mode(j.at("mode").get<std::string>());
  if (!mode) throw Error("cache row has unknown prompt mode");
  r.prompt = {*mode, j.at("example_id").get<std::string>(), j.at("prompt").get<std::string>()};
  r.temperature = j.at("temperature").get<double>();
  r.max_new_tokens = j.at("max_new_tokens").get<int>();
  if (!j.at("seed").is_null()) r.seed = j.at("seed").get<std::int64_t>();
  return r;
}

inline nlohmann::ordered_json to_json(const GenerationRecord& g) {
  nlohmann::ordered_json j;
  j["fingerprint"] = g.fingerprint;
  j["request"] = to_json(g.request);
  j["response_text"] = g.response_text;
  j["latency_ms"] = g.latency_ms;
  j["created_at"] = g.created_at;
  j["attempt"] = g.attempt;
  return j;
}

inline GenerationRecord record_from_json(const nlohmann::json& j) {
  GenerationRecord g;
  g.fingerprint = j.at("fingerprint").get<std::string>();
  g.request = request_from_json(j.at("request"));
  g.response_text = j.at("response_text").get<std::string>();
  g.latency_ms = j.at("latency_ms").get<std::int64_t>();
  g.created_at = j.at("created_at").get<std::string>();
  g.attempt = j.at("attempt").get<int>();
  return g;
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---------------------------------------------------------------------------
// Backends

// Thrown by backends for failures worth retrying (connection reset, 5xx, 429...).
class TransportError : public Error {
 public:
  explicit TransportError(const std::string& what, bool retryable = true)
      : Error(what), retryable_(retryable) {}
  bool retryable() const noexcept { return retryable_; }

 private:
  bool retryable_;
};

class TextBackend {
 public:
  virtual ~TextBackend() = default;
  // Must be safe to call from several threads at once.
  virtual std::string complete(const GenerationRequest& request) = 0;
};

/// Returns a fixed response per prompt text; unknown prompts get `fallback`,
/// or a refusal when no fallback is set.
class CannedMockBackend final : public TextBackend {
 public:
  explicit CannedMockBackend(std::map<std::string, std::string> canned,
                             std::optional<std::string> fallback = std::nullopt)
      : canned_(std::move(canned)), fallback_(std::move(fallback)) {}

  std::string complete(const GenerationRequest& request) override {
    if (auto it = canned_.find(request.prompt.text); it != canned_.end()) return it->second;
    if (fallback_) return *fallback_;
    throw RefusalError("no canned response for prompt", request.prompt.text);
  }

 private:
  std::map<std::string, std::string> canned_;
  std::optional<std::string> fallback_;
};

/// What the templated mock should conclude for one example.
struct MockPlan {
  std::string aspect_term;
  Polarity conclusion = Polarity::neutral;
  // Appended as a second, later polarity to produce an ambiguous rationale.
  std::optional<Polarity> hedge;
  bool refuse = false;
};

/// Deterministic generator of syntactically valid three-hop rationales.
/// Verify prompts are answered with "True".
class TemplatedMockBackend final : public TextBackend {
 public:
  explicit TemplatedMockBackend(std::map<std::string, MockPlan> plans) : plans_(std::move(plans)) {}

  static std::string rationale_text(const MockPlan& plan) {
    const auto& t = plan.aspect_term;
    std::string text = "The mentioned aspect towards " + t + " is about the " + t +
                       " described by the reviewer. The underlying opinion towards " + t +
                       " is about how the reviewer judges the " + t +
                       ". Therefore, the sentiment polarity towards " + t + " is " +
                       std::string(to_string(plan.conclusion)) + ".";
    if (plan.hedge) {
      text += " However, it could also be read as " + std::string(to_string(*plan.hedge)) + ".";
    }
    return text;
  }

  std::string complete(const GenerationRequest& request) override {
    if (request.prompt.mode == PromptMode::verify) return "True";
    auto it = plans_.find(request.prompt.example_id);
    if (it == plans_.end()) {
      throw RefusalError("templated mock has no plan for example '" + request.prompt.example_id + "'",
                         request.prompt.text);
    }
    if (it->second.refuse) {
      throw RefusalError("templated mock refused example '" + request.prompt.example_id + "'",
                         R"({"finish_reason":"content_filter"})");
    }
    return rationale_text(it->second);
  }

 private:
  std::map<std::string, MockPlan> plans_;
};

/// Adapts any callable; handy for fault injection.
class FunctionBackend final : public TextBackend {
 public:
  explicit FunctionBackend(std::function<std::string(const GenerationRequest&)> fn)
      : fn_(std::move(fn)) {}
  std::string complete(const GenerationRequest& request) override { return fn_(request); }

 private:
  std::function<std::string(const GenerationRequest&)> fn_;
};

// ---------------------------------------------------------------------------
// Cache journal

/// Append-only JSONL journal keyed by fingerprint. On open, duplicate or
/// truncated rows are dropped and the file is rewritten (last row wins).
/// An empty path keeps the cache in memory only.
class GenerationCache {
 public:
  GenerationCache() = default;
  explicit GenerationCache(std::filesystem::path path) : path_(std::move(path)) { load(); }

  std::optional<GenerationRecord> find(const std::string& fp) const {
    std::lock_guard lock(mu_);
    auto it = records_.find(fp);
    if (it == records_.end()) return std::nullopt;
    return it->second;
  }

  void put(const GenerationRecord& record) {
    std::lock_guard lock(mu_);
    records_[record.fingerprint] = record;
    if (path_.empty()) return;
    std::ofstream out(path_, std::ios::binary | std::ios::app);
    if (!out) throw Error("cannot append to cache " + path_.string());
    out << to_json(record).dump() << '\n';
    out.flush();
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return records_.size();
  }

  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  void load() {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    std::ifstream in(path_, std::ios::binary);
    if (!in) return;
    std::string line;
    std::size_t rows = 0;
    bool dirty = false;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      ++rows;
      try {
        auto rec = record_from_json(nlohmann::json::parse(line));
        records_[rec.fingerprint] = std::move(rec);
      } catch (const std::exception&) {
        dirty = true;  // torn write from an interrupted run
      }
    }
    in.close();
    if (dirty || rows != records_.size()) compact();
  }

  void compact() {
    auto tmp = path_;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw Error("cannot write " + tmp.string());
      for (const auto& [fp, rec] : records_) out << to_json(rec).dump() << '\n';
    }
    std::filesystem::rename(tmp, path_);
  }

  std::filesystem::path path_;
  mutable std::mutex mu_;
  std::map<std::string, GenerationRecord> records_;
};

// ---------------------------------------------------------------------------
// Gateway

struct RetryPolicy {
  int retries = 3;  // additional attempts after the first
  std::chrono::milliseconds base_delay{500};
  double multiplier = 2.0;
};

enum class ItemErrorKind { none, gateway, refusal, argument };

struct BatchItem {
  std::optional<GenerationRecord> record;
  ItemErrorKind error_kind = ItemErrorKind::none;
  std::string error;
  std::string raw_payload;  // refusal payload when available

  bool ok() const noexcept { return record.has_value(); }
};

class LlmGateway {
 public:
  LlmGateway(std::shared_ptr<TextBackend> backend, std::shared_ptr<GenerationCache> cache,
             RetryPolicy retry = {})
      : backend_(std::move(backend)), cache_(std::move(cache)), retry_(retry) {
    if (!backend_) throw ArgumentError("gateway needs a backend");
    if (!cache_) cache_ = std::make_shared<GenerationCache>();
    if (retry_.retries < 0) throw ArgumentError("retries must be >= 0");
  }

  GenerationRecord generate(const GenerationRequest& request) {
    validate(request);
    const auto fp = fingerprint(request);
    if (auto hit = cache_->find(fp)) return *hit;

    std::string last_cause;
    auto delay = retry_.base_delay;
    for (int attempt = 1; attempt <= retry_.retries + 1; ++attempt) {
      const auto t0 = std::chrono::steady_clock::now();
      try {
        backend_calls_.fetch_add(1);
        std::string text = backend_->complete(request);
        const auto t1 = std::chrono::steady_clock::now();
        GenerationRecord rec{
            fp, request, std::move(text),
            std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count(),
            utc_timestamp(), attempt};
        cache_->put(rec);
        return rec;
      } catch (const TransportError& ex) {
        last_cause = ex.what();
        if (!ex.retryable()) throw GatewayError("non-retryable transport failure: " + last_cause, attempt);
      }
      if (attempt <= retry_.retries && delay.count() > 0) {
        std::this_thread::sleep_for(delay);
        delay = std::chrono::milliseconds(
            static_cast<std::int64_t>(static_cast<double>(delay.count()) * retry_.multiplier));
      }
    }
    throw GatewayError("transport failure after " + std::to_string(retry_.retries + 1) +
                           " attempts: " + last_cause,
                       retry_.retries + 1);
  }

  /// Results come back in input order; at most `max_in_flight` requests are outstanding.
  std::vector<BatchItem> generate_batch(const std::vector<GenerationRequest>& requests,
                                        int max_in_flight) {
    if (max_in_flight < 1) throw ArgumentError("max_in_flight must be >= 1");
    std::vector<BatchItem> out(requests.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (auto i = next.fetch_add(1); i < requests.size(); i = next.fetch_add(1)) {
        auto& item = out[i];
        try {
          item.record = generate(requests[i]);
        } catch (const RefusalError& ex) {
          item.error_kind = ItemErrorKind::refusal;
          item.error = ex.what();
          item.raw_payload = ex.payload();
        } catch (const GatewayError& ex) {
          item.error_kind = ItemErrorKind::gateway;
          item.error = ex.what();
        } catch (const std::exception& ex) {
          item.error_kind = ItemErrorKind::argument;
          item.error = ex.what();
        }
      }
    };
    const auto n_workers = std::min<std::size_t>(static_cast<std::size_t>(max_in_flight), requests.size());
    std::vector<std::jthread> pool;
    pool.reserve(n_workers);
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    pool.clear();  // joins
    return out;
  }

  std::size_t backend_calls() const noexcept { return backend_calls_.load(); }
  GenerationCache& cache() noexcept { return *cache_; }

 private:
  std::shared_ptr<TextBackend> backend_;
  std::shared_ptr<GenerationCache> cache_;
  RetryPolicy retry_;
  std::atomic<std::size_t> backend_calls_{0};
};

}  // namespace rvisa
