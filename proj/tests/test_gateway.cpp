#include <atomic>
#include <chrono>
#include <thread>

#include <gtest/gtest.h>

#include "rvisa/llm_gateway.hpp"
#include "support.hpp"

using namespace rvisa;
using testing_support::TempDir;

namespace {

GenerationRequest request(const std::string& text, const std::string& id = "e") {
  return {{PromptMode::th_re, id, text}, "gen", 0.0, 64, std::nullopt};
}

RetryPolicy no_wait(int retries = 3) { return {retries, std::chrono::milliseconds(0), 2.0}; }

}  // namespace

TEST(Fingerprint, DependsOnlyOnListedFields) {
  auto a = request("p", "id1");
  auto b = request("p", "id2");
  b.max_new_tokens = 7;
  b.prompt.mode = PromptMode::re;
  EXPECT_EQ(fingerprint(a), fingerprint(b));
  b.temperature = 0.5;
  EXPECT_NE(fingerprint(a), fingerprint(b));
  b = a;
  b.seed = 1;
  EXPECT_NE(fingerprint(a), fingerprint(b));
  b = a;
  b.generator_id = "other";
  EXPECT_NE(fingerprint(a), fingerprint(b));
  EXPECT_EQ(fingerprint(a).size(), 64u);
}

TEST(Request, Validation) {
  auto r = request("p");
  r.max_new_tokens = 0;
  EXPECT_THROW(validate(r), ArgumentError);
  r = request("p");
  r.temperature = -0.1;
  EXPECT_THROW(validate(r), ArgumentError);
}

TEST(Generate, CannedPassthroughAndCacheHit) {
  auto backend = std::make_shared<CannedMockBackend>(std::map<std::string, std::string>{{"p", "canned text"}});
  LlmGateway gw(backend, nullptr, no_wait());
  const auto first = gw.generate(request("p"));
  EXPECT_EQ(first.response_text, "canned text");
  EXPECT_EQ(first.attempt, 1);
  const auto second = gw.generate(request("p"));
  EXPECT_EQ(gw.backend_calls(), 1u);
  EXPECT_EQ(second.attempt, first.attempt);
  EXPECT_EQ(second.created_at, first.created_at);
}

TEST(Generate, FailsTwiceThenSucceeds) {
  std::atomic<int> calls{0};
  auto backend = std::make_shared<FunctionBackend>([&](const GenerationRequest&) -> std::string {
    if (++calls <= 2) throw TransportError("connection reset");
    return "ok";
  });
  LlmGateway gw(backend, nullptr, no_wait(3));
  const auto rec = gw.generate(request("p"));
  EXPECT_EQ(rec.attempt, 3);
  EXPECT_EQ(rec.response_text, "ok");
}

TEST(Generate, GivesUpAfterRetriesWithLastCause) {
  std::atomic<int> calls{0};
  auto backend = std::make_shared<FunctionBackend>([&](const GenerationRequest&) -> std::string {
    throw TransportError("failure #" + std::to_string(++calls));
  });
  LlmGateway gw(backend, nullptr, no_wait(3));
  try {
    gw.generate(request("p"));
    FAIL() << "expected GatewayError";
  } catch (const GatewayError& ex) {
    EXPECT_EQ(calls.load(), 4);
    EXPECT_EQ(ex.attempts(), 4);
    EXPECT_NE(std::string(ex.what()).find("failure #4"), std::string::npos);
  }
}

TEST(Generate, NonRetryableStopsImmediately) {
  std::atomic<int> calls{0};
  auto backend = std::make_shared<FunctionBackend>([&](const GenerationRequest&) -> std::string {
    ++calls;
    throw TransportError("bad request", false);
  });
  LlmGateway gw(backend, nullptr, no_wait(3));
  EXPECT_THROW(gw.generate(request("p")), GatewayError);
  EXPECT_EQ(calls.load(), 1);
}

TEST(Generate, RefusalKeepsPayload) {
  auto backend = std::make_shared<FunctionBackend>(
      [](const GenerationRequest&) -> std::string { throw RefusalError("blocked", R"({"raw":1})"); });
  LlmGateway gw(backend, nullptr, no_wait());
  try {
    gw.generate(request("p"));
    FAIL();
  } catch (const RefusalError& ex) {
    EXPECT_EQ(ex.payload(), R"({"raw":1})");
  }
  EXPECT_EQ(gw.backend_calls(), 1u);
}

TEST(Generate, BackoffDelaysGrow) {
  std::vector<std::chrono::steady_clock::time_point> stamps;
  auto backend = std::make_shared<FunctionBackend>([&](const GenerationRequest&) -> std::string {
    stamps.push_back(std::chrono::steady_clock::now());
    if (stamps.size() < 3) throw TransportError("again");
    return "ok";
  });
  LlmGateway gw(backend, nullptr, {3, std::chrono::milliseconds(20), 2.0});
  gw.generate(request("p"));
  ASSERT_EQ(stamps.size(), 3u);
  EXPECT_GE(stamps[1] - stamps[0], std::chrono::milliseconds(20));
  EXPECT_GE(stamps[2] - stamps[1], std::chrono::milliseconds(40));
}

TEST(Batch, BoundedConcurrencyAndOrder) {
  std::atomic<int> in_flight{0};
  std::atomic<int> peak{0};
  auto backend = std::make_shared<FunctionBackend>([&](const GenerationRequest& r) {
    const int now = ++in_flight;
    int seen = peak.load();
    while (now > seen && !peak.compare_exchange_weak(seen, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(5 + (std::hash<std::string>{}(r.prompt.text) % 10)));
    --in_flight;
    return "reply to " + r.prompt.text;
  });
  LlmGateway gw(backend, nullptr, no_wait());
  std::vector<GenerationRequest> reqs;
  for (int i = 0; i < 10; ++i) reqs.push_back(request("p" + std::to_string(i)));
  const auto out = gw.generate_batch(reqs, 3);
  ASSERT_EQ(out.size(), 10u);
  EXPECT_LE(peak.load(), 3);
  EXPECT_GE(peak.load(), 1);
  for (int i = 0; i < 10; ++i) {
    ASSERT_TRUE(out[i].ok());
    EXPECT_EQ(out[i].record->response_text, "reply to p" + std::to_string(i));
  }
}

TEST(Batch, EmptyAndInvalid) {
  LlmGateway gw(std::make_shared<CannedMockBackend>(std::map<std::string, std::string>{}, "x"), nullptr);
  EXPECT_TRUE(gw.generate_batch({}, 2).empty());
  EXPECT_THROW(gw.generate_batch({}, 0), ArgumentError);
}

TEST(Batch, OneFailureAmongTen) {
  auto backend = std::make_shared<FunctionBackend>([](const GenerationRequest& r) -> std::string {
    if (r.prompt.text == "p4") throw RefusalError("no", "payload");
    return "fine";
  });
  LlmGateway gw(backend, nullptr, no_wait());
  std::vector<GenerationRequest> reqs;
  for (int i = 0; i < 10; ++i) reqs.push_back(request("p" + std::to_string(i)));
  const auto out = gw.generate_batch(reqs, 4);
  std::size_t ok = 0;
  for (const auto& item : out) ok += item.ok();
  EXPECT_EQ(ok, 9u);
  EXPECT_EQ(out[4].error_kind, ItemErrorKind::refusal);
  EXPECT_EQ(out[4].raw_payload, "payload");
}

TEST(Cache, SurvivesRestartAndWarmCacheMakesNoCalls) {
  TempDir dir("cache");
  const auto path = dir / "c" / "gen.jsonl";
  std::vector<GenerationRequest> reqs;
  for (int i = 0; i < 6; ++i) reqs.push_back(request("p" + std::to_string(i)));
  {
    auto backend = std::make_shared<CannedMockBackend>(std::map<std::string, std::string>{}, "answer");
    LlmGateway gw(backend, std::make_shared<GenerationCache>(path), no_wait());
    gw.generate_batch(reqs, 3);
    EXPECT_EQ(gw.backend_calls(), 6u);
  }
  auto backend = std::make_shared<CannedMockBackend>(std::map<std::string, std::string>{}, "different");
  LlmGateway gw(backend, std::make_shared<GenerationCache>(path), no_wait());
  const auto out = gw.generate_batch(reqs, 3);
  EXPECT_EQ(gw.backend_calls(), 0u);
  for (const auto& item : out) EXPECT_EQ(item.record->response_text, "answer");
}

TEST(Cache, CompactsTornAndDuplicateRows) {
  TempDir dir("cache");
  const auto path = dir / "gen.jsonl";
  {
    GenerationCache c(path);
    GenerationRecord r{fingerprint(request("a")), request("a"), "one", 1, "t", 1};
    c.put(r);
    r.response_text = "two";
    c.put(r);
  }
  std::ofstream(path, std::ios::app) << R"({"fingerprint":"abc","requ)";
  GenerationCache c(path);
  EXPECT_EQ(c.size(), 1u);
  EXPECT_EQ(c.find(fingerprint(request("a")))->response_text, "two");
  const auto text = testing_support::read_file(path);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1);
  const auto row = nlohmann::json::parse(text);
  for (const char* k : {"fingerprint", "request", "response_text", "latency_ms", "created_at", "attempt"}) {
    EXPECT_TRUE(row.contains(k)) << k;
  }
}

TEST(TemplatedMock, EmitsThreeHopRationale) {
  MockPlan plan{"price", Polarity::negative, Polarity::positive, false};
  TemplatedMockBackend mock({{"e", plan}});
  const auto text = mock.complete(request("anything", "e"));
  EXPECT_NE(text.find("The mentioned aspect towards price is about"), std::string::npos);
  EXPECT_NE(text.find("The underlying opinion towards price is about"), std::string::npos);
  EXPECT_NE(text.find("Therefore, the sentiment polarity towards price is negative."), std::string::npos);
  EXPECT_LT(text.find("negative"), text.find("positive"));
  EXPECT_THROW(mock.complete(request("x", "unknown")), RefusalError);
  plan.refuse = true;
  TemplatedMockBackend refusing({{"e", plan}});
  EXPECT_THROW(refusing.complete(request("x", "e")), RefusalError);
  GenerationRequest verify{{PromptMode::verify, "e", "Given the rationale ..."}, "gen", 0.0, 256, std::nullopt};
  EXPECT_EQ(mock.complete(verify), "True");
}
