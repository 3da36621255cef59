#include <cstdlib>
#include <mutex>
#include <thread>

#include <gtest/gtest.h>

#include "rvisa/http_backends.hpp"

using namespace rvisa;

namespace {

// Local httplib server on an ephemeral port; handlers are installed per test.
class LocalServer {
 public:
  LocalServer() = default;
  ~LocalServer() { stop(); }

  httplib::Server& server() { return server_; }

  std::string start() {
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return "http://127.0.0.1:" + std::to_string(port_);
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
};

GenerationRequest request(std::optional<std::int64_t> seed = std::nullopt) {
  return {{PromptMode::th_re, "e1", "Given the sentence \"x\", ..."}, "gpt-test", 0.0, 32, seed};
}

}  // namespace

TEST(BaseUrl, Split) {
  auto ep = split_base_url("https://api.example.com/v1/");
  EXPECT_EQ(ep.origin, "https://api.example.com");
  EXPECT_EQ(ep.path_prefix, "/v1");
  ep = split_base_url("http://localhost:8080");
  EXPECT_EQ(ep.origin, "http://localhost:8080");
  EXPECT_EQ(ep.path_prefix, "");
  EXPECT_THROW(split_base_url("localhost:8080"), ConfigError);
}

TEST(OpenAiChat, SendsChatPayloadWithBearerKey) {
  ::setenv("RVISA_TEST_KEY", "sk-test", 1);
  LocalServer srv;
  nlohmann::json seen_body;
  std::string seen_auth;
  srv.server().Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    seen_body = nlohmann::json::parse(req.body);
    seen_auth = req.get_header_value("Authorization");
    res.set_content(
        R"({"choices":[{"index":0,"finish_reason":"stop","message":{"role":"assistant","content":"It is positive."}}]})",
        "application/json");
  });
  const auto base = srv.start();
  OpenAiChatBackend backend(base + "/v1", "RVISA_TEST_KEY");
  EXPECT_EQ(backend.complete(request(7)), "It is positive.");
  EXPECT_EQ(seen_auth, "Bearer sk-test");
  EXPECT_EQ(seen_body["model"], "gpt-test");
  EXPECT_EQ(seen_body["messages"][0]["role"], "user");
  EXPECT_EQ(seen_body["messages"][0]["content"], "Given the sentence \"x\", ...");
  EXPECT_EQ(seen_body["max_tokens"], 32);
  EXPECT_EQ(seen_body["temperature"], 0.0);
  EXPECT_EQ(seen_body["seed"], 7);
}

TEST(OpenAiChat, ContentFilterIsRefusalWithPayload) {
  LocalServer srv;
  const std::string body = R"({"choices":[{"finish_reason":"content_filter","message":{"content":null}}]})";
  srv.server().Post("/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content(body, "application/json");
  });
  OpenAiChatBackend backend(srv.start(), "");
  try {
    backend.complete(request());
    FAIL();
  } catch (const RefusalError& ex) {
    EXPECT_EQ(ex.payload(), body);
  }
}

TEST(OpenAiChat, ServerErrorsRetryThroughGateway) {
  LocalServer srv;
  std::mutex mu;
  int calls = 0;
  srv.server().Post("/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
    std::lock_guard lock(mu);
    if (++calls < 3) {
      res.status = calls == 1 ? 503 : 429;
      res.set_content("busy", "text/plain");
      return;
    }
    res.set_content(R"({"choices":[{"message":{"content":"done"}}]})", "application/json");
  });
  auto backend = std::make_shared<OpenAiChatBackend>(srv.start(), "");
  LlmGateway gw(backend, nullptr, {3, std::chrono::milliseconds(0), 2.0});
  const auto rec = gw.generate(request());
  EXPECT_EQ(rec.response_text, "done");
  EXPECT_EQ(rec.attempt, 3);
}

TEST(OpenAiChat, ClientErrorIsNotRetried) {
  LocalServer srv;
  int calls = 0;
  srv.server().Post("/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = 400;
    res.set_content(R"({"error":"bad"})", "application/json");
  });
  auto backend = std::make_shared<OpenAiChatBackend>(srv.start(), "");
  LlmGateway gw(backend, nullptr, {3, std::chrono::milliseconds(0), 2.0});
  EXPECT_THROW(gw.generate(request()), GatewayError);
  EXPECT_EQ(calls, 1);
}

TEST(OpenAiChat, UnreachableServerIsGatewayError) {
  LocalServer srv;
  const auto base = srv.start();
  srv.stop();
  HttpOptions opts;
  opts.connect_timeout = std::chrono::seconds(1);
  auto backend = std::make_shared<OpenAiChatBackend>(base, "", opts);
  LlmGateway gw(backend, nullptr, {1, std::chrono::milliseconds(0), 2.0});
  try {
    gw.generate(request());
    FAIL();
  } catch (const GatewayError& ex) {
    EXPECT_EQ(ex.attempts(), 2);
  }
}

TEST(LocalGenerate, SendsGenerateSchema) {
  LocalServer srv;
  nlohmann::json seen;
  srv.server().Post("/generate", [&](const httplib::Request& req, httplib::Response& res) {
    seen = nlohmann::json::parse(req.body);
    res.set_content(R"({"generated_text":"neutral, because ..."})", "application/json");
  });
  LocalGenerateBackend backend(srv.start());
  EXPECT_EQ(backend.complete(request(3)), "neutral, because ...");
  EXPECT_EQ(seen["inputs"], "Given the sentence \"x\", ...");
  EXPECT_EQ(seen["parameters"]["max_new_tokens"], 32);
  EXPECT_EQ(seen["parameters"]["do_sample"], false);
  EXPECT_EQ(seen["parameters"]["seed"], 3);
}

TEST(LocalGenerate, ArrayResponseAndMissingField) {
  LocalServer srv;
  int calls = 0;
  srv.server().Post("/generate", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content(++calls == 1 ? R"([{"generated_text":"a"}])" : R"({"other":1})", "application/json");
  });
  LocalGenerateBackend backend(srv.start());
  EXPECT_EQ(backend.complete(request()), "a");
  EXPECT_THROW(backend.complete(request()), RefusalError);
}
