#pragma once

#include <chrono>
#include <cstdlib>
#include <memory>
#include <string>
#include <utility>

// httplib pulls in <resolv.h>, whose `_res` macro clashes with Eigen internals;
// translation units using both must include Eigen first.
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "rvisa/error.hpp"
#include "rvisa/llm_gateway.hpp"

namespace rvisa {

struct HttpEndpoint {
  std::string origin;       // scheme://host[:port]
  std::string path_prefix;  // "" or "/v1" etc, no trailing slash
};

inline HttpEndpoint split_base_url(const std::string& base_url) {
  const auto scheme_end = base_url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("base URL needs a scheme: " + base_url);
  const auto path_start = base_url.find('/', scheme_end + 3);
  HttpEndpoint ep;
  ep.origin = base_url.substr(0, path_start);
  if (path_start != std::string::npos) ep.path_prefix = base_url.substr(path_start);
  while (!ep.path_prefix.empty() && ep.path_prefix.back() == '/') ep.path_prefix.pop_back();
  return ep;
}

struct HttpOptions {
  std::chrono::seconds connect_timeout{10};
  std::chrono::seconds read_timeout{120};
};

namespace detail {

inline bool retryable_status(int status) { return status == 408 || status == 429 || status >= 500; }

inline httplib::Result post_json(const HttpEndpoint& ep, const std::string& path,
                                 const httplib::Headers& headers, const std::string& body,
                                 const HttpOptions& opts) {
  httplib::Client client(ep.origin);
  client.set_connection_timeout(opts.connect_timeout);
  client.set_read_timeout(opts.read_timeout);
  return client.Post(ep.path_prefix + path, headers, body, "application/json");
}

inline nlohmann::json checked_body(const httplib::Result& res, const std::string& what) {
  if (!res) throw TransportError(what + ": " + httplib::to_string(res.error()));
  if (res->status != 200) {
    throw TransportError(what + ": HTTP " + std::to_string(res->status) + ": " + res->body,
                         retryable_status(res->status));
  }
  try {
    return nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::parse_error&) {
    throw TransportError(what + ": response is not JSON", false);
  }
}

}  // namespace detail

/// OpenAI-compatible chat completion endpoint (`{base_url}/chat/completions`).
/// The API key is read from the named environment variable on every call.
class OpenAiChatBackend final : public TextBackend {
 public:
  OpenAiChatBackend(std::string base_url, std::string api_key_env, HttpOptions opts = {})
      : endpoint_(split_base_url(base_url)), api_key_env_(std::move(api_key_env)), opts_(opts) {}

  static nlohmann::json payload(const GenerationRequest& r) {
    nlohmann::json body = {
        {"model", r.generator_id},
        {"messages", nlohmann::json::array({{{"role", "user"}, {"content", r.prompt.text}}})},
        {"temperature", r.temperature},
        {"max_tokens", r.max_new_tokens},
    };
    if (r.seed) body["seed"] = *r.seed;
    return body;
  }

  std::string complete(const GenerationRequest& request) override {
    httplib::Headers headers;
    if (!api_key_env_.empty()) {
      if (const char* key = std::getenv(api_key_env_.c_str()); key && *key) {
        headers.emplace("Authorization", std::string("Bearer ") + key);
      }
    }
    auto res = detail::post_json(endpoint_, "/chat/completions", headers, payload(request).dump(), opts_);
    const auto body = detail::checked_body(res, "chat completion");
    const auto& choices = body.value("choices", nlohmann::json::array());
    if (choices.empty()) throw RefusalError("chat completion returned no choices", res->body);
    const auto& choice = choices.front();
    if (choice.value("finish_reason", "") == "content_filter") {
      throw RefusalError("chat completion blocked by content filter", res->body);
    }
    const auto& msg = choice.value("message", nlohmann::json::object());
    if (msg.contains("refusal") && msg["refusal"].is_string()) {
      throw RefusalError("model refused: " + msg["refusal"].get<std::string>(), res->body);
    }
    if (!msg.contains("content") || !msg["content"].is_string()) return {};
    return msg["content"].get<std::string>();
  }

 private:
  HttpEndpoint endpoint_;
  std::string api_key_env_;
  HttpOptions opts_;
};

/// Local text-generation server speaking the `POST /generate` schema
/// ({"inputs", "parameters"} -> {"generated_text"}).
class LocalGenerateBackend final : public TextBackend {
 public:
  explicit LocalGenerateBackend(std::string base_url, HttpOptions opts = {})
      : endpoint_(split_base_url(base_url)), opts_(opts) {}

  static nlohmann::json payload(const GenerationRequest& r) {
    nlohmann::json params = {{"max_new_tokens", r.max_new_tokens}};
    if (r.temperature > 0.0) {
      params["do_sample"] = true;
      params["temperature"] = r.temperature;
    } else {
      params["do_sample"] = false;
    }
    if (r.seed) params["seed"] = *r.seed;
    return {{"inputs", r.prompt.text}, {"parameters", params}};
  }

  std::string complete(const GenerationRequest& request) override {
    auto res = detail::post_json(endpoint_, "/generate", {}, payload(request).dump(), opts_);
    const auto body = detail::checked_body(res, "generate");
    if (body.is_array() && !body.empty()) return body.front().value("generated_text", "");
    if (!body.contains("generated_text")) {
      throw RefusalError("generate response has no generated_text", res->body);
    }
    return body["generated_text"].get<std::string>();
  }

 private:
  HttpEndpoint endpoint_;
  HttpOptions opts_;
};

}  // namespace rvisa
