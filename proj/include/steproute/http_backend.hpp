#pragma once

// Backend over an OpenAI-compatible /v1/completions endpoint (vLLM, SGLang,
// llama.cpp server and similar). Probes request one token with top-k
// logprobs; steps are streamed and cut client-side at the first boundary, so
// no server-side stop strings are needed.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "steproute/backend.hpp"
#include "steproute/config.hpp"
#include "steproute/errors.hpp"
#include "steproute/routing.hpp"
#include "steproute/uncertainty.hpp"

namespace steproute {

struct HttpEndpoint {
  std::string origin;  // scheme://host:port
  std::string prefix;  // path prefix without trailing slash, may be empty
};

inline HttpEndpoint parse_endpoint(std::string_view url) {
  constexpr std::string_view scheme = "http://";
  if (!url.starts_with(scheme)) throw ConfigError("endpoint", "must start with http://");
  const auto slash = url.find('/', scheme.size());
  HttpEndpoint e;
  e.origin = std::string(url.substr(0, slash));
  if (slash != std::string_view::npos) e.prefix = std::string(url.substr(slash));
  while (!e.prefix.empty() && e.prefix.back() == '/') e.prefix.pop_back();
  if (e.origin.size() == scheme.size()) throw ConfigError("endpoint", "host is empty");
  return e;
}

namespace detail {

// An HTTP failure worth retrying: no response, 429, or a 5xx.
class RetryableError : public TransportError {
 public:
  using TransportError::TransportError;
};

inline std::vector<RawLogprob> top_logprob_list(const nlohmann::json& top) {
  std::vector<RawLogprob> out;
  if (top.is_object()) {
    for (const auto& [tok, lp] : top.items()) out.push_back({tok, lp.get<double>()});
  } else if (top.is_array()) {
    // Chat-style [{token, logprob}] lists.
    for (const auto& e : top) out.push_back({e.at("token").get<std::string>(), e.at("logprob").get<double>()});
  }
  return out;
}

}  // namespace detail

class HttpBackend final : public Backend {
 public:
  HttpBackend(BackendConfig config, SamplingParams sampling, std::int64_t answer_max_tokens = 2048,
              std::string name = "http")
      : config_(std::move(config)),
        endpoint_(parse_endpoint(config_.endpoint)),
        sampling_(sampling),
        answer_max_tokens_(answer_max_tokens),
        name_(std::move(name)) {}

  std::string_view name() const override { return name_; }
  const BackendConfig& config() const noexcept { return config_; }

  /// Base delay before the first retry; doubles on each further attempt.
  void set_retry_backoff(std::chrono::milliseconds d) { backoff_ = d; }

  ProbeResult probe_first(std::string_view context) override {
    nlohmann::json body = base_request(context, 1);
    body["logprobs"] = config_.top_k;
    const auto res = with_retries([&] { return post_json(body); });
    const auto& choice = first_choice(res);
    const auto lp = choice.find("logprobs");
    if (lp == choice.end() || lp->is_null()) throw MissingLogprobs();
    const auto top = lp->find("top_logprobs");
    if (top == lp->end() || !top->is_array() || top->empty() || top->front().is_null()) throw MissingLogprobs();
    const auto raw = detail::top_logprob_list(top->front());
    if (raw.empty()) throw MissingLogprobs();

    ProbeResult p;
    p.distribution = normalize_probe(raw, config_.tail_policy);
    p.token = choice.value("text", std::string{});
    if (auto toks = lp->find("tokens"); toks != lp->end() && toks->is_array() && !toks->empty())
      p.token = toks->front().get<std::string>();
    p.token_logprob = std::log(p.distribution.mode().probability);
    if (auto tl = lp->find("token_logprobs"); tl != lp->end() && tl->is_array() && !tl->empty() && tl->front().is_number())
      p.token_logprob = std::min(0.0, tl->front().get<double>());
    return p;
  }

  StepOutput generate_step(const StepRequest& req) override {
    for (int attempt = 0;; ++attempt) {
      try {
        return stream_step(req);
      } catch (const detail::RetryableError& e) {
        if (attempt >= config_.max_retries) throw TransportError(name_ + ": " + e.what());
        sleep_before_retry(attempt);
      }
    }
  }

  AnswerOutput generate_answer(std::string_view context) override {
    nlohmann::json body = base_request(context, answer_max_tokens_);
    const auto res = with_retries([&] { return post_json(body); });
    const auto& choice = first_choice(res);
    AnswerOutput out;
    out.text = choice.value("text", std::string{});
    if (auto u = res.find("usage"); u != res.end() && u->is_object() && u->contains("completion_tokens"))
      out.token_count = (*u)["completion_tokens"].get<std::int64_t>();
    return out;
  }

  bool healthy() override {
    httplib::Client cli = client();
    cli.set_read_timeout(std::chrono::seconds(5));
    auto res = cli.Get(endpoint_.prefix + "/v1/models", headers());
    return res && res->status == 200;
  }

 private:
  httplib::Client client() const {
    httplib::Client cli(endpoint_.origin);
    const auto t = std::chrono::duration_cast<std::chrono::microseconds>(
        std::chrono::duration<double>(config_.timeout_s));
    cli.set_connection_timeout(std::chrono::seconds(10));
    cli.set_read_timeout(t);
    cli.set_write_timeout(t);
    return cli;
  }

  httplib::Headers headers() const {
    httplib::Headers h;
    if (!config_.api_key_env.empty()) {
      if (const char* key = std::getenv(config_.api_key_env.c_str()); key && *key)
        h.emplace("Authorization", std::string("Bearer ") + key);
    }
    return h;
  }

  nlohmann::json base_request(std::string_view prompt, std::int64_t max_tokens) const {
    return {{"model", config_.model},
            {"prompt", prompt},
            {"max_tokens", max_tokens},
            {"temperature", sampling_.temperature},
            {"top_p", sampling_.top_p}};
  }

  void sleep_before_retry(int attempt) const {
    std::this_thread::sleep_for(backoff_ * (1 << std::min(attempt, 10)));
  }

  template <typename F>
  nlohmann::json with_retries(F&& f) const {
    for (int attempt = 0;; ++attempt) {
      try {
        return f();
      } catch (const detail::RetryableError& e) {
        if (attempt >= config_.max_retries) throw TransportError(name_ + ": " + e.what());
        sleep_before_retry(attempt);
      }
    }
  }

  static void check_status(int status, const std::string& body) {
    if (status >= 200 && status < 300) return;
    const std::string msg = "HTTP " + std::to_string(status) + ": " + body.substr(0, 200);
    if (status == 429 || status >= 500) throw detail::RetryableError(msg);
    throw TransportError(msg);
  }

  nlohmann::json post_json(const nlohmann::json& body) const {
    httplib::Client cli = client();
    auto res = cli.Post(endpoint_.prefix + "/v1/completions", headers(), body.dump(), "application/json");
    if (!res) throw detail::RetryableError(name_ + ": " + httplib::to_string(res.error()));
    check_status(res->status, res->body);
    try {
      return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::parse_error& e) {
      throw TransportError(name_ + ": response is not JSON: " + e.what());
    }
  }

  static const nlohmann::json& first_choice(const nlohmann::json& res) {
    const auto c = res.find("choices");
    if (c == res.end() || !c->is_array() || c->empty()) throw TransportError("response has no choices");
    return c->front();
  }

  StepOutput stream_step(const StepRequest& req) {
    StepCollector collector(req.stop, req.budget_left, req.want_logprobs);
    if (!req.prefix.empty()) collector.push(req.prefix, req.prefix_score);
    if (collector.done()) return collector.take();

    nlohmann::json body = base_request(req.context + req.prefix, req.budget_left);
    body["stream"] = true;
    if (req.want_logprobs) body["logprobs"] = config_.top_k;

    int status = 0;
    std::string error_body;
    std::string buffer;
    std::size_t received = 0;
    bool finished = false;
    std::vector<std::string> partial;
    std::exception_ptr failure;

    auto handle_chunk = [&](const nlohmann::json& chunk) {
      const auto c = chunk.find("choices");
      if (c == chunk.end() || !c->is_array() || c->empty()) return;
      const auto& choice = c->front();
      const auto lp = choice.find("logprobs");
      const bool has_lp = lp != choice.end() && lp->is_object() && lp->contains("tokens");
      if (req.want_logprobs && !has_lp && !choice.value("text", std::string{}).empty()) throw MissingLogprobs();
      if (has_lp) {
        const auto& toks = (*lp)["tokens"];
        for (std::size_t i = 0; i < toks.size() && !collector.done(); ++i) {
          std::optional<TokenScore> score;
          if (req.want_logprobs) score = token_score(*lp, i);
          const auto t = toks[i].get<std::string>();
          partial.push_back(t);
          ++received;
          collector.push(t, score);
        }
      } else if (auto text = choice.value("text", std::string{}); !text.empty()) {
        partial.push_back(text);
        ++received;
        collector.push(text);
      }
      if (!choice.value("finish_reason", nlohmann::json()).is_null()) finished = true;
    };

    httplib::Request http;
    http.method = "POST";
    http.path = endpoint_.prefix + "/v1/completions";
    http.headers = headers();
    http.headers.emplace("Content-Type", "application/json");
    http.headers.emplace("Accept", "text/event-stream");
    http.body = body.dump();
    http.response_handler = [&](const httplib::Response& r) {
      status = r.status;
      return true;
    };
    http.content_receiver = [&](const char* data, std::size_t n, std::uint64_t, std::uint64_t) {
      if (status < 200 || status >= 300) {
        error_body.append(data, n);
        return true;
      }
      buffer.append(data, n);
      for (auto nl = buffer.find('\n'); nl != std::string::npos; nl = buffer.find('\n')) {
        std::string line = buffer.substr(0, nl);
        buffer.erase(0, nl + 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.starts_with("data:")) continue;
        std::string_view payload(line);
        payload.remove_prefix(5);
        while (!payload.empty() && payload.front() == ' ') payload.remove_prefix(1);
        if (payload == "[DONE]") {
          finished = true;
          return false;
        }
        // Errors are carried out of the callback rather than thrown through the HTTP client.
        try {
          handle_chunk(nlohmann::json::parse(payload));
        } catch (const nlohmann::json::exception&) {
          failure = std::make_exception_ptr(TransportError(name_ + ": malformed stream chunk"));
          return false;
        } catch (...) {
          failure = std::current_exception();
          return false;
        }
        if (collector.done()) return false;
      }
      return true;
    };

    httplib::Client cli = client();
    const auto res = cli.send(http);
    if (failure) std::rethrow_exception(failure);
    if (status != 0) check_status(status, error_body);
    const bool cancelled_by_us = !res && res.error() == httplib::Error::Canceled;
    if (!res && !cancelled_by_us) {
      if (received == 0) throw detail::RetryableError(name_ + ": " + httplib::to_string(res.error()));
      if (!collector.done() && !finished)
        throw StreamInterrupted(name_ + ": stream broke off after " + std::to_string(received) + " tokens", partial);
    }
    return collector.take();
  }

  TokenScore token_score(const nlohmann::json& lp, std::size_t i) const {
    TokenScore s;
    const auto tl = lp.find("token_logprobs");
    if (tl != lp.end() && tl->is_array() && i < tl->size() && (*tl)[i].is_number())
      s.logprob = std::min(0.0, (*tl)[i].get<double>());
    const auto top = lp.find("top_logprobs");
    if (top == lp.end() || !top->is_array() || i >= top->size() || (*top)[i].is_null()) throw MissingLogprobs();
    const auto raw = detail::top_logprob_list((*top)[i]);
    if (raw.empty()) throw MissingLogprobs();
    s.entropy = shannon_entropy(normalize_probe(raw, config_.tail_policy));
    return s;
  }

  BackendConfig config_;
  HttpEndpoint endpoint_;
  SamplingParams sampling_;
  std::int64_t answer_max_tokens_;
  std::string name_;
  std::chrono::milliseconds backoff_{200};
};

/// Small and large HTTP backends from a service config.
inline OwnedBackends http_pair(const ServiceConfig& c) {
  return {std::make_unique<HttpBackend>(c.small, c.policy.sampling, c.answer_max_tokens, "small:" + c.small.model),
          std::make_unique<HttpBackend>(c.large, c.policy.sampling, c.answer_max_tokens, "large:" + c.large.model)};
}

}  // namespace steproute
