#pragma once

// HTTP front door: an OpenAI-style chat-completions endpoint that runs the
// routing loop per request, persists a trace record, and serves records back
// by id.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <utility>

#include <httplib.h>
#include <json.hpp>

#include "steproute/config.hpp"
#include "steproute/errors.hpp"
#include "steproute/routing.hpp"
#include "steproute/trace_io.hpp"

namespace steproute {

enum class LogLevel { Debug, Info, Warn, Error };

inline LogLevel parse_log_level(std::string_view s) {
  if (s == "debug") return LogLevel::Debug;
  if (s == "warn") return LogLevel::Warn;
  if (s == "error") return LogLevel::Error;
  return LogLevel::Info;
}

class Logger {
 public:
  explicit Logger(LogLevel min = LogLevel::Info, std::ostream& out = std::clog) : min_(min), out_(&out) {}

  void log(LogLevel level, const std::string& msg) {
    if (level < min_) return;
    static constexpr const char* names[] = {"debug", "info", "warn", "error"};
    std::lock_guard lock(mu_);
    *out_ << utc_timestamp() << ' ' << names[static_cast<int>(level)] << ' ' << msg << '\n';
  }

 private:
  LogLevel min_;
  std::ostream* out_;
  std::mutex mu_;
};

/// Builds the two backends for one request, given the effective policy.
using BackendProvider = std::function<OwnedBackends(const PolicyConfig&)>;

struct ServiceOptions {
  PolicyConfig policy;
  bool include_think = true;
  std::string model_name = "steproute";
};

struct HttpReply {
  int status = 200;
  nlohmann::json body;
};

class RouterService {
 public:
  RouterService(ServiceOptions options, BackendProvider provider, std::shared_ptr<TraceSink> sink = nullptr,
                std::shared_ptr<Logger> logger = std::make_shared<Logger>())
      : options_(std::move(options)), provider_(std::move(provider)), sink_(std::move(sink)),
        logger_(std::move(logger)) {
    options_.policy.validate();
    std::random_device rd;
    salt_ = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
  }

  /// Handles one chat-completions request body.
  HttpReply chat_completion(const std::string& raw_body) {
    nlohmann::json req;
    try {
      req = nlohmann::json::parse(raw_body);
    } catch (const nlohmann::json::parse_error&) {
      return error_reply(400, "invalid_request_error", "request body is not valid JSON");
    }
    std::string question;
    PolicyConfig policy = options_.policy;
    try {
      question = last_user_message(req);
      if (auto it = req.find("max_tokens"); it != req.end() && !it->is_null())
        policy.budget_tokens = std::min<std::int64_t>(policy.budget_tokens, it->get<std::int64_t>());
      if (auto it = req.find("temperature"); it != req.end() && !it->is_null())
        policy.sampling.temperature = it->get<double>();
      if (auto it = req.find("top_p"); it != req.end() && !it->is_null()) policy.sampling.top_p = it->get<double>();
      policy.validate();
    } catch (const ConfigError& e) {
      return error_reply(400, "invalid_request_error", e.what());
    } catch (const MalformedInput& e) {
      return error_reply(400, "invalid_request_error", e.what());
    } catch (const nlohmann::json::exception&) {
      return error_reply(400, "invalid_request_error", "request field has the wrong type");
    }

    TraceRecord record;
    record.request_id = next_id();
    record.timestamp = utc_timestamp();
    try {
      OwnedBackends backends = provider_(policy);
      record.trace = run_trace(question, backends.pair(), policy);
    } catch (const TraceAborted& e) {
      record.trace = e.partial();
      record.status = "failed";
      record.error = e.what();
      persist(record);
      logger_->log(LogLevel::Warn, record.request_id + " failed: " + e.what());
      HttpReply r = error_reply(502, "upstream_error", e.what());
      r.body["error"]["trace_id"] = record.request_id;
      return r;
    } catch (const Error& e) {
      record.status = "failed";
      record.error = e.what();
      record.trace.question = question;
      persist(record);
      HttpReply r = error_reply(502, "upstream_error", e.what());
      r.body["error"]["trace_id"] = record.request_id;
      return r;
    }
    persist(record);
    logger_->log(LogLevel::Info, record.request_id + " steps=" + std::to_string(record.trace.steps.size()) +
                                     " rate=" + std::to_string(record.trace.accounting.intervention_rate));
    return {200, response_body(record, req.value("model", options_.model_name))};
  }

  std::optional<TraceRecord> lookup(const std::string& id) const {
    std::shared_lock lock(mu_);
    if (auto it = records_.find(id); it != records_.end()) return it->second;
    return std::nullopt;
  }

  nlohmann::json health() const {
    bool small = false, large = false;
    try {
      OwnedBackends b = provider_(options_.policy);
      small = b.small->healthy();
      large = b.large->healthy();
    } catch (const std::exception& e) {
      logger_->log(LogLevel::Warn, std::string("health check failed: ") + e.what());
    }
    return {{"status", small && large ? "ok" : "degraded"}, {"backends", {{"small", small}, {"large", large}}}};
  }

  void mount(httplib::Server& server) {
    server.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      const HttpReply r = chat_completion(req.body);
      res.status = r.status;
      res.set_content(r.body.dump(), "application/json");
    });
    server.Get(R"(/v1/traces/([A-Za-z0-9_\-]+))", [this](const httplib::Request& req, httplib::Response& res) {
      if (auto r = lookup(req.matches[1])) {
        res.set_content(record_to_json(*r).dump(), "application/json");
      } else {
        res.status = 404;
        res.set_content(error_reply(404, "not_found", "no trace with that id").body.dump(), "application/json");
      }
    });
    server.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) {
      res.set_content(health().dump(), "application/json");
    });
  }

 private:
  static HttpReply error_reply(int status, const std::string& type, const std::string& message) {
    return {status, {{"error", {{"message", message}, {"type", type}}}}};
  }

  static std::string last_user_message(const nlohmann::json& req) {
    const auto it = req.find("messages");
    if (it == req.end() || !it->is_array()) throw MalformedInput("messages must be an array");
    for (auto m = it->rbegin(); m != it->rend(); ++m) {
      if (m->value("role", std::string{}) != "user") continue;
      const auto& c = m->at("content");
      if (c.is_string()) return c.get<std::string>();
      std::string text;
      for (const auto& part : c) {
        if (part.value("type", std::string{}) == "text") text += part.value("text", std::string{});
      }
      return text;
    }
    throw MalformedInput("no user message");
  }

  std::string next_id() {
    std::ostringstream o;
    o << "tr-" << std::hex << salt_ << '-' << std::dec << counter_.fetch_add(1);
    return o.str();
  }

  void persist(const TraceRecord& r) {
    {
      std::unique_lock lock(mu_);
      records_[r.request_id] = r;
    }
    if (sink_) {
      try {
        sink_->append(r);
      } catch (const Error& e) {
        logger_->log(LogLevel::Error, e.what());
      }
    }
  }

  nlohmann::json response_body(const TraceRecord& r, const std::string& model) const {
    const auto& t = r.trace;
    const auto& seg = options_.policy.segmenter;
    std::string content = t.final_answer;
    if (options_.include_think) content = seg.think_open + "\n" + t.think_text() + seg.think_close + "\n\n" + content;
    const std::int64_t completion = t.accounting.small_tokens + t.accounting.large_tokens + t.accounting.answer_tokens;
    return {{"id", r.request_id},
            {"object", "chat.completion"},
            {"created", std::chrono::duration_cast<std::chrono::seconds>(
                            std::chrono::system_clock::now().time_since_epoch()).count()},
            {"model", model},
            {"choices",
             nlohmann::json::array({{{"index", 0},
                                     {"message", {{"role", "assistant"}, {"content", content}}},
                                     {"finish_reason", "stop"}}})},
            {"usage", {{"prompt_tokens", 0}, {"completion_tokens", completion}, {"total_tokens", completion}}},
            {"routing",
             {{"trace_id", r.request_id},
              {"steps", t.steps.size()},
              {"intervention_rate", t.accounting.intervention_rate}}}};
  }

  ServiceOptions options_;
  BackendProvider provider_;
  std::shared_ptr<TraceSink> sink_;
  std::shared_ptr<Logger> logger_;
  mutable std::shared_mutex mu_;
  std::map<std::string, TraceRecord> records_;
  std::atomic<std::uint64_t> counter_{1};
  std::uint64_t salt_ = 0;
};

}  // namespace steproute
