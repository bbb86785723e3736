#pragma once

// Service configuration: one JSON file, validated field by field before any
// backend is contacted.

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <string_view>

#include <json.hpp>

#include "steproute/errors.hpp"
#include "steproute/routing.hpp"
#include "steproute/uncertainty.hpp"

namespace steproute {

struct BackendConfig {
  std::string endpoint;  // http://host:port, optionally with a path prefix
  std::string model;
  int top_k = kDefaultTopK;
  std::string api_key_env;  // name of the environment variable holding the key
  double timeout_s = 120.0;
  int max_retries = 2;
  TailPolicy tail_policy = TailPolicy::TailBucket;

  friend bool operator==(const BackendConfig&, const BackendConfig&) = default;
};

struct ListenAddress {
  std::string host = "127.0.0.1";
  int port = 8080;

  friend bool operator==(const ListenAddress&, const ListenAddress&) = default;
};

struct ServiceConfig {
  ListenAddress listen;
  BackendConfig small;
  BackendConfig large;
  PolicyConfig policy;
  std::int64_t answer_max_tokens = 2048;
  std::string trace_sink = "traces.jsonl";
  std::string log_level = "info";
  bool include_think = true;
};

inline ListenAddress parse_listen(std::string_view s, std::string_view field = "listen") {
  const auto colon = s.rfind(':');
  if (colon == std::string_view::npos) throw ConfigError(std::string(field), "expected host:port");
  ListenAddress a;
  a.host = std::string(s.substr(0, colon));
  const std::string port(s.substr(colon + 1));
  try {
    std::size_t used = 0;
    a.port = std::stoi(port, &used);
    if (used != port.size()) throw std::invalid_argument(port);
  } catch (const std::exception&) {
    throw ConfigError(std::string(field), "port '" + port + "' is not a number");
  }
  if (a.host.empty()) throw ConfigError(std::string(field), "host is empty");
  if (a.port < 0 || a.port > 65535) throw ConfigError(std::string(field), "port out of range");
  return a;
}

namespace detail {

// Reads `key` from `obj` into `out` when present, turning type mismatches into
// ConfigErrors naming the full key path.
template <typename T>
void read_field(const nlohmann::json& obj, const std::string& prefix, const char* key, T& out) {
  const auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return;
  const std::string field = prefix.empty() ? key : prefix + "." + key;
  try {
    out = it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(field, "has the wrong type (" + std::string(it->type_name()) + ")");
  }
}

inline void reject_unknown(const nlohmann::json& obj, const std::string& prefix, std::set<std::string> known) {
  if (!obj.is_object()) throw ConfigError(prefix.empty() ? "config" : prefix, "must be a JSON object");
  for (const auto& [k, v] : obj.items()) {
    if (!known.count(k)) throw ConfigError(prefix.empty() ? k : prefix + "." + k, "unknown key");
  }
}

inline BackendConfig backend_from_json(const nlohmann::json& j, const std::string& prefix) {
  reject_unknown(j, prefix, {"endpoint", "model", "top_k", "api_key_env", "timeout_s", "max_retries", "tail_policy"});
  BackendConfig b;
  read_field(j, prefix, "endpoint", b.endpoint);
  read_field(j, prefix, "model", b.model);
  read_field(j, prefix, "top_k", b.top_k);
  read_field(j, prefix, "api_key_env", b.api_key_env);
  read_field(j, prefix, "timeout_s", b.timeout_s);
  read_field(j, prefix, "max_retries", b.max_retries);
  std::string tail = "tail_bucket";
  read_field(j, prefix, "tail_policy", tail);
  if (tail == "tail_bucket") {
    b.tail_policy = TailPolicy::TailBucket;
  } else if (tail == "renormalize") {
    b.tail_policy = TailPolicy::Renormalize;
  } else {
    throw ConfigError(prefix + ".tail_policy", "must be tail_bucket or renormalize");
  }
  return b;
}

inline void validate_backend(const BackendConfig& b, const std::string& prefix) {
  if (b.endpoint.empty()) throw ConfigError(prefix + ".endpoint", "is required");
  if (!b.endpoint.starts_with("http://")) throw ConfigError(prefix + ".endpoint", "must start with http://");
  if (b.model.empty()) throw ConfigError(prefix + ".model", "is required");
  if (b.top_k < 1) throw ConfigError(prefix + ".top_k", "must be >= 1");
  if (!(b.timeout_s > 0.0) || !std::isfinite(b.timeout_s)) throw ConfigError(prefix + ".timeout_s", "must be > 0");
  if (b.max_retries < 0) throw ConfigError(prefix + ".max_retries", "must be >= 0");
}

}  // namespace detail

inline void validate(const ServiceConfig& c) {
  detail::validate_backend(c.small, "small");
  detail::validate_backend(c.large, "large");
  c.policy.validate();
  if (c.answer_max_tokens < 1) throw ConfigError("policy.answer_max_tokens", "must be >= 1");
  if (c.trace_sink.empty()) throw ConfigError("trace_sink", "must not be empty");
  static const std::set<std::string> levels{"debug", "info", "warn", "error"};
  if (!levels.count(c.log_level)) throw ConfigError("log_level", "must be one of debug, info, warn, error");
}

inline ServiceConfig service_config_from_json(const nlohmann::json& j) {
  using detail::read_field;
  detail::reject_unknown(j, "", {"listen", "small", "large", "policy", "segmenter", "prompt_template", "trace_sink",
                                 "log_level", "include_think"});
  ServiceConfig c;
  if (auto it = j.find("listen"); it != j.end()) {
    if (!it->is_string()) throw ConfigError("listen", "must be a \"host:port\" string");
    c.listen = parse_listen(it->get<std::string>());
  }
  if (!j.contains("small")) throw ConfigError("small", "backend is required");
  if (!j.contains("large")) throw ConfigError("large", "backend is required");
  c.small = detail::backend_from_json(j["small"], "small");
  c.large = detail::backend_from_json(j["large"], "large");

  if (auto it = j.find("policy"); it != j.end()) {
    const auto& p = *it;
    detail::reject_unknown(p, "policy", {"policy", "threshold", "seed", "budget_tokens", "temperature", "top_p",
                                         "answer_max_tokens", "record_step_metrics"});
    std::string name(to_string(c.policy.policy));
    read_field(p, "policy", "policy", name);
    const auto parsed = parse_policy(name);
    if (!parsed) throw ConfigError("policy.policy", "unknown policy '" + name + "'");
    c.policy.policy = *parsed;
    read_field(p, "policy", "threshold", c.policy.threshold);
    read_field(p, "policy", "seed", c.policy.rng_seed);
    read_field(p, "policy", "budget_tokens", c.policy.budget_tokens);
    read_field(p, "policy", "temperature", c.policy.sampling.temperature);
    read_field(p, "policy", "top_p", c.policy.sampling.top_p);
    read_field(p, "policy", "answer_max_tokens", c.answer_max_tokens);
    read_field(p, "policy", "record_step_metrics", c.policy.record_step_metrics);
  }
  if (auto it = j.find("segmenter"); it != j.end()) {
    detail::reject_unknown(*it, "segmenter", {"delimiter", "think_open", "think_close"});
    read_field(*it, "segmenter", "delimiter", c.policy.segmenter.delimiter);
    read_field(*it, "segmenter", "think_open", c.policy.segmenter.think_open);
    read_field(*it, "segmenter", "think_close", c.policy.segmenter.think_close);
  }
  read_field(j, "", "prompt_template", c.policy.prompt_template);
  read_field(j, "", "trace_sink", c.trace_sink);
  read_field(j, "", "log_level", c.log_level);
  read_field(j, "", "include_think", c.include_think);
  validate(c);
  return c;
}

/// Loads and validates a config file. STEPROUTE_LISTEN overrides the listen
/// address.
inline ServiceConfig load_service_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config", std::string("invalid JSON: ") + e.what());
  }
  ServiceConfig c = service_config_from_json(j);
  if (const char* env = std::getenv("STEPROUTE_LISTEN"); env && *env) c.listen = parse_listen(env, "STEPROUTE_LISTEN");
  return c;
}

}  // namespace steproute
