#pragma once

// Persisted trace records: one JSON object per line. Each record carries the
// full trace (so it re-parses to an equal Trace), flat per-step rows, and
// totals that are sums over the rows.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "steproute/errors.hpp"
#include "steproute/routing.hpp"

namespace steproute {

using nlohmann::json;

struct TraceRow {
  std::size_t index = 0;
  std::optional<double> h_init;
  Action action = Action::Delegate;
  ModelRole model = ModelRole::Small;
  std::int64_t tokens = 0;
  std::int64_t discarded_small_tokens = 0;
  bool probe_taken = false;
  double latency_ms = 0.0;
};

struct TraceTotals {
  double intervention_rate = 0.0;
  std::int64_t small_tokens = 0;
  std::int64_t large_tokens = 0;
  std::int64_t probe_count = 0;
  double think_latency_ms = 0.0;
  double answer_latency_ms = 0.0;
  double total_latency_ms = 0.0;

  friend bool operator==(const TraceTotals&, const TraceTotals&) = default;
};

struct TraceRecord {
  std::string request_id;
  std::string timestamp;  // ISO-8601 UTC
  std::string status = "ok";
  std::string error;
  Trace trace;

  std::vector<TraceRow> rows() const {
    std::vector<TraceRow> out;
    for (std::size_t i = 0; i < trace.steps.size(); ++i) {
      const auto& s = trace.steps[i];
      TraceRow r;
      r.index = i + 1;
      r.h_init = s.metrics.h_init;
      r.model = s.generator;
      r.tokens = s.token_count;
      r.latency_ms = s.latency_ms;
      if (i < trace.decisions.size()) {
        const auto& d = trace.decisions[i];
        r.action = d.action;
        r.h_init = d.h_init_nats ? d.h_init_nats : r.h_init;
        r.discarded_small_tokens = d.discarded_small_tokens();
        r.probe_taken = d.probe_taken;
      }
      out.push_back(r);
    }
    return out;
  }

  TraceTotals totals() const {
    TraceTotals t;
    std::size_t interventions = 0;
    for (const auto& r : rows()) {
      (r.model == ModelRole::Small ? t.small_tokens : t.large_tokens) += r.tokens;
      t.small_tokens += r.discarded_small_tokens;
      t.probe_count += r.probe_taken;
      t.think_latency_ms += r.latency_ms;
      interventions += r.action == Action::Intervene;
    }
    const auto n = trace.steps.size();
    t.intervention_rate = n ? static_cast<double>(interventions) / static_cast<double>(n) : 0.0;
    t.answer_latency_ms = trace.accounting.answer_ms;
    t.total_latency_ms = t.think_latency_ms + t.answer_latency_ms;
    return t;
  }
};

inline std::string utc_timestamp(std::chrono::system_clock::time_point tp = std::chrono::system_clock::now()) {
  const std::time_t t = std::chrono::system_clock::to_time_t(tp);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

namespace detail {

template <typename E>
E enum_from(const json& j, std::string_view field, std::initializer_list<E> values) {
  const auto s = j.get<std::string>();
  for (E v : values) {
    if (s == to_string(v)) return v;
  }
  throw MalformedInput("unknown " + std::string(field) + " '" + s + "'");
}

inline json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline std::optional<double> opt_double(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return it->get<double>();
}

inline ModelRole role_from(const json& j) { return enum_from(j, "model", {ModelRole::Small, ModelRole::Large}); }

}  // namespace detail

inline json trace_to_json(const Trace& t) {
  json steps = json::array();
  for (const auto& s : t.steps) {
    steps.push_back({{"text", s.text},
                     {"generator", to_string(s.generator)},
                     {"boundary", to_string(s.boundary)},
                     {"token_count", s.token_count},
                     {"h_init", detail::opt(s.metrics.h_init)},
                     {"h_step", detail::opt(s.metrics.h_step)},
                     {"ppl_step", detail::opt(s.metrics.ppl_step)},
                     {"latency_ms", s.latency_ms}});
  }
  json decisions = json::array();
  for (const auto& d : t.decisions) {
    decisions.push_back({{"step_index", d.step_index},
                         {"h_init", detail::opt(d.h_init_nats)},
                         {"score", d.score},
                         {"threshold", d.threshold},
                         {"action", to_string(d.action)},
                         {"probe_taken", d.probe_taken},
                         {"probe_kept", d.probe_kept},
                         {"probe_token", d.probe_token},
                         {"sunk_tokens", d.sunk_tokens},
                         {"policy", to_string(d.policy)}});
  }
  const auto& a = t.accounting;
  return {{"question", t.question},
          {"steps", steps},
          {"decisions", decisions},
          {"final_answer", t.final_answer},
          {"answer_generator", to_string(t.answer_generator)},
          {"accounting",
           {{"small_tokens", a.small_tokens},
            {"large_tokens", a.large_tokens},
            {"probe_count", a.probe_count},
            {"sunk_tokens", a.sunk_tokens},
            {"answer_tokens", a.answer_tokens},
            {"small_ms", a.small_ms},
            {"large_ms", a.large_ms},
            {"think_ms", a.think_ms},
            {"answer_ms", a.answer_ms},
            {"intervention_rate", a.intervention_rate},
            {"latency_source", a.latency_source}}}};
}

inline Trace trace_from_json(const json& j) {
  Trace t;
  t.question = j.at("question").get<std::string>();
  for (const auto& s : j.at("steps")) {
    ReasoningStep r;
    r.text = s.at("text").get<std::string>();
    r.generator = detail::role_from(s.at("generator"));
    r.boundary = detail::enum_from(s.at("boundary"), "boundary",
                                   {Boundary::Delimiter, Boundary::ThinkClosed, Boundary::EOS, Boundary::Budget});
    r.token_count = s.at("token_count").get<std::int64_t>();
    r.metrics.h_init = detail::opt_double(s, "h_init");
    r.metrics.h_step = detail::opt_double(s, "h_step");
    r.metrics.ppl_step = detail::opt_double(s, "ppl_step");
    r.latency_ms = s.at("latency_ms").get<double>();
    t.steps.push_back(std::move(r));
  }
  for (const auto& d : j.at("decisions")) {
    RoutingDecision r;
    r.step_index = d.at("step_index").get<std::size_t>();
    r.h_init_nats = detail::opt_double(d, "h_init");
    r.score = d.at("score").get<double>();
    r.threshold = d.at("threshold").get<double>();
    r.action = detail::enum_from(d.at("action"), "action", {Action::Delegate, Action::Intervene});
    r.probe_taken = d.at("probe_taken").get<bool>();
    r.probe_kept = d.at("probe_kept").get<bool>();
    r.probe_token = d.at("probe_token").get<std::string>();
    r.sunk_tokens = d.at("sunk_tokens").get<std::int64_t>();
    const auto p = parse_policy(d.at("policy").get<std::string>());
    if (!p) throw MalformedInput("unknown policy in trace record");
    r.policy = *p;
    t.decisions.push_back(std::move(r));
  }
  t.final_answer = j.at("final_answer").get<std::string>();
  t.answer_generator = detail::role_from(j.at("answer_generator"));
  const auto& a = j.at("accounting");
  auto& acc = t.accounting;
  acc.small_tokens = a.at("small_tokens").get<std::int64_t>();
  acc.large_tokens = a.at("large_tokens").get<std::int64_t>();
  acc.probe_count = a.at("probe_count").get<std::int64_t>();
  acc.sunk_tokens = a.at("sunk_tokens").get<std::int64_t>();
  acc.answer_tokens = a.at("answer_tokens").get<std::int64_t>();
  acc.small_ms = a.at("small_ms").get<double>();
  acc.large_ms = a.at("large_ms").get<double>();
  acc.think_ms = a.at("think_ms").get<double>();
  acc.answer_ms = a.at("answer_ms").get<double>();
  acc.intervention_rate = a.at("intervention_rate").get<double>();
  acc.latency_source = a.at("latency_source").get<std::string>();
  return t;
}

inline json record_to_json(const TraceRecord& r) {
  json rows = json::array();
  for (const auto& row : r.rows()) {
    rows.push_back({{"index", row.index},
                    {"h_init", detail::opt(row.h_init)},
                    {"action", to_string(row.action)},
                    {"model", to_string(row.model)},
                    {"tokens", row.tokens},
                    {"discarded_small_tokens", row.discarded_small_tokens},
                    {"probe_taken", row.probe_taken},
                    {"latency_ms", row.latency_ms}});
  }
  const auto t = r.totals();
  json j{{"request_id", r.request_id},
         {"timestamp", r.timestamp},
         {"status", r.status},
         {"rows", rows},
         {"totals",
          {{"intervention_rate", t.intervention_rate},
           {"small_tokens", t.small_tokens},
           {"large_tokens", t.large_tokens},
           {"probe_count", t.probe_count},
           {"think_latency_ms", t.think_latency_ms},
           {"answer_latency_ms", t.answer_latency_ms},
           {"total_latency_ms", t.total_latency_ms}}},
         {"final_answer", r.trace.final_answer},
         {"trace", trace_to_json(r.trace)}};
  if (!r.error.empty()) j["error"] = r.error;
  return j;
}

/// Parses a record and checks that its stored rows and totals agree with the
/// embedded trace.
inline TraceRecord record_from_json(const json& j) {
  try {
    TraceRecord r;
    r.request_id = j.at("request_id").get<std::string>();
    r.timestamp = j.at("timestamp").get<std::string>();
    r.status = j.value("status", std::string("ok"));
    r.error = j.value("error", std::string{});
    r.trace = trace_from_json(j.at("trace"));
    const json expect = record_to_json(r);
    if (j.at("rows") != expect.at("rows")) throw MalformedInput("record rows disagree with its trace");
    if (j.at("totals") != expect.at("totals")) throw MalformedInput("record totals disagree with its rows");
    return r;
  } catch (const json::exception& e) {
    throw MalformedInput(std::string("trace record: ") + e.what());
  }
}

/// Append-only JSONL sink; safe to share between threads.
class TraceSink {
 public:
  explicit TraceSink(std::filesystem::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    out_.open(path_, std::ios::app);
    if (!out_) throw Error("cannot open trace sink " + path_.string());
  }

  void append(const TraceRecord& r) {
    const std::string line = record_to_json(r).dump();
    std::lock_guard lock(mu_);
    out_ << line << '\n';
    out_.flush();
    if (!out_) throw Error("write to trace sink " + path_.string() + " failed");
  }

  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
  std::mutex mu_;
  std::ofstream out_;
};

inline std::vector<TraceRecord> read_trace_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MalformedInput("cannot open trace file " + path.string());
  std::vector<TraceRecord> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(record_from_json(json::parse(line)));
    } catch (const json::parse_error& e) {
      throw MalformedInput(path.string() + ":" + std::to_string(n) + ": " + e.what());
    } catch (const MalformedInput& e) {
      throw MalformedInput(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace steproute
