#pragma once

// Integer-millisecond latency model for routed traces.
//
// Decode time is per token and per model. Handing the context to the other
// model costs a fixed overhead plus prefill of the tokens that model has not
// seen yet (prefix caching: everything up to the point where it last held the
// context is reused). Large-model decoding can optionally run as
// draft-then-verify speculative decoding.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "steproute/backend.hpp"
#include "steproute/errors.hpp"
#include "steproute/routing.hpp"

namespace steproute {

struct SpecDecoding {
  std::int64_t draft_length = 3;
  double acceptance_rate = 0.7;

  friend bool operator==(const SpecDecoding&, const SpecDecoding&) = default;
};

struct BackendProfile {
  std::int64_t small_decode_ms = 6;
  std::int64_t large_decode_ms = 24;
  std::int64_t prefill_ms_per_token = 1;
  std::int64_t switch_overhead_ms = 5;
  std::optional<SpecDecoding> spec;

  std::int64_t decode_ms(ModelRole m) const noexcept {
    return m == ModelRole::Small ? small_decode_ms : large_decode_ms;
  }

  void validate() const {
    if (small_decode_ms < 0) throw ConfigError("profile.small_decode_ms", "must be >= 0");
    if (large_decode_ms < 0) throw ConfigError("profile.large_decode_ms", "must be >= 0");
    if (prefill_ms_per_token < 0) throw ConfigError("profile.prefill_ms_per_token", "must be >= 0");
    if (switch_overhead_ms < 0) throw ConfigError("profile.switch_overhead_ms", "must be >= 0");
    if (spec) {
      if (spec->draft_length < 1) throw ConfigError("profile.spec_decoding.draft_length", "must be >= 1");
      if (!(spec->acceptance_rate >= 0.0 && spec->acceptance_rate <= 1.0))
        throw ConfigError("profile.spec_decoding.acceptance_rate", "must be in [0, 1]");
    }
  }

  friend bool operator==(const BackendProfile&, const BackendProfile&) = default;
};

/// Expected number of accepted draft tokens per verification cycle.
inline double expected_accepted_drafts(std::int64_t n, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("acceptance_rate", "must be in [0, 1]");
  if (n < 1) throw ConfigError("draft_length", "must be >= 1");
  if (alpha == 1.0) return static_cast<double>(n);
  return (1.0 - std::pow(alpha, static_cast<double>(n + 1))) / (1.0 - alpha) - 1.0;
}

/// Verification cycles needed for `tokens` large-model tokens.
inline std::int64_t spec_cycles(std::int64_t tokens, const SpecDecoding& s) {
  if (tokens <= 0) return 0;
  const double per_cycle = expected_accepted_drafts(s.draft_length, s.acceptance_rate) + 1.0;
  return static_cast<std::int64_t>(std::ceil(static_cast<double>(tokens) / per_cycle));
}

/// Large-model decode time for `tokens` under speculative decoding.
inline std::int64_t apply_spec_decoding(std::int64_t tokens, const BackendProfile& profile) {
  if (!profile.spec) throw ConfigError("profile.spec_decoding", "not configured");
  const auto& s = *profile.spec;
  const std::int64_t cycle = s.draft_length * profile.small_decode_ms + profile.large_decode_ms;
  return spec_cycles(tokens, s) * cycle;
}

struct LatencyEvent {
  enum class Kind { Probe, Decode, Answer };

  Kind kind = Kind::Decode;
  ModelRole model = ModelRole::Small;
  std::int64_t tokens = 0;
  std::int64_t appended = 0;  // tokens this event adds to the shared context
  std::size_t step = 0;       // 1-based step; 0 for the answer

  friend bool operator==(const LatencyEvent&, const LatencyEvent&) = default;
};

struct LatencyTerm {
  std::int64_t decode_ms = 0;
  std::int64_t switch_ms = 0;   // overhead + prefill, zero when the model did not change
  std::int64_t uncached = 0;    // tokens prefilled on the switch

  std::int64_t total() const noexcept { return decode_ms + switch_ms; }
};

struct LatencyBreakdown {
  std::int64_t total_ms = 0;
  std::vector<LatencyTerm> terms;  // parallel to the events
};

/// Decode time of one event, with speculative decoding applied to the large model.
inline std::int64_t decode_cost(const LatencyEvent& e, const BackendProfile& p) {
  if (e.model == ModelRole::Large && p.spec) return apply_spec_decoding(e.tokens, p);
  return e.tokens * p.decode_ms(e.model);
}

inline LatencyBreakdown simulate_latency_breakdown(const std::vector<LatencyEvent>& events,
                                                   const BackendProfile& profile) {
  profile.validate();
  LatencyBreakdown out;
  std::int64_t context = 0;
  std::int64_t cached[2] = {0, 0};
  std::optional<ModelRole> previous;
  for (const auto& e : events) {
    if (e.tokens < 0 || e.appended < 0 || e.appended > e.tokens)
      throw MalformedInput("latency event with inconsistent token counts");
    if (e.kind == LatencyEvent::Kind::Probe && (e.tokens != 1 || e.model != ModelRole::Small))
      throw MalformedInput("a probe is exactly one small-model token");
    LatencyTerm term;
    const int m = e.model == ModelRole::Small ? 0 : 1;
    if (previous && *previous != e.model) {
      term.uncached = context - cached[m];
      term.switch_ms = profile.switch_overhead_ms + profile.prefill_ms_per_token * term.uncached;
    }
    term.decode_ms = decode_cost(e, profile);
    context += e.appended;
    cached[m] = context;
    previous = e.model;
    out.total_ms += term.total();
    out.terms.push_back(term);
  }
  return out;
}

inline std::int64_t simulate_latency(const std::vector<LatencyEvent>& events, const BackendProfile& profile) {
  return simulate_latency_breakdown(events, profile).total_ms;
}

/// Model calls implied by a trace, in execution order.
inline std::vector<LatencyEvent> latency_events(const Trace& trace) {
  using K = LatencyEvent::Kind;
  std::vector<LatencyEvent> ev;
  for (std::size_t i = 0; i < trace.steps.size(); ++i) {
    const auto& s = trace.steps[i];
    const std::size_t k = i + 1;
    std::int64_t body = s.token_count;
    if (i < trace.decisions.size()) {
      const auto& d = trace.decisions[i];
      if (d.probe_taken) {
        const std::int64_t kept = d.probe_kept ? 1 : 0;
        ev.push_back({K::Probe, ModelRole::Small, 1, kept, k});
        body -= kept;
      }
      if (d.sunk_tokens > 0) ev.push_back({K::Decode, ModelRole::Small, d.sunk_tokens, 0, k});
    }
    if (body < 0) throw MalformedInput("step " + std::to_string(k) + " has fewer tokens than its kept probe");
    ev.push_back({K::Decode, s.generator, body, body, k});
  }
  ev.push_back({K::Answer, trace.answer_generator, trace.accounting.answer_tokens, trace.accounting.answer_tokens, 0});
  return ev;
}

/// Replaces the wall-clock timings of a trace with simulated ones.
inline std::int64_t simulate_trace(Trace& trace, const BackendProfile& profile) {
  const auto events = latency_events(trace);
  const auto b = simulate_latency_breakdown(events, profile);
  auto& a = trace.accounting;
  a.small_ms = a.large_ms = a.think_ms = a.answer_ms = 0.0;
  for (auto& s : trace.steps) s.latency_ms = 0.0;
  for (std::size_t i = 0; i < events.size(); ++i) {
    const auto& e = events[i];
    const auto ms = static_cast<double>(b.terms[i].total());
    (e.model == ModelRole::Small ? a.small_ms : a.large_ms) += ms;
    if (e.kind == LatencyEvent::Kind::Answer) {
      a.answer_ms += ms;
    } else {
      trace.steps[e.step - 1].latency_ms += ms;
      a.think_ms += ms;
    }
  }
  a.latency_source = "simulated";
  return b.total_ms;
}

}  // namespace steproute
