#pragma once

// Step-wise Probe-then-Dispatch routing between a small and a large backend,
// plus the baseline policies used for ablations.
//
// Per step under the InitEntropy policy: the small backend emits one token
// with its distribution; if the entropy of that distribution exceeds the
// threshold the probe is dropped and the large backend writes the whole step
// from the unchanged context, otherwise the small backend continues from the
// probe. The final answer is always written by the large backend.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "steproute/backend.hpp"
#include "steproute/errors.hpp"
#include "steproute/segmenter.hpp"
#include "steproute/uncertainty.hpp"

namespace steproute {

enum class Policy { InitEntropy, StepEntropy, StepPerplexity, RandomScore, AlwaysSmall, AlwaysLarge };
enum class Action { Delegate, Intervene };

inline constexpr std::string_view to_string(Policy p) {
  switch (p) {
    case Policy::InitEntropy: return "init_entropy";
    case Policy::StepEntropy: return "step_entropy";
    case Policy::StepPerplexity: return "step_perplexity";
    case Policy::RandomScore: return "random_score";
    case Policy::AlwaysSmall: return "always_small";
    case Policy::AlwaysLarge: return "always_large";
  }
  return "?";
}

inline constexpr std::string_view to_string(Action a) { return a == Action::Intervene ? "intervene" : "delegate"; }
inline constexpr std::string_view to_string(ModelRole m) { return m == ModelRole::Large ? "large" : "small"; }

inline constexpr std::string_view to_string(Boundary b) {
  switch (b) {
    case Boundary::Delimiter: return "delimiter";
    case Boundary::ThinkClosed: return "think_closed";
    case Boundary::EOS: return "eos";
    case Boundary::Budget: return "budget";
  }
  return "?";
}

inline std::optional<Policy> parse_policy(std::string_view s) {
  for (auto p : {Policy::InitEntropy, Policy::StepEntropy, Policy::StepPerplexity, Policy::RandomScore,
                 Policy::AlwaysSmall, Policy::AlwaysLarge}) {
    if (s == to_string(p)) return p;
  }
  return std::nullopt;
}

struct SamplingParams {
  double temperature = 0.6;
  double top_p = 0.95;

  friend bool operator==(const SamplingParams&, const SamplingParams&) = default;
};

struct PolicyConfig {
  Policy policy = Policy::InitEntropy;
  double threshold = 0.9;
  std::uint64_t rng_seed = 0;
  std::int64_t budget_tokens = kDefaultReasoningBudget;
  SamplingParams sampling;
  SegmenterConfig segmenter;  // budget_tokens here is ignored; the field above governs
  std::string prompt_template{kDefaultPromptTemplate};
  bool record_step_metrics = false;  // collect logprobs on every step, for offline analysis

  void validate() const {
    if (!std::isfinite(threshold)) throw ConfigError("policy.threshold", "must be finite");
    if (budget_tokens < 1) throw ConfigError("policy.budget_tokens", "must be >= 1");
    if (!(sampling.temperature >= 0.0)) throw ConfigError("policy.temperature", "must be >= 0");
    if (!(sampling.top_p > 0.0 && sampling.top_p <= 1.0)) throw ConfigError("policy.top_p", "must be in (0, 1]");
    if (segmenter.delimiter.empty()) throw ConfigError("segmenter.delimiter", "must not be empty");
    if (segmenter.think_close.empty()) throw ConfigError("segmenter.think_close", "must not be empty");
  }
};

struct StepMetrics {
  std::optional<double> h_init;
  std::optional<double> h_step;
  std::optional<double> ppl_step;

  friend bool operator==(const StepMetrics&, const StepMetrics&) = default;
};

struct ReasoningStep {
  std::string text;
  ModelRole generator = ModelRole::Small;
  Boundary boundary = Boundary::Delimiter;
  std::int64_t token_count = 0;
  StepMetrics metrics;
  double latency_ms = 0.0;

  friend bool operator==(const ReasoningStep&, const ReasoningStep&) = default;
};

struct RoutingDecision {
  std::size_t step_index = 0;  // 1-based
  std::optional<double> h_init_nats;
  double score = 0.0;  // the value compared against the threshold
  double threshold = 0.0;
  Action action = Action::Delegate;
  bool probe_taken = false;
  bool probe_kept = false;
  std::string probe_token;
  std::int64_t sunk_tokens = 0;  // discarded candidate tokens (generate-then-measure)
  Policy policy = Policy::InitEntropy;

  /// Small-model tokens decoded for this step that do not appear in the chain.
  std::int64_t discarded_small_tokens() const noexcept {
    return sunk_tokens + ((probe_taken && !probe_kept) ? 1 : 0);
  }

  friend bool operator==(const RoutingDecision&, const RoutingDecision&) = default;
};

struct Accounting {
  std::int64_t small_tokens = 0;  // chain tokens by the small model + discarded probes + sunk candidates
  std::int64_t large_tokens = 0;  // chain tokens by the large model (answer excluded)
  std::int64_t probe_count = 0;
  std::int64_t sunk_tokens = 0;
  std::int64_t answer_tokens = 0;
  double small_ms = 0.0;
  double large_ms = 0.0;
  double think_ms = 0.0;
  double answer_ms = 0.0;
  double intervention_rate = 0.0;
  std::string latency_source = "wall";

  double total_ms() const noexcept { return think_ms + answer_ms; }

  friend bool operator==(const Accounting&, const Accounting&) = default;
};

struct Trace {
  std::string question;
  std::vector<ReasoningStep> steps;
  std::vector<RoutingDecision> decisions;
  std::string final_answer;
  ModelRole answer_generator = ModelRole::Large;
  Accounting accounting;

  std::string think_text() const {
    std::string out;
    for (const auto& s : steps) out += s.text;
    return out;
  }

  std::size_t interventions() const noexcept {
    std::size_t n = 0;
    for (const auto& d : decisions) n += d.action == Action::Intervene;
    return n;
  }

  /// Recomputes token totals and the intervention rate from steps and decisions.
  void recompute_totals() {
    auto& a = accounting;
    a.small_tokens = a.large_tokens = a.probe_count = a.sunk_tokens = 0;
    for (std::size_t i = 0; i < steps.size(); ++i) {
      const auto& s = steps[i];
      (s.generator == ModelRole::Small ? a.small_tokens : a.large_tokens) += s.token_count;
      if (i < decisions.size()) {
        const auto& d = decisions[i];
        a.small_tokens += d.discarded_small_tokens();
        a.probe_count += d.probe_taken;
        a.sunk_tokens += d.sunk_tokens;
      }
    }
    a.intervention_rate =
        decisions.empty() ? 0.0 : static_cast<double>(interventions()) / static_cast<double>(decisions.size());
  }

  friend bool operator==(const Trace&, const Trace&) = default;
};

/// Routing failed mid-trace; the steps produced so far travel with the error.
class TraceAborted : public Error {
 public:
  TraceAborted(const std::string& what, Trace partial) : Error(what), partial_(std::move(partial)) {}
  const Trace& partial() const noexcept { return partial_; }

 private:
  Trace partial_;
};

struct BackendPair {
  Backend& small;
  Backend& large;
};

/// Strict comparison: a tie delegates.
inline constexpr Action decide_init_entropy(double h_init, double threshold) noexcept {
  return h_init > threshold ? Action::Intervene : Action::Delegate;
}

struct StepResult {
  ReasoningStep step;
  RoutingDecision decision;
};

namespace detail {

class Stopwatch {
 public:
  double elapsed_ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline void fill_metrics(ReasoningStep& step, const std::optional<StepLogprobs>& lp) {
  if (!lp || lp->empty()) return;
  step.metrics.h_step = step_entropy(*lp);
  step.metrics.ppl_step = step_perplexity(*lp);
  if (!step.metrics.h_init) step.metrics.h_init = lp->front().entropy;
}

}  // namespace detail

/// Time spent per backend during one step, for accounting.
struct StepTiming {
  double small_ms = 0.0;
  double large_ms = 0.0;
};

/// Routes one reasoning step. `context` is the question prompt followed by all
/// previous step texts.
inline StepResult run_step(const std::string& context, BackendPair backends, const PolicyConfig& config,
                           std::mt19937_64& rng, std::int64_t budget_left, std::size_t step_index,
                           StepTiming* timing = nullptr) {
  StepResult r;
  auto& d = r.decision;
  d.step_index = step_index;
  d.threshold = config.threshold;
  d.policy = config.policy;

  StepTiming local;
  StepTiming& t = timing ? *timing : local;

  auto request = [&](std::string prefix, std::optional<TokenScore> prefix_score, bool want_lp) {
    StepRequest req;
    req.context = context;
    req.prefix = std::move(prefix);
    req.prefix_score = prefix_score;
    req.stop = config.segmenter;
    req.budget_left = budget_left;
    req.want_logprobs = want_lp || config.record_step_metrics;
    return req;
  };

  auto generate = [&](ModelRole role, const StepRequest& req) {
    detail::Stopwatch sw;
    StepOutput out = (role == ModelRole::Small ? backends.small : backends.large).generate_step(req);
    (role == ModelRole::Small ? t.small_ms : t.large_ms) += sw.elapsed_ms();
    return out;
  };

  auto finish = [&](ModelRole role, StepOutput out) {
    r.step.text = std::move(out.text);
    r.step.generator = role;
    r.step.boundary = out.boundary;
    r.step.token_count = static_cast<std::int64_t>(out.tokens.size());
    detail::fill_metrics(r.step, out.logprobs);
  };

  switch (config.policy) {
    case Policy::InitEntropy: {
      detail::Stopwatch sw;
      ProbeResult probe = backends.small.probe_first(context);
      t.small_ms += sw.elapsed_ms();
      const double h = initial_token_entropy(probe.distribution);
      d.probe_taken = true;
      d.probe_token = probe.token;
      d.h_init_nats = h;
      d.score = h;
      d.action = decide_init_entropy(h, config.threshold);
      r.step.metrics.h_init = h;
      if (d.action == Action::Delegate) {
        d.probe_kept = true;
        finish(ModelRole::Small,
               generate(ModelRole::Small, request(probe.token, TokenScore{probe.token_logprob, h}, false)));
      } else {
        finish(ModelRole::Large, generate(ModelRole::Large, request({}, std::nullopt, false)));
      }
      break;
    }
    case Policy::StepEntropy:
    case Policy::StepPerplexity: {
      StepOutput candidate = generate(ModelRole::Small, request({}, std::nullopt, true));
      const StepLogprobs& lp = candidate.logprobs.value();
      if (lp.empty()) {
        // Nothing to measure (immediate EOS): keep the empty candidate.
        d.action = Action::Delegate;
        finish(ModelRole::Small, std::move(candidate));
        break;
      }
      d.h_init_nats = lp.front().entropy;
      d.score = config.policy == Policy::StepEntropy ? step_entropy(lp) : step_perplexity(lp);
      d.action = d.score > config.threshold ? Action::Intervene : Action::Delegate;
      if (d.action == Action::Delegate) {
        finish(ModelRole::Small, std::move(candidate));
      } else {
        d.sunk_tokens = static_cast<std::int64_t>(candidate.tokens.size());
        finish(ModelRole::Large, generate(ModelRole::Large, request({}, std::nullopt, false)));
      }
      r.step.metrics.h_init = d.h_init_nats;
      break;
    }
    case Policy::RandomScore: {
      std::uniform_int_distribution<int> score(0, 9);
      d.score = score(rng);
      d.action = d.score > config.threshold ? Action::Intervene : Action::Delegate;
      const ModelRole role = d.action == Action::Intervene ? ModelRole::Large : ModelRole::Small;
      finish(role, generate(role, request({}, std::nullopt, false)));
      break;
    }
    case Policy::AlwaysSmall:
    case Policy::AlwaysLarge: {
      const bool large = config.policy == Policy::AlwaysLarge;
      d.action = large ? Action::Intervene : Action::Delegate;
      d.score = large ? 1.0 : 0.0;
      const ModelRole role = large ? ModelRole::Large : ModelRole::Small;
      finish(role, generate(role, request({}, std::nullopt, false)));
      break;
    }
  }
  r.step.latency_ms = t.small_ms + t.large_ms;
  return r;
}

inline std::string answer_context(const std::string& context, const SegmenterConfig& seg) {
  return context + seg.think_close + "\n\n";
}

/// Runs the routing loop until the think phase closes, the stream ends, or the
/// token budget is spent, then asks the large backend for the answer.
inline Trace run_trace(const std::string& question, BackendPair backends, const PolicyConfig& config) {
  config.validate();
  Trace trace;
  trace.question = question;
  std::mt19937_64 rng(config.rng_seed);
  std::string context = render_prompt(config.prompt_template, question);
  std::int64_t think_tokens = 0;

  auto close_accounting = [&] { trace.recompute_totals(); };

  try {
    for (std::size_t k = 1;; ++k) {
      const std::int64_t budget_left = config.budget_tokens - think_tokens;
      if (budget_left <= 0) break;
      StepTiming timing;
      StepResult r = run_step(context, backends, config, rng, budget_left, k, &timing);
      trace.accounting.small_ms += timing.small_ms;
      trace.accounting.large_ms += timing.large_ms;
      trace.accounting.think_ms += r.step.latency_ms;
      think_tokens += r.step.token_count;
      context += r.step.text;
      const Boundary b = r.step.boundary;
      trace.steps.push_back(std::move(r.step));
      trace.decisions.push_back(std::move(r.decision));
      if (b != Boundary::Delimiter) break;
    }
    detail::Stopwatch sw;
    AnswerOutput answer = backends.large.generate_answer(answer_context(context, config.segmenter));
    trace.accounting.answer_ms = sw.elapsed_ms();
    trace.accounting.large_ms += trace.accounting.answer_ms;
    trace.accounting.answer_tokens = answer.token_count;
    trace.final_answer = std::move(answer.text);
    trace.answer_generator = ModelRole::Large;
  } catch (const BackendError& e) {
    close_accounting();
    throw TraceAborted(e.what(), std::move(trace));
  }
  close_accounting();
  return trace;
}

/// Content of the last \boxed{...} in `text`, braces balanced; empty if none.
inline std::string boxed_answer(std::string_view text) {
  constexpr std::string_view tag = "\\boxed{";
  const auto pos = text.rfind(tag);
  if (pos == std::string_view::npos) return {};
  int depth = 1;
  std::string out;
  for (std::size_t i = pos + tag.size(); i < text.size(); ++i) {
    const char c = text[i];
    if (c == '{') ++depth;
    if (c == '}' && --depth == 0) return out;
    out.push_back(c);
  }
  return {};
}

struct OwnedBackends {
  std::unique_ptr<Backend> small;
  std::unique_ptr<Backend> large;

  BackendPair pair() { return {*small, *large}; }
};

struct SweepCell {
  double threshold = 0.0;
  std::size_t questions = 0;
  std::size_t failures = 0;
  std::size_t steps = 0;
  std::size_t interventions = 0;
  double mean_latency_ms = 0.0;
  double intervention_rate = 0.0;  // pooled over all steps of the cell
  std::optional<double> accuracy;
  std::vector<Trace> traces;
  std::vector<std::string> errors;
};

struct SweepReport {
  std::string policy;
  std::string latency_unit = "ms";
  std::vector<SweepCell> rows;
};

using BackendFactory = std::function<OwnedBackends(std::size_t question_index)>;
using LatencyModel = std::function<double(const Trace&, std::size_t question_index)>;
using AnswerOracle = std::function<bool(std::size_t question_index, const std::string& answer)>;

inline const std::vector<double>& default_sweep_thresholds() {
  static const std::vector<double> t{0.01, 0.1, 0.6, 0.9, 1.8};
  return t;
}

/// Runs every question at every threshold. Failed traces are recorded in the
/// cell and count as incorrect; they do not abort the sweep.
inline SweepReport sweep(std::span<const std::string> questions, const BackendFactory& make_backends,
                         std::span<const double> thresholds, PolicyConfig config,
                         const LatencyModel& latency_of = {}, const AnswerOracle& oracle = {}) {
  if (thresholds.empty()) throw ConfigError("thresholds", "must not be empty");
  SweepReport report;
  report.policy = std::string(to_string(config.policy));
  for (double tau : thresholds) {
    config.threshold = tau;
    SweepCell cell;
    cell.threshold = tau;
    cell.questions = questions.size();
    double latency_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t q = 0; q < questions.size(); ++q) {
      OwnedBackends b = make_backends(q);
      try {
        Trace t = run_trace(questions[q], b.pair(), config);
        latency_sum += latency_of ? latency_of(t, q) : t.accounting.total_ms();
        cell.steps += t.decisions.size();
        cell.interventions += t.interventions();
        if (oracle && oracle(q, t.final_answer)) ++correct;
        cell.traces.push_back(std::move(t));
      } catch (const TraceAborted& e) {
        ++cell.failures;
        cell.errors.push_back(e.what());
      } catch (const Error& e) {
        ++cell.failures;
        cell.errors.push_back(e.what());
      }
    }
    const std::size_t ok = cell.questions - cell.failures;
    cell.mean_latency_ms = ok ? latency_sum / static_cast<double>(ok) : 0.0;
    cell.intervention_rate =
        cell.steps ? static_cast<double>(cell.interventions) / static_cast<double>(cell.steps) : 0.0;
    if (oracle && cell.questions) cell.accuracy = static_cast<double>(correct) / static_cast<double>(cell.questions);
    report.rows.push_back(std::move(cell));
  }
  return report;
}

}  // namespace steproute
