#pragma once

// Synthetic scenario families. Step difficulty follows a two-component
// mixture over initial-token entropy: a tight low component (routine steps)
// and a high component (pivots), with errors on the small model concentrated
// in the high component.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "steproute/analysis.hpp"
#include "steproute/errors.hpp"
#include "steproute/sim_script.hpp"
#include "steproute/uncertainty.hpp"

namespace steproute {

struct BimodalParams {
  double low_mean = 0.08;
  double low_sd = 0.06;
  double high_mean = 1.6;
  double high_sd = 0.3;
  double high_weight = 0.25;      // probability that a step comes from the high component
  double high_error_prob = 0.5;   // probability that the small model gets a high step wrong
  std::int64_t min_body_tokens = 30;
  std::int64_t max_body_tokens = 80;
  double body_entropy_mean = 0.35;  // per-token entropy of the tokens after the first
  double body_entropy_sd = 0.1;
  bool identical_bodies = false;    // large body equals small body
  int top_k = kDefaultTopK;

  void validate() const {
    auto finite_nonneg = [](double v) { return std::isfinite(v) && v >= 0.0; };
    if (!finite_nonneg(low_mean)) throw ConfigError("bimodal.low_mean", "must be finite and >= 0");
    if (!finite_nonneg(low_sd)) throw ConfigError("bimodal.low_sd", "must be finite and >= 0");
    if (!finite_nonneg(high_mean)) throw ConfigError("bimodal.high_mean", "must be finite and >= 0");
    if (!finite_nonneg(high_sd)) throw ConfigError("bimodal.high_sd", "must be finite and >= 0");
    if (!(high_weight >= 0.0 && high_weight <= 1.0)) throw ConfigError("bimodal.high_weight", "must be in [0, 1]");
    if (!(high_error_prob >= 0.0 && high_error_prob <= 1.0))
      throw ConfigError("bimodal.high_error_prob", "must be in [0, 1]");
    if (min_body_tokens < 3) throw ConfigError("bimodal.min_body_tokens", "must be >= 3");
    if (max_body_tokens < min_body_tokens) throw ConfigError("bimodal.max_body_tokens", "must be >= min_body_tokens");
    if (!finite_nonneg(body_entropy_mean)) throw ConfigError("bimodal.body_entropy_mean", "must be finite and >= 0");
    if (!finite_nonneg(body_entropy_sd)) throw ConfigError("bimodal.body_entropy_sd", "must be finite and >= 0");
    if (top_k < 2) throw ConfigError("bimodal.top_k", "must be >= 2");
  }
};

/// A mode plus k-1 equally likely alternatives whose entropy is `h` nats
/// (clamped to what k outcomes can carry). The mode probability is found by
/// bisection; entropy falls monotonically as it grows from 1/k to 1.
inline TokenDistribution distribution_with_entropy(double h, const std::string& mode,
                                                   const std::vector<std::string>& alternatives) {
  const auto k = static_cast<double>(alternatives.size() + 1);
  if (alternatives.empty()) throw ConfigError("alternatives", "need at least one alternative token");
  const double h_max = std::log(k);
  h = std::clamp(h, 1e-4, h_max - 1e-3);
  auto entropy_at = [&](double p) {
    const double q = (1.0 - p) / (k - 1.0);
    return -detail::plogp(p) - (k - 1.0) * detail::plogp(q);
  };
  double lo = 1.0 / k, hi = 1.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (entropy_at(mid) > h ? lo : hi) = mid;
  }
  const double p = lo;
  const double q = (1.0 - p) / (k - 1.0);
  std::vector<TokenEntry> entries{{mode, p}};
  for (const auto& a : alternatives) entries.push_back({a, q});
  // Absorb the rounding residue into the mode so the mass check is exact enough.
  double sum = 0.0;
  for (const auto& e : entries) sum += e.probability;
  entries.front().probability += 1.0 - sum;
  return TokenDistribution(std::move(entries), 0.0);
}

namespace detail {

inline const std::vector<std::string>& routine_openers() {
  static const std::vector<std::string> v{"So", "Then", "Next", "Now", "Therefore", "Thus"};
  return v;
}

inline const std::vector<std::string>& pivot_openers() {
  static const std::vector<std::string> v{"Wait", "But", "Maybe", "Alternatively", "Hmm", "Actually"};
  return v;
}

inline const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> v{
      "the",    "sum",   "of",      "each",   "term",    "gives",  "value",  "we",      "check",  "that",
      "number", "is",    "even",    "odd",    "so",      "count",  "ways",   "to",      "reach",  "point",
      "grid",   "path",  "moves",   "right",  "up",      "digit",  "binary", "base",    "power",  "two",
      "factor", "prime", "divides", "remain", "mod",     "case",   "first",  "second",  "third",  "last",
      "angle",  "side",  "length",  "area",   "circle",  "radius", "square", "root",    "equals", "product",
      "ratio",  "bound", "upper",   "lower",  "compute", "list",   "all",    "options", "which",  "fits"};
  return v;
}

// Candidate tokens other than the mode, for a probe distribution.
inline std::vector<std::string> alternatives_for(const std::string& mode, int k) {
  std::vector<std::string> pool = routine_openers();
  pool.insert(pool.end(), pivot_openers().begin(), pivot_openers().end());
  pool.insert(pool.end(), {"Let", "We", "The", "If", "Since", "For", "Compute", "Check", "Note", "Recall",
                           "Consider", "Suppose", "Hence", "First", "Second", "Finally"});
  std::vector<std::string> out;
  for (const auto& t : pool) {
    if (static_cast<int>(out.size()) + 1 >= k) break;
    if (t != mode) out.push_back(t);
  }
  for (int i = 0; static_cast<int>(out.size()) + 1 < k; ++i) out.push_back("Alt" + std::to_string(i));
  return out;
}

// `opener` followed by filler words and a full stop; `tokens` counts every
// scripted token including the opener, the stop, and the delimiter if any.
inline std::string make_body(const std::string& opener, std::int64_t tokens, bool with_delimiter,
                             const std::string& delimiter, std::mt19937_64& rng) {
  const auto& words = filler_words();
  std::uniform_int_distribution<std::size_t> pick(0, words.size() - 1);
  std::string body = opener;
  const std::int64_t fillers = tokens - 2 - (with_delimiter ? 1 : 0);
  for (std::int64_t i = 0; i < fillers; ++i) body += " " + words[pick(rng)];
  body += ".";
  if (with_delimiter) body += delimiter;
  return body;
}

}  // namespace detail

/// A deterministic scenario of `n_steps` steps whose initial-token entropies
/// come from the two-component mixture. Labels record the component.
inline Scenario build_distribution_scenario(std::uint64_t seed, std::size_t n_steps, const BimodalParams& params = {},
                                            const SegmenterConfig& seg = {}) {
  params.validate();
  if (n_steps < 1) throw ConfigError("n_steps", "must be >= 1");
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution is_high(params.high_weight);
  std::bernoulli_distribution small_wrong(params.high_error_prob);
  std::normal_distribution<double> low(params.low_mean, params.low_sd);
  std::normal_distribution<double> high(params.high_mean, params.high_sd);
  std::normal_distribution<double> body_h(params.body_entropy_mean, params.body_entropy_sd);
  std::uniform_int_distribution<std::int64_t> length(params.min_body_tokens, params.max_body_tokens);
  const double h_cap = std::log(static_cast<double>(params.top_k)) - 1e-3;

  Scenario sc;
  sc.question = "Synthetic problem " + std::to_string(seed) + ": follow the steps and report the result.";
  const std::string value = std::to_string(seed % 1000);
  sc.answer = "Putting the steps together, every quantity above reduces to one number, and checking it against the question leaves no other candidate. The result is \\boxed{" + value + "}.";
  sc.answer_oracle = value;

  for (std::size_t i = 0; i < n_steps; ++i) {
    const bool hi = is_high(rng);
    const double h = std::clamp(std::abs(hi ? high(rng) : low(rng)), 0.0, h_cap);
    const auto& openers = hi ? detail::pivot_openers() : detail::routine_openers();
    const std::string mode = openers[std::uniform_int_distribution<std::size_t>(0, openers.size() - 1)(rng)];
    const bool last = i + 1 == n_steps;
    const std::int64_t n_tokens = length(rng);

    StepScript s;
    s.probe = distribution_with_entropy(h, mode, detail::alternatives_for(mode, params.top_k));
    s.small_body = detail::make_body(mode, n_tokens, !last, seg.delimiter, rng);
    s.large_body = params.identical_bodies ? s.small_body
                                           : detail::make_body("Let", n_tokens, !last, seg.delimiter, rng);
    s.small_correct = !hi || !small_wrong(rng);
    s.large_correct = true;
    s.label = hi ? "high" : "low";

    const auto n = scripted_tokenize(s.small_body).size();
    s.small_scores.reserve(n);
    s.small_scores.push_back({std::log(s.probe.mode().probability), shannon_entropy(s.probe)});
    for (std::size_t t = 1; t < n; ++t) {
      const double e = std::max(0.0, body_h(rng));
      s.small_scores.push_back({-0.5 * e, e});
    }
    sc.steps.push_back(std::move(s));
  }
  validate_scenario(sc, seg);
  return sc;
}

/// Small/large text pairs whose divergence grows with h_init past `onset`: the
/// large text replaces the last m words of the small text, m rising linearly
/// from 0 at `onset` to every word at ln(top_k). Words within a text are
/// distinct and replacements come from a disjoint vocabulary, so overlap is a
/// non-increasing function of h_init.
inline std::vector<AlignmentPair> build_alignment_family(std::uint64_t seed, std::size_t n_pairs,
                                                         const BimodalParams& params = {}, double onset = 1.0,
                                                         std::size_t words = 24) {
  params.validate();
  const auto& vocab = detail::filler_words();
  if (words < 1 || words > vocab.size()) throw ConfigError("words", "must be in [1, vocabulary size]");
  const double h_max = std::log(static_cast<double>(params.top_k));
  if (!(onset >= 0.0 && onset < h_max)) throw ConfigError("onset", "must be in [0, ln top_k)");
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution is_high(params.high_weight);
  std::normal_distribution<double> low(params.low_mean, params.low_sd);
  std::normal_distribution<double> high(params.high_mean, params.high_sd);

  std::vector<AlignmentPair> out;
  out.reserve(n_pairs);
  for (std::size_t i = 0; i < n_pairs; ++i) {
    AlignmentPair p;
    p.h_init = std::clamp(std::abs(is_high(rng) ? high(rng) : low(rng)), 0.0, h_max);
    std::vector<std::string> base = vocab;
    std::shuffle(base.begin(), base.end(), rng);
    base.resize(words);
    const double frac = std::clamp((p.h_init - onset) / (h_max - onset), 0.0, 1.0);
    const auto m = static_cast<std::size_t>(std::lround(frac * static_cast<double>(words)));
    for (std::size_t w = 0; w < words; ++w) {
      if (w) {
        p.small_text += ' ';
        p.large_text += ' ';
      }
      p.small_text += base[w];
      p.large_text += w + m >= words ? "zz" + std::to_string(w) : base[w];
    }
    p.provenance = "synthetic:" + std::to_string(seed) + ":" + std::to_string(i);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace steproute
