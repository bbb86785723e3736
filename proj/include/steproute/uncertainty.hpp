#pragma once

// Uncertainty metrics over next-token distributions and per-token logprob
// sequences. All values are in nats.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "steproute/errors.hpp"

namespace steproute {

inline constexpr double kMassTolerance = 1e-6;   // |sum - 1| accepted by the invariants
inline constexpr double kMassOvershoot = 1e-4;   // hard error threshold for raw logprob input
inline constexpr int kDefaultTopK = 20;

struct TokenEntry {
  std::string token;
  double probability = 0.0;

  friend bool operator==(const TokenEntry&, const TokenEntry&) = default;
};

/// Top-k candidates of one next-token distribution plus the aggregate mass of
/// every token that was not returned. Entries are kept sorted by descending
/// probability; construction validates the mass invariants.
class TokenDistribution {
 public:
  TokenDistribution() = default;

  TokenDistribution(std::vector<TokenEntry> entries, double tail_mass)
      : entries_(std::move(entries)), tail_mass_(tail_mass) {
    std::stable_sort(entries_.begin(), entries_.end(),
                     [](const TokenEntry& a, const TokenEntry& b) {
                       return a.probability > b.probability;
                     });
    validate();
  }

  const std::vector<TokenEntry>& entries() const noexcept { return entries_; }
  double tail_mass() const noexcept { return tail_mass_; }
  std::size_t k() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  /// Highest-probability candidate; ties resolve to the earliest listed entry.
  const TokenEntry& mode() const {
    if (entries_.empty()) throw InvalidDistribution("distribution has no entries");
    return entries_.front();
  }

  double total_mass() const noexcept {
    double sum = tail_mass_;
    for (const auto& e : entries_) sum += e.probability;
    return sum;
  }

  /// Number of strictly positive outcomes, counting a nonzero tail as one.
  std::size_t support_size() const noexcept {
    return entries_.size() + (tail_mass_ > 0.0 ? 1 : 0);
  }

  friend bool operator==(const TokenDistribution&, const TokenDistribution&) = default;

 private:
  void validate() const {
    if (entries_.empty()) throw InvalidDistribution("distribution has no entries");
    for (const auto& e : entries_) {
      if (!std::isfinite(e.probability) || e.probability <= 0.0 || e.probability > 1.0 + kMassTolerance)
        throw InvalidDistribution("entry '" + e.token + "' has probability outside (0,1]");
    }
    if (!std::isfinite(tail_mass_) || tail_mass_ < 0.0)
      throw InvalidDistribution("tail mass must be finite and non-negative");
    const double total = total_mass();
    if (std::abs(total - 1.0) > kMassTolerance)
      throw InvalidDistribution("probability mass sums to " + std::to_string(total));
  }

  std::vector<TokenEntry> entries_;
  double tail_mass_ = 0.0;
};

/// One generated token: the logprob of the sampled token and the entropy of the
/// distribution it was sampled from.
struct TokenScore {
  double logprob = 0.0;
  double entropy = 0.0;

  friend bool operator==(const TokenScore&, const TokenScore&) = default;
};

using StepLogprobs = std::vector<TokenScore>;

enum class TailPolicy { TailBucket, Renormalize };

namespace detail {

// 0 * ln 0 is taken as 0.
inline double plogp(double p) noexcept { return p > 0.0 ? p * std::log(p) : 0.0; }

// Mean computed as x0 + sum(x_i - x0)/n so a run of identical values returns
// that value bit-exactly.
template <typename Proj>
double shifted_mean(std::span<const TokenScore> xs, Proj proj) {
  const double x0 = proj(xs.front());
  double acc = 0.0;
  for (const auto& x : xs) acc += proj(x) - x0;
  return x0 + acc / static_cast<double>(xs.size());
}

}  // namespace detail

inline double shannon_entropy(const TokenDistribution& dist) {
  if (dist.empty()) throw InvalidDistribution("distribution has no entries");
  double h = 0.0;
  for (const auto& e : dist.entries()) h -= detail::plogp(e.probability);
  h -= detail::plogp(dist.tail_mass());
  return std::max(0.0, h);
}

/// Entropy of the first-token distribution of a step, i.e. the routing signal.
inline double initial_token_entropy(const TokenDistribution& probe) { return shannon_entropy(probe); }

inline double step_entropy(std::span<const TokenScore> step) {
  if (step.empty()) throw EmptyStep();
  for (const auto& t : step) {
    if (!(t.entropy >= 0.0) || !std::isfinite(t.entropy))
      throw MalformedInput("token entropy must be finite and non-negative");
  }
  return detail::shifted_mean(step, [](const TokenScore& t) { return t.entropy; });
}

inline double step_perplexity(std::span<const TokenScore> step) {
  if (step.empty()) throw EmptyStep();
  for (const auto& t : step) {
    if (!(t.logprob <= 0.0) || !std::isfinite(t.logprob))
      throw MalformedInput("sampled-token logprob must be finite and <= 0");
  }
  const double mean_lp = detail::shifted_mean(step, [](const TokenScore& t) { return t.logprob; });
  return std::exp(-std::min(mean_lp, 0.0));
}

struct RawLogprob {
  std::string token;
  double logprob = 0.0;
};

/// Turns a backend's truncated top-k logprob list into a TokenDistribution.
///
/// TailBucket keeps 1 - sum(p) as one aggregate outcome. Renormalize rescales
/// the returned entries to unit mass and drops the tail. Sums that overshoot 1
/// by at most kMassOvershoot (logprob round-off) are rescaled; larger
/// overshoots are rejected.
inline TokenDistribution normalize_probe(std::span<const RawLogprob> raw,
                                         TailPolicy policy = TailPolicy::TailBucket) {
  if (raw.empty()) throw MalformedInput("empty top-logprob list");
  std::vector<TokenEntry> entries;
  entries.reserve(raw.size());
  double sum = 0.0;
  for (const auto& r : raw) {
    if (!std::isfinite(r.logprob)) throw MalformedInput("non-finite logprob for '" + r.token + "'");
    if (r.logprob > kMassTolerance) throw MalformedInput("positive logprob for '" + r.token + "'");
    const double p = std::exp(std::min(r.logprob, 0.0));
    if (p <= 0.0) continue;  // underflow: the token carries no representable mass
    entries.push_back({r.token, p});
    sum += p;
  }
  if (entries.empty()) throw MalformedInput("every logprob underflows to zero probability");
  if (sum > 1.0 + kMassOvershoot) throw MalformedInput("top-k probabilities sum to " + std::to_string(sum));

  double tail = 0.0;
  if (policy == TailPolicy::Renormalize || sum > 1.0) {
    for (auto& e : entries) e.probability /= sum;
  } else {
    tail = std::max(0.0, 1.0 - sum);
  }
  return TokenDistribution(std::move(entries), tail);
}

}  // namespace steproute
