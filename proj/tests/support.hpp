#pragma once

// Hand-rolled generators and independent oracles shared by the test binaries.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "steproute/uncertainty.hpp"

namespace testsupport {

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  std::int64_t integer(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng_);
  }
  bool coin(double p = 0.5) { return std::bernoulli_distribution(p)(rng_); }
  std::mt19937_64& rng() { return rng_; }

  /// k entries (k in [1, max_k]) with random positive weights spanning several
  /// orders of magnitude, plus a tail bucket half the time.
  steproute::TokenDistribution distribution(int max_k = 64) {
    const auto k = integer(1, max_k);
    std::vector<double> w;
    for (std::int64_t i = 0; i < k; ++i) w.push_back(std::exp(uniform(-12.0, 0.0)));
    double tail = coin() ? std::exp(uniform(-10.0, 0.0)) : 0.0;
    double sum = tail;
    for (double x : w) sum += x;
    std::vector<steproute::TokenEntry> entries;
    for (std::int64_t i = 0; i < k; ++i) entries.push_back({"t" + std::to_string(i), w[i] / sum});
    return steproute::TokenDistribution(std::move(entries), tail / sum);
  }

  steproute::StepLogprobs step(std::size_t max_len = 200) {
    steproute::StepLogprobs s(static_cast<std::size_t>(integer(1, static_cast<std::int64_t>(max_len))));
    for (auto& t : s) {
      t.entropy = coin(0.1) ? 0.0 : uniform(0.0, 4.0);
      t.logprob = coin(0.1) ? 0.0 : -std::exp(uniform(-8.0, 3.0));
    }
    return s;
  }

  /// Random text over a small alphabet rich in newlines and spaces.
  std::string text(std::size_t max_len = 200) {
    static const std::string alphabet = "ab c\n\n\n.";
    const auto n = integer(0, static_cast<std::int64_t>(max_len));
    std::string s;
    for (std::int64_t i = 0; i < n; ++i) s += alphabet[static_cast<std::size_t>(integer(0, alphabet.size() - 1))];
    return s;
  }

  /// Splits `s` into consecutive pieces of random length, empty pieces included.
  std::vector<std::string> split(const std::string& s) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
      const auto len = static_cast<std::size_t>(coin(0.05) ? 0 : integer(1, 6));
      out.push_back(s.substr(i, len));
      i += len;
    }
    if (coin(0.2)) out.push_back("");
    return out;
  }

 private:
  std::mt19937_64 rng_;
};

// ---- oracles (deliberately naive: long double, reverse order) ----

inline long double naive_entropy(const steproute::TokenDistribution& d) {
  long double h = 0.0L;
  const auto& e = d.entries();
  for (auto it = e.rbegin(); it != e.rend(); ++it) {
    const long double p = it->probability;
    h += -p * std::log(p);
  }
  if (d.tail_mass() > 0.0) h += -static_cast<long double>(d.tail_mass()) * std::log(static_cast<long double>(d.tail_mass()));
  return h;
}

inline long double naive_mean_entropy(const steproute::StepLogprobs& s) {
  long double sum = 0.0L;
  for (const auto& t : s) sum += t.entropy;
  return sum / static_cast<long double>(s.size());
}

inline long double naive_perplexity(const steproute::StepLogprobs& s) {
  long double sum = 0.0L;
  for (const auto& t : s) sum += -static_cast<long double>(t.logprob);
  return std::exp(sum / static_cast<long double>(s.size()));
}

inline double rel_err(long double expected, double actual) {
  const long double diff = std::fabs(expected - static_cast<long double>(actual));
  if (expected == 0.0L) return static_cast<double>(diff);
  return static_cast<double>(diff / std::fabs(expected));
}

/// Character-level step boundaries of `text` for the "\n\n" delimiter: the end
/// of every maximal run of two or more newlines that follows non-newline text
/// in the current step.
struct RefBoundary {
  std::size_t completes_at;  // index of the second newline of the run
  std::size_t run_end;       // one past the last newline of the run
};

inline std::vector<RefBoundary> reference_boundaries(const std::string& text) {
  std::vector<RefBoundary> out;
  bool content = false;
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] != '\n') {
      content = true;
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && text[j] == '\n') ++j;
    if (j - i >= 2 && content) {
      out.push_back({i + 1, j});
      content = false;
    }
    i = j;
  }
  return out;
}

}  // namespace testsupport
