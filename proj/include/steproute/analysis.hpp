#pragma once

// Offline statistics over step metrics: histograms, Sarle's bimodality
// coefficient, smoothed n-gram overlap between small and large step texts, and
// sweep-report tables.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "steproute/errors.hpp"
#include "steproute/routing.hpp"

namespace steproute {

struct HistogramBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  double frequency = 0.0;
};

struct Histogram {
  double min = 0.0;
  double max = 0.0;
  std::vector<HistogramBin> bins;

  std::size_t total() const noexcept {
    std::size_t n = 0;
    for (const auto& b : bins) n += b.count;
    return n;
  }
};

/// Equal-width bins over [min, max]; the maximum falls in the last bin.
inline Histogram histogram(std::span<const double> samples, std::size_t bin_count) {
  if (samples.empty()) throw AnalysisError("histogram of an empty sample");
  if (bin_count < 1) throw AnalysisError("histogram needs at least one bin");
  for (double x : samples) {
    if (!std::isfinite(x)) throw AnalysisError("histogram sample is not finite");
  }
  const auto [lo, hi] = std::minmax_element(samples.begin(), samples.end());
  Histogram h;
  h.min = *lo;
  h.max = *hi;
  const double width = (h.max - h.min) / static_cast<double>(bin_count);
  h.bins.resize(bin_count);
  for (std::size_t i = 0; i < bin_count; ++i) {
    h.bins[i].lo = h.min + width * static_cast<double>(i);
    h.bins[i].hi = i + 1 == bin_count ? h.max : h.min + width * static_cast<double>(i + 1);
  }
  for (double x : samples) {
    std::size_t i = 0;
    if (width > 0.0) i = std::min(bin_count - 1, static_cast<std::size_t>((x - h.min) / width));
    ++h.bins[i].count;
  }
  for (auto& b : h.bins) b.frequency = static_cast<double>(b.count) / static_cast<double>(samples.size());
  return h;
}

/// Whitespace-separated "lo hi count frequency" lines, readable by gnuplot.
inline std::string histogram_data(const Histogram& h, std::string_view metric = {}) {
  std::ostringstream out;
  out << std::setprecision(10);
  if (!metric.empty()) out << "# " << metric << '\n';
  out << "# lo hi count frequency\n";
  for (const auto& b : h.bins) out << b.lo << ' ' << b.hi << ' ' << b.count << ' ' << b.frequency << '\n';
  return out.str();
}

/// Sarle's bimodality coefficient from the bias-corrected sample skewness and
/// excess kurtosis. Values above 5/9 suggest a bimodal distribution.
inline double bimodality_coefficient(std::span<const double> samples) {
  const auto n = static_cast<double>(samples.size());
  if (samples.size() < 4) throw AnalysisError("bimodality coefficient needs at least 4 samples");
  double mean = 0.0;
  for (double x : samples) mean += x;
  mean /= n;
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (double x : samples) {
    const double d = x - mean;
    const double d2 = d * d;
    m2 += d2;
    m3 += d2 * d;
    m4 += d2 * d2;
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  if (!(m2 > 0.0)) throw AnalysisError("bimodality coefficient of a constant sample");
  const double g1 = m3 / std::pow(m2, 1.5);
  const double g2 = m4 / (m2 * m2) - 3.0;
  const double skew = g1 * std::sqrt(n * (n - 1.0)) / (n - 2.0);
  const double kurt = ((n + 1.0) * g2 + 6.0) * (n - 1.0) / ((n - 2.0) * (n - 3.0));
  return (skew * skew + 1.0) / (kurt + 3.0 * (n - 1.0) * (n - 1.0) / ((n - 2.0) * (n - 3.0)));
}

inline std::vector<std::string> whitespace_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  for (std::string w; in >> w;) out.push_back(std::move(w));
  return out;
}

/// Sentence-level BLEU-style score: geometric mean of clipped n-gram
/// precisions for n = 1..min(max_n, |candidate|), with (m+1)/(t+1) in place of
/// any zero precision, times the brevity penalty relative to the reference.
inline double ngram_overlap(std::string_view reference, std::string_view candidate, std::size_t max_n = 4) {
  const auto ref = whitespace_tokens(reference);
  const auto cand = whitespace_tokens(candidate);
  if (ref.empty() || cand.empty()) throw AnalysisError("ngram_overlap of an empty text");
  if (max_n < 1) throw AnalysisError("ngram_overlap needs max_n >= 1");

  auto grams = [](const std::vector<std::string>& toks, std::size_t n) {
    std::map<std::vector<std::string>, std::size_t> counts;
    for (std::size_t i = 0; i + n <= toks.size(); ++i) ++counts[{toks.begin() + i, toks.begin() + i + n}];
    return counts;
  };

  const std::size_t orders = std::min(max_n, cand.size());
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= orders; ++n) {
    const auto c = grams(cand, n);
    const auto r = grams(ref, n);
    std::size_t matched = 0, total = 0;
    for (const auto& [g, k] : c) {
      total += k;
      if (auto it = r.find(g); it != r.end()) matched += std::min(k, it->second);
    }
    const double p = matched == 0 ? 1.0 / (static_cast<double>(total) + 1.0)
                                  : static_cast<double>(matched) / static_cast<double>(total);
    log_sum += std::log(p);
  }
  const double c = static_cast<double>(cand.size());
  const double r = static_cast<double>(ref.size());
  const double bp = c >= r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / static_cast<double>(orders));
}

struct AlignmentPair {
  double h_init = 0.0;
  std::string small_text;
  std::string large_text;
  std::string provenance;  // how the shared context was produced

  friend bool operator==(const AlignmentPair&, const AlignmentPair&) = default;
};

struct AlignmentBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  std::optional<double> mean_overlap;  // empty for a bin with no pairs
};

struct AlignmentReport {
  std::vector<AlignmentBin> bins;
  std::size_t out_of_range = 0;  // pairs with h_init outside [edges.front(), edges.back()]
};

/// Mean overlap of small against large text per h_init bin. Bins are
/// half-open [lo, hi) except the last, which includes its upper edge.
inline AlignmentReport alignment_by_bin(std::span<const AlignmentPair> pairs, std::span<const double> edges) {
  if (pairs.empty()) throw AnalysisError("alignment_by_bin needs at least one pair");
  if (edges.size() < 2) throw AnalysisError("alignment_by_bin needs at least two bin edges");
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (!(edges[i] > edges[i - 1])) throw AnalysisError("bin edges must be strictly increasing");
  }
  AlignmentReport rep;
  const std::size_t nb = edges.size() - 1;
  rep.bins.resize(nb);
  std::vector<double> sums(nb, 0.0);
  for (std::size_t i = 0; i < nb; ++i) {
    rep.bins[i].lo = edges[i];
    rep.bins[i].hi = edges[i + 1];
  }
  for (const auto& p : pairs) {
    if (!(p.h_init >= edges.front() && p.h_init <= edges.back())) {
      ++rep.out_of_range;
      continue;
    }
    const auto it = std::upper_bound(edges.begin(), edges.end(), p.h_init);
    const std::size_t b = std::min<std::size_t>(nb - 1, static_cast<std::size_t>(it - edges.begin()) - 1);
    sums[b] += ngram_overlap(p.large_text, p.small_text);
    ++rep.bins[b].count;
  }
  for (std::size_t i = 0; i < nb; ++i) {
    if (rep.bins[i].count) rep.bins[i].mean_overlap = sums[i] / static_cast<double>(rep.bins[i].count);
  }
  return rep;
}

enum class Metric { HInit, HStep, PplStep };

inline std::optional<Metric> parse_metric(std::string_view s) {
  if (s == "h_init") return Metric::HInit;
  if (s == "h_step") return Metric::HStep;
  if (s == "ppl_step") return Metric::PplStep;
  return std::nullopt;
}

struct MetricSample {
  std::size_t trace = 0;
  std::size_t step = 0;  // 1-based
  Metric metric = Metric::HInit;
  double value = 0.0;
};

/// Every recorded value of `m` across the traces, in trace and step order.
inline std::vector<MetricSample> collect_metric(std::span<const Trace> traces, Metric m) {
  std::vector<MetricSample> out;
  for (std::size_t t = 0; t < traces.size(); ++t) {
    const auto& steps = traces[t].steps;
    for (std::size_t i = 0; i < steps.size(); ++i) {
      const auto& sm = steps[i].metrics;
      const auto& v = m == Metric::HInit ? sm.h_init : m == Metric::HStep ? sm.h_step : sm.ppl_step;
      if (v) out.push_back({t, i + 1, m, *v});
    }
  }
  return out;
}

inline std::vector<double> sample_values(std::span<const MetricSample> s) {
  std::vector<double> out;
  out.reserve(s.size());
  for (const auto& x : s) out.push_back(x.value);
  return out;
}

namespace detail {

inline std::string fixed(double v, int digits) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(digits) << v;
  return o.str();
}

}  // namespace detail

struct SweepTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::string csv() const {
    std::string out;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + cells[i];
      out += '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return out;
  }

  std::string text() const {
    std::vector<std::size_t> w(header.size(), 0);
    for (std::size_t i = 0; i < header.size(); ++i) w[i] = header[i].size();
    for (const auto& r : rows)
      for (std::size_t i = 0; i < r.size(); ++i) w[i] = std::max(w[i], r[i].size());
    std::ostringstream out;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out << "  ";
        out << std::setw(static_cast<int>(w[i])) << cells[i];
      }
      out << '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return out.str();
  }
};

/// Rows for thresholds that ran at least one question; rates and accuracy as
/// percentages, latency in the report's unit.
inline SweepTable sweep_table(const SweepReport& report) {
  SweepTable t;
  t.header = {"threshold", "accuracy_pct", "latency_" + report.latency_unit, "intervention_rate_pct", "questions",
              "failures"};
  for (const auto& c : report.rows) {
    if (c.questions == 0) continue;
    t.rows.push_back({detail::fixed(c.threshold, 2), c.accuracy ? detail::fixed(*c.accuracy * 100.0, 2) : "",
                      detail::fixed(c.mean_latency_ms, 1), detail::fixed(c.intervention_rate * 100.0, 2),
                      std::to_string(c.questions), std::to_string(c.failures)});
  }
  return t;
}

}  // namespace steproute
