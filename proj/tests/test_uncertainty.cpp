#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "steproute/uncertainty.hpp"
#include "support.hpp"

using namespace steproute;
using testsupport::Gen;

namespace {

TokenDistribution dist(std::vector<double> ps, double tail = 0.0) {
  std::vector<TokenEntry> e;
  for (std::size_t i = 0; i < ps.size(); ++i) e.push_back({"t" + std::to_string(i), ps[i]});
  return TokenDistribution(std::move(e), tail);
}

StepLogprobs entropies(std::vector<double> hs) {
  StepLogprobs s;
  for (double h : hs) s.push_back({0.0, h});
  return s;
}

StepLogprobs logprobs(std::vector<double> lps) {
  StepLogprobs s;
  for (double lp : lps) s.push_back({lp, 0.0});
  return s;
}

}  // namespace

TEST(ShannonEntropy, OneHotIsZero) { EXPECT_EQ(shannon_entropy(dist({1.0})), 0.0); }

TEST(ShannonEntropy, UniformFourIsLnFour) {
  EXPECT_NEAR(shannon_entropy(dist({0.25, 0.25, 0.25, 0.25})), std::log(4.0), 1e-15);
}

TEST(ShannonEntropy, HalfQuarterQuarter) {
  const double oracle = -(0.5 * std::log(0.5) + 2 * 0.25 * std::log(0.25));
  EXPECT_NEAR(shannon_entropy(dist({0.5, 0.25, 0.25})), oracle, 1e-15);
  EXPECT_NEAR(oracle, 1.039721, 1e-6);
}

TEST(InitialTokenEntropy, MatchesShannon) {
  EXPECT_EQ(initial_token_entropy(dist({1.0})), 0.0);
  EXPECT_NEAR(initial_token_entropy(dist({0.5, 0.5})), std::log(2.0), 1e-15);
  const double oracle = -(0.7 * std::log(0.7) + 0.2 * std::log(0.2) + 0.1 * std::log(0.1));
  EXPECT_NEAR(initial_token_entropy(dist({0.7, 0.2}, 0.1)), oracle, 1e-12);
  EXPECT_NEAR(oracle, 0.801819, 1e-6);
}

TEST(TokenDistribution, RejectsInvalidMass) {
  EXPECT_THROW(dist({0.5, 0.4}), InvalidDistribution);
  EXPECT_THROW(dist({0.6, 0.5}), InvalidDistribution);
  EXPECT_THROW(dist({1.0, 0.0}), InvalidDistribution);
  EXPECT_THROW(dist({1.2, -0.2}), InvalidDistribution);
  EXPECT_THROW(dist({}), InvalidDistribution);
  EXPECT_THROW(dist({0.5}, -0.5), InvalidDistribution);
  EXPECT_THROW(dist({std::nan("")}), InvalidDistribution);
  EXPECT_NO_THROW(dist({0.5, 0.5 + 5e-7}));
}

TEST(TokenDistribution, SortsDescendingAndKeepsFirstOnTies) {
  TokenDistribution d({{"x", 0.2}, {"y", 0.4}, {"z", 0.4}}, 0.0);
  ASSERT_EQ(d.k(), 3u);
  EXPECT_EQ(d.entries()[0].token, "y");
  EXPECT_EQ(d.entries()[1].token, "z");
  EXPECT_EQ(d.mode().token, "y");
  EXPECT_EQ(d.support_size(), 3u);
  EXPECT_EQ(dist({0.5}, 0.5).support_size(), 2u);
}

TEST(StepEntropy, Examples) {
  EXPECT_EQ(step_entropy(entropies({0.0})), 0.0);
  EXPECT_NEAR(step_entropy(entropies({0.0, std::log(2.0)})), 0.346574, 1e-6);
  EXPECT_NEAR(step_entropy(entropies({0.0, std::log(2.0)})), std::log(2.0) / 2.0, 1e-15);
  for (double x : {0.1, 0.3, 1.0 / 3.0, 2.7182818, 1e-9}) EXPECT_EQ(step_entropy(entropies({x, x, x})), x);
}

TEST(StepEntropy, EmptyAndMalformed) {
  EXPECT_THROW(step_entropy(StepLogprobs{}), EmptyStep);
  EXPECT_THROW(step_entropy(entropies({-0.1})), MalformedInput);
  EXPECT_THROW(step_entropy(entropies({std::nan("")})), MalformedInput);
}

TEST(StepPerplexity, Examples) {
  EXPECT_EQ(step_perplexity(logprobs({0.0, 0.0})), 1.0);
  EXPECT_NEAR(step_perplexity(logprobs({std::log(0.5), std::log(0.5)})), 2.0, 1e-15);
  EXPECT_NEAR(step_perplexity(logprobs({std::log(0.25), 0.0})), 2.0, 1e-15);
  EXPECT_THROW(step_perplexity(StepLogprobs{}), EmptyStep);
  EXPECT_THROW(step_perplexity(logprobs({0.5})), MalformedInput);
  EXPECT_THROW(step_perplexity(logprobs({-INFINITY})), MalformedInput);
}

TEST(NormalizeProbe, Examples) {
  const std::vector<RawLogprob> two{{"a", std::log(0.6)}, {"b", std::log(0.4)}};
  const auto d = normalize_probe(two);
  ASSERT_EQ(d.k(), 2u);
  EXPECT_NEAR(d.entries()[0].probability, 0.6, 1e-15);
  EXPECT_NEAR(d.entries()[1].probability, 0.4, 1e-15);
  EXPECT_EQ(d.tail_mass(), 0.0);

  const std::vector<RawLogprob> one{{"a", std::log(0.5)}};
  const auto t = normalize_probe(one, TailPolicy::TailBucket);
  EXPECT_NEAR(t.entries()[0].probability, 0.5, 1e-15);
  EXPECT_NEAR(t.tail_mass(), 0.5, 1e-15);

  const std::vector<RawLogprob> partial{{"a", std::log(0.5)}, {"b", std::log(0.3)}};
  const auto r = normalize_probe(partial, TailPolicy::Renormalize);
  EXPECT_NEAR(r.entries()[0].probability, 0.5 / 0.8, 1e-15);
  EXPECT_NEAR(r.entries()[1].probability, 0.3 / 0.8, 1e-15);
  EXPECT_NEAR(r.entries()[0].probability, 0.625, 1e-12);
  EXPECT_EQ(r.tail_mass(), 0.0);
}

TEST(NormalizeProbe, SortsUnorderedInput) {
  const std::vector<RawLogprob> raw{{"low", std::log(0.1)}, {"high", std::log(0.7)}, {"mid", std::log(0.2)}};
  const auto d = normalize_probe(raw);
  EXPECT_EQ(d.entries()[0].token, "high");
  EXPECT_EQ(d.entries()[2].token, "low");
}

TEST(NormalizeProbe, Errors) {
  EXPECT_THROW(normalize_probe(std::vector<RawLogprob>{}), MalformedInput);
  EXPECT_THROW(normalize_probe(std::vector<RawLogprob>{{"a", std::nan("")}}), MalformedInput);
  EXPECT_THROW(normalize_probe(std::vector<RawLogprob>{{"a", INFINITY}}), MalformedInput);
  EXPECT_THROW(normalize_probe(std::vector<RawLogprob>{{"a", 0.01}}), MalformedInput);
  // 0.6 + 0.5 overshoots far beyond round-off.
  EXPECT_THROW(normalize_probe(std::vector<RawLogprob>{{"a", std::log(0.6)}, {"b", std::log(0.5)}}),
               MalformedInput);
}

TEST(NormalizeProbe, SmallOvershootIsRescaled) {
  const std::vector<RawLogprob> raw{{"a", std::log(0.6 + 2e-5)}, {"b", std::log(0.4 + 2e-5)}};
  const auto d = normalize_probe(raw);
  EXPECT_EQ(d.tail_mass(), 0.0);
  EXPECT_NEAR(d.total_mass(), 1.0, 1e-12);
  // Tolerated positive round-off on a single near-certain token.
  const auto one = normalize_probe(std::vector<RawLogprob>{{"a", 5e-7}});
  EXPECT_EQ(one.entries()[0].probability, 1.0);
  EXPECT_EQ(shannon_entropy(one), 0.0);
}

// ---- properties ----

TEST(EntropyProperties, NonNegativeAndBoundedByLogSupport) {
  Gen g(11);
  for (int i = 0; i < 2000; ++i) {
    const auto d = g.distribution();
    const double h = shannon_entropy(d);
    ASSERT_GE(h, 0.0);
    ASSERT_LE(h, std::log(static_cast<double>(d.support_size())) + 1e-9);
  }
}

TEST(EntropyProperties, PermutationInvariant) {
  Gen g(12);
  for (int i = 0; i < 1000; ++i) {
    const auto d = g.distribution();
    auto e = d.entries();
    std::shuffle(e.begin(), e.end(), g.rng());
    // Re-sorting is stable, so equal probabilities may land in a new order.
    const TokenDistribution shuffled(e, d.tail_mass());
    ASSERT_NEAR(shannon_entropy(shuffled), shannon_entropy(d), 1e-12);
  }
}

TEST(EntropyProperties, MatchesNaiveOracle) {
  Gen g(13);
  for (int i = 0; i < 10000; ++i) {
    const auto d = g.distribution();
    ASSERT_LE(testsupport::rel_err(testsupport::naive_entropy(d), shannon_entropy(d)), 1e-9);
  }
}

TEST(StepMetricProperties, MeanOfCopiesIsExact) {
  Gen g(14);
  for (int i = 0; i < 2000; ++i) {
    const double x = g.uniform(0.0, 5.0);
    const auto n = static_cast<std::size_t>(g.integer(1, 500));
    ASSERT_EQ(step_entropy(StepLogprobs(n, TokenScore{0.0, x})), x);
  }
}

TEST(StepMetricProperties, PerplexityAtLeastOneAndMonotone) {
  Gen g(15);
  for (int i = 0; i < 2000; ++i) {
    auto s = g.step(50);
    const double p = step_perplexity(s);
    ASSERT_GE(p, 1.0);
    const auto j = static_cast<std::size_t>(g.integer(0, static_cast<std::int64_t>(s.size()) - 1));
    s[j].logprob -= g.uniform(0.0, 2.0);
    ASSERT_GE(step_perplexity(s), p);
  }
}

TEST(StepMetricProperties, MatchNaiveOracles) {
  Gen g(16);
  for (int i = 0; i < 5000; ++i) {
    const auto s = g.step();
    ASSERT_LE(testsupport::rel_err(testsupport::naive_mean_entropy(s), step_entropy(s)), 1e-9);
    ASSERT_LE(testsupport::rel_err(testsupport::naive_perplexity(s), step_perplexity(s)), 1e-9);
  }
}

TEST(NormalizeProbeProperties, TailBucketConservesMass) {
  Gen g(17);
  for (int i = 0; i < 2000; ++i) {
    const auto d = g.distribution(20);
    std::vector<RawLogprob> raw;
    for (const auto& e : d.entries()) raw.push_back({e.token, std::log(e.probability)});
    const auto back = normalize_probe(raw, TailPolicy::TailBucket);
    ASSERT_NEAR(back.total_mass(), 1.0, 1e-9);
    ASSERT_NEAR(back.tail_mass(), d.tail_mass(), 1e-9);
    const auto renorm = normalize_probe(raw, TailPolicy::Renormalize);
    ASSERT_EQ(renorm.tail_mass(), 0.0);
    ASSERT_NEAR(renorm.total_mass(), 1.0, 1e-9);
  }
}
