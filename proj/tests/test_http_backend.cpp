#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <cstdlib>

#include "fake_openai.hpp"
#include "steproute/http_backend.hpp"

using namespace steproute;
using testsupport::FakeOpenAI;

namespace {

BackendConfig config_for(const FakeOpenAI& f, int retries = 2) {
  BackendConfig c;
  c.endpoint = f.endpoint();
  c.model = "fake";
  c.timeout_s = 5.0;
  c.max_retries = retries;
  return c;
}

HttpBackend backend_for(const FakeOpenAI& f, int retries = 2) {
  HttpBackend b(config_for(f, retries), SamplingParams{});
  b.set_retry_backoff(std::chrono::milliseconds(1));
  return b;
}

StepRequest step_request(std::int64_t budget = 100) {
  StepRequest r;
  r.context = "Q\n<think>\n";
  r.budget_left = budget;
  return r;
}

}  // namespace

TEST(ParseEndpoint, SplitsOriginAndPrefix) {
  const auto e = parse_endpoint("http://host:8000/openai/");
  EXPECT_EQ(e.origin, "http://host:8000");
  EXPECT_EQ(e.prefix, "/openai");
  EXPECT_EQ(parse_endpoint("http://h").prefix, "");
  EXPECT_THROW(parse_endpoint("https://h"), ConfigError);
  EXPECT_THROW(parse_endpoint("http://"), ConfigError);
}

TEST(HttpBackend, ProbeNormalizesTopLogprobs) {
  FakeOpenAI f;
  auto b = backend_for(f);
  const auto p = b.probe_first("Q\n<think>\n");
  EXPECT_EQ(p.token, "So");
  ASSERT_EQ(p.distribution.k(), 2u);
  EXPECT_NEAR(p.distribution.entries()[0].probability, 0.6, 1e-12);
  EXPECT_NEAR(p.distribution.entries()[1].probability, 0.4, 1e-12);
  EXPECT_NEAR(p.distribution.tail_mass(), 0.0, 1e-6);
  EXPECT_NEAR(p.token_logprob, std::log(0.6), 1e-12);

  const auto sent = f.bodies().at(0);
  EXPECT_EQ(sent["max_tokens"], 1);
  EXPECT_EQ(sent["logprobs"], 20);
  EXPECT_EQ(sent["temperature"], 0.6);
  EXPECT_EQ(sent["top_p"], 0.95);
  EXPECT_EQ(sent["model"], "fake");
}

TEST(HttpBackend, ProbeWithoutLogprobsFails) {
  FakeOpenAI::Options o;
  o.omit_logprobs = true;
  FakeOpenAI f(o);
  auto b = backend_for(f);
  EXPECT_THROW(b.probe_first("Q"), MissingLogprobs);
}

TEST(HttpBackend, StreamStopsAtDelimiter) {
  FakeOpenAI f;
  auto b = backend_for(f);
  const auto out = b.generate_step(step_request());
  EXPECT_EQ(out.text, "So x = 2.\n\n");
  EXPECT_EQ(out.boundary, Boundary::Delimiter);
  EXPECT_EQ(out.tokens.size(), 6u);
  EXPECT_FALSE(out.logprobs.has_value());
  const auto sent = f.bodies().at(0);
  EXPECT_TRUE(sent["stream"].get<bool>());
  EXPECT_FALSE(sent.contains("logprobs"));
  EXPECT_FALSE(sent.contains("stop"));
}

TEST(HttpBackend, PrefixIsKeptAndSent) {
  FakeOpenAI::Options o;
  o.stream_tokens = {",", " x", " =", " 2", ".", "\n\n"};
  FakeOpenAI f(o);
  auto b = backend_for(f);
  auto req = step_request();
  req.prefix = "So";
  const auto out = b.generate_step(req);
  EXPECT_EQ(out.text, "So, x = 2.\n\n");
  EXPECT_EQ(f.bodies().at(0)["prompt"], "Q\n<think>\nSo");
}

TEST(HttpBackend, BudgetTruncatesStream) {
  FakeOpenAI f;
  auto b = backend_for(f);
  const auto out = b.generate_step(step_request(3));
  EXPECT_EQ(out.tokens.size(), 3u);
  EXPECT_EQ(out.boundary, Boundary::Budget);
  EXPECT_EQ(out.text, "So x =");
  EXPECT_EQ(f.bodies().at(0)["max_tokens"], 3);
}

TEST(HttpBackend, StepLogprobsCarryEntropy) {
  FakeOpenAI f;
  auto b = backend_for(f);
  auto req = step_request();
  req.want_logprobs = true;
  const auto out = b.generate_step(req);
  ASSERT_TRUE(out.logprobs.has_value());
  ASSERT_EQ(out.logprobs->size(), out.tokens.size());
  for (const auto& s : *out.logprobs) {
    EXPECT_NEAR(s.entropy, std::log(2.0), 1e-12);
    EXPECT_NEAR(s.logprob, std::log(0.5), 1e-12);
  }
  EXPECT_EQ(f.bodies().at(0)["logprobs"], 20);
}

TEST(HttpBackend, StepLogprobsMissing) {
  FakeOpenAI::Options o;
  o.omit_logprobs = true;
  FakeOpenAI f(o);
  auto b = backend_for(f);
  auto req = step_request();
  req.want_logprobs = true;
  EXPECT_THROW(b.generate_step(req), MissingLogprobs);
}

TEST(HttpBackend, EndOfStreamWithoutDelimiterIsEos) {
  FakeOpenAI::Options o;
  o.stream_tokens = {"final", " words"};
  FakeOpenAI f(o);
  auto b = backend_for(f);
  const auto out = b.generate_step(step_request());
  EXPECT_EQ(out.text, "final words");
  EXPECT_EQ(out.boundary, Boundary::EOS);
}

TEST(HttpBackend, ThinkCloseInStream) {
  FakeOpenAI::Options o;
  o.stream_tokens = {"done", "</think>", "\n\nAnswer"};
  FakeOpenAI f(o);
  auto b = backend_for(f);
  const auto out = b.generate_step(step_request());
  EXPECT_EQ(out.text, "done");
  EXPECT_EQ(out.boundary, Boundary::ThinkClosed);
}

TEST(HttpBackend, InterruptedStreamCarriesPartialTokens) {
  FakeOpenAI::Options o;
  o.interrupt_after = 2;
  FakeOpenAI f(o);
  auto b = backend_for(f);
  try {
    b.generate_step(step_request());
    FAIL() << "expected StreamInterrupted";
  } catch (const StreamInterrupted& e) {
    EXPECT_EQ(e.partial_tokens(), (std::vector<std::string>{"So", " x"}));
  }
  EXPECT_EQ(f.requests(), 1) << "no retry once tokens arrived";
}

TEST(HttpBackend, RetriesServerErrorsWithoutDoubleCounting) {
  FakeOpenAI::Options o;
  o.fail_first = 2;
  FakeOpenAI f(o);
  auto b = backend_for(f, 2);
  const auto out = b.generate_step(step_request());
  EXPECT_EQ(out.text, "So x = 2.\n\n");
  EXPECT_EQ(out.tokens.size(), 6u);
  EXPECT_EQ(f.requests(), 3);
}

TEST(HttpBackend, GivesUpAfterMaxRetries) {
  FakeOpenAI::Options o;
  o.fail_first = 5;
  FakeOpenAI f(o);
  auto b = backend_for(f, 1);
  EXPECT_THROW(b.probe_first("Q"), TransportError);
  EXPECT_EQ(f.requests(), 2);
}

TEST(HttpBackend, ClientErrorsAreNotRetried) {
  FakeOpenAI::Options o;
  o.status_override = 400;
  FakeOpenAI f(o);
  auto b = backend_for(f, 3);
  EXPECT_THROW(b.generate_answer("Q"), TransportError);
  EXPECT_THROW(b.generate_step(step_request()), TransportError);
  EXPECT_EQ(f.requests(), 2);
}

TEST(HttpBackend, UnreachableIsTransportError) {
  BackendConfig c;
  c.endpoint = "http://127.0.0.1:1";
  c.model = "x";
  c.max_retries = 0;
  HttpBackend b(c, SamplingParams{});
  EXPECT_THROW(b.probe_first("Q"), TransportError);
  EXPECT_THROW(b.generate_step(step_request()), TransportError);
  EXPECT_FALSE(b.healthy());
}

TEST(HttpBackend, AnswerAndUsage) {
  FakeOpenAI f;
  HttpBackend b(config_for(f), SamplingParams{0.2, 0.9}, 64);
  const auto a = b.generate_answer("Q\n<think>\nx\n</think>\n\n");
  EXPECT_EQ(a.text, "The answer is \\boxed{4}.");
  EXPECT_EQ(a.token_count, 7);
  const auto sent = f.bodies().at(0);
  EXPECT_EQ(sent["max_tokens"], 64);
  EXPECT_EQ(sent["temperature"], 0.2);
}

TEST(HttpBackend, EmptyAnswerIsNotAnError) {
  FakeOpenAI::Options o;
  o.answer = "";
  o.answer_tokens = 0;
  FakeOpenAI f(o);
  auto b = backend_for(f);
  EXPECT_EQ(b.generate_answer("Q").text, "");
}

TEST(HttpBackend, HealthAndApiKey) {
  FakeOpenAI f;
  auto c = config_for(f);
  c.api_key_env = "STEPROUTE_TEST_KEY";
  ::setenv("STEPROUTE_TEST_KEY", "sekrit", 1);
  HttpBackend b(c, SamplingParams{});
  EXPECT_TRUE(b.healthy());
  b.probe_first("Q");
  EXPECT_EQ(f.last_authorization(), "Bearer sekrit");
  ::unsetenv("STEPROUTE_TEST_KEY");

  FakeOpenAI::Options o;
  o.models_ok = false;
  FakeOpenAI down(o);
  EXPECT_FALSE(backend_for(down).healthy());
}

TEST(HttpBackend, RoutesAWholeTraceAgainstTwoServers) {
  FakeOpenAI::Options small_o;
  small_o.stream_tokens = {" x", " =", " 1", ".", "</think>"};
  FakeOpenAI small(small_o);
  FakeOpenAI::Options large_o;
  large_o.stream_tokens = {"Let", " y", ".", "</think>"};
  FakeOpenAI large(large_o);
  ServiceConfig sc;
  sc.small = config_for(small);
  sc.large = config_for(large);
  auto pair = http_pair(sc);
  PolicyConfig pc;
  pc.threshold = 0.9;  // probe entropy of (0.6, 0.4) is 0.673
  const auto t = run_trace("Q", pair.pair(), pc);
  ASSERT_EQ(t.steps.size(), 1u);
  EXPECT_EQ(t.steps[0].text, "So x = 1.");
  EXPECT_EQ(t.steps[0].boundary, Boundary::ThinkClosed);
  EXPECT_EQ(t.final_answer, "The answer is \\boxed{4}.");
  EXPECT_EQ(large.bodies().back()["prompt"], "Q\n<think>\nSo x = 1.</think>\n\n");

  pc.threshold = 0.5;
  const auto t2 = run_trace("Q", pair.pair(), pc);
  EXPECT_EQ(t2.decisions[0].action, Action::Intervene);
  EXPECT_EQ(t2.steps[0].text, "Let y.");
}
