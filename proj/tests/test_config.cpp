#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "steproute/config.hpp"

using namespace steproute;
using nlohmann::json;

namespace {

json minimal() {
  return json{{"small", {{"endpoint", "http://127.0.0.1:8001"}, {"model", "small-4b"}}},
              {"large", {{"endpoint", "http://127.0.0.1:8002/v1"}, {"model", "large-32b"}}}};
}

// Field named by the ConfigError thrown for `j`, or "" if it loads.
std::string rejected_field(const json& j) {
  try {
    service_config_from_json(j);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "";
}

}  // namespace

TEST(ServiceConfig, MinimalUsesDefaults) {
  const auto c = service_config_from_json(minimal());
  EXPECT_EQ(c.listen, (ListenAddress{"127.0.0.1", 8080}));
  EXPECT_EQ(c.small.top_k, 20);
  EXPECT_EQ(c.policy.policy, Policy::InitEntropy);
  EXPECT_EQ(c.policy.budget_tokens, 8192);
  EXPECT_EQ(c.policy.sampling.temperature, 0.6);
  EXPECT_EQ(c.policy.sampling.top_p, 0.95);
  EXPECT_EQ(c.policy.segmenter.delimiter, "\n\n");
  EXPECT_TRUE(c.include_think);
}

TEST(ServiceConfig, FullFile) {
  auto j = minimal();
  j["listen"] = "0.0.0.0:9000";
  j["policy"] = {{"policy", "step_entropy"}, {"threshold", 0.4},      {"seed", 7},
                 {"budget_tokens", 4096},    {"temperature", 0.0},    {"top_p", 1.0},
                 {"answer_max_tokens", 512}, {"record_step_metrics", true}};
  j["segmenter"] = {{"delimiter", "##"}, {"think_open", "<t>"}, {"think_close", "</t>"}};
  j["small"]["tail_policy"] = "renormalize";
  j["small"]["api_key_env"] = "SMALL_KEY";
  j["trace_sink"] = "out/t.jsonl";
  j["log_level"] = "debug";
  j["include_think"] = false;
  const auto c = service_config_from_json(j);
  EXPECT_EQ(c.listen.port, 9000);
  EXPECT_EQ(c.policy.policy, Policy::StepEntropy);
  EXPECT_EQ(c.policy.threshold, 0.4);
  EXPECT_EQ(c.policy.rng_seed, 7u);
  EXPECT_EQ(c.answer_max_tokens, 512);
  EXPECT_TRUE(c.policy.record_step_metrics);
  EXPECT_EQ(c.policy.segmenter.think_close, "</t>");
  EXPECT_EQ(c.small.tail_policy, TailPolicy::Renormalize);
  EXPECT_EQ(c.small.api_key_env, "SMALL_KEY");
  EXPECT_FALSE(c.include_think);
}

TEST(ServiceConfig, FieldSpecificRejections) {
  auto j = minimal();
  j.erase("large");
  EXPECT_EQ(rejected_field(j), "large");

  j = minimal();
  j["small"]["endpoint"] = "https://example.com";
  EXPECT_EQ(rejected_field(j), "small.endpoint");

  j = minimal();
  j["large"].erase("model");
  EXPECT_EQ(rejected_field(j), "large.model");

  j = minimal();
  j["small"]["top_k"] = 0;
  EXPECT_EQ(rejected_field(j), "small.top_k");

  j = minimal();
  j["large"]["timeout_s"] = -1;
  EXPECT_EQ(rejected_field(j), "large.timeout_s");

  j = minimal();
  j["small"]["top_k"] = "twenty";
  EXPECT_EQ(rejected_field(j), "small.top_k");

  j = minimal();
  j["policy"] = {{"threshold", "high"}};
  EXPECT_EQ(rejected_field(j), "policy.threshold");

  j = minimal();
  j["policy"] = {{"budget_tokens", 0}};
  EXPECT_EQ(rejected_field(j), "policy.budget_tokens");

  j = minimal();
  j["policy"] = {{"policy", "oracle"}};
  EXPECT_EQ(rejected_field(j), "policy.policy");

  j = minimal();
  j["policy"] = {{"top_p", 1.5}};
  EXPECT_EQ(rejected_field(j), "policy.top_p");

  j = minimal();
  j["segmenter"] = {{"delimiter", ""}};
  EXPECT_EQ(rejected_field(j), "segmenter.delimiter");

  j = minimal();
  j["listen"] = "localhost:http";
  EXPECT_EQ(rejected_field(j), "listen");

  j = minimal();
  j["listen"] = "localhost:70000";
  EXPECT_EQ(rejected_field(j), "listen");

  j = minimal();
  j["log_level"] = "verbose";
  EXPECT_EQ(rejected_field(j), "log_level");

  j = minimal();
  j["tresholds"] = 1;
  EXPECT_EQ(rejected_field(j), "tresholds");

  j = minimal();
  j["small"]["tail_policy"] = "drop";
  EXPECT_EQ(rejected_field(j), "small.tail_policy");

  EXPECT_EQ(rejected_field(json::array()), "config");
}

TEST(ServiceConfig, ThresholdMustBeFinite) {
  PolicyConfig p;
  p.threshold = INFINITY;
  try {
    p.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "policy.threshold");
  }
}

TEST(ServiceConfig, LoadFromFileWithListenOverride) {
  const auto path = std::filesystem::temp_directory_path() / "steproute_test_config.json";
  {
    std::ofstream out(path);
    out << minimal().dump(2);
  }
  ::setenv("STEPROUTE_LISTEN", "127.0.0.1:9123", 1);
  const auto c = load_service_config(path);
  ::unsetenv("STEPROUTE_LISTEN");
  EXPECT_EQ(c.listen.port, 9123);

  {
    std::ofstream out(path);
    out << "{ broken";
  }
  EXPECT_THROW(load_service_config(path), ConfigError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_service_config(path), ConfigError);
}

TEST(ParseListen, Forms) {
  EXPECT_EQ(parse_listen("[::1]:80").host, "[::1]");
  EXPECT_EQ(parse_listen("h:0").port, 0);
  EXPECT_THROW(parse_listen("nohost"), ConfigError);
  EXPECT_THROW(parse_listen(":80"), ConfigError);
}
