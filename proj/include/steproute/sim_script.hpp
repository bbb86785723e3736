#pragma once

// Scripted backends: deterministic stand-ins for real models, driven by a
// Scenario. The backend recovers its position in the script from the context
// alone (prompt, then completed steps, then a partial step), the same way a
// real model would see it.

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "steproute/backend.hpp"
#include "steproute/errors.hpp"
#include "steproute/segmenter.hpp"
#include "steproute/sim_latency.hpp"
#include "steproute/uncertainty.hpp"

namespace steproute {

/// Splits text into pseudo-tokens: newline runs, a word with at most one
/// leading space, or a single other character. Concatenating the tokens
/// reproduces the input.
inline std::vector<std::string> scripted_tokenize(std::string_view text) {
  auto is_word = [](unsigned char c) { return std::isalnum(c) || c >= 0x80 || c == '_'; };
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t j = i + 1;
    const auto c = static_cast<unsigned char>(text[i]);
    if (c == '\n') {
      while (j < text.size() && text[j] == '\n') ++j;
    } else if (c == ' ' && j < text.size() && is_word(static_cast<unsigned char>(text[j]))) {
      while (j < text.size() && is_word(static_cast<unsigned char>(text[j]))) ++j;
    } else if (is_word(c)) {
      while (j < text.size() && is_word(static_cast<unsigned char>(text[j]))) ++j;
    }
    out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

struct StepScript {
  TokenDistribution probe;
  std::string small_body;
  std::string large_body;
  bool small_correct = true;
  bool large_correct = true;
  StepLogprobs small_scores;  // optional; one entry per small_body token
  std::string label;          // free-form annotation, e.g. generator component

  friend bool operator==(const StepScript&, const StepScript&) = default;
};

struct Scenario {
  std::string question;
  std::vector<StepScript> steps;
  std::string answer;
  std::string answer_oracle;
  std::optional<BackendProfile> profile;

  friend bool operator==(const Scenario&, const Scenario&) = default;
};

/// Per-token scores the scripted small backend reports for a step body.
inline StepLogprobs small_body_scores(const StepScript& s) {
  const auto tokens = scripted_tokenize(s.small_body);
  if (!s.small_scores.empty()) return s.small_scores;
  StepLogprobs out(tokens.size(), TokenScore{});
  if (!out.empty()) out.front() = {std::log(s.probe.mode().probability), shannon_entropy(s.probe)};
  return out;
}

/// Checks the scenario against the scripting rules: every non-final body ends
/// at its first delimiter boundary, the final body has none, and the small body
/// starts with the probe's most likely token.
inline void validate_scenario(const Scenario& sc, const SegmenterConfig& seg = {}) {
  if (sc.steps.empty()) throw MalformedInput("scenario has no steps");
  for (std::size_t i = 0; i < sc.steps.size(); ++i) {
    const auto& s = sc.steps[i];
    const std::string where = "step " + std::to_string(i + 1) + ": ";
    const bool last = i + 1 == sc.steps.size();
    for (const std::string* body : {&s.small_body, &s.large_body}) {
      if (body->empty()) throw MalformedInput(where + "empty body");
      StepSegmenter segmenter(SegmenterConfig{seg.delimiter, seg.think_open, seg.think_close, INT64_MAX},
                              Phase::Thinking);
      std::size_t boundaries = 0;
      bool boundary_at_end = false;
      for (const auto& tok : scripted_tokenize(*body)) {
        boundary_at_end = false;
        for (const auto& ev : segmenter.feed(tok)) {
          if (ev.kind == SegmentEvent::Kind::StepComplete) {
            ++boundaries;
            boundary_at_end = segmenter.pending_text().empty();
          }
          if (ev.kind == SegmentEvent::Kind::ThinkClosed) throw MalformedInput(where + "body closes the think phase");
        }
      }
      if (!last && (boundaries != 1 || !boundary_at_end))
        throw MalformedInput(where + "body must contain exactly one delimiter, at its end");
      if (last && boundaries != 0) throw MalformedInput(where + "final body must not contain the delimiter");
    }
    const auto first = scripted_tokenize(s.small_body).front();
    if (first != s.probe.mode().token)
      throw MalformedInput(where + "small body starts with '" + first + "' but the probe mode is '" +
                           s.probe.mode().token + "'");
    if (!s.small_scores.empty() && s.small_scores.size() != scripted_tokenize(s.small_body).size())
      throw MalformedInput(where + "small_scores length does not match the body token count");
  }
}

struct ScriptOptions {
  std::string prompt_template{kDefaultPromptTemplate};
  SegmenterConfig segmenter;
  std::string wrong_answer;  // empty: the scripted answer with its boxed value replaced by "?"
  std::optional<std::size_t> fail_after_calls;  // throw TransportError on every call past this count
};

class ScriptedBackend final : public Backend {
 public:
  struct Token {
    std::string text;
    TokenScore score;
  };

  /// Where a context sits in the script.
  struct Position {
    bool answering = false;
    std::size_t step = 0;                 // index of the step being written
    std::string partial;                  // text of that step already in the context
    std::vector<std::string> step_texts;  // completed step texts
  };

  ScriptedBackend(std::shared_ptr<const Scenario> scenario, ModelRole role, ScriptOptions options = {})
      : scenario_(std::move(scenario)), role_(role), options_(std::move(options)) {
    prompt_ = render_prompt(options_.prompt_template, scenario_->question);
  }

  std::string_view name() const override { return role_ == ModelRole::Small ? "scripted-small" : "scripted-large"; }
  ModelRole role() const noexcept { return role_; }
  const Scenario& scenario() const noexcept { return *scenario_; }
  const std::string& prompt() const noexcept { return prompt_; }

  std::size_t probe_calls() const noexcept { return probes_; }
  std::size_t step_calls() const noexcept { return steps_; }
  std::size_t answer_calls() const noexcept { return answers_; }

  Position locate(std::string_view context) const {
    if (context.substr(0, prompt_.size()) != prompt_) throw ScriptError("context does not start with the scenario prompt");
    const std::string_view rest = context.substr(prompt_.size());
    Position pos;
    const auto& seg = options_.segmenter;
    if (rest.find(seg.think_close) != std::string_view::npos) {
      pos.answering = true;
      return pos;
    }
    StepSegmenter segmenter(SegmenterConfig{seg.delimiter, seg.think_open, seg.think_close, INT64_MAX},
                            Phase::Thinking);
    // One feed call: a newline run at a step end stays with that step however
    // it was tokenized.
    for (auto& ev : segmenter.feed(rest)) {
      if (ev.kind == SegmentEvent::Kind::StepComplete) pos.step_texts.push_back(std::move(ev.step_text));
    }
    pos.step = pos.step_texts.size();
    pos.partial = segmenter.pending_text();
    return pos;
  }

  /// The tokens this model would generate next from `context`.
  std::vector<Token> continuation(std::string_view context) const {
    const Position pos = locate(context);
    if (pos.answering) {
      std::vector<Token> out;
      for (auto& t : scripted_tokenize(answer_for(pos_from_answer_context(context)))) out.push_back({t, {}});
      return out;
    }
    std::vector<Token> out;
    const auto& steps = scenario_->steps;
    if (pos.step < steps.size()) {
      const StepScript& s = steps[pos.step];
      const std::string& body = role_ == ModelRole::Small ? s.small_body : s.large_body;
      const auto tokens = scripted_tokenize(body);
      StepLogprobs scores = role_ == ModelRole::Small ? small_body_scores(s) : StepLogprobs(tokens.size());
      std::size_t consumed = 0, i = 0;
      while (consumed < pos.partial.size() && i < tokens.size()) consumed += tokens[i++].size();
      if (consumed != pos.partial.size() || body.compare(0, pos.partial.size(), pos.partial) != 0)
        throw ScriptError("context diverges from the scripted step " + std::to_string(pos.step + 1));
      for (; i < tokens.size(); ++i) out.push_back({tokens[i], scores[i]});
      if (pos.step + 1 < steps.size()) return out;
    } else if (!pos.partial.empty()) {
      throw ScriptError("context runs past the end of the script");
    }
    out.push_back({options_.segmenter.think_close, {}});
    return out;
  }

  ProbeResult probe_first(std::string_view context) override {
    tick();
    ++probes_;
    const Position pos = locate(context);
    if (pos.answering) throw ScriptError("probe requested after the think phase closed");
    if (!pos.partial.empty()) throw ScriptError("probe requested mid-step");
    if (pos.step >= scenario_->steps.size()) {
      return {options_.segmenter.think_close, TokenDistribution({{options_.segmenter.think_close, 1.0}}, 0.0), 0.0};
    }
    const TokenDistribution& d = scenario_->steps[pos.step].probe;
    return {d.mode().token, d, std::log(d.mode().probability)};
  }

  StepOutput generate_step(const StepRequest& req) override {
    tick();
    ++steps_;
    StepCollector collector(req.stop, req.budget_left, req.want_logprobs);
    std::string full = req.context;
    if (!req.prefix.empty()) {
      full += req.prefix;
      collector.push(req.prefix, req.prefix_score);
    }
    if (!collector.done()) {
      for (const auto& t : continuation(full)) {
        if (!collector.push(t.text, t.score)) break;
      }
    }
    return collector.take();
  }

  AnswerOutput generate_answer(std::string_view context) override {
    tick();
    ++answers_;
    if (!locate(context).answering) throw ScriptError("answer requested before the think phase closed");
    std::string text = answer_for(pos_from_answer_context(context));
    const auto n = static_cast<std::int64_t>(scripted_tokenize(text).size());
    return {std::move(text), n};
  }

 private:
  void tick() {
    const std::size_t n = calls_.fetch_add(1) + 1;
    if (options_.fail_after_calls && n > *options_.fail_after_calls) throw TransportError("scripted backend outage");
  }

  // Steps of the think phase in an answer-phase context.
  Position pos_from_answer_context(std::string_view context) const {
    const std::string_view rest = context.substr(prompt_.size());
    const auto close = rest.find(options_.segmenter.think_close);
    return locate(std::string(context.substr(0, prompt_.size())) + std::string(rest.substr(0, close)));
  }

  // The scripted answer is right unless some incorrect step was never followed
  // by a correct large-model step (which repairs the drift).
  std::string answer_for(const Position& pos) const {
    std::vector<std::string> texts = pos.step_texts;
    if (!pos.partial.empty()) texts.push_back(pos.partial);
    bool unrepaired_error = false;
    const auto& steps = scenario_->steps;
    for (std::size_t i = 0; i < texts.size(); ++i) {
      if (i >= steps.size()) break;
      const auto& s = steps[i];
      const std::string& t = texts[i];
      const bool is_large = t == s.large_body || (s.large_body.starts_with(t) && !s.small_body.starts_with(t));
      const bool is_small = t == s.small_body || s.small_body.starts_with(t);
      const bool correct = (is_large && s.large_correct) || (is_small && s.small_correct);
      if (!correct) unrepaired_error = true;
      // Text shared by both bodies cannot show that the large model took over.
      if (correct && is_large && !is_small && t == s.large_body) unrepaired_error = false;
    }
    if (!unrepaired_error) return scenario_->answer;
    if (!options_.wrong_answer.empty()) return options_.wrong_answer;
    std::string wrong = scenario_->answer;
    constexpr std::string_view tag = "\\boxed{";
    const auto open = wrong.rfind(tag);
    if (open == std::string::npos) return std::string(tag) + "?}";
    return wrong.replace(open + tag.size(), boxed_answer(wrong).size(), "?");
  }

  std::shared_ptr<const Scenario> scenario_;
  ModelRole role_;
  ScriptOptions options_;
  std::string prompt_;
  std::atomic<std::size_t> calls_{0};
  std::atomic<std::size_t> probes_{0};
  std::atomic<std::size_t> steps_{0};
  std::atomic<std::size_t> answers_{0};
};

inline OwnedBackends scripted_pair(std::shared_ptr<const Scenario> scenario, const ScriptOptions& options = {}) {
  return {std::make_unique<ScriptedBackend>(scenario, ModelRole::Small, options),
          std::make_unique<ScriptedBackend>(scenario, ModelRole::Large, options)};
}

inline std::pair<std::string, TokenDistribution> scripted_probe(const Scenario& sc, std::size_t step_index) {
  if (step_index >= sc.steps.size()) throw ScriptError("step index out of range");
  const auto& d = sc.steps[step_index].probe;
  return {d.mode().token, d};
}

// ---- scenario files ----

inline nlohmann::json profile_to_json(const BackendProfile& p) {
  nlohmann::json j{{"small_decode_ms", p.small_decode_ms},
                   {"large_decode_ms", p.large_decode_ms},
                   {"prefill_ms_per_token", p.prefill_ms_per_token},
                   {"switch_overhead_ms", p.switch_overhead_ms}};
  if (p.spec)
    j["spec_decoding"] = {{"draft_length", p.spec->draft_length}, {"acceptance_rate", p.spec->acceptance_rate}};
  return j;
}

inline BackendProfile profile_from_json(const nlohmann::json& j, BackendProfile base = {}) {
  if (!j.is_object()) throw MalformedInput("profile must be an object");
  base.small_decode_ms = j.value("small_decode_ms", base.small_decode_ms);
  base.large_decode_ms = j.value("large_decode_ms", base.large_decode_ms);
  base.prefill_ms_per_token = j.value("prefill_ms_per_token", base.prefill_ms_per_token);
  base.switch_overhead_ms = j.value("switch_overhead_ms", base.switch_overhead_ms);
  if (auto it = j.find("spec_decoding"); it != j.end() && !it->is_null()) {
    SpecDecoding s;
    s.draft_length = it->value("draft_length", s.draft_length);
    s.acceptance_rate = it->value("acceptance_rate", s.acceptance_rate);
    base.spec = s;
  }
  base.validate();
  return base;
}

inline nlohmann::json scenario_to_json(const Scenario& sc) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : sc.steps) {
    nlohmann::json probe = nlohmann::json::array();
    for (const auto& e : s.probe.entries()) probe.push_back({e.token, e.probability});
    nlohmann::json j{{"probe", probe},
                     {"small_body", s.small_body},
                     {"large_body", s.large_body},
                     {"small_correct", s.small_correct},
                     {"large_correct", s.large_correct}};
    if (s.probe.tail_mass() > 0.0) j["tail_mass"] = s.probe.tail_mass();
    if (!s.small_scores.empty()) {
      nlohmann::json sc_json = nlohmann::json::array();
      for (const auto& t : s.small_scores) sc_json.push_back({t.logprob, t.entropy});
      j["small_scores"] = sc_json;
    }
    if (!s.label.empty()) j["label"] = s.label;
    steps.push_back(std::move(j));
  }
  nlohmann::json out{{"question", sc.question}, {"steps", steps}, {"answer", sc.answer}, {"answer_oracle", sc.answer_oracle}};
  if (sc.profile) out["profile"] = profile_to_json(*sc.profile);
  return out;
}

inline Scenario scenario_from_json(const nlohmann::json& j, const SegmenterConfig& seg = {}) {
  try {
    Scenario sc;
    sc.question = j.at("question").get<std::string>();
    sc.answer = j.at("answer").get<std::string>();
    sc.answer_oracle = j.value("answer_oracle", std::string{});
    for (const auto& s : j.at("steps")) {
      StepScript step;
      std::vector<TokenEntry> entries;
      double sum = 0.0;
      for (const auto& e : s.at("probe")) {
        entries.push_back({e.at(0).get<std::string>(), e.at(1).get<double>()});
        sum += entries.back().probability;
      }
      const double tail = s.contains("tail_mass") ? s["tail_mass"].get<double>() : std::max(0.0, 1.0 - sum);
      step.probe = TokenDistribution(std::move(entries), tail < kMassTolerance && !s.contains("tail_mass") ? 0.0 : tail);
      step.small_body = s.at("small_body").get<std::string>();
      step.large_body = s.at("large_body").get<std::string>();
      step.small_correct = s.value("small_correct", true);
      step.large_correct = s.value("large_correct", true);
      if (auto it = s.find("small_scores"); it != s.end()) {
        for (const auto& t : *it) step.small_scores.push_back({t.at(0).get<double>(), t.at(1).get<double>()});
      }
      step.label = s.value("label", std::string{});
      sc.steps.push_back(std::move(step));
    }
    if (auto it = j.find("profile"); it != j.end() && !it->is_null()) sc.profile = profile_from_json(*it);
    validate_scenario(sc, seg);
    return sc;
  } catch (const nlohmann::json::exception& e) {
    throw MalformedInput(std::string("scenario: ") + e.what());
  } catch (const InvalidDistribution& e) {
    throw MalformedInput(std::string("scenario probe: ") + e.what());
  }
}

inline Scenario load_scenario(const std::filesystem::path& path, const SegmenterConfig& seg = {}) {
  std::ifstream in(path);
  if (!in) throw MalformedInput("cannot open scenario file " + path.string());
  try {
    return scenario_from_json(nlohmann::json::parse(in), seg);
  } catch (const nlohmann::json::parse_error& e) {
    throw MalformedInput(path.string() + ": " + e.what());
  } catch (const MalformedInput& e) {
    throw MalformedInput(path.string() + ": " + e.what());
  }
}

/// Every *.json file in `dir`, in filename order.
inline std::vector<Scenario> load_scenario_dir(const std::filesystem::path& dir, const SegmenterConfig& seg = {}) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Scenario> out;
  for (const auto& f : files) out.push_back(load_scenario(f, seg));
  return out;
}

inline void save_scenario(const Scenario& sc, const std::filesystem::path& path) {
  std::ofstream out(path);
  out << scenario_to_json(sc).dump(2) << '\n';
}

}  // namespace steproute
