#pragma once

// The three capabilities the router needs from a text-generation backend:
// probe one token with its distribution, continue a step to its boundary, and
// write the final answer.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "steproute/errors.hpp"
#include "steproute/segmenter.hpp"
#include "steproute/uncertainty.hpp"

namespace steproute {

enum class ModelRole { Small, Large };
enum class Boundary { Delimiter, ThinkClosed, EOS, Budget };

inline constexpr std::string_view kDefaultPromptTemplate = "{question}\n<think>\n";

inline std::string render_prompt(std::string_view tmpl, std::string_view question) {
  std::string out(tmpl);
  constexpr std::string_view slot = "{question}";
  if (auto pos = out.find(slot); pos != std::string::npos) out.replace(pos, slot.size(), question);
  return out;
}

struct ProbeResult {
  std::string token;
  TokenDistribution distribution;
  double token_logprob = 0.0;
};

struct StepRequest {
  std::string context;
  std::string prefix;                      // probe token to continue from, may be empty
  std::optional<TokenScore> prefix_score;  // metrics of the prefix token, if known
  SegmenterConfig stop;                    // delimiter and think markers; budget_tokens ignored
  std::int64_t budget_left = kDefaultReasoningBudget;
  bool want_logprobs = false;
};

struct StepOutput {
  std::string text;
  std::vector<std::string> tokens;
  Boundary boundary = Boundary::EOS;
  std::optional<StepLogprobs> logprobs;
  std::string overflow;  // text generated past the boundary inside the completing token
};

struct AnswerOutput {
  std::string text;
  std::int64_t token_count = 0;
};

class Backend {
 public:
  virtual ~Backend() = default;

  virtual std::string_view name() const = 0;
  virtual ProbeResult probe_first(std::string_view context) = 0;
  virtual StepOutput generate_step(const StepRequest& request) = 0;
  virtual AnswerOutput generate_answer(std::string_view context) = 0;
  virtual bool healthy() { return true; }
};

/// Feeds a token stream through a segmenter and stops at the first step
/// boundary. Shared by every backend implementation so the boundary rules are
/// enforced client-side regardless of how the server handles stop strings.
class StepCollector {
 public:
  StepCollector(SegmenterConfig stop, std::int64_t budget_left, bool want_logprobs)
      : segmenter_(with_budget(std::move(stop), budget_left), Phase::Thinking), want_logprobs_(want_logprobs) {
    if (budget_left < 1) throw Error("generate_step needs budget_left >= 1");
  }

  bool done() const noexcept { return done_; }

  /// Returns true while more tokens are wanted.
  bool push(std::string_view token, std::optional<TokenScore> score = std::nullopt) {
    if (done_) return false;
    out_.tokens.emplace_back(token);
    if (want_logprobs_) scores_.push_back(score.value_or(TokenScore{}));

    auto events = segmenter_.feed(token);
    for (std::size_t i = 0; i < events.size(); ++i) {
      const auto& ev = events[i];
      if (done_) {
        if (ev.kind == SegmentEvent::Kind::StepComplete) out_.overflow += ev.step_text;
        continue;
      }
      switch (ev.kind) {
        case SegmentEvent::Kind::StepComplete: {
          const bool closes = i + 1 < events.size() && events[i + 1].kind == SegmentEvent::Kind::ThinkClosed;
          finish(ev.step_text, closes ? Boundary::ThinkClosed : Boundary::Delimiter);
          if (closes) ++i;
          break;
        }
        case SegmentEvent::Kind::ThinkClosed:
          finish(std::string{}, Boundary::ThinkClosed);
          break;
        case SegmentEvent::Kind::BudgetExhausted:
          finish(segmenter_.pending_text(), Boundary::Budget);
          break;
        default:
          break;
      }
    }
    if (done_ && out_.boundary != Boundary::Budget) out_.overflow += segmenter_.pending_text();
    return !done_;
  }

  /// Closes the step when the stream ends on its own (EOS).
  StepOutput take() {
    if (!done_) finish(segmenter_.pending_text(), Boundary::EOS);
    if (want_logprobs_) out_.logprobs = std::move(scores_);
    return std::move(out_);
  }

 private:
  static SegmenterConfig with_budget(SegmenterConfig c, std::int64_t budget) {
    c.budget_tokens = budget;
    return c;
  }

  void finish(std::string text, Boundary b) {
    out_.text = std::move(text);
    out_.boundary = b;
    done_ = true;
  }

  StepSegmenter segmenter_;
  bool want_logprobs_;
  bool done_ = false;
  StepOutput out_;
  StepLogprobs scores_;
};

}  // namespace steproute
