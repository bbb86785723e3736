#pragma once

// Streaming reasoning-step segmentation.
//
// Tokens are fed one at a time. A step ends where the delimiter completes;
// when the delimiter is a run of one repeated character ("\n\n"), a longer run
// inside the completing token extends the step to the end of the run. Text in
// the completing token after the boundary opens the next step. A delimiter only
// counts once the current step holds some non-delimiter text, so leading
// newlines never yield empty steps.

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace steproute {

inline constexpr std::int64_t kDefaultReasoningBudget = 8192;

struct SegmenterConfig {
  std::string delimiter = "\n\n";
  std::string think_open = "<think>";
  std::string think_close = "</think>";
  std::int64_t budget_tokens = kDefaultReasoningBudget;
};

enum class Phase { PreThink, Thinking, Answering };

struct SegmentEvent {
  enum class Kind { StepComplete, ThinkOpened, ThinkClosed, BudgetExhausted, StreamEnd };

  Kind kind = Kind::StreamEnd;
  std::string step_text;                    // StepComplete only
  std::size_t token_begin = 0;              // [token_begin, token_end) of the step
  std::size_t token_end = 0;

  friend bool operator==(const SegmentEvent&, const SegmentEvent&) = default;
};

class StepSegmenter {
 public:
  explicit StepSegmenter(SegmenterConfig config = {}, Phase start = Phase::PreThink)
      : config_(std::move(config)), phase_(start) {
    uniform_delimiter_ = !config_.delimiter.empty() &&
                         config_.delimiter.find_first_not_of(config_.delimiter.front()) == std::string::npos;
  }

  const SegmenterConfig& config() const noexcept { return config_; }
  Phase phase() const noexcept { return phase_; }
  std::int64_t tokens_emitted() const noexcept { return tokens_emitted_; }
  bool budget_exhausted() const noexcept { return budget_hit_; }
  const std::string& pending_text() const noexcept { return buffer_; }
  const std::string& answer_text() const noexcept { return answer_; }

  std::vector<SegmentEvent> feed(std::string_view token_text) {
    std::vector<SegmentEvent> events;
    const bool counts_toward_budget = phase_ != Phase::Answering;
    const std::size_t token_index = tokens_seen_++;

    for (char c : token_text) {
      if (phase_ == Phase::Answering) {
        answer_.push_back(c);
        continue;
      }
      if (pending_boundary_) {
        if (uniform_delimiter_ && c == config_.delimiter.front()) {
          buffer_.push_back(c);
          continue;
        }
        complete_step(events, token_index + 1);
      }
      buffer_.push_back(c);
      has_content_ |= !is_delim_char(c);
      if (match_markers(events, token_index)) continue;
      if (has_content_ && ends_with(buffer_, config_.delimiter)) pending_boundary_ = true;
    }
    if (pending_boundary_) complete_step(events, token_index + 1);

    if (counts_toward_budget) {
      ++tokens_emitted_;
      if (!budget_hit_ && tokens_emitted_ >= config_.budget_tokens) {
        budget_hit_ = true;
        events.push_back({SegmentEvent::Kind::BudgetExhausted, {}, step_begin_, tokens_seen_});
      }
    }
    return events;
  }

  /// Ends the stream: residual step text (if any) becomes a final step.
  std::vector<SegmentEvent> flush() {
    std::vector<SegmentEvent> events;
    if (phase_ != Phase::Answering && !buffer_.empty()) complete_step(events, tokens_seen_);
    events.push_back({SegmentEvent::Kind::StreamEnd, {}, tokens_seen_, tokens_seen_});
    return events;
  }

 private:
  static bool ends_with(std::string_view s, std::string_view suffix) {
    return !suffix.empty() && s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
  }

  bool is_delim_char(char c) const {
    return config_.delimiter.find(c) != std::string::npos;
  }

  bool match_markers(std::vector<SegmentEvent>& events, std::size_t token_index) {
    if (phase_ == Phase::PreThink && ends_with(buffer_, config_.think_open)) {
      // Anything before the opening marker is preamble, not reasoning.
      buffer_.clear();
      has_content_ = false;
      phase_ = Phase::Thinking;
      step_begin_ = token_index + 1;
      events.push_back({SegmentEvent::Kind::ThinkOpened, {}, token_index, token_index + 1});
      return true;
    }
    if (ends_with(buffer_, config_.think_close)) {
      buffer_.resize(buffer_.size() - config_.think_close.size());
      if (!buffer_.empty()) complete_step(events, token_index + 1);
      phase_ = Phase::Answering;
      events.push_back({SegmentEvent::Kind::ThinkClosed, {}, token_index, token_index + 1});
      return true;
    }
    return false;
  }

  void complete_step(std::vector<SegmentEvent>& events, std::size_t end) {
    events.push_back({SegmentEvent::Kind::StepComplete, std::move(buffer_), step_begin_, end});
    buffer_.clear();
    has_content_ = false;
    pending_boundary_ = false;
    step_begin_ = end;
  }

  SegmenterConfig config_;
  Phase phase_;
  bool uniform_delimiter_ = true;
  std::string buffer_;
  std::string answer_;
  bool has_content_ = false;
  bool pending_boundary_ = false;
  bool budget_hit_ = false;
  std::int64_t tokens_emitted_ = 0;
  std::size_t tokens_seen_ = 0;
  std::size_t step_begin_ = 0;
};

}  // namespace steproute
