#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace rebalance::trace {

/// Floor applied to p_max at ingestion so that log(p) stays finite.
inline constexpr double kMinProbability = 1e-12;

/// Clamps into [kMinProbability, 1]. Values above 1, below 0 or NaN throw.
double clamp_probability(double p);

struct TokenEvent {
  std::size_t index = 0;
  std::string text;
  double p_max = 1.0;

  bool operator==(const TokenEvent&) const = default;
};

using LayerId = int;
using HiddenMap = std::map<LayerId, std::vector<double>>;

struct StepSpan {
  std::size_t step_index = 1;  // 1-based
  std::size_t first_token = 0;
  std::size_t last_token = 0;
  HiddenMap hidden;  // hidden state at first_token, per layer

  std::size_t token_count() const { return last_token - first_token + 1; }
  bool operator==(const StepSpan&) const = default;
};

struct AnswerLabel {
  std::size_t step = 1;
  std::string decision;
  bool correct = false;

  bool operator==(const AnswerLabel&) const = default;
};

struct Trace {
  std::string trace_id;
  std::vector<TokenEvent> tokens;
  std::vector<StepSpan> steps;
  std::optional<std::size_t> think_end;  // index of the token completing the marker
  std::map<std::string, std::string> meta;
  std::vector<AnswerLabel> answer_labels;

  bool operator==(const Trace&) const = default;
};

struct SegmentConfig {
  std::string delimiter = "\n\n";
  std::string think_end_marker = "</think>";
};

/// Reads "delimiter" / "think_end_marker" overrides from trace meta.
SegmentConfig segment_config_from_meta(const std::map<std::string, std::string>& meta);

/**
 * Incremental pattern matcher over a character stream split into fragments.
 *
 * Matches are leftmost and non-overlapping over the concatenated text (the
 * same matches std::string::find produces when restarted after each hit).
 * Only the last |pattern|-1 unmatched characters are retained.
 */
class PatternScanner {
 public:
  explicit PatternScanner(std::string pattern);

  struct Match {
    std::size_t begin;  // absolute character offsets
    std::size_t end;
  };

  /// Appends a fragment; returns matches completed inside it.
  std::vector<Match> push(std::string_view fragment);

  std::size_t position() const { return position_; }
  std::size_t retained() const { return tail_.size(); }

 private:
  std::string pattern_;
  std::string tail_;
  std::size_t tail_begin_ = 0;
  std::size_t position_ = 0;
};

/**
 * Streaming step segmentation.
 *
 * A token that completes the delimiter ends the current step; the step ends
 * only if it holds at least one character outside delimiter matches, so
 * repeated delimiters never produce empty steps. The token completing the
 * think-end marker is the last token of the final step.
 */
class StepSegmenter {
 public:
  explicit StepSegmenter(const SegmentConfig& cfg);

  struct Outcome {
    bool opens_step = false;   // this token is the first of a new step
    bool closes_step = false;  // this token is the last of its step
    bool think_ended = false;  // this token completes the think-end marker
  };

  Outcome push(std::string_view fragment);

  bool done() const { return done_; }
  std::size_t retained_chars() const {
    return delimiter_.retained() + (marker_ ? marker_->retained() : 0);
  }

 private:
  PatternScanner delimiter_;
  std::optional<PatternScanner> marker_;  // empty marker disables think-end detection
  bool step_open_ = false;
  bool done_ = false;
  std::size_t step_start_ = 0;
  std::size_t matched_in_step_ = 0;
};

struct Segmentation {
  std::vector<StepSpan> steps;
  std::optional<std::size_t> think_end;
};

/// Batch segmentation; a trailing unterminated step is kept.
Segmentation segment_steps(std::span<const TokenEvent> tokens,
                           const SegmentConfig& cfg = {});

/// p_max values of the tokens in one span.
std::vector<double> span_probabilities(const Trace& t, const StepSpan& span);

/// Decoded text of the think phase (tokens before think_end, or all tokens).
std::string think_text(const Trace& t);

std::string write_trace(const Trace& t);
Trace read_trace(std::string_view bytes);
/// A corpus file holds one or more traces back to back.
std::vector<Trace> read_corpus(std::string_view bytes);
std::vector<Trace> read_corpus_file(const std::string& path);

}  // namespace rebalance::trace
