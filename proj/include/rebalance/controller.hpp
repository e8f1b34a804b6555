#pragma once

#include <cstddef>
#include <deque>
#include <memory>
#include <optional>
#include <vector>

#include "rebalance/confidence.hpp"
#include "rebalance/steering.hpp"
#include "rebalance/surface.hpp"
#include "rebalance/trace.hpp"

namespace rebalance::control {

struct SessionConfig {
  surface::ControlSurface surface;
  std::shared_ptr<const steering::SteeringVector> steering;
  stats::WindowConfig window;
  trace::SegmentConfig segment;
  surface::Actuator actuator = surface::Actuator::HiddenAdditive;
  /// Hidden width of the target layer, when the client declares one.
  std::optional<std::size_t> declared_width;
};

struct SteeringDirective {
  std::size_t step = 0;  // step whose first token receives the injection
  double alpha = 0.0;
  double lambda = 0.0;
  int delta = 0;
  trace::LayerId layer = 0;

  bool operator==(const SteeringDirective&) const = default;
};

struct TemperatureDirective {
  std::size_t step = 0;
  double temperature = 0.0;

  bool operator==(const TemperatureDirective&) const = default;
};

struct ClosedStep {
  std::size_t step_index = 0;
  double confidence = 0.0;
  double variance = 0.0;
};

enum class Phase { Thinking, Done };

/**
 * One decoding stream. Single owner; events must arrive in order.
 *
 * Closing step s yields the directive for step s+1, computed from
 * (c_s, v_s): the injection at a step's first token can only use
 * statistics of steps that are already complete. Step 1 carries no
 * directive, and nothing is emitted once the think-end marker completes.
 * State is O(W + marker length) regardless of stream length.
 */
class Session {
 public:
  explicit Session(std::shared_ptr<const SessionConfig> cfg);

  /// hidden_additive actuator.
  std::optional<SteeringDirective> feed(const trace::TokenEvent& ev);
  /// dynamic_temperature actuator.
  std::optional<TemperatureDirective> drive_temperature(const trace::TokenEvent& ev);

  /// Closes an unterminated open step without emitting anything, so that the
  /// last step's statistics are available; the session is done afterwards.
  std::optional<ClosedStep> finish();

  Phase phase() const { return phase_; }
  const std::optional<ClosedStep>& last_closed() const { return last_closed_; }
  std::size_t current_step() const { return step_; }
  /// Steps seen so far, including the open one.
  std::size_t steps_seen() const { return steps_seen_; }
  std::size_t tokens_seen() const { return tokens_seen_; }
  const SessionConfig& config() const { return *cfg_; }

 private:
  struct Advance {
    std::optional<ClosedStep> closed;
    bool ended = false;
  };
  Advance advance(const trace::TokenEvent& ev);
  ClosedStep close_step();

  std::shared_ptr<const SessionConfig> cfg_;
  trace::StepSegmenter segmenter_;
  std::deque<double> window_;
  double log_sum_ = 0.0;
  std::size_t step_tokens_ = 0;
  std::size_t step_ = 1;
  std::size_t steps_seen_ = 0;
  std::size_t tokens_seen_ = 0;
  std::optional<std::size_t> last_index_;
  std::optional<ClosedStep> last_closed_;
  Phase phase_ = Phase::Thinking;
};

/// Validates the config and opens a fresh session.
Session open_session(const SessionConfig& cfg);

struct ReplayRow {
  std::size_t step = 0;
  double confidence = 0.0;
  double variance = 0.0;
  double alpha = 0.0;  // weight applied at this step's first token
};

/// Offline replay over a recorded trace. lag = 1 reproduces the online
/// controller; lag = 0 drives each step with its own statistics.
std::vector<ReplayRow> replay(const trace::Trace& t, const surface::ControlSurface& cs,
                              stats::WindowConfig window, std::size_t lag = 1);

}  // namespace rebalance::control
