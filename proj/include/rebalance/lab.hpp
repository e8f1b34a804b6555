#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "rebalance/json_util.hpp"
#include "rebalance/steering.hpp"
#include "rebalance/surface.hpp"
#include "rebalance/trace.hpp"

namespace rebalance::lab {

// ---------------------------------------------------------------------------
// Two-state confidence chain

struct Interval {
  double lo = 0.0;
  double hi = 1.0;
};

struct MarkovChainConfig {
  double p_stay = 0.666;
  std::size_t n = 1000;
  Interval low{0.2, 0.4};   // emission range of state L
  Interval high{0.6, 0.9};  // emission range of state H
  std::uint64_t seed = 42;
};

struct MarkovSample {
  std::vector<double> values;
  std::vector<bool> high;  // planted state per position
};

/// Initial state is a fair coin; every later position keeps the previous
/// state with probability p_stay. Emissions are uniform in the state's range.
MarkovSample gen_markov_confidence(const MarkovChainConfig& cfg);

// ---------------------------------------------------------------------------
// Labelled hidden-state clusters

struct ClusterConfig {
  steering::Vector mu_over;
  steering::Vector mu_under;
  steering::Vector mu_normal;  // may be empty when n_normal = 0
  double sigma = 1.0;          // per-coordinate standard deviation
  std::size_t n_over = 500;
  std::size_t n_under = 500;
  std::size_t n_normal = 0;
  /// Probability that an overthink/underthink sample carries the other mode's label.
  double label_noise = 0.0;
  std::uint64_t seed = 42;
};

struct ClusterSample {
  std::vector<steering::LabeledHidden> samples;  // observed (possibly flipped) labels
  std::vector<stats::StepLabel> true_labels;
};

/// Samples are emitted mode by mode (overthink, underthink, normal).
ClusterSample gen_clustered_hidden(const ClusterConfig& cfg);

/// Centers at +/- (separation/2) sigma along a seeded random unit direction,
/// which is returned in `direction`.
struct PlantedClusters {
  ClusterConfig config;
  steering::Vector direction;
};
PlantedClusters planted_clusters(std::size_t dim, double separation_sigmas, std::size_t per_mode,
                                 double label_noise, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Closed-loop reasoning simulator

/**
 * Each episode draws a required step count m* and a latent x (the
 * projection of the step-first hidden state on the true mode direction).
 *
 *   x_{s+1} = x_s + theta (target_s - x_s) + sigma N(0,1) + kappa cos(v_est, e) alpha_{s+1}
 *
 * target_s is target_hasty for hasty episodes and target_normal otherwise
 * while s < m*, and target_post from m* on. Step confidence is
 * c_s = clamp(c_mid - c_slope x_s + (jitter0 + jitter1 max(x_s, 0)) N(0,1)),
 * so confidence falls and fluctuates more on the overthinking side. After
 * each step the episode stops with probability
 * h_lo + (h_hi - h_lo) / (1 + exp((x_s - x_mid) / h_scale)),
 * which decreases in x: exploration keeps an episode going. An episode is
 * correct iff it stops at or after m*.
 *
 * Random draws happen in a fixed order that does not depend on the policy,
 * so kappa = 0 reproduces the unsteered trajectories exactly.
 */
struct SimConfig {
  std::size_t episodes = 10000;
  std::uint64_t seed = 42;
  std::size_t max_steps = 200;

  std::size_t m_min = 3;
  std::size_t m_max = 12;
  double p_hasty = 0.3;

  double x0_sd = 0.3;
  double theta = 0.3;
  double target_normal = 0.0;
  double target_hasty = -1.5;
  double target_post = 1.5;
  double sigma = 0.25;
  double kappa = 1.0;

  double h_lo = 0.02;
  double h_hi = 0.6;
  double x_mid = -0.5;
  double h_scale = 0.3;

  double c_mid = 0.75;
  double c_slope = 0.1;
  double jitter0 = 0.01;
  double jitter1 = 0.04;
  double c_floor = 0.05;
  double c_ceil = 0.999;

  std::size_t hidden_dim = 8;
  double hidden_noise = 0.2;
  std::size_t tokens_per_step = 4;  // including the delimiter token

  std::size_t calibration_episodes = 300;
  std::uint64_t calibration_seed = 7;

  void validate() const;
};

SimConfig sim_config_from_json(const Json& j);
Json to_json(const SimConfig& cfg);

enum class PolicyKind { None, Surface, Constant };

struct Policy {
  PolicyKind kind = PolicyKind::None;
  double constant_alpha = 0.0;  // PolicyKind::Constant
};

struct EpisodeLog {
  std::size_t episode = 0;
  std::size_t m_star = 0;
  bool hasty = false;
  std::size_t steps = 0;
  bool correct = false;
  bool truncated = false;
  std::size_t directives = 0;
  double mean_alpha = 0.0;

  bool operator==(const EpisodeLog&) const = default;
};

struct SimSummary {
  std::size_t episodes = 0;
  double mean_steps = 0.0;
  double accuracy = 0.0;
  double premature_rate = 0.0;  // stopped before m*
  double mean_overrun = 0.0;    // steps - m* over correct episodes
  std::size_t truncated = 0;
};

struct SimResult {
  SimSummary summary;
  std::vector<EpisodeLog> episodes;
};

/// Hidden-state direction the simulator plants the latent along (e_1).
steering::Vector true_direction(const SimConfig& cfg);

/// Recorded unsteered episodes with step-first hidden states at layer 0; the
/// input to extraction and surface fitting.
std::vector<trace::Trace> record_traces(const SimConfig& cfg, std::size_t episodes,
                                        std::uint64_t seed);

/// Needs `surface` and `sv` for PolicyKind::Surface and `sv` for Constant.
SimResult run_closed_loop(const SimConfig& cfg, const Policy& policy,
                          const surface::ControlSurface* surface,
                          const steering::SteeringVector* sv);

SimSummary summarize(const std::vector<EpisodeLog>& episodes);

}  // namespace rebalance::lab
