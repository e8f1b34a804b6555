#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rebalance/trace.hpp"

namespace rebalance::stats {

struct WindowConfig {
  std::size_t size = 2;
};

struct Thresholds {
  double q_lo = 0.25;
  double q_hi = 0.75;
  double conf_lo = 0.0;  // tau_c^L
  double conf_hi = 0.0;  // tau_c^H
  double var_lo = 0.0;   // tau_v^L
  double var_hi = 0.0;   // tau_v^H

  bool operator==(const Thresholds&) const = default;
};

enum class StepLabel { Normal, Overthink, Underthink };

const char* to_string(StepLabel label);

struct StepStats {
  std::size_t step_index = 1;
  double confidence = 0.0;
  double variance = 0.0;
  StepLabel label = StepLabel::Normal;
};

/// Geometric mean of per-token max probabilities: exp(mean(ln p)).
double step_confidence(std::span<const double> p_max);

/// Population variance of a window's contents; 0 for a single element.
double window_variance(std::span<const double> window);

/// Variance over the trailing window {max(1, s-W+1), ..., s} for every step.
std::vector<double> windowed_variance(std::span<const double> confidences, WindowConfig w = {});

/// Linear interpolation between order statistics (h = (n-1)q + 1, 1-based).
double empirical_quantile(std::span<const double> values, double q);

Thresholds compute_thresholds(std::span<const double> confidences,
                              std::span<const double> variances, double q_lo = 0.25,
                              double q_hi = 0.75);

/// Overthink is tested first, so degenerate thresholds never yield two labels.
StepLabel classify(double confidence, double variance, const Thresholds& th);

std::vector<StepStats> classify_steps(std::span<const double> confidences,
                                      std::span<const double> variances,
                                      const Thresholds& th);

struct Decision {
  std::string decision_id;
  bool correct = false;
};

/// Earliest 1-based step from which the decision never changes and is correct.
std::optional<std::size_t> stability_index(std::span<const Decision> decisions);

/// Steps before s* are underthinking, steps after it overthinking, s* itself normal.
/// All steps are normal when no stable index exists.
std::vector<StepLabel> stability_labels(std::span<const Decision> decisions);

// ---------------------------------------------------------------------------
// Markov persistence of binarized confidence

struct TransitionStats {
  std::uint64_t hh = 0, hl = 0, lh = 0, ll = 0;
  double median = 0.0;
  double p_hh = 0.0;  // P(H->H), NaN when the H row is empty
  double p_ll = 0.0;  // P(L->L), NaN when the L row is empty
  double same_rate = 0.0;
  double odds_ratio = 0.0;  // +inf when HL*LH = 0 < HH*LL, NaN when both products vanish
  std::optional<double> ci_lo, ci_hi;  // Woolf interval, only when every cell > 0
  double p_value = 1.0;               // two-sided Fisher exact
};

/// Two-sided Fisher exact test on [[a, b], [c, d]]; sums every table with the
/// observed margins whose point probability does not exceed the observed one.
double fisher_exact_two_sided(std::uint64_t a, std::uint64_t b, std::uint64_t c,
                              std::uint64_t d);

/// Binarizes each trajectory against the pooled median (ties high) and counts
/// adjacent transitions within trajectories only.
TransitionStats transition_stats(std::span<const std::vector<double>> trajectories);
TransitionStats transition_stats(std::span<const double> confidences);

/// Statistics from already-binarized counts (median left at 0).
TransitionStats transition_stats_from_counts(std::uint64_t hh, std::uint64_t hl,
                                             std::uint64_t lh, std::uint64_t ll);

// ---------------------------------------------------------------------------
// Rank correlation

/// Average ranks (1-based); tied values share the mean of their positions.
std::vector<double> average_ranks(std::span<const double> x);

/// Spearman's rho; nullopt when either input has zero rank variance.
std::optional<double> spearman(std::span<const double> x, std::span<const double> y);

struct CorrelationReport {
  std::optional<double> rho;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  std::size_t n = 0;
  std::size_t resamples = 0;
  std::size_t degenerate_resamples = 0;  // replicates with undefined rho, excluded
  bool small_sample = false;             // n < 10
};

/// Paired percentile bootstrap (2.5% / 97.5%). Replicate r draws n indices
/// from Rng(derive_seed(seed, r)) via Rng::below.
CorrelationReport bootstrap_ci(std::span<const double> x, std::span<const double> y,
                               std::size_t resamples = 2000, std::uint64_t seed = 42);

// ---------------------------------------------------------------------------
// Per-trace statistics

/// Confidence of every step in a trace.
std::vector<double> trace_confidences(const trace::Trace& t);

struct TraceAggregates {
  std::size_t word_count = 0;
  double min_confidence = 0.0;
  double confidence_variance = 0.0;  // population variance over steps
};

std::size_t word_count(std::string_view text);
TraceAggregates trace_aggregates(const trace::Trace& t);

}  // namespace rebalance::stats
