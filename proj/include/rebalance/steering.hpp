#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "rebalance/confidence.hpp"
#include "rebalance/trace.hpp"

namespace rebalance::steering {

using Vector = std::vector<double>;
using trace::LayerId;

struct LabeledHidden {
  Vector hidden;
  stats::StepLabel label = stats::StepLabel::Normal;
};

struct Prototypes {
  Vector mu_over;
  Vector mu_under;
  std::size_t n_over = 0;
  std::size_t n_under = 0;
  LayerId layer = 0;
};

struct SteeringVector {
  Vector v;             // unit direction from the underthinking to the overthinking prototype
  double d_prot = 0.0;  // distance between the prototypes
  LayerId layer = 0;
};

struct BoundaryDistances {
  double t = 0.0;  // separating threshold along v
  double d_over_moderate = 0.0;
  double d_over_aggressive = 0.0;
  double d_under_moderate = 0.0;
  double d_under_aggressive = 0.0;
  double rho_moderate = 0.05;
  double rho_aggressive = 0.10;
  double d_prot = 0.0;
  bool no_aggressive_evidence = false;  // empty projection set, d_Oa fell back to d_Om
};

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);

/// Means of the overthink and underthink samples; normal samples are ignored.
/// Sums run in sample order.
Prototypes aggregate_prototypes(std::span<const LabeledHidden> samples, LayerId layer);

SteeringVector steering_vector(const Prototypes& p);

double project(std::span<const double> h, const SteeringVector& sv);

Vector apply_steering(std::span<const double> h, const SteeringVector& sv, double alpha);

struct DistanceOptions {
  double rho_moderate = 0.05;
  double rho_aggressive = 0.10;
  /// Replaces the maximum projection with this quantile when set (outlier-heavy corpora).
  std::optional<double> robust_quantile;
};

BoundaryDistances boundary_distances(const Prototypes& p, const SteeringVector& sv,
                                     std::span<const double> projections_over,
                                     const DistanceOptions& opt = {});

}  // namespace rebalance::steering
