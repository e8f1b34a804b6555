#include "rebalance/steering.hpp"

#include <algorithm>
#include <cmath>

#include "rebalance/error.hpp"

namespace rebalance::steering {

namespace {
void require_same_dim(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw data_error("dimension", std::string(what) + ": dimension mismatch (" +
                                      std::to_string(a) + " vs " + std::to_string(b) + ")");
  }
}
}  // namespace

double dot(std::span<const double> a, std::span<const double> b) {
  require_same_dim(a.size(), b.size(), "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

Prototypes aggregate_prototypes(std::span<const LabeledHidden> samples, LayerId layer) {
  Prototypes p;
  p.layer = layer;
  std::size_t dim = 0;
  for (const auto& s : samples) {
    if (s.label == stats::StepLabel::Normal) continue;
    if (s.hidden.empty()) throw data_error("dimension", "empty hidden vector");
    if (dim == 0) {
      dim = s.hidden.size();
      p.mu_over.assign(dim, 0.0);
      p.mu_under.assign(dim, 0.0);
    }
    require_same_dim(s.hidden.size(), dim, "aggregate_prototypes");
    Vector& acc = s.label == stats::StepLabel::Overthink ? p.mu_over : p.mu_under;
    (s.label == stats::StepLabel::Overthink ? p.n_over : p.n_under) += 1;
    for (std::size_t i = 0; i < dim; ++i) acc[i] += s.hidden[i];
  }
  if (p.n_over == 0) {
    throw data_error("extraction", "no overthinking samples; cannot form the overthinking prototype");
  }
  if (p.n_under == 0) {
    throw data_error("extraction",
                     "no underthinking samples; cannot form the underthinking prototype");
  }
  for (double& x : p.mu_over) x /= static_cast<double>(p.n_over);
  for (double& x : p.mu_under) x /= static_cast<double>(p.n_under);
  return p;
}

SteeringVector steering_vector(const Prototypes& p) {
  require_same_dim(p.mu_over.size(), p.mu_under.size(), "steering_vector");
  SteeringVector sv;
  sv.layer = p.layer;
  sv.v.resize(p.mu_over.size());
  for (std::size_t i = 0; i < sv.v.size(); ++i) sv.v[i] = p.mu_over[i] - p.mu_under[i];
  sv.d_prot = norm(sv.v);
  if (!(sv.d_prot >= 1e-9)) {
    throw data_error("extraction", "prototypes coincide; steering direction is undefined");
  }
  for (double& x : sv.v) x /= sv.d_prot;
  return sv;
}

double project(std::span<const double> h, const SteeringVector& sv) { return dot(h, sv.v); }

Vector apply_steering(std::span<const double> h, const SteeringVector& sv, double alpha) {
  if (!std::isfinite(alpha)) throw domain_error("steering weight must be finite");
  require_same_dim(h.size(), sv.v.size(), "apply_steering");
  Vector out(h.begin(), h.end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += alpha * sv.v[i];
  return out;
}

BoundaryDistances boundary_distances(const Prototypes& p, const SteeringVector& sv,
                                     std::span<const double> projections_over,
                                     const DistanceOptions& opt) {
  if (!(opt.rho_moderate > 0.0 && opt.rho_moderate < opt.rho_aggressive)) {
    throw config_error("underthinking fractions must satisfy 0 < rho_m < rho_a");
  }
  BoundaryDistances d;
  d.rho_moderate = opt.rho_moderate;
  d.rho_aggressive = opt.rho_aggressive;
  d.d_prot = sv.d_prot;

  const double proj_over = project(p.mu_over, sv);
  const double proj_under = project(p.mu_under, sv);
  d.t = 0.5 * (proj_over + proj_under);
  d.d_over_moderate = proj_over - d.t;

  if (projections_over.empty()) {
    d.d_over_aggressive = d.d_over_moderate;
    d.no_aggressive_evidence = true;
  } else if (opt.robust_quantile) {
    d.d_over_aggressive = stats::empirical_quantile(projections_over, *opt.robust_quantile) - d.t;
  } else {
    d.d_over_aggressive =
        *std::max_element(projections_over.begin(), projections_over.end()) - d.t;
  }
  d.d_under_moderate = opt.rho_moderate * sv.d_prot;
  d.d_under_aggressive = opt.rho_aggressive * sv.d_prot;
  return d;
}

}  // namespace rebalance::steering
