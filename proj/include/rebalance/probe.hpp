#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "rebalance/trace.hpp"

namespace rebalance::probe {

struct ProbeConfig {
  std::size_t pca_dim = 64;
  double lambda = 1.0;
  double train_fraction = 0.8;
  std::uint64_t seed = 42;
};

void validate(const ProbeConfig& cfg);

struct Pca {
  Eigen::VectorXd mean;        // d
  Eigen::MatrixXd components;  // d x k, columns by descending eigenvalue
  Eigen::VectorXd eigenvalues; // k
  double retained_variance = 0.0;
  std::size_t k_requested = 0;
  bool k_reduced = false;  // k was cut to the sample rank

  std::size_t k() const { return static_cast<std::size_t>(components.cols()); }
  Eigen::MatrixXd project(const Eigen::MatrixXd& x) const;
};

/// Sample-covariance PCA (n-1 normalisation). Each component is signed so its
/// largest-magnitude coordinate is positive (first such coordinate on ties).
Pca pca_fit(const Eigen::MatrixXd& x, std::size_t k);

struct PcaProjection {
  Eigen::MatrixXd z;
  double retained_variance = 0.0;
  bool k_reduced = false;
};
PcaProjection pca_project(const Eigen::MatrixXd& x, std::size_t k);

struct Ridge {
  Eigen::VectorXd w;
  double b = 0.0;
  bool pseudo_inverse = false;  // lambda = 0 on a rank-deficient system

  Eigen::VectorXd predict(const Eigen::MatrixXd& z) const;
};

/// min sum (c - z w - b)^2 + lambda |w|^2, intercept unpenalised.
Ridge ridge_fit(const Eigen::MatrixXd& z, std::span<const double> c, double lambda);

/// 1 - SS_res / SS_tot; nullopt when the targets are constant.
std::optional<double> r_squared(std::span<const double> y, const Eigen::VectorXd& yhat);

struct LayerScore {
  trace::LayerId layer = 0;
  std::optional<double> r2;
  double retained_variance = 0.0;
  std::size_t k = 0;
  bool k_reduced = false;
  bool pseudo_inverse = false;
  bool skipped = false;  // r2 undefined or layer without variance
};

struct ProbeReport {
  std::vector<LayerScore> layers;  // ascending layer id
  std::optional<trace::LayerId> selected_layer;
  std::size_t n_samples = 0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
};

/// Seeded Fisher-Yates split; returns (train, test) row indices.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double train_fraction, std::uint64_t seed);

/// Rows of every matrix align with `confidence`. Selection is the
/// highest test R², ties going to the deeper layer.
ProbeReport probe_layers(const std::map<trace::LayerId, Eigen::MatrixXd>& hidden_by_layer,
                         std::span<const double> confidence, const ProbeConfig& cfg);

struct ProbeSamples {
  std::map<trace::LayerId, Eigen::MatrixXd> hidden_by_layer;
  std::vector<double> confidence;
  std::size_t dropped_steps = 0;  // steps missing at least one layer
};

/// Step-first hidden states with their step confidences, pooled over traces.
/// Only steps carrying every layer present in the corpus are used.
ProbeSamples collect_samples(std::span<const trace::Trace> corpus);

}  // namespace rebalance::probe
