#include "rebalance/probe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "rebalance/confidence.hpp"
#include "rebalance/error.hpp"
#include "rebalance/rng.hpp"

namespace rebalance::probe {

void validate(const ProbeConfig& cfg) {
  if (cfg.pca_dim < 1) throw config_error("pca_dim must be >= 1");
  if (!(cfg.lambda >= 0.0) || !std::isfinite(cfg.lambda)) {
    throw config_error("ridge lambda must be finite and >= 0");
  }
  if (!(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0)) {
    throw config_error("train fraction must lie in (0, 1)");
  }
}

Eigen::MatrixXd Pca::project(const Eigen::MatrixXd& x) const {
  if (x.cols() != mean.size()) {
    throw data_error("dimension", "PCA input has " + std::to_string(x.cols()) +
                                      " columns, expected " + std::to_string(mean.size()));
  }
  return (x.rowwise() - mean.transpose()) * components;
}

Pca pca_fit(const Eigen::MatrixXd& x, std::size_t k) {
  const auto n = x.rows();
  const auto d = x.cols();
  if (n < 2) throw data_error("insufficient", "PCA needs at least 2 samples");
  if (d < 1) throw data_error("dimension", "PCA input has no columns");
  if (k < 1) throw config_error("PCA dimension must be >= 1");

  Pca p;
  p.k_requested = k;
  p.mean = x.colwise().mean();
  const Eigen::MatrixXd xc = x.rowwise() - p.mean.transpose();
  const Eigen::MatrixXd cov = (xc.transpose() * xc) / static_cast<double>(n - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw data_error("numeric", "PCA eigendecomposition failed");
  // Eigen returns ascending eigenvalues.
  const Eigen::VectorXd vals = es.eigenvalues().reverse();
  const Eigen::MatrixXd vecs = es.eigenvectors().rowwise().reverse();

  const double total = std::max(0.0, vals.sum());
  const double top = vals.size() ? std::max(0.0, vals(0)) : 0.0;
  if (!(top > 0.0)) throw data_error("degenerate", "hidden states have zero variance");
  Eigen::Index rank = 0;
  while (rank < vals.size() && vals(rank) > top * 1e-10) ++rank;

  Eigen::Index kk = static_cast<Eigen::Index>(k);
  if (kk > rank) {
    kk = rank;
    p.k_reduced = true;
  }
  p.components = vecs.leftCols(kk);
  p.eigenvalues = vals.head(kk);
  for (Eigen::Index j = 0; j < kk; ++j) {
    Eigen::Index arg = 0;
    for (Eigen::Index i = 1; i < d; ++i) {
      if (std::abs(p.components(i, j)) > std::abs(p.components(arg, j))) arg = i;
    }
    if (p.components(arg, j) < 0.0) p.components.col(j) *= -1.0;
  }
  p.retained_variance = std::clamp(p.eigenvalues.sum() / total, 0.0, 1.0);
  return p;
}

PcaProjection pca_project(const Eigen::MatrixXd& x, std::size_t k) {
  const Pca p = pca_fit(x, k);
  return {p.project(x), p.retained_variance, p.k_reduced};
}

Eigen::VectorXd Ridge::predict(const Eigen::MatrixXd& z) const {
  if (z.cols() != w.size()) throw data_error("dimension", "ridge input width mismatch");
  return (z * w).array() + b;
}

Ridge ridge_fit(const Eigen::MatrixXd& z, std::span<const double> c, double lambda) {
  const auto n = z.rows();
  if (static_cast<std::size_t>(n) != c.size()) {
    throw data_error("dimension", "ridge: " + std::to_string(n) + " rows but " +
                                      std::to_string(c.size()) + " targets");
  }
  if (n < 2) throw data_error("insufficient", "ridge needs at least 2 samples");
  if (!(lambda >= 0.0)) throw config_error("ridge lambda must be >= 0");

  const Eigen::Map<const Eigen::VectorXd> y(c.data(), n);
  const Eigen::VectorXd zmean = z.colwise().mean();
  const double ymean = y.mean();
  const Eigen::MatrixXd zc = z.rowwise() - zmean.transpose();
  const Eigen::VectorXd yc = y.array() - ymean;

  Ridge r;
  if (lambda == 0.0) {
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(zc);
    r.w = cod.solve(yc);
    r.pseudo_inverse = cod.rank() < zc.cols();
  } else {
    Eigen::MatrixXd a = zc.transpose() * zc;
    a.diagonal().array() += lambda;
    r.w = a.ldlt().solve(zc.transpose() * yc);
  }
  r.b = ymean - zmean.dot(r.w);
  return r;
}

std::optional<double> r_squared(std::span<const double> y, const Eigen::VectorXd& yhat) {
  if (y.size() != static_cast<std::size_t>(yhat.size())) {
    throw data_error("dimension", "r_squared: length mismatch");
  }
  if (y.empty()) return std::nullopt;
  const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  double ss_tot = 0.0;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    ss_tot += (y[i] - mean) * (y[i] - mean);
    const double e = y[i] - yhat(static_cast<Eigen::Index>(i));
    ss_res += e * e;
  }
  if (ss_tot == 0.0) return std::nullopt;
  return 1.0 - ss_res / ss_tot;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double train_fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  n_train = std::clamp<std::size_t>(n_train, std::min<std::size_t>(2, n), n >= 4 ? n - 2 : n);
  std::vector<std::size_t> train(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> test(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  return {train, test};
}

namespace {
Eigen::MatrixXd rows_of(const Eigen::MatrixXd& x, const std::vector<std::size_t>& idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

std::vector<double> values_of(std::span<const double> x, const std::vector<std::size_t>& idx) {
  std::vector<double> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(x[i]);
  return out;
}
}  // namespace

ProbeReport probe_layers(const std::map<trace::LayerId, Eigen::MatrixXd>& hidden_by_layer,
                         std::span<const double> confidence, const ProbeConfig& cfg) {
  validate(cfg);
  const std::size_t n = confidence.size();
  if (n < 10) {
    throw data_error("insufficient", "probe needs at least 10 samples, got " + std::to_string(n));
  }
  if (hidden_by_layer.empty()) throw data_error("missing", "probe: no hidden-state layers");

  ProbeReport rep;
  rep.n_samples = n;
  const auto [train, test] = split_indices(n, cfg.train_fraction, cfg.seed);
  rep.n_train = train.size();
  rep.n_test = test.size();
  const auto y_train = values_of(confidence, train);
  const auto y_test = values_of(confidence, test);

  for (const auto& [layer, x] : hidden_by_layer) {
    if (static_cast<std::size_t>(x.rows()) != n) {
      throw data_error("dimension", "layer " + std::to_string(layer) + " has " +
                                        std::to_string(x.rows()) + " rows for " +
                                        std::to_string(n) + " confidences");
    }
    LayerScore s;
    s.layer = layer;
    const std::size_t cap =
        std::min<std::size_t>(rep.n_train - 1, static_cast<std::size_t>(x.cols()));
    std::size_t k = cfg.pca_dim;
    if (k > cap) {
      k = cap;
      s.k_reduced = true;
    }
    const Eigen::MatrixXd x_train = rows_of(x, train);
    Pca pca;
    try {
      pca = pca_fit(x_train, k);
    } catch (const Error& e) {
      if (e.code() != "degenerate") throw;
      s.skipped = true;
      rep.layers.push_back(s);
      continue;
    }
    s.k = pca.k();
    s.k_reduced = s.k_reduced || pca.k_reduced;
    s.retained_variance = pca.retained_variance;
    const Ridge r = ridge_fit(pca.project(x_train), y_train, cfg.lambda);
    s.pseudo_inverse = r.pseudo_inverse;
    s.r2 = r_squared(y_test, r.predict(pca.project(rows_of(x, test))));
    s.skipped = !s.r2.has_value();
    rep.layers.push_back(s);
  }

  // Ascending layer order plus >= keeps the deepest layer on ties.
  std::optional<double> best;
  for (const auto& s : rep.layers) {
    if (!s.r2) continue;
    if (!best || *s.r2 >= *best) {
      best = s.r2;
      rep.selected_layer = s.layer;
    }
  }
  return rep;
}

ProbeSamples collect_samples(std::span<const trace::Trace> corpus) {
  std::set<trace::LayerId> layers;
  std::map<trace::LayerId, std::size_t> dims;
  for (const auto& t : corpus) {
    for (const auto& s : t.steps) {
      for (const auto& [layer, h] : s.hidden) {
        layers.insert(layer);
        auto [it, fresh] = dims.emplace(layer, h.size());
        if (!fresh && it->second != h.size()) {
          throw data_error("dimension", "layer " + std::to_string(layer) +
                                            " has inconsistent hidden widths across traces");
        }
      }
    }
  }
  if (layers.empty()) throw data_error("missing", "corpus has no hidden-state records");

  ProbeSamples out;
  std::map<trace::LayerId, std::vector<double>> flat;
  for (const auto& t : corpus) {
    const auto conf = stats::trace_confidences(t);
    for (std::size_t i = 0; i < t.steps.size(); ++i) {
      const auto& s = t.steps[i];
      const bool complete = std::all_of(layers.begin(), layers.end(),
                                        [&](trace::LayerId l) { return s.hidden.count(l) > 0; });
      if (!complete) {
        ++out.dropped_steps;
        continue;
      }
      out.confidence.push_back(conf[i]);
      for (auto l : layers) {
        const auto& h = s.hidden.at(l);
        flat[l].insert(flat[l].end(), h.begin(), h.end());
      }
    }
  }
  const auto rows = static_cast<Eigen::Index>(out.confidence.size());
  for (auto l : layers) {
    const auto cols = static_cast<Eigen::Index>(dims[l]);
    out.hidden_by_layer[l] =
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
            flat[l].data(), rows, cols);
  }
  return out;
}

}  // namespace rebalance::probe
