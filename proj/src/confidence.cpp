#include "rebalance/confidence.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "rebalance/error.hpp"
#include "rebalance/rng.hpp"

namespace rebalance::stats {

const char* to_string(StepLabel label) {
  switch (label) {
    case StepLabel::Normal: return "normal";
    case StepLabel::Overthink: return "overthink";
    case StepLabel::Underthink: return "underthink";
  }
  return "normal";
}

double step_confidence(std::span<const double> p_max) {
  if (p_max.empty()) throw domain_error("step confidence of an empty step");
  double log_sum = 0.0;
  for (double p : p_max) log_sum += std::log(p);
  return std::exp(log_sum / static_cast<double>(p_max.size()));
}

double window_variance(std::span<const double> window) {
  if (window.size() <= 1) return 0.0;
  // Exact zero for constant windows; the two-pass form can leave ~1e-33.
  if (std::all_of(window.begin(), window.end(), [&](double c) { return c == window[0]; })) {
    return 0.0;
  }
  const double n = static_cast<double>(window.size());
  double sum = 0.0;
  for (double c : window) sum += c;
  const double mean = sum / n;
  double ss = 0.0;
  for (double c : window) ss += (c - mean) * (c - mean);
  return ss / n;
}

std::vector<double> windowed_variance(std::span<const double> confidences, WindowConfig w) {
  if (confidences.empty()) throw domain_error("windowed variance of an empty series");
  if (w.size < 1) throw config_error("window size must be >= 1");
  std::vector<double> out(confidences.size());
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const std::size_t first = i + 1 >= w.size ? i + 1 - w.size : 0;
    out[i] = window_variance(confidences.subspan(first, i - first + 1));
  }
  return out;
}

double empirical_quantile(std::span<const double> values, double q) {
  if (values.empty()) throw domain_error("quantile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw domain_error("quantile level outside [0, 1]");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double h = static_cast<double>(sorted.size() - 1) * q;  // 0-based position
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = static_cast<std::size_t>(std::ceil(h));
  return sorted[lo] + (h - std::floor(h)) * (sorted[hi] - sorted[lo]);
}

Thresholds compute_thresholds(std::span<const double> confidences,
                              std::span<const double> variances, double q_lo, double q_hi) {
  if (!(q_lo > 0.0 && q_hi < 1.0 && q_lo < q_hi)) {
    throw config_error("quantile levels must satisfy 0 < q_L < q_H < 1");
  }
  Thresholds th;
  th.q_lo = q_lo;
  th.q_hi = q_hi;
  th.conf_lo = empirical_quantile(confidences, q_lo);
  th.conf_hi = empirical_quantile(confidences, q_hi);
  th.var_lo = empirical_quantile(variances, q_lo);
  th.var_hi = empirical_quantile(variances, q_hi);
  return th;
}

StepLabel classify(double confidence, double variance, const Thresholds& th) {
  if (confidence <= th.conf_lo && variance >= th.var_hi) return StepLabel::Overthink;
  if (confidence >= th.conf_hi && variance <= th.var_lo) return StepLabel::Underthink;
  return StepLabel::Normal;
}

std::vector<StepStats> classify_steps(std::span<const double> confidences,
                                      std::span<const double> variances,
                                      const Thresholds& th) {
  if (confidences.size() != variances.size()) {
    throw domain_error("confidence and variance series differ in length");
  }
  std::vector<StepStats> out(confidences.size());
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    out[i] = {i + 1, confidences[i], variances[i], classify(confidences[i], variances[i], th)};
  }
  return out;
}

std::optional<std::size_t> stability_index(std::span<const Decision> decisions) {
  // Candidates lie in the maximal constant suffix; take its first correct step.
  if (decisions.empty()) return std::nullopt;
  std::size_t start = decisions.size() - 1;
  while (start > 0 && decisions[start - 1].decision_id == decisions.back().decision_id) {
    --start;
  }
  for (std::size_t s = start; s < decisions.size(); ++s) {
    if (decisions[s].correct) return s + 1;
  }
  return std::nullopt;
}

std::vector<StepLabel> stability_labels(std::span<const Decision> decisions) {
  std::vector<StepLabel> labels(decisions.size(), StepLabel::Normal);
  const auto star = stability_index(decisions);
  if (!star) return labels;
  for (std::size_t s = 1; s <= decisions.size(); ++s) {
    if (s < *star) labels[s - 1] = StepLabel::Underthink;
    if (s > *star) labels[s - 1] = StepLabel::Overthink;
  }
  return labels;
}

// ---------------------------------------------------------------------------

namespace {
double log_choose(std::uint64_t n, std::uint64_t k) {
  return std::lgamma(static_cast<double>(n) + 1.0) - std::lgamma(static_cast<double>(k) + 1.0) -
         std::lgamma(static_cast<double>(n - k) + 1.0);
}
}  // namespace

double fisher_exact_two_sided(std::uint64_t a, std::uint64_t b, std::uint64_t c,
                              std::uint64_t d) {
  const std::uint64_t row1 = a + b;
  const std::uint64_t row2 = c + d;
  const std::uint64_t col1 = a + c;
  const std::uint64_t n = row1 + row2;
  if (n == 0) return 1.0;

  const double log_denominator = log_choose(n, col1);
  auto log_point = [&](std::uint64_t x) {
    return log_choose(row1, x) + log_choose(row2, col1 - x) - log_denominator;
  };

  const std::uint64_t x_min = col1 > row2 ? col1 - row2 : 0;
  const std::uint64_t x_max = std::min(row1, col1);
  const double observed = log_point(a);
  // Relative slack so that tables tied with the observed one in exact
  // arithmetic are not lost to rounding.
  const double cutoff = observed + 1e-7;

  double p = 0.0;
  for (std::uint64_t x = x_min; x <= x_max; ++x) {
    const double lp = log_point(x);
    if (lp <= cutoff) p += std::exp(lp);
  }
  return std::min(p, 1.0);
}

TransitionStats transition_stats_from_counts(std::uint64_t hh, std::uint64_t hl,
                                             std::uint64_t lh, std::uint64_t ll) {
  TransitionStats ts;
  ts.hh = hh;
  ts.hl = hl;
  ts.lh = lh;
  ts.ll = ll;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  const auto dhh = static_cast<double>(hh), dhl = static_cast<double>(hl);
  const auto dlh = static_cast<double>(lh), dll = static_cast<double>(ll);
  ts.p_hh = hh + hl > 0 ? dhh / (dhh + dhl) : nan;
  ts.p_ll = lh + ll > 0 ? dll / (dlh + dll) : nan;
  const double total = dhh + dhl + dlh + dll;
  ts.same_rate = total > 0 ? (dhh + dll) / total : nan;

  const double num = dhh * dll;
  const double den = dhl * dlh;
  if (den > 0) {
    ts.odds_ratio = num / den;
  } else {
    ts.odds_ratio = num > 0 ? std::numeric_limits<double>::infinity() : nan;
  }
  if (hh > 0 && hl > 0 && lh > 0 && ll > 0) {
    const double se = std::sqrt(1.0 / dhh + 1.0 / dhl + 1.0 / dlh + 1.0 / dll);
    const double log_or = std::log(ts.odds_ratio);
    ts.ci_lo = std::exp(log_or - 1.96 * se);
    ts.ci_hi = std::exp(log_or + 1.96 * se);
  }
  ts.p_value = fisher_exact_two_sided(hh, hl, lh, ll);
  return ts;
}

TransitionStats transition_stats(std::span<const std::vector<double>> trajectories) {
  std::vector<double> pooled;
  for (const auto& t : trajectories) pooled.insert(pooled.end(), t.begin(), t.end());
  if (pooled.size() < 2) throw domain_error("transition statistics need >= 2 confidences");
  const double median = empirical_quantile(pooled, 0.5);

  std::uint64_t hh = 0, hl = 0, lh = 0, ll = 0;
  std::uint64_t pairs = 0;
  for (const auto& t : trajectories) {
    for (std::size_t i = 1; i < t.size(); ++i) {
      const bool prev_high = t[i - 1] >= median;
      const bool cur_high = t[i] >= median;
      if (prev_high) {
        (cur_high ? hh : hl) += 1;
      } else {
        (cur_high ? lh : ll) += 1;
      }
      ++pairs;
    }
  }
  if (pairs == 0) throw domain_error("no adjacent step pairs within any trajectory");
  TransitionStats ts = transition_stats_from_counts(hh, hl, lh, ll);
  ts.median = median;
  return ts;
}

TransitionStats transition_stats(std::span<const double> confidences) {
  std::vector<std::vector<double>> one{std::vector<double>(confidences.begin(), confidences.end())};
  return transition_stats(std::span<const std::vector<double>>(one));
}

// ---------------------------------------------------------------------------

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

std::optional<double> spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw domain_error("spearman inputs differ in length");
  if (x.size() < 2) throw domain_error("spearman needs at least two pairs");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    const double dx = rx[i] - mx, dy = ry[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

CorrelationReport bootstrap_ci(std::span<const double> x, std::span<const double> y,
                               std::size_t resamples, std::uint64_t seed) {
  if (x.size() != y.size()) throw domain_error("bootstrap inputs differ in length");
  if (x.size() < 2) throw domain_error("bootstrap needs at least two pairs");
  if (resamples == 0) throw config_error("bootstrap needs at least one resample");

  CorrelationReport rep;
  rep.n = x.size();
  rep.resamples = resamples;
  rep.small_sample = x.size() < 10;
  rep.rho = spearman(x, y);

  std::vector<double> rhos;
  rhos.reserve(resamples);
  std::vector<double> bx(x.size()), by(y.size());
  for (std::size_t r = 0; r < resamples; ++r) {
    Rng rng(derive_seed(seed, r));
    for (std::size_t i = 0; i < x.size(); ++i) {
      const auto k = static_cast<std::size_t>(rng.below(x.size()));
      bx[i] = x[k];
      by[i] = y[k];
    }
    if (auto rho = spearman(bx, by)) {
      rhos.push_back(*rho);
    } else {
      ++rep.degenerate_resamples;
    }
  }
  if (rhos.empty()) {
    rep.ci_lo = rep.ci_hi = std::numeric_limits<double>::quiet_NaN();
  } else {
    rep.ci_lo = empirical_quantile(rhos, 0.025);
    rep.ci_hi = empirical_quantile(rhos, 0.975);
  }
  return rep;
}

// ---------------------------------------------------------------------------

std::vector<double> trace_confidences(const trace::Trace& t) {
  std::vector<double> out;
  out.reserve(t.steps.size());
  for (const auto& span : t.steps) out.push_back(step_confidence(trace::span_probabilities(t, span)));
  return out;
}

std::size_t word_count(std::string_view text) {
  std::size_t count = 0;
  bool in_word = false;
  for (char ch : text) {
    const bool space = ch == ' ' || ch == '\t' || ch == '\n' || ch == '\r' || ch == '\f' ||
                       ch == '\v';
    if (!space && !in_word) ++count;
    in_word = !space;
  }
  return count;
}

TraceAggregates trace_aggregates(const trace::Trace& t) {
  if (t.steps.empty()) throw domain_error("trace '" + t.trace_id + "' has no steps");
  const auto conf = trace_confidences(t);
  TraceAggregates agg;
  agg.word_count = word_count(trace::think_text(t));
  agg.min_confidence = *std::min_element(conf.begin(), conf.end());
  agg.confidence_variance = window_variance(conf);
  return agg;
}

}  // namespace rebalance::stats
