#include "doctest.h"

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "rebalance/error.hpp"
#include "rebalance/rng.hpp"
#include "rebalance/confidence.hpp"

using namespace rebalance;
using namespace rebalance::stats;

TEST_CASE("step confidence is the geometric mean") {
  CHECK(step_confidence(std::vector<double>{1.0, 1.0, 1.0}) == 1.0);
  CHECK(step_confidence(std::vector<double>{0.5, 0.5}) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(step_confidence(std::vector<double>{0.9, 0.4}) == doctest::Approx(0.6).epsilon(1e-14));
  CHECK_THROWS_AS(step_confidence(std::vector<double>{}), Error);
}

TEST_CASE("windowed variance") {
  CHECK(windowed_variance(std::vector<double>{0.8}) == std::vector<double>{0.0});
  const auto v = windowed_variance(std::vector<double>{0.5, 0.7}, {2});
  CHECK(v[0] == 0.0);
  CHECK(v[1] == doctest::Approx(0.01).epsilon(1e-12));
  for (double x : windowed_variance(std::vector<double>(17, 0.37), {3})) CHECK(x == 0.0);
  CHECK_THROWS_AS(windowed_variance(std::vector<double>{}), Error);
  CHECK_THROWS_AS(windowed_variance(std::vector<double>{0.1}, {0}), Error);
}

TEST_CASE("windowed variance equals the naive oracle") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> c(1 + rng.below(40));
    for (auto& x : c) x = rng.uniform01();
    const std::size_t w = 1 + rng.below(6);
    CHECK(windowed_variance(c, {w}) == oracle::naive_windowed_variance(c, w));
  }
}

TEST_CASE("empirical quantile") {
  const std::vector<double> x{4, 1, 3, 2};
  CHECK(empirical_quantile(x, 0.0) == 1.0);
  CHECK(empirical_quantile(x, 0.75) == 3.25);
  CHECK(empirical_quantile(std::vector<double>{5}, 0.3) == 5.0);
  CHECK_THROWS_AS(empirical_quantile(x, 1.5), Error);
  CHECK_THROWS_AS(empirical_quantile(std::vector<double>{}, 0.5), Error);

  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(1 + rng.below(30));
    for (auto& e : v) e = std::floor(rng.uniform01() * 10.0) / 10.0;
    const double q = rng.uniform01();
    CHECK(empirical_quantile(v, q) == doctest::Approx(oracle::quantile_1based(v, q)).epsilon(1e-14));
  }
}

TEST_CASE("thresholds") {
  std::vector<double> c;
  for (int i = 1; i <= 10; ++i) c.push_back(i / 10.0);
  const auto th = compute_thresholds(c, c);
  CHECK(th.conf_lo == doctest::Approx(0.325).epsilon(1e-14));
  CHECK(th.conf_hi == doctest::Approx(0.775).epsilon(1e-14));

  const std::vector<double> k(6, 0.4);
  const auto deg = compute_thresholds(k, k);
  CHECK(deg.conf_lo == 0.4);
  CHECK(deg.conf_hi == 0.4);
  CHECK_THROWS_AS(compute_thresholds(c, c, 0.75, 0.25), Error);
  CHECK_THROWS_AS(compute_thresholds(c, c, 0.0, 0.75), Error);
}

TEST_CASE("classification rules") {
  Thresholds th;
  th.conf_lo = 0.25;
  th.conf_hi = 0.75;
  th.var_lo = 0.01;
  th.var_hi = 0.04;
  CHECK(classify(0.2, 0.05, th) == StepLabel::Overthink);
  CHECK(classify(0.8, 0.005, th) == StepLabel::Underthink);
  CHECK(classify(0.5, 0.02, th) == StepLabel::Normal);
  // Boundaries are inclusive.
  CHECK(classify(0.25, 0.04, th) == StepLabel::Overthink);
  CHECK(classify(0.75, 0.01, th) == StepLabel::Underthink);

  // Degenerate thresholds: overthink wins.
  Thresholds d;
  d.conf_lo = d.conf_hi = 0.5;
  d.var_lo = d.var_hi = 0.0;
  CHECK(classify(0.5, 0.0, d) == StepLabel::Overthink);

  const auto steps = classify_steps(std::vector<double>{0.2, 0.8}, std::vector<double>{0.05, 0.0}, th);
  CHECK(steps[0].step_index == 1);
  CHECK(steps[0].label == StepLabel::Overthink);
  CHECK(steps[1].label == StepLabel::Underthink);
}

TEST_CASE("stability index") {
  auto ds = [](std::vector<std::pair<const char*, bool>> v) {
    std::vector<Decision> out;
    for (auto [id, ok] : v) out.push_back({id, ok});
    return out;
  };
  CHECK(stability_index(ds({{"A", false}, {"B", true}, {"B", true}, {"B", true}})) == 2u);
  CHECK_FALSE(stability_index(ds({{"A", false}, {"B", true}, {"A", false}})).has_value());
  CHECK(stability_index(ds({{"A", true}, {"A", true}})) == 1u);
  const auto labels = stability_labels(ds({{"A", false}, {"B", true}, {"B", true}, {"B", true}}));
  CHECK(labels == std::vector<StepLabel>{StepLabel::Underthink, StepLabel::Normal,
                                         StepLabel::Overthink, StepLabel::Overthink});
  CHECK(stability_labels(ds({{"A", false}, {"A", false}})) ==
        std::vector<StepLabel>(2, StepLabel::Normal));

  Rng rng(9);
  const char* ids[] = {"A", "B", "C"};
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<Decision> d;
    std::vector<oracle::Step> o;
    const auto n = 1 + rng.below(8);
    for (std::uint64_t i = 0; i < n; ++i) {
      const char* id = ids[rng.below(3)];
      const bool ok = rng.bernoulli(0.5);
      d.push_back({id, ok});
      o.push_back({id, ok});
    }
    CHECK(stability_index(d) == oracle::stability_scan(o));
  }
}

TEST_CASE("transition statistics from counts") {
  const auto ts = transition_stats_from_counts(3, 1, 1, 3);
  CHECK(ts.odds_ratio == doctest::Approx(9.0).epsilon(1e-14));
  CHECK(ts.same_rate == 0.75);
  CHECK(ts.p_hh == 0.75);
  CHECK(ts.p_ll == 0.75);
  CHECK(ts.p_value == doctest::Approx(34.0 / 70.0).epsilon(1e-12));
  REQUIRE(ts.ci_lo.has_value());
  const double se = std::sqrt(1.0 / 3 + 1 + 1 + 1.0 / 3);
  CHECK(*ts.ci_lo == doctest::Approx(std::exp(std::log(9.0) - 1.96 * se)).epsilon(1e-12));
  CHECK(*ts.ci_hi == doctest::Approx(std::exp(std::log(9.0) + 1.96 * se)).epsilon(1e-12));

  const auto inf = transition_stats_from_counts(4, 0, 2, 3);
  CHECK(std::isinf(inf.odds_ratio));
  CHECK_FALSE(inf.ci_lo.has_value());
  CHECK(std::isnan(transition_stats_from_counts(0, 2, 3, 0).odds_ratio) == false);
  CHECK(transition_stats_from_counts(0, 2, 3, 0).odds_ratio == 0.0);
  CHECK(std::isnan(transition_stats_from_counts(0, 0, 3, 4).odds_ratio));
}

TEST_CASE("transition statistics on sequences") {
  std::vector<double> alt;
  for (int i = 0; i < 20; ++i) alt.push_back(i % 2 ? 0.9 : 0.1);
  const auto ts = transition_stats(alt);
  CHECK(ts.hh == 0);
  CHECK(ts.ll == 0);
  CHECK(ts.same_rate == 0.0);

  // Pairs never cross trajectories.
  const std::vector<std::vector<double>> two{{0.9, 0.9}, {0.1, 0.1}};
  const auto sep = transition_stats(std::span<const std::vector<double>>(two));
  CHECK(sep.hh == 1);
  CHECK(sep.ll == 1);
  CHECK(sep.hl + sep.lh == 0);
  // Ties with the median go high.
  const auto tie = transition_stats(std::vector<double>{0.5, 0.5, 0.5});
  CHECK(tie.hh == 2);
  CHECK_THROWS_AS(transition_stats(std::vector<double>{0.5}), Error);
}

TEST_CASE("fisher exact matches enumeration") {
  for (std::uint64_t a = 0; a <= 6; ++a)
    for (std::uint64_t b = 0; b <= 6; ++b)
      for (std::uint64_t c = 0; c <= 6; ++c)
        for (std::uint64_t d = 0; d <= 6; ++d) {
          if (a + b + c + d == 0) continue;
          CHECK(std::abs(fisher_exact_two_sided(a, b, c, d) - oracle::fisher_enumerate(a, b, c, d)) <=
                1e-12);
        }
}

TEST_CASE("spearman") {
  CHECK(*spearman(std::vector<double>{1, 2, 3}, std::vector<double>{3, 2, 1}) == -1.0);
  CHECK(*spearman(std::vector<double>{1, 2, 3}, std::vector<double>{10, 20, 30}) == 1.0);
  CHECK(*spearman(std::vector<double>{1, 2, 2, 3}, std::vector<double>{1, 2, 3, 4}) ==
        doctest::Approx(4.5 / std::sqrt(22.5)).epsilon(1e-14));
  CHECK_FALSE(spearman(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}).has_value());
  CHECK(average_ranks(std::vector<double>{3, 1, 3, 2}) == std::vector<double>{3.5, 1, 3.5, 2});
  CHECK_THROWS_AS(spearman(std::vector<double>{1}, std::vector<double>{1}), Error);
}

TEST_CASE("spearman matches the counting-rank oracle") {
  Rng rng(21);
  for (int trial = 0; trial < 300; ++trial) {
    const auto n = 2 + rng.below(30);
    std::vector<double> x(n), y(n);
    for (std::uint64_t i = 0; i < n; ++i) {
      x[i] = static_cast<double>(rng.below(5));
      y[i] = static_cast<double>(rng.below(7));
    }
    CHECK(average_ranks(x) == oracle::count_ranks(x));
    const auto a = spearman(x, y);
    const auto b = oracle::spearman(x, y);
    REQUIRE(a.has_value() == b.has_value());
    if (a) CHECK(std::abs(*a - *b) <= 1e-12);
  }
}

TEST_CASE("bootstrap interval") {
  std::vector<double> x, y;
  for (int i = 0; i < 30; ++i) {
    x.push_back(i);
    y.push_back(2.0 * i + 1.0);
  }
  for (std::uint64_t seed : {1ULL, 42ULL}) {
    const auto r = bootstrap_ci(x, y, 200, seed);
    CHECK(r.ci_lo == 1.0);
    CHECK(r.ci_hi == 1.0);
    CHECK(r.degenerate_resamples == 0);
    CHECK_FALSE(r.small_sample);
  }

  Rng rng(4);
  std::vector<double> a(40), b(40);
  for (int i = 0; i < 40; ++i) {
    a[i] = rng.normal();
    b[i] = a[i] + rng.normal();
  }
  const auto r1 = bootstrap_ci(a, b, 500, 42);
  const auto r2 = bootstrap_ci(a, b, 500, 42);
  CHECK(r1.ci_lo == r2.ci_lo);
  CHECK(r1.ci_hi == r2.ci_hi);
  CHECK(r1.ci_lo <= *r1.rho);
  CHECK(*r1.rho <= r1.ci_hi);
  CHECK(bootstrap_ci(a, b, 500, 43).ci_lo != r1.ci_lo);

  const auto tiny = bootstrap_ci(std::vector<double>{1, 2, 3}, std::vector<double>{1, 3, 2}, 100, 42);
  CHECK(tiny.small_sample);
  CHECK(tiny.degenerate_resamples > 0);
}

TEST_CASE("trace aggregates") {
  CHECK(word_count("a b  c\n") == 3);
  CHECK(word_count("") == 0);

  trace::Trace t;
  t.trace_id = "x";
  t.tokens = {{0, "a", 0.7}};
  t.steps = trace::segment_steps(t.tokens).steps;
  auto agg = trace_aggregates(t);
  CHECK(agg.min_confidence == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(agg.confidence_variance == 0.0);
  CHECK(agg.word_count == 1);

  t.tokens = {{0, "a", 0.4}, {1, "\n\n", 0.4}, {2, "b c", 0.8}};
  t.steps = trace::segment_steps(t.tokens).steps;
  agg = trace_aggregates(t);
  CHECK(agg.min_confidence == doctest::Approx(0.4).epsilon(1e-14));
  CHECK(agg.confidence_variance == doctest::Approx(0.04).epsilon(1e-12));
  CHECK(agg.word_count == 3);
}
