#include "doctest.h"

#include <cmath>
#include <memory>
#include <vector>

#include "rebalance/controller.hpp"
#include "rebalance/error.hpp"
#include "rebalance/rng.hpp"

using namespace rebalance;
using namespace rebalance::control;

namespace {

surface::ControlSurface test_surface() {
  surface::ControlSurface cs;
  cs.th.conf_lo = 0.4;
  cs.th.conf_hi = 0.7;
  cs.th.var_lo = 0.001;
  cs.th.var_hi = 0.02;
  cs.b_moderate = 1.0;
  cs.b_over = 2.0;
  cs.b_under = 0.3;
  cs.gate = {surface::GateShape::Sigmoid, 0.03, 0.002};
  return cs;
}

SessionConfig config(surface::Actuator act = surface::Actuator::HiddenAdditive) {
  SessionConfig cfg;
  cfg.surface = test_surface();
  auto sv = std::make_shared<steering::SteeringVector>();
  sv->v = {0.6, 0.8};
  sv->d_prot = 1.0;
  sv->layer = 12;
  cfg.steering = sv;
  cfg.actuator = act;
  return cfg;
}

trace::Trace random_trace(Rng& rng, std::size_t index) {
  trace::Trace t;
  t.trace_id = "r" + std::to_string(index);
  const auto steps = 1 + rng.below(12);
  std::size_t i = 0;
  for (std::uint64_t s = 0; s < steps; ++s) {
    const auto len = 1 + rng.below(5);
    const double base = rng.uniform(0.2, 1.0);
    for (std::uint64_t k = 0; k < len; ++k) {
      t.tokens.push_back({i++, "w", std::min(1.0, base * rng.uniform(0.8, 1.2))});
    }
    if (s + 1 < steps) t.tokens.push_back({i++, "\n\n", base});
  }
  const auto seg = trace::segment_steps(t.tokens);
  t.steps = seg.steps;
  return t;
}

}  // namespace

TEST_CASE("empty session emits nothing") {
  auto s = open_session(config());
  CHECK_FALSE(s.finish().has_value());
  CHECK(s.phase() == Phase::Done);
  CHECK(s.tokens_seen() == 0);
}

TEST_CASE("first completed step drives the next step") {
  auto s = open_session(config());
  CHECK_FALSE(s.feed({0, "a", 0.5}).has_value());
  const auto d = s.feed({1, "\n\n", 0.5});
  REQUIRE(d.has_value());
  CHECK(d->step == 2);
  CHECK(d->alpha == surface::evaluate(0.5, 0.0, test_surface()).alpha);
  CHECK(d->layer == 12);
  CHECK(d->alpha == d->lambda * d->delta);
  CHECK_FALSE(s.feed({2, "b", 0.5}).has_value());
  CHECK(s.current_step() == 2);
  CHECK(s.steps_seen() == 2);
}

TEST_CASE("constant confidence at the high threshold yields zero weights") {
  auto s = open_session(config());
  const double c = test_surface().th.conf_hi;
  std::size_t n = 0;
  for (std::size_t i = 0; i < 60; ++i) {
    const auto d = s.feed({i, i % 3 == 2 ? "\n\n" : "t", c});
    if (d) {
      ++n;
      CHECK(d->alpha == 0.0);
    }
  }
  CHECK(n == 20);
}

TEST_CASE("think-end stops directives and later tokens are rejected") {
  auto s = open_session(config());
  CHECK_FALSE(s.feed({0, "a", 0.9}).has_value());
  CHECK(s.feed({1, "\n\n", 0.9}).has_value());
  CHECK_FALSE(s.feed({2, "b", 0.9}).has_value());
  CHECK_FALSE(s.feed({3, "</think>", 0.9}).has_value());
  CHECK(s.phase() == Phase::Done);
  REQUIRE(s.last_closed().has_value());
  CHECK(s.last_closed()->step_index == 2);
  try {
    s.feed({4, "x", 0.9});
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Protocol);
    CHECK(e.code() == "sequencing");
  }
}

TEST_CASE("sequencing and configuration errors") {
  auto s = open_session(config());
  s.feed({3, "a", 0.5});
  CHECK_THROWS_AS(s.feed({3, "b", 0.5}), Error);
  CHECK_THROWS_AS(s.drive_temperature({4, "b", 0.5}), Error);

  auto cfg = config();
  cfg.declared_width = 3;
  try {
    open_session(cfg);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == "dimension");
  }
  cfg = config();
  cfg.steering = nullptr;
  CHECK_THROWS_AS(open_session(cfg), Error);
  cfg = config();
  cfg.window.size = 0;
  CHECK_THROWS_AS(open_session(cfg), Error);
  // The temperature actuator does not need a vector.
  cfg = config(surface::Actuator::DynamicTemperature);
  cfg.steering = nullptr;
  CHECK_NOTHROW(open_session(cfg));
}

TEST_CASE("dynamic temperature directives") {
  auto s = open_session(config(surface::Actuator::DynamicTemperature));
  // Step 1: c = 0.95, v = 0 -> underthink.
  s.drive_temperature({0, "a", 0.95});
  auto t = s.drive_temperature({1, "\n\n", 0.95});
  REQUIRE(t.has_value());
  CHECK(t->step == 2);
  CHECK(t->temperature == 1.2);
  // Step 2: c = 0.55 with v = 0.04 -> normal region on confidence.
  s.drive_temperature({2, "a", 0.55});
  t = s.drive_temperature({3, "\n\n", 0.55});
  CHECK(t->temperature == 0.7);
  // Step 3: c = 0.1, v large -> overthink.
  s.drive_temperature({4, "a", 0.1});
  t = s.drive_temperature({5, "\n\n", 0.1});
  CHECK(t->temperature == 0.7);
  CHECK_THROWS_AS(s.feed({6, "x", 0.5}), Error);
}

TEST_CASE("streaming statistics equal batch recomputation") {
  Rng rng(99);
  const auto cs = test_surface();
  for (std::size_t k = 0; k < 200; ++k) {
    const auto t = random_trace(rng, k);
    auto s = open_session(config());
    std::vector<ClosedStep> closed;
    std::vector<SteeringDirective> dirs;
    for (const auto& ev : t.tokens) {
      const auto before = s.last_closed();
      if (auto d = s.feed(ev)) dirs.push_back(*d);
      if (s.last_closed() && (!before || before->step_index != s.last_closed()->step_index)) {
        closed.push_back(*s.last_closed());
      }
    }
    if (auto last = s.finish()) closed.push_back(*last);
    const auto conf = stats::trace_confidences(t);
    const auto var = stats::windowed_variance(conf);
    REQUIRE(closed.size() == conf.size());
    for (std::size_t i = 0; i < conf.size(); ++i) {
      CHECK(closed[i].confidence == conf[i]);
      CHECK(closed[i].variance == var[i]);
    }
    const auto rows = replay(t, cs, {}, 1);
    REQUIRE(dirs.size() + 1 == rows.size());
    CHECK(rows[0].alpha == 0.0);
    for (std::size_t i = 0; i < dirs.size(); ++i) {
      CHECK(dirs[i].step == rows[i + 1].step);
      CHECK(dirs[i].alpha == rows[i + 1].alpha);
    }
  }
}

TEST_CASE("directives are causal and deterministic") {
  Rng rng(5);
  const auto t = random_trace(rng, 0);
  auto run = [&](std::size_t prefix) {
    auto s = open_session(config());
    std::vector<SteeringDirective> out;
    for (std::size_t i = 0; i < prefix; ++i) {
      if (auto d = s.feed(t.tokens[i])) out.push_back(*d);
    }
    return out;
  };
  const auto full = run(t.tokens.size());
  CHECK(full == run(t.tokens.size()));
  for (std::size_t p = 0; p <= t.tokens.size(); ++p) {
    const auto part = run(p);
    REQUIRE(part.size() <= full.size());
    CHECK(std::equal(part.begin(), part.end(), full.begin()));
  }
}

TEST_CASE("same-step replay") {
  trace::Trace t;
  t.tokens = {{0, "a", 0.9}, {1, "\n\n", 0.9}, {2, "b", 0.3}};
  t.steps = trace::segment_steps(t.tokens).steps;
  const auto cs = test_surface();
  const auto lag0 = replay(t, cs, {}, 0);
  const auto lag1 = replay(t, cs, {}, 1);
  CHECK(lag0[0].alpha == surface::evaluate(lag0[0].confidence, 0.0, cs).alpha);
  CHECK(lag1[0].alpha == 0.0);
  CHECK(lag1[1].alpha == lag0[0].alpha);
}

TEST_CASE("weights stay within the amplitude bound") {
  Rng rng(6);
  const auto cs = test_surface();
  const double bound = std::max({cs.b_moderate, cs.b_over, cs.b_under}) * std::tanh(1.0);
  auto s = open_session(config());
  for (std::size_t i = 0; i < 5000; ++i) {
    if (auto d = s.feed({i, rng.bernoulli(0.3) ? "\n\n" : "w", rng.uniform(0.01, 1.0)})) {
      CHECK(std::abs(d->alpha) <= bound);
    }
  }
}
