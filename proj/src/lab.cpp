#include "rebalance/lab.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>

#include "rebalance/controller.hpp"
#include "rebalance/error.hpp"
#include "rebalance/rng.hpp"

namespace rebalance::lab {

namespace ju = json_util;

MarkovSample gen_markov_confidence(const MarkovChainConfig& cfg) {
  if (!(cfg.p_stay >= 0.0 && cfg.p_stay <= 1.0)) throw config_error("p_stay must lie in [0, 1]");
  if (cfg.low.lo > cfg.low.hi || cfg.high.lo > cfg.high.hi) {
    throw config_error("emission interval bounds out of order");
  }
  if (cfg.low.hi >= cfg.high.lo) throw config_error("emission intervals must be disjoint");
  Rng rng(cfg.seed);
  MarkovSample out;
  out.values.reserve(cfg.n);
  out.high.reserve(cfg.n);
  bool state = rng.bernoulli(0.5);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    if (i > 0 && !rng.bernoulli(cfg.p_stay)) state = !state;
    const Interval& iv = state ? cfg.high : cfg.low;
    out.values.push_back(rng.uniform(iv.lo, iv.hi));
    out.high.push_back(state);
  }
  return out;
}

ClusterSample gen_clustered_hidden(const ClusterConfig& cfg) {
  const std::size_t dim = cfg.mu_over.size();
  if (dim == 0 || cfg.mu_under.size() != dim) {
    throw config_error("cluster centers must be non-empty and share a dimension");
  }
  if (cfg.n_normal > 0 && cfg.mu_normal.size() != dim) {
    throw config_error("normal cluster center has the wrong dimension");
  }
  if (cfg.n_over < 1 || cfg.n_under < 1) throw config_error("cluster counts must be >= 1");
  if (!(cfg.sigma >= 0.0)) throw config_error("sigma must be >= 0");
  if (!(cfg.label_noise >= 0.0 && cfg.label_noise <= 1.0)) {
    throw config_error("label noise must lie in [0, 1]");
  }

  using stats::StepLabel;
  Rng rng(cfg.seed);
  ClusterSample out;
  auto emit = [&](const steering::Vector& mu, std::size_t n, StepLabel label) {
    for (std::size_t i = 0; i < n; ++i) {
      steering::Vector h(dim);
      for (std::size_t j = 0; j < dim; ++j) h[j] = mu[j] + cfg.sigma * rng.normal();
      StepLabel seen = label;
      if (label != StepLabel::Normal && rng.bernoulli(cfg.label_noise)) {
        seen = label == StepLabel::Overthink ? StepLabel::Underthink : StepLabel::Overthink;
      }
      out.samples.push_back({std::move(h), seen});
      out.true_labels.push_back(label);
    }
  };
  emit(cfg.mu_over, cfg.n_over, StepLabel::Overthink);
  emit(cfg.mu_under, cfg.n_under, StepLabel::Underthink);
  if (cfg.n_normal > 0) emit(cfg.mu_normal, cfg.n_normal, StepLabel::Normal);
  return out;
}

PlantedClusters planted_clusters(std::size_t dim, double separation_sigmas, std::size_t per_mode,
                                 double label_noise, std::uint64_t seed) {
  if (dim == 0) throw config_error("dimension must be >= 1");
  Rng rng(derive_seed(seed, 0));
  steering::Vector dir(dim);
  double nn = 0.0;
  do {
    for (auto& x : dir) x = rng.normal();
    nn = steering::norm(dir);
  } while (nn == 0.0);
  for (auto& x : dir) x /= nn;

  PlantedClusters p;
  p.direction = dir;
  p.config.sigma = 1.0;
  p.config.mu_over.resize(dim);
  p.config.mu_under.resize(dim);
  for (std::size_t j = 0; j < dim; ++j) {
    p.config.mu_over[j] = 0.5 * separation_sigmas * dir[j];
    p.config.mu_under[j] = -0.5 * separation_sigmas * dir[j];
  }
  p.config.n_over = per_mode;
  p.config.n_under = per_mode;
  p.config.label_noise = label_noise;
  p.config.seed = derive_seed(seed, 1);
  return p;
}

// ---------------------------------------------------------------------------

void SimConfig::validate() const {
  if (episodes < 1) throw config_error("episodes must be >= 1");
  if (m_min < 1 || m_max < m_min) throw config_error("need 1 <= m_min <= m_max");
  if (max_steps < m_max) throw config_error("max_steps must be >= m_max");
  if (!(p_hasty >= 0.0 && p_hasty <= 1.0)) throw config_error("p_hasty must lie in [0, 1]");
  if (!(kappa >= 0.0)) throw config_error("kappa must be >= 0");
  if (!(theta >= 0.0 && theta <= 1.0)) throw config_error("theta must lie in [0, 1]");
  if (!(sigma >= 0.0) || !(x0_sd >= 0.0)) throw config_error("noise scales must be >= 0");
  if (!(h_lo >= 0.0 && h_lo <= h_hi && h_hi <= 1.0)) {
    throw config_error("need 0 <= h_lo <= h_hi <= 1");
  }
  if (!(h_scale > 0.0)) throw config_error("h_scale must be > 0");
  if (!(c_floor > 0.0 && c_floor < c_ceil && c_ceil <= 1.0)) {
    throw config_error("need 0 < c_floor < c_ceil <= 1");
  }
  if (!(jitter0 >= 0.0 && jitter1 >= 0.0)) throw config_error("jitter must be >= 0");
  if (hidden_dim < 1) throw config_error("hidden_dim must be >= 1");
  if (!(hidden_noise >= 0.0)) throw config_error("hidden_noise must be >= 0");
  if (tokens_per_step < 2) throw config_error("tokens_per_step must be >= 2");
}

namespace {

template <class F>
void for_each_field(SimConfig& c, F&& f) {
  f("episodes", c.episodes);
  f("seed", c.seed);
  f("max_steps", c.max_steps);
  f("m_min", c.m_min);
  f("m_max", c.m_max);
  f("p_hasty", c.p_hasty);
  f("x0_sd", c.x0_sd);
  f("theta", c.theta);
  f("target_normal", c.target_normal);
  f("target_hasty", c.target_hasty);
  f("target_post", c.target_post);
  f("sigma", c.sigma);
  f("kappa", c.kappa);
  f("h_lo", c.h_lo);
  f("h_hi", c.h_hi);
  f("x_mid", c.x_mid);
  f("h_scale", c.h_scale);
  f("c_mid", c.c_mid);
  f("c_slope", c.c_slope);
  f("jitter0", c.jitter0);
  f("jitter1", c.jitter1);
  f("c_floor", c.c_floor);
  f("c_ceil", c.c_ceil);
  f("hidden_dim", c.hidden_dim);
  f("hidden_noise", c.hidden_noise);
  f("tokens_per_step", c.tokens_per_step);
  f("calibration_episodes", c.calibration_episodes);
  f("calibration_seed", c.calibration_seed);
}

}  // namespace

SimConfig sim_config_from_json(const Json& j) {
  const std::string where = "sim config";
  if (!j.is_object()) throw config_error(where + ": expected an object");
  SimConfig c;
  std::size_t known = 0;
  try {
    for_each_field(c, [&](const char* key, auto& field) {
      using T = std::decay_t<decltype(field)>;
      if (!j.contains(key)) return;
      ++known;
      if constexpr (std::is_same_v<T, double>) {
        field = ju::finite_number(j, key, where);
      } else {
        field = static_cast<T>(ju::index(j, key, where));
      }
    });
  } catch (const Error& e) {
    throw config_error(e.what());
  }
  if (known != j.size()) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      bool ok = false;
      for_each_field(c, [&](const char* key, auto&) { ok = ok || it.key() == key; });
      if (!ok) throw config_error(where + ": unknown field '" + it.key() + "'");
    }
  }
  c.validate();
  return c;
}

Json to_json(const SimConfig& cfg) {
  Json j = Json::object();
  SimConfig c = cfg;
  for_each_field(c, [&](const char* key, auto& field) { j[key] = field; });
  return j;
}

steering::Vector true_direction(const SimConfig& cfg) {
  steering::Vector e(cfg.hidden_dim, 0.0);
  e[0] = 1.0;
  return e;
}

namespace {

struct Episode {
  EpisodeLog log;
  trace::Trace trace;  // filled only when recording
};

double hazard(const SimConfig& c, double x) {
  return c.h_lo + (c.h_hi - c.h_lo) / (1.0 + std::exp((x - c.x_mid) / c.h_scale));
}

Episode simulate_episode(const SimConfig& c, std::size_t index, std::uint64_t seed,
                         const Policy& policy, const control::SessionConfig* session_cfg,
                         double gain, bool record) {
  Rng rng(derive_seed(seed, index));
  Episode ep;
  EpisodeLog& log = ep.log;
  log.episode = index;
  log.m_star = c.m_min + static_cast<std::size_t>(rng.below(c.m_max - c.m_min + 1));
  log.hasty = rng.bernoulli(c.p_hasty);
  const double pre_target = log.hasty ? c.target_hasty : c.target_normal;
  auto target = [&](std::size_t s) { return s < log.m_star ? pre_target : c.target_post; };

  std::optional<control::Session> session;
  if (policy.kind == PolicyKind::Surface) {
    session.emplace(std::make_shared<const control::SessionConfig>(*session_cfg));
  }
  if (record) {
    ep.trace.trace_id = "sim-" + std::to_string(index);
    ep.trace.meta["m_star"] = std::to_string(log.m_star);
  }

  double x = 0.0;
  double next_alpha = 0.0;  // weight for the first token of the coming step
  double alpha_sum = 0.0;
  std::size_t token_index = 0;
  for (std::size_t s = 1;; ++s) {
    const double step_noise = rng.normal();
    if (s == 1) {
      x = pre_target + c.x0_sd * step_noise;
    } else {
      x += c.theta * (target(s - 1) - x) + c.sigma * step_noise;
      x += gain * next_alpha;
      alpha_sum += next_alpha;
    }
    const double jitter = rng.normal();
    const double c_s = std::clamp(
        c.c_mid - c.c_slope * x + (c.jitter0 + c.jitter1 * std::max(x, 0.0)) * jitter, c.c_floor,
        c.c_ceil);
    steering::Vector h(c.hidden_dim);
    for (auto& hv : h) hv = c.hidden_noise * rng.normal();
    h[0] += x;
    const bool hazard_stop = rng.uniform01() < hazard(c, x);
    const bool stop = hazard_stop || s == c.max_steps;
    if (stop && !hazard_stop) log.truncated = true;

    next_alpha = 0.0;
    const std::size_t first = token_index;
    for (std::size_t k = 0; k < c.tokens_per_step; ++k) {
      const bool last = k + 1 == c.tokens_per_step;
      trace::TokenEvent ev{token_index++, last ? (stop ? "</think>" : "\n\n") : " w", c_s};
      if (session) {
        if (auto d = session->feed(ev)) {
          next_alpha = d->alpha;
          ++log.directives;
        }
      }
      if (record) ep.trace.tokens.push_back(std::move(ev));
    }
    if (policy.kind == PolicyKind::Constant && !stop) {
      next_alpha = policy.constant_alpha;
      ++log.directives;
    }
    if (record) {
      trace::StepSpan span;
      span.step_index = s;
      span.first_token = first;
      span.last_token = token_index - 1;
      span.hidden[0] = std::move(h);
      ep.trace.steps.push_back(std::move(span));
    }
    if (stop) {
      log.steps = s;
      break;
    }
  }
  if (record) {
    ep.trace.think_end = token_index - 1;
    ep.trace.answer_labels.push_back(
        {log.steps, log.steps >= log.m_star ? "solved" : "unsolved", log.steps >= log.m_star});
  }
  log.correct = log.steps >= log.m_star;
  log.mean_alpha = log.steps > 1 ? alpha_sum / static_cast<double>(log.steps - 1) : 0.0;
  return ep;
}

}  // namespace

std::vector<trace::Trace> record_traces(const SimConfig& cfg, std::size_t episodes,
                                        std::uint64_t seed) {
  cfg.validate();
  std::vector<trace::Trace> out;
  out.reserve(episodes);
  for (std::size_t e = 0; e < episodes; ++e) {
    out.push_back(simulate_episode(cfg, e, seed, Policy{}, nullptr, 0.0, true).trace);
  }
  return out;
}

SimResult run_closed_loop(const SimConfig& cfg, const Policy& policy,
                          const surface::ControlSurface* surface,
                          const steering::SteeringVector* sv) {
  cfg.validate();
  std::optional<control::SessionConfig> session_cfg;
  double gain = 0.0;
  if (policy.kind != PolicyKind::None) {
    if (!sv) throw config_error("steered simulation needs a steering vector");
    if (sv->v.size() != cfg.hidden_dim) {
      throw data_error("dimension", "steering vector width differs from the simulator's");
    }
    gain = cfg.kappa * steering::dot(sv->v, true_direction(cfg));
  }
  if (policy.kind == PolicyKind::Surface) {
    if (!surface) throw config_error("surface policy needs a control surface");
    session_cfg.emplace();
    session_cfg->surface = *surface;
    session_cfg->steering = std::make_shared<const steering::SteeringVector>(*sv);
    session_cfg->actuator = surface::Actuator::HiddenAdditive;
  }
  if (policy.kind == PolicyKind::Constant && !std::isfinite(policy.constant_alpha)) {
    throw config_error("constant alpha must be finite");
  }

  SimResult r;
  r.episodes.reserve(cfg.episodes);
  for (std::size_t e = 0; e < cfg.episodes; ++e) {
    r.episodes.push_back(simulate_episode(cfg, e, cfg.seed, policy,
                                          session_cfg ? &*session_cfg : nullptr, gain, false)
                             .log);
  }
  r.summary = summarize(r.episodes);
  return r;
}

SimSummary summarize(const std::vector<EpisodeLog>& episodes) {
  SimSummary s;
  s.episodes = episodes.size();
  if (episodes.empty()) return s;
  double steps = 0.0, correct = 0.0, premature = 0.0, overrun = 0.0;
  for (const auto& e : episodes) {
    steps += static_cast<double>(e.steps);
    if (e.correct) {
      correct += 1.0;
      overrun += static_cast<double>(e.steps - e.m_star);
    } else {
      premature += 1.0;
    }
    if (e.truncated) ++s.truncated;
  }
  const double n = static_cast<double>(episodes.size());
  s.mean_steps = steps / n;
  s.accuracy = correct / n;
  s.premature_rate = premature / n;
  s.mean_overrun = correct > 0.0 ? overrun / correct : 0.0;
  return s;
}

}  // namespace rebalance::lab
