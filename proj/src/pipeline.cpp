#include "rebalance/pipeline.hpp"

#include <set>
#include <sstream>

#include "rebalance/confidence.hpp"
#include "rebalance/error.hpp"

namespace rebalance::pipeline {

namespace ju = json_util;

CorpusStats corpus_stats(std::span<const trace::Trace> corpus, stats::WindowConfig window) {
  CorpusStats cs;
  for (const auto& t : corpus) {
    cs.confidence.push_back(stats::trace_confidences(t));
    cs.variance.push_back(stats::windowed_variance(cs.confidence.back(), window));
  }
  return cs;
}

namespace {

stats::Thresholds pooled_thresholds(const CorpusStats& cs, double q_lo, double q_hi) {
  std::vector<double> c, v;
  for (std::size_t i = 0; i < cs.confidence.size(); ++i) {
    c.insert(c.end(), cs.confidence[i].begin(), cs.confidence[i].end());
    v.insert(v.end(), cs.variance[i].begin(), cs.variance[i].end());
  }
  if (c.empty()) throw data_error("missing", "corpus has no steps");
  return stats::compute_thresholds(c, v, q_lo, q_hi);
}

trace::LayerId pick_layer(std::span<const trace::Trace> corpus,
                          const std::optional<trace::LayerId>& requested) {
  std::set<trace::LayerId> layers;
  for (const auto& t : corpus) {
    for (const auto& s : t.steps) {
      for (const auto& [l, _] : s.hidden) layers.insert(l);
    }
  }
  if (layers.empty()) {
    throw data_error("missing", "corpus has no hidden-state records; extraction needs "
                                "step-first hidden states at the steering layer");
  }
  if (requested) {
    if (!layers.count(*requested)) {
      throw data_error("missing", "corpus has no hidden-state records at layer " +
                                      std::to_string(*requested));
    }
    return *requested;
  }
  if (layers.size() > 1) {
    throw config_error("corpus carries several layers; pass --layer or a probe report");
  }
  return *layers.begin();
}

}  // namespace

artifacts::SteeringArtifact extract(std::span<const trace::Trace> corpus,
                                    const ExtractOptions& opt) {
  if (corpus.empty()) throw data_error("missing", "empty trace corpus");
  const trace::LayerId layer = pick_layer(corpus, opt.layer);
  const CorpusStats cs = corpus_stats(corpus, opt.window);
  const stats::Thresholds th = pooled_thresholds(cs, opt.q_lo, opt.q_hi);

  artifacts::SteeringArtifact a;
  std::vector<steering::LabeledHidden> samples;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& t = corpus[i];
    a.trace_ids.push_back(t.trace_id);
    const auto labels = stats::classify_steps(cs.confidence[i], cs.variance[i], th);
    for (std::size_t s = 0; s < t.steps.size(); ++s) {
      auto it = t.steps[s].hidden.find(layer);
      if (it == t.steps[s].hidden.end()) continue;
      const auto label = labels[s].label;
      switch (label) {
        case stats::StepLabel::Overthink: ++a.counts.overthink; break;
        case stats::StepLabel::Underthink: ++a.counts.underthink; break;
        case stats::StepLabel::Normal: ++a.counts.normal; break;
      }
      if (label != stats::StepLabel::Normal) samples.push_back({it->second, label});
    }
  }

  steering::Prototypes protos;
  try {
    protos = steering::aggregate_prototypes(samples, layer);
  } catch (const Error& e) {
    if (e.code() != "extraction") throw;
    throw data_error("extraction",
                     std::string(e.what()) + " (overthink " + std::to_string(a.counts.overthink) +
                         ", underthink " + std::to_string(a.counts.underthink) +
                         " steps at the current thresholds); try widening the quantiles, "
                         "e.g. a larger q_L or a smaller q_H");
  }
  a.vector = steering::steering_vector(protos);
  std::vector<double> proj_over;
  for (const auto& s : samples) {
    if (s.label == stats::StepLabel::Overthink) proj_over.push_back(steering::project(s.hidden, a.vector));
  }
  a.distances = steering::boundary_distances(protos, a.vector, proj_over, opt.distances);
  a.thresholds = th;
  a.window = opt.window.size;
  a.robust_quantile = opt.distances.robust_quantile;
  return a;
}

artifacts::SurfaceArtifact fit(std::string_view steering_bytes, const FitOptions& opt) {
  const auto sa = artifacts::read_steering(steering_bytes);
  auto built = surface::build_surface(sa.thresholds, sa.distances, opt.surface);
  artifacts::SurfaceArtifact out;
  out.surface = built.surface;
  out.diagnostics = built.diagnostics;
  out.layer = sa.vector.layer;
  out.steering_hash = artifacts::sha256_hex(steering_bytes);
  out.corpus_id = opt.corpus_id;
  out.seed = opt.seed;
  return out;
}

namespace {

Json transition_json(const stats::TransitionStats& t) {
  return Json{{"HH", t.hh},
              {"HL", t.hl},
              {"LH", t.lh},
              {"LL", t.ll},
              {"median", t.median},
              {"P_HH", ju::finite_or_null(t.p_hh)},
              {"P_LL", ju::finite_or_null(t.p_ll)},
              {"SameRate", t.same_rate},
              {"OR", std::isnan(t.odds_ratio) ? Json(nullptr)
                     : std::isinf(t.odds_ratio) ? Json("inf")
                                                : Json(t.odds_ratio)},
              {"OR_CI", t.ci_lo ? Json::array({*t.ci_lo, *t.ci_hi}) : Json(nullptr)},
              {"fisher_p", t.p_value}};
}

Json correlation_json(const stats::CorrelationReport& r) {
  Json j{{"rho", r.rho ? Json(*r.rho) : Json(nullptr)},
         {"ci", r.rho ? Json::array({r.ci_lo, r.ci_hi}) : Json(nullptr)},
         {"n", r.n},
         {"resamples", r.resamples},
         {"degenerate_resamples", r.degenerate_resamples},
         {"small_sample", r.small_sample}};
  return j;
}

Json thresholds_json(const stats::Thresholds& th) {
  return Json{{"q_L", th.q_lo},        {"q_H", th.q_hi},        {"tau_c_L", th.conf_lo},
              {"tau_c_H", th.conf_hi}, {"tau_v_L", th.var_lo}, {"tau_v_H", th.var_hi}};
}

}  // namespace

Json analyze(std::span<const trace::Trace> corpus, const AnalyzeOptions& opt) {
  if (corpus.empty()) throw data_error("missing", "empty trace corpus");
  const CorpusStats cs = corpus_stats(corpus, opt.window);
  const stats::Thresholds th = pooled_thresholds(cs, opt.q_lo, opt.q_hi);

  std::size_t n_steps = 0, over = 0, under = 0, normal = 0;
  std::vector<double> words, minc, varc;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    n_steps += cs.confidence[i].size();
    for (const auto& s : stats::classify_steps(cs.confidence[i], cs.variance[i], th)) {
      switch (s.label) {
        case stats::StepLabel::Overthink: ++over; break;
        case stats::StepLabel::Underthink: ++under; break;
        case stats::StepLabel::Normal: ++normal; break;
      }
    }
    const auto agg = stats::trace_aggregates(corpus[i]);
    words.push_back(static_cast<double>(agg.word_count));
    minc.push_back(agg.min_confidence);
    varc.push_back(agg.confidence_variance);
  }

  Json j{{"version", kReportVersion},
         {"traces", corpus.size()},
         {"steps", n_steps},
         {"window", opt.window.size},
         {"thresholds", thresholds_json(th)},
         {"labels", {{"overthink", over}, {"underthink", under}, {"normal", normal}}}};

  if (n_steps - corpus.size() > 0) {
    j["markov"] = transition_json(stats::transition_stats(cs.confidence));
  } else {
    j["markov"] = nullptr;
  }
  if (corpus.size() >= 2) {
    j["correlation"] = {
        {"words_vs_min_confidence",
         correlation_json(stats::bootstrap_ci(words, minc, opt.resamples, opt.seed))},
        {"words_vs_confidence_variance",
         correlation_json(stats::bootstrap_ci(words, varc, opt.resamples, opt.seed))}};
  } else {
    j["correlation"] = nullptr;
  }
  return j;
}

Json probe_report_json(const probe::ProbeReport& rep, const probe::ProbeConfig& cfg,
                       std::size_t dropped_steps) {
  Json layers = Json::array();
  for (const auto& s : rep.layers) {
    layers.push_back({{"layer", s.layer},
                      {"r2", s.r2 ? Json(*s.r2) : Json(nullptr)},
                      {"retained_variance", s.retained_variance},
                      {"k", s.k},
                      {"k_reduced", s.k_reduced},
                      {"pseudo_inverse", s.pseudo_inverse},
                      {"skipped", s.skipped}});
  }
  return Json{{"version", kReportVersion},
              {"config",
               {{"pca_dim", cfg.pca_dim},
                {"lambda", cfg.lambda},
                {"train_fraction", cfg.train_fraction},
                {"seed", cfg.seed}}},
              {"samples", rep.n_samples},
              {"train", rep.n_train},
              {"test", rep.n_test},
              {"dropped_steps", dropped_steps},
              {"layers", layers},
              {"selected_layer", rep.selected_layer ? Json(*rep.selected_layer) : Json(nullptr)}};
}

trace::LayerId selected_layer(const Json& probe_report) {
  const Json& s = ju::member(probe_report, "selected_layer", "probe report");
  if (!s.is_number_integer()) {
    throw data_error("schema", "probe report has no selected layer");
  }
  return s.get<trace::LayerId>();
}

Calibration calibrate(const lab::SimConfig& cfg, const surface::SurfaceOptions& surface) {
  const auto traces = lab::record_traces(cfg, cfg.calibration_episodes, cfg.calibration_seed);
  Calibration c;
  c.steering = extract(traces, ExtractOptions{});
  c.steering_bytes = artifacts::write_steering(c.steering);
  FitOptions fo;
  fo.surface = surface;
  fo.corpus_id = "sim:" + std::to_string(cfg.calibration_seed) + ":" +
                 std::to_string(cfg.calibration_episodes);
  fo.seed = cfg.seed;
  c.surface = fit(c.steering_bytes, fo);
  return c;
}

SimulateOutcome simulate(const lab::SimConfig& cfg, const surface::SurfaceOptions& surface) {
  SimulateOutcome out;
  out.calibration = calibrate(cfg, surface);
  out.baseline = lab::run_closed_loop(cfg, lab::Policy{}, nullptr, nullptr);
  out.controlled = lab::run_closed_loop(cfg, lab::Policy{lab::PolicyKind::Surface, 0.0},
                                        &out.calibration.surface.surface,
                                        &out.calibration.steering.vector);
  return out;
}

Json summary_json(const lab::SimSummary& s) {
  return Json{{"episodes", s.episodes},         {"mean_steps", s.mean_steps},
              {"accuracy", s.accuracy},         {"premature_rate", s.premature_rate},
              {"mean_overrun", s.mean_overrun}, {"truncated", s.truncated}};
}

Json simulate_report(const lab::SimConfig& cfg, const SimulateOutcome& out) {
  const auto& b = out.baseline.summary;
  const auto& c = out.controlled.summary;
  const auto& sv = out.calibration.steering.vector;
  const double cosine = steering::dot(sv.v, lab::true_direction(cfg));
  return Json{{"version", kReportVersion},
              {"config", lab::to_json(cfg)},
              {"calibration",
               {{"steering_hash", out.calibration.surface.steering_hash},
                {"cosine_to_true", cosine},
                {"thresholds", thresholds_json(out.calibration.steering.thresholds)},
                {"B_m", out.calibration.surface.surface.b_moderate},
                {"B_o", out.calibration.surface.surface.b_over},
                {"B_u", out.calibration.surface.surface.b_under}}},
              {"baseline", summary_json(b)},
              {"controlled", summary_json(c)},
              {"step_reduction", b.mean_steps > 0.0 ? 1.0 - c.mean_steps / b.mean_steps : 0.0},
              {"accuracy_delta", c.accuracy - b.accuracy}};
}

std::string episode_log_ndjson(const lab::SimResult& baseline, const lab::SimResult& controlled) {
  std::ostringstream os;
  auto dump = [&](const char* run, const lab::SimResult& r) {
    for (const auto& e : r.episodes) {
      os << Json{{"run", run},
                 {"episode", e.episode},
                 {"m_star", e.m_star},
                 {"hasty", e.hasty},
                 {"steps", e.steps},
                 {"correct", e.correct},
                 {"truncated", e.truncated},
                 {"directives", e.directives},
                 {"mean_alpha", e.mean_alpha}}
                .dump()
         << '\n';
    }
  };
  dump("baseline", baseline);
  dump("controlled", controlled);
  return os.str();
}

}  // namespace rebalance::pipeline
