#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "rebalance/artifacts.hpp"
#include "rebalance/json_util.hpp"
#include "rebalance/lab.hpp"
#include "rebalance/probe.hpp"
#include "rebalance/steering.hpp"
#include "rebalance/surface.hpp"
#include "rebalance/trace.hpp"

namespace rebalance::pipeline {

/// Per-trace confidences and windowed variances; windows restart per trace.
struct CorpusStats {
  std::vector<std::vector<double>> confidence;
  std::vector<std::vector<double>> variance;
};
CorpusStats corpus_stats(std::span<const trace::Trace> corpus, stats::WindowConfig window);

struct ExtractOptions {
  double q_lo = 0.25;
  double q_hi = 0.75;
  stats::WindowConfig window;
  std::optional<trace::LayerId> layer;  // required when the corpus carries several layers
  steering::DistanceOptions distances;
};

/// stats -> thresholds -> classify -> prototypes -> vector -> distances.
artifacts::SteeringArtifact extract(std::span<const trace::Trace> corpus,
                                    const ExtractOptions& opt);

struct FitOptions {
  surface::SurfaceOptions surface;
  std::string corpus_id;
  std::uint64_t seed = 42;
};

/// Fits a surface from the serialized steering artifact; the surface records
/// the SHA-256 of exactly these bytes.
artifacts::SurfaceArtifact fit(std::string_view steering_bytes, const FitOptions& opt);

struct AnalyzeOptions {
  double q_lo = 0.25;
  double q_hi = 0.75;
  stats::WindowConfig window;
  std::size_t resamples = 2000;
  std::uint64_t seed = 42;
};

inline constexpr int kReportVersion = 1;

/// Thresholds, label counts, Markov persistence and per-trace rank correlations.
Json analyze(std::span<const trace::Trace> corpus, const AnalyzeOptions& opt);

Json probe_report_json(const probe::ProbeReport& rep, const probe::ProbeConfig& cfg,
                       std::size_t dropped_steps);

/// Selected layer from a probe report file's JSON.
trace::LayerId selected_layer(const Json& probe_report);

struct Calibration {
  artifacts::SteeringArtifact steering;
  std::string steering_bytes;
  artifacts::SurfaceArtifact surface;
};

/// Records unsteered simulator episodes and runs extract + fit on them.
Calibration calibrate(const lab::SimConfig& cfg, const surface::SurfaceOptions& surface = {});

struct SimulateOutcome {
  lab::SimResult baseline;
  lab::SimResult controlled;
  Calibration calibration;
};

SimulateOutcome simulate(const lab::SimConfig& cfg, const surface::SurfaceOptions& surface = {});

Json summary_json(const lab::SimSummary& s);
Json simulate_report(const lab::SimConfig& cfg, const SimulateOutcome& out);
std::string episode_log_ndjson(const lab::SimResult& baseline, const lab::SimResult& controlled);

}  // namespace rebalance::pipeline
