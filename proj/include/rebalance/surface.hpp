#pragma once

#include <optional>
#include <string>

#include "rebalance/confidence.hpp"
#include "rebalance/steering.hpp"

namespace rebalance::surface {

enum class GateShape { Sigmoid, Linear, HardStep, Polynomial, Relu };
enum class Actuator { HiddenAdditive, DynamicTemperature };

const char* to_string(GateShape s);
const char* to_string(Actuator a);
GateShape parse_gate_shape(const std::string& s);
Actuator parse_actuator(const std::string& s);

struct GateConfig {
  GateShape shape = GateShape::Sigmoid;
  double eta_c = 0.0;
  double eta_v = 0.0;

  bool operator==(const GateConfig&) const = default;
};

struct Temperatures {
  double low = 0.7;   // applied on overthinking
  double high = 1.2;  // applied on underthinking
  double base = 0.7;  // applied otherwise

  bool operator==(const Temperatures&) const = default;
};

struct ControlSurface {
  stats::Thresholds th;
  double b_moderate = 0.0;
  double b_over = 0.0;
  double b_under = 0.0;
  GateConfig gate;
  Actuator actuator = Actuator::HiddenAdditive;
  Temperatures temps;

  bool operator==(const ControlSurface&) const = default;
};

/// sign(x) with sign(0) = 0.
int sign(double x);

/// Smooth indicator of x >= 0 with transition width eta; result in [0, 1].
///   sigmoid     1 / (1 + exp(-x/eta))
///   hard_step   1[x >= 0]
///   linear      clamp(x/(4 eta) + 1/2, 0, 1)
///   polynomial  3u^2 - 2u^3, u = clamp(x/(4 eta) + 1/2, 0, 1)
///   relu        clamp(x/(4 eta), 0, 1)
double gate(GateShape shape, double x, double eta);

double psi_over(double c, double v, const stats::Thresholds& th, const GateConfig& g);
double psi_under(double c, double v, const stats::Thresholds& th, const GateConfig& g);

struct ModerateFit {
  double b_moderate = 0.0;
  bool degenerate = false;  // tau_c^H >= 1, only the overthinking anchor was used
};

/// Least-squares amplitude of g_m(c) = sign(c - tau_c^H) B tanh(|c - tau_c^H|)
/// against g_m(tau_c^L) = -d_Om and g_m(1) = +d_Um.
ModerateFit fit_moderate_amplitude(const stats::Thresholds& th, double d_over_moderate,
                                   double d_under_moderate);

/// B(c, v) = B_m + (B_o - B_m) psi_O + (B_u - B_m) psi_U.
double amplitude(double c, double v, const ControlSurface& cs);

struct SteeringWeight {
  double alpha = 0.0;
  double lambda = 0.0;
  int delta = 0;
};

/// g(c, v) = sign(c - tau_c^H) B(c, v) tanh(|c - tau_c^H|).
SteeringWeight evaluate(double c, double v, const ControlSurface& cs);

/// Temperature for the dynamic-temperature actuator from the step label.
double temperature_for(double c, double v, const ControlSurface& cs);

struct SurfaceOptions {
  GateShape shape = GateShape::Sigmoid;
  std::optional<double> eta_c;  // default (tau_c^H - tau_c^L) / 10
  std::optional<double> eta_v;  // default (tau_v^H - tau_v^L) / 10
  Actuator actuator = Actuator::HiddenAdditive;
  /// Replaces B_u with this fraction of the prototype distance.
  std::optional<double> b_under_fraction;
  Temperatures temps;
};

struct BuildDiagnostics {
  bool moderate_fit_degenerate = false;
  bool eta_c_floored = false;
  bool eta_v_floored = false;
  bool b_over_below_moderate = false;
  bool nonmonotone_above_threshold = false;
};

struct BuiltSurface {
  ControlSurface surface;
  BuildDiagnostics diagnostics;
};

inline constexpr double kMinGateWidth = 1e-6;

BuiltSurface build_surface(const stats::Thresholds& th, const steering::BoundaryDistances& dist,
                           const SurfaceOptions& opt = {});

/// Grid scan (c in [tau_c^H, 1], step 1e-3, at several v) for decreasing g.
bool nonmonotone_above_threshold(const ControlSurface& cs);

}  // namespace rebalance::surface
