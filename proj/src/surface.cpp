#include "rebalance/surface.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "rebalance/error.hpp"

namespace rebalance::surface {

const char* to_string(GateShape s) {
  switch (s) {
    case GateShape::Sigmoid: return "sigmoid";
    case GateShape::Linear: return "linear";
    case GateShape::HardStep: return "hard_step";
    case GateShape::Polynomial: return "polynomial";
    case GateShape::Relu: return "relu";
  }
  return "sigmoid";
}

const char* to_string(Actuator a) {
  return a == Actuator::HiddenAdditive ? "hidden_additive" : "dynamic_temperature";
}

GateShape parse_gate_shape(const std::string& s) {
  for (auto shape : {GateShape::Sigmoid, GateShape::Linear, GateShape::HardStep,
                     GateShape::Polynomial, GateShape::Relu}) {
    if (s == to_string(shape)) return shape;
  }
  throw config_error("unknown gate shape '" + s + "'");
}

Actuator parse_actuator(const std::string& s) {
  if (s == "hidden_additive") return Actuator::HiddenAdditive;
  if (s == "dynamic_temperature") return Actuator::DynamicTemperature;
  throw config_error("unknown actuator '" + s + "'");
}

int sign(double x) { return (x > 0.0) - (x < 0.0); }

double gate(GateShape shape, double x, double eta) {
  switch (shape) {
    case GateShape::Sigmoid:
      return 1.0 / (1.0 + std::exp(-x / eta));
    case GateShape::HardStep:
      return x >= 0.0 ? 1.0 : 0.0;
    case GateShape::Linear:
      return std::clamp(x / (4.0 * eta) + 0.5, 0.0, 1.0);
    case GateShape::Polynomial: {
      const double u = std::clamp(x / (4.0 * eta) + 0.5, 0.0, 1.0);
      return u * u * (3.0 - 2.0 * u);
    }
    case GateShape::Relu:
      return std::clamp(x / (4.0 * eta), 0.0, 1.0);
  }
  return 0.0;
}

double psi_over(double c, double v, const stats::Thresholds& th, const GateConfig& g) {
  return gate(g.shape, th.conf_lo - c, g.eta_c) * gate(g.shape, v - th.var_hi, g.eta_v);
}

double psi_under(double c, double v, const stats::Thresholds& th, const GateConfig& g) {
  return gate(g.shape, c - th.conf_hi, g.eta_c) * gate(g.shape, th.var_lo - v, g.eta_v);
}

ModerateFit fit_moderate_amplitude(const stats::Thresholds& th, double d_over_moderate,
                                   double d_under_moderate) {
  if (th.conf_lo > th.conf_hi) throw config_error("tau_c^L exceeds tau_c^H");
  const double a = std::tanh(th.conf_hi - th.conf_lo);
  ModerateFit fit;
  if (th.conf_hi >= 1.0) {
    if (a <= 0.0) throw config_error("no usable anchors: tau_c^L = tau_c^H = 1");
    fit.b_moderate = d_over_moderate / a;
    fit.degenerate = true;
    return fit;
  }
  const double b = std::tanh(1.0 - th.conf_hi);
  fit.b_moderate = (d_over_moderate * a + d_under_moderate * b) / (a * a + b * b);
  return fit;
}

double amplitude(double c, double v, const ControlSurface& cs) {
  const double po = psi_over(c, v, cs.th, cs.gate);
  const double pu = psi_under(c, v, cs.th, cs.gate);
  return cs.b_moderate + (cs.b_over - cs.b_moderate) * po + (cs.b_under - cs.b_moderate) * pu;
}

SteeringWeight evaluate(double c, double v, const ControlSurface& cs) {
  if (!std::isfinite(c) || !std::isfinite(v)) {
    throw domain_error("control surface inputs must be finite");
  }
  const double offset = c - cs.th.conf_hi;
  SteeringWeight w;
  w.alpha = sign(offset) * amplitude(c, v, cs) * std::tanh(std::abs(offset));
  w.lambda = std::abs(w.alpha);
  w.delta = sign(w.alpha);
  return w;
}

double temperature_for(double c, double v, const ControlSurface& cs) {
  switch (stats::classify(c, v, cs.th)) {
    case stats::StepLabel::Underthink: return cs.temps.high;
    case stats::StepLabel::Overthink: return cs.temps.low;
    case stats::StepLabel::Normal: return cs.temps.base;
  }
  return cs.temps.base;
}

bool nonmonotone_above_threshold(const ControlSurface& cs) {
  const double v_mid = 0.5 * (cs.th.var_lo + cs.th.var_hi);
  const std::array<double, 5> vs{0.0, cs.th.var_lo, v_mid, cs.th.var_hi, 2.0 * cs.th.var_hi};
  for (double v : vs) {
    double prev = evaluate(cs.th.conf_hi, v, cs).alpha;
    for (int i = 1; cs.th.conf_hi + i * 1e-3 <= 1.0; ++i) {
      const double cur = evaluate(cs.th.conf_hi + i * 1e-3, v, cs).alpha;
      if (cur < prev - 1e-12) return true;
      prev = cur;
    }
  }
  return false;
}

BuiltSurface build_surface(const stats::Thresholds& th, const steering::BoundaryDistances& dist,
                           const SurfaceOptions& opt) {
  BuiltSurface out;
  ControlSurface& cs = out.surface;
  cs.th = th;
  cs.actuator = opt.actuator;
  cs.temps = opt.temps;

  const auto fit = fit_moderate_amplitude(th, dist.d_over_moderate, dist.d_under_moderate);
  cs.b_moderate = fit.b_moderate;
  out.diagnostics.moderate_fit_degenerate = fit.degenerate;
  cs.b_over = dist.d_over_aggressive;
  cs.b_under = dist.d_under_aggressive;
  if (opt.b_under_fraction) {
    if (*opt.b_under_fraction < 0.0) throw config_error("B_u fraction must be >= 0");
    cs.b_under = *opt.b_under_fraction * dist.d_prot;
  }

  cs.gate.shape = opt.shape;
  cs.gate.eta_c = opt.eta_c.value_or((th.conf_hi - th.conf_lo) / 10.0);
  cs.gate.eta_v = opt.eta_v.value_or((th.var_hi - th.var_lo) / 10.0);
  if (opt.eta_c && *opt.eta_c <= 0.0) throw config_error("eta_c must be > 0");
  if (opt.eta_v && *opt.eta_v <= 0.0) throw config_error("eta_v must be > 0");
  if (cs.gate.eta_c < kMinGateWidth) {
    cs.gate.eta_c = kMinGateWidth;
    out.diagnostics.eta_c_floored = true;
  }
  if (cs.gate.eta_v < kMinGateWidth) {
    cs.gate.eta_v = kMinGateWidth;
    out.diagnostics.eta_v_floored = true;
  }

  out.diagnostics.b_over_below_moderate = cs.b_over < cs.b_moderate;
  out.diagnostics.nonmonotone_above_threshold = nonmonotone_above_threshold(cs);
  return out;
}

}  // namespace rebalance::surface
