#include "rebalance/artifacts.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "rebalance/error.hpp"
#include "rebalance/json_util.hpp"

namespace rebalance::artifacts {

namespace ju = json_util;

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  std::string hex;
  hex.reserve(2 * len);
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

namespace {

Json thresholds_json(const stats::Thresholds& th) {
  return Json{{"q_L", th.q_lo},        {"q_H", th.q_hi},        {"tau_c_L", th.conf_lo},
              {"tau_c_H", th.conf_hi}, {"tau_v_L", th.var_lo}, {"tau_v_H", th.var_hi}};
}

stats::Thresholds thresholds_from(const Json& j, const std::string& where) {
  ju::only_keys(j, {"q_L", "q_H", "tau_c_L", "tau_c_H", "tau_v_L", "tau_v_H"}, where);
  stats::Thresholds th;
  th.q_lo = ju::finite_number(j, "q_L", where);
  th.q_hi = ju::finite_number(j, "q_H", where);
  th.conf_lo = ju::finite_number(j, "tau_c_L", where);
  th.conf_hi = ju::finite_number(j, "tau_c_H", where);
  th.var_lo = ju::finite_number(j, "tau_v_L", where);
  th.var_hi = ju::finite_number(j, "tau_v_H", where);
  if (th.conf_lo > th.conf_hi || th.var_lo > th.var_hi) {
    throw data_error("schema", where + ": thresholds out of order");
  }
  return th;
}

Json parse_artifact(std::string_view bytes, const char* what) {
  Json j = ju::parse(bytes, what);
  if (!j.is_object()) throw data_error("schema", std::string(what) + ": expected an object");
  return j;
}

void check_version(const Json& j, int expected, const std::string& where) {
  if (ju::integer(j, "version", where) != expected) {
    throw data_error("schema", where + ": unsupported version");
  }
}

}  // namespace

std::string write_steering(const SteeringArtifact& a) {
  const auto& d = a.distances;
  Json prov{{"trace_ids", a.trace_ids},
            {"thresholds", thresholds_json(a.thresholds)},
            {"window", a.window},
            {"robust_quantile", a.robust_quantile ? Json(*a.robust_quantile) : Json(nullptr)}};
  Json j{{"version", kSteeringVersion},
         {"layer", a.vector.layer},
         {"dim", a.vector.v.size()},
         {"v", a.vector.v},
         {"d_prot", a.vector.d_prot},
         {"t", d.t},
         {"d_Om", d.d_over_moderate},
         {"d_Oa", d.d_over_aggressive},
         {"d_Um", d.d_under_moderate},
         {"d_Ua", d.d_under_aggressive},
         {"rho_m", d.rho_moderate},
         {"rho_a", d.rho_aggressive},
         {"counts",
          {{"overthink", a.counts.overthink},
           {"underthink", a.counts.underthink},
           {"normal", a.counts.normal}}},
         {"flags", {{"no_aggressive_evidence", d.no_aggressive_evidence}}},
         {"provenance", prov}};
  return j.dump() + "\n";
}

SteeringArtifact read_steering(std::string_view bytes) {
  const std::string where = "steering artifact";
  const Json j = parse_artifact(bytes, "steering artifact");
  ju::only_keys(j, {"version", "layer", "dim", "v", "d_prot", "t", "d_Om", "d_Oa", "d_Um",
                    "d_Ua", "rho_m", "rho_a", "counts", "flags", "provenance"},
                where);
  check_version(j, kSteeringVersion, where);

  SteeringArtifact a;
  a.vector.layer = static_cast<trace::LayerId>(ju::integer(j, "layer", where));
  const auto dim = ju::index(j, "dim", where);
  const Json& v = ju::member(j, "v", where);
  if (!v.is_array() || v.size() != dim || dim == 0) {
    throw data_error("schema", where + ": 'v' must be an array of length 'dim'");
  }
  for (const auto& x : v) {
    if (!x.is_number()) throw data_error("schema", where + ": non-numeric entry in 'v'");
    a.vector.v.push_back(x.get<double>());
  }
  if (std::abs(steering::norm(a.vector.v) - 1.0) > 1e-9) {
    throw data_error("schema", where + ": 'v' is not unit-norm");
  }
  a.vector.d_prot = ju::finite_number(j, "d_prot", where);

  auto& d = a.distances;
  d.t = ju::finite_number(j, "t", where);
  d.d_over_moderate = ju::finite_number(j, "d_Om", where);
  d.d_over_aggressive = ju::finite_number(j, "d_Oa", where);
  d.d_under_moderate = ju::finite_number(j, "d_Um", where);
  d.d_under_aggressive = ju::finite_number(j, "d_Ua", where);
  d.rho_moderate = ju::finite_number(j, "rho_m", where);
  d.rho_aggressive = ju::finite_number(j, "rho_a", where);
  d.d_prot = a.vector.d_prot;

  const Json& counts = ju::member(j, "counts", where);
  ju::only_keys(counts, {"overthink", "underthink", "normal"}, where + ".counts");
  a.counts.overthink = ju::index(counts, "overthink", where + ".counts");
  a.counts.underthink = ju::index(counts, "underthink", where + ".counts");
  a.counts.normal = ju::index(counts, "normal", where + ".counts");

  const Json& flags = ju::member(j, "flags", where);
  ju::only_keys(flags, {"no_aggressive_evidence"}, where + ".flags");
  d.no_aggressive_evidence = ju::boolean(flags, "no_aggressive_evidence", where + ".flags");

  const Json& prov = ju::member(j, "provenance", where);
  const std::string pw = where + ".provenance";
  ju::only_keys(prov, {"trace_ids", "thresholds", "window", "robust_quantile"}, pw);
  const Json& ids = ju::member(prov, "trace_ids", pw);
  if (!ids.is_array()) throw data_error("schema", pw + ": 'trace_ids' must be an array");
  for (const auto& id : ids) {
    if (!id.is_string()) throw data_error("schema", pw + ": trace ids must be strings");
    a.trace_ids.push_back(id.get<std::string>());
  }
  a.thresholds = thresholds_from(ju::member(prov, "thresholds", pw), pw + ".thresholds");
  a.window = ju::index(prov, "window", pw);
  const Json& rq = ju::member(prov, "robust_quantile", pw);
  if (!rq.is_null()) a.robust_quantile = ju::finite_number(prov, "robust_quantile", pw);
  return a;
}

std::string write_surface(const SurfaceArtifact& a) {
  const auto& cs = a.surface;
  const auto& dg = a.diagnostics;
  Json j{{"version", kSurfaceVersion},
         {"thresholds", thresholds_json(cs.th)},
         {"amplitudes", {{"B_m", cs.b_moderate}, {"B_o", cs.b_over}, {"B_u", cs.b_under}}},
         {"gate",
          {{"shape", surface::to_string(cs.gate.shape)},
           {"eta_c", cs.gate.eta_c},
           {"eta_v", cs.gate.eta_v}}},
         {"actuator", surface::to_string(cs.actuator)},
         {"temperatures",
          {{"low", cs.temps.low}, {"high", cs.temps.high}, {"base", cs.temps.base}}},
         {"layer", a.layer},
         {"steering_hash", a.steering_hash},
         {"provenance", {{"corpus_id", a.corpus_id}, {"seed", a.seed}}},
         {"diagnostics",
          {{"moderate_fit_degenerate", dg.moderate_fit_degenerate},
           {"eta_c_floored", dg.eta_c_floored},
           {"eta_v_floored", dg.eta_v_floored},
           {"b_over_below_moderate", dg.b_over_below_moderate},
           {"nonmonotone_above_threshold", dg.nonmonotone_above_threshold}}}};
  return j.dump() + "\n";
}

SurfaceArtifact read_surface(std::string_view bytes) {
  const std::string where = "surface artifact";
  const Json j = parse_artifact(bytes, "surface artifact");
  ju::only_keys(j, {"version", "thresholds", "amplitudes", "gate", "actuator", "temperatures",
                    "layer", "steering_hash", "provenance", "diagnostics"},
                where);
  check_version(j, kSurfaceVersion, where);

  SurfaceArtifact a;
  auto& cs = a.surface;
  cs.th = thresholds_from(ju::member(j, "thresholds", where), where + ".thresholds");

  const Json& amp = ju::member(j, "amplitudes", where);
  ju::only_keys(amp, {"B_m", "B_o", "B_u"}, where + ".amplitudes");
  cs.b_moderate = ju::finite_number(amp, "B_m", where + ".amplitudes");
  cs.b_over = ju::finite_number(amp, "B_o", where + ".amplitudes");
  cs.b_under = ju::finite_number(amp, "B_u", where + ".amplitudes");
  if (cs.b_moderate < 0 || cs.b_over < 0 || cs.b_under < 0) {
    throw data_error("schema", where + ": amplitudes must be >= 0");
  }

  const Json& gate = ju::member(j, "gate", where);
  ju::only_keys(gate, {"shape", "eta_c", "eta_v"}, where + ".gate");
  try {
    cs.gate.shape = surface::parse_gate_shape(ju::string(gate, "shape", where + ".gate"));
    cs.actuator = surface::parse_actuator(ju::string(j, "actuator", where));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Config) throw data_error("schema", where + ": " + e.what());
    throw;
  }
  cs.gate.eta_c = ju::finite_number(gate, "eta_c", where + ".gate");
  cs.gate.eta_v = ju::finite_number(gate, "eta_v", where + ".gate");
  if (cs.gate.eta_c <= 0 || cs.gate.eta_v <= 0) {
    throw data_error("schema", where + ": gate widths must be > 0");
  }

  const Json& temps = ju::member(j, "temperatures", where);
  ju::only_keys(temps, {"low", "high", "base"}, where + ".temperatures");
  cs.temps.low = ju::finite_number(temps, "low", where + ".temperatures");
  cs.temps.high = ju::finite_number(temps, "high", where + ".temperatures");
  cs.temps.base = ju::finite_number(temps, "base", where + ".temperatures");

  a.layer = static_cast<trace::LayerId>(ju::integer(j, "layer", where));
  a.steering_hash = ju::string(j, "steering_hash", where);

  const Json& prov = ju::member(j, "provenance", where);
  ju::only_keys(prov, {"corpus_id", "seed"}, where + ".provenance");
  a.corpus_id = ju::string(prov, "corpus_id", where + ".provenance");
  const Json& seed = ju::member(prov, "seed", where + ".provenance");
  if (!seed.is_number_unsigned() && !(seed.is_number_integer() && seed.get<std::int64_t>() >= 0)) {
    throw data_error("schema", where + ".provenance: 'seed' must be a non-negative integer");
  }
  a.seed = seed.get<std::uint64_t>();

  const Json& dg = ju::member(j, "diagnostics", where);
  const std::string dw = where + ".diagnostics";
  ju::only_keys(dg, {"moderate_fit_degenerate", "eta_c_floored", "eta_v_floored",
                     "b_over_below_moderate", "nonmonotone_above_threshold"},
                dw);
  a.diagnostics.moderate_fit_degenerate = ju::boolean(dg, "moderate_fit_degenerate", dw);
  a.diagnostics.eta_c_floored = ju::boolean(dg, "eta_c_floored", dw);
  a.diagnostics.eta_v_floored = ju::boolean(dg, "eta_v_floored", dw);
  a.diagnostics.b_over_below_moderate = ju::boolean(dg, "b_over_below_moderate", dw);
  a.diagnostics.nonmonotone_above_threshold = ju::boolean(dg, "nonmonotone_above_threshold", dw);
  return a;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("io", "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw data_error("io", "cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw data_error("io", "write failed for " + path);
}

}  // namespace rebalance::artifacts
