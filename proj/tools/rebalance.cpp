// rebalance: trace analysis, steering extraction, surface fitting, online control
// and simulation from the command line.

#include <csignal>
#include <chrono>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>

#include "CLI11.hpp"
#include "rebalance/artifacts.hpp"
#include "rebalance/error.hpp"
#include "rebalance/json_util.hpp"
#include "rebalance/pipeline.hpp"
#include "rebalance/probe.hpp"
#include "rebalance/protocol.hpp"
#include "rebalance/trace.hpp"

using namespace rebalance;

namespace {

bool g_quiet = false;
volatile std::sig_atomic_t g_stop = 0;

void log(const std::string& msg) {
  if (!g_quiet) std::cerr << "rebalance: " << msg << '\n';
}

// Values from --config, overridden by explicit flags.
class Settings {
 public:
  void load(const std::string& path) {
    if (path.empty()) return;
    try {
      cfg_ = json_util::parse(artifacts::read_file(path), path);
    } catch (const Error& e) {
      throw config_error(e.what());
    }
    if (!cfg_.is_object()) throw config_error(path + ": expected a JSON object");
    path_ = path;
  }

  /// Rejects keys the command does not understand.
  void restrict(std::initializer_list<const char*> keys) const {
    if (cfg_.is_null()) return;
    for (auto it = cfg_.begin(); it != cfg_.end(); ++it) {
      bool ok = false;
      for (const char* k : keys) ok = ok || it.key() == k;
      if (!ok) throw config_error(path_ + ": unknown setting '" + it.key() + "'");
    }
  }

  template <class T>
  T get(const std::optional<T>& flag, const char* key, T fallback) const {
    if (flag) return *flag;
    if (auto v = lookup<T>(key)) return *v;
    return fallback;
  }

  template <class T>
  std::optional<T> maybe(const std::optional<T>& flag, const char* key) const {
    if (flag) return flag;
    return lookup<T>(key);
  }

  const Json& raw() const { return cfg_; }

 private:
  template <class T>
  std::optional<T> lookup(const char* key) const {
    if (cfg_.is_null() || !cfg_.contains(key) || cfg_[key].is_null()) return std::nullopt;
    try {
      return cfg_[key].get<T>();
    } catch (const nlohmann::json::exception&) {
      throw config_error(path_ + ": setting '" + key + "' has the wrong type");
    }
  }

  Json cfg_;
  std::string path_;
};

void emit(const std::string& bytes, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << bytes;
    std::cout.flush();
  } else {
    artifacts::write_file(out, bytes);
    log("wrote " + out);
  }
}

std::string require(const std::optional<std::string>& v, const char* what) {
  if (!v || v->empty()) throw config_error(std::string("missing ") + what);
  return *v;
}

struct Flags {
  std::string config;
  std::optional<std::string> corpus, out, probe_report, steering, surface, log_path, host;
  std::optional<double> q_lo, q_hi, rho_m, rho_a, robust_quantile, eta_c, eta_v, b_u, lambda,
      train_fraction, temp_low, temp_high, temp_base, kappa;
  std::optional<std::size_t> window, pca_dim, resamples, episodes;
  std::optional<int> layer;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> gate, actuator, corpus_id;
  bool stdio = false;
  std::optional<int> tcp;
};

constexpr std::initializer_list<const char*> kPipelineKeys = {
    "corpus",   "out",     "probe_report", "steering",      "surface",         "layer",
    "q_lo",     "q_hi",    "window",       "rho_m",         "rho_a",           "robust_quantile",
    "gate",     "eta_c",   "eta_v",        "actuator",      "b_u",             "temp_low",
    "temp_high", "temp_base", "pca_dim",   "lambda",        "train_fraction",  "seed",
    "resamples", "corpus_id", "host"};

int run_analyze(const Flags& f, const Settings& s) {
  s.restrict(kPipelineKeys);
  const auto corpus = trace::read_corpus_file(require(s.maybe(f.corpus, "corpus"), "--corpus"));
  pipeline::AnalyzeOptions o;
  o.q_lo = s.get(f.q_lo, "q_lo", o.q_lo);
  o.q_hi = s.get(f.q_hi, "q_hi", o.q_hi);
  o.window.size = s.get(f.window, "window", o.window.size);
  o.resamples = s.get(f.resamples, "resamples", o.resamples);
  o.seed = s.get(f.seed, "seed", o.seed);
  log("analyzing " + std::to_string(corpus.size()) + " traces");
  emit(pipeline::analyze(corpus, o).dump(2) + "\n", s.get(f.out, "out", std::string()));
  return 0;
}

int run_probe(const Flags& f, const Settings& s) {
  s.restrict(kPipelineKeys);
  const auto corpus = trace::read_corpus_file(require(s.maybe(f.corpus, "corpus"), "--corpus"));
  probe::ProbeConfig cfg;
  cfg.pca_dim = s.get(f.pca_dim, "pca_dim", cfg.pca_dim);
  cfg.lambda = s.get(f.lambda, "lambda", cfg.lambda);
  cfg.train_fraction = s.get(f.train_fraction, "train_fraction", cfg.train_fraction);
  cfg.seed = s.get(f.seed, "seed", cfg.seed);
  probe::validate(cfg);
  const auto samples = probe::collect_samples(corpus);
  if (samples.dropped_steps) {
    log("dropped " + std::to_string(samples.dropped_steps) + " steps missing some layer");
  }
  const auto rep = probe::probe_layers(samples.hidden_by_layer, samples.confidence, cfg);
  if (rep.selected_layer) log("selected layer " + std::to_string(*rep.selected_layer));
  emit(pipeline::probe_report_json(rep, cfg, samples.dropped_steps).dump(2) + "\n",
       s.get(f.out, "out", std::string()));
  return 0;
}

int run_extract(const Flags& f, const Settings& s) {
  s.restrict(kPipelineKeys);
  const auto corpus = trace::read_corpus_file(require(s.maybe(f.corpus, "corpus"), "--corpus"));
  pipeline::ExtractOptions o;
  o.q_lo = s.get(f.q_lo, "q_lo", o.q_lo);
  o.q_hi = s.get(f.q_hi, "q_hi", o.q_hi);
  o.window.size = s.get(f.window, "window", o.window.size);
  o.distances.rho_moderate = s.get(f.rho_m, "rho_m", o.distances.rho_moderate);
  o.distances.rho_aggressive = s.get(f.rho_a, "rho_a", o.distances.rho_aggressive);
  o.distances.robust_quantile = s.maybe(f.robust_quantile, "robust_quantile");
  o.layer = s.maybe(f.layer, "layer");
  if (const auto pr = s.maybe(f.probe_report, "probe_report")) {
    const trace::LayerId from_probe =
        pipeline::selected_layer(json_util::parse(artifacts::read_file(*pr), *pr));
    if (o.layer && *o.layer != from_probe) {
      throw config_error("--layer disagrees with the probe report's selected layer");
    }
    o.layer = from_probe;
  }
  const auto a = pipeline::extract(corpus, o);
  log("steering vector at layer " + std::to_string(a.vector.layer) + ", d_prot " +
      std::to_string(a.vector.d_prot) + " from " + std::to_string(a.counts.overthink) +
      " overthink / " + std::to_string(a.counts.underthink) + " underthink steps");
  emit(artifacts::write_steering(a), require(s.maybe(f.out, "out"), "--out"));
  return 0;
}

surface::SurfaceOptions surface_options(const Flags& f, const Settings& s) {
  surface::SurfaceOptions o;
  if (auto g = s.maybe(f.gate, "gate")) o.shape = surface::parse_gate_shape(*g);
  if (auto a = s.maybe(f.actuator, "actuator")) o.actuator = surface::parse_actuator(*a);
  o.eta_c = s.maybe(f.eta_c, "eta_c");
  o.eta_v = s.maybe(f.eta_v, "eta_v");
  o.b_under_fraction = s.maybe(f.b_u, "b_u");
  o.temps.low = s.get(f.temp_low, "temp_low", o.temps.low);
  o.temps.high = s.get(f.temp_high, "temp_high", o.temps.high);
  o.temps.base = s.get(f.temp_base, "temp_base", o.temps.base);
  return o;
}

int run_fit(const Flags& f, const Settings& s) {
  s.restrict(kPipelineKeys);
  const std::string steering_path = require(s.maybe(f.steering, "steering"), "--steering");
  pipeline::FitOptions o;
  o.surface = surface_options(f, s);
  o.corpus_id = s.get(f.corpus_id, "corpus_id", std::string());
  o.seed = s.get(f.seed, "seed", o.seed);
  const auto a = pipeline::fit(artifacts::read_file(steering_path), o);
  const auto& d = a.diagnostics;
  if (d.moderate_fit_degenerate) log("warning: tau_c^H >= 1, moderate fit used one anchor");
  if (d.eta_c_floored || d.eta_v_floored) log("warning: gate width floored");
  if (d.b_over_below_moderate) log("warning: B_o is below B_m");
  if (d.nonmonotone_above_threshold) log("warning: surface decreases above tau_c^H");
  emit(artifacts::write_surface(a), require(s.maybe(f.out, "out"), "--out"));
  return 0;
}

void print_summaries(const protocol::Server& server) {
  for (const auto& x : server.summaries()) {
    std::cerr << Json{{"session", Json::parse(x.session)},
                      {"steps", x.steps},
                      {"tokens", x.tokens},
                      {"directives", x.directives},
                      {"completed", x.completed}}
                     .dump()
              << '\n';
  }
}

int run_control(const Flags& f, const Settings& s) {
  s.restrict(kPipelineKeys);
  const auto loaded = protocol::load_artifacts(require(s.maybe(f.surface, "surface"), "--surface"),
                                               require(s.maybe(f.steering, "steering"), "--steering"));
  auto artifacts = std::make_shared<const protocol::ControlArtifacts>(loaded);
  log("surface " + artifacts->surface_hash);
  auto server = std::make_shared<protocol::Server>(artifacts);
  if (f.stdio == f.tcp.has_value()) throw config_error("choose exactly one of --stdio or --tcp");
  if (f.stdio) {
    std::ios::sync_with_stdio(false);
    server->serve(std::cin, std::cout);
  } else {
    if (*f.tcp < 0 || *f.tcp > 65535) throw config_error("--tcp port out of range");
    protocol::TcpServer tcp(server, s.get(f.host, "host", std::string("127.0.0.1")),
                            static_cast<std::uint16_t>(*f.tcp));
    const auto port = tcp.start();
    std::signal(SIGINT, [](int) { g_stop = 1; });
    std::signal(SIGTERM, [](int) { g_stop = 1; });
    std::cerr << "rebalance: listening on port " << port << std::endl;
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(50));
    tcp.stop();
  }
  if (!g_quiet) print_summaries(*server);
  // Scripted stdio runs report protocol trouble through the exit status.
  return f.stdio && server->errors() > 0 ? exit_code(ErrorKind::Protocol) : 0;
}

int run_simulate(const Flags& f, const Settings& s) {
  lab::SimConfig cfg;
  if (!s.raw().is_null()) cfg = lab::sim_config_from_json(s.raw());
  if (f.episodes) cfg.episodes = *f.episodes;
  if (f.seed) cfg.seed = *f.seed;
  if (f.kappa) cfg.kappa = *f.kappa;
  cfg.validate();
  const auto out = pipeline::simulate(cfg, surface_options(f, Settings{}));
  const auto report = pipeline::simulate_report(cfg, out);
  if (f.log_path) {
    artifacts::write_file(*f.log_path, pipeline::episode_log_ndjson(out.baseline, out.controlled));
    log("wrote " + *f.log_path);
  }
  emit(report.dump(2) + "\n", f.out.value_or(""));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reasoning-dynamics control engine"};
  app.require_subcommand(1);
  app.add_flag("-q,--quiet", g_quiet, "Suppress log output on stderr");
  Flags f;

  auto common = [&](CLI::App* c) {
    c->add_option("--config", f.config, "JSON settings file; flags take precedence");
    c->add_option("--out", f.out, "Output file (stdout when omitted, where allowed)");
    c->add_option("--seed", f.seed, "Random seed");
  };
  auto stats_flags = [&](CLI::App* c) {
    c->add_option("--corpus", f.corpus, "Trace corpus (NDJSON)");
    c->add_option("--q-lo", f.q_lo, "Lower quantile level");
    c->add_option("--q-hi", f.q_hi, "Upper quantile level");
    c->add_option("--window", f.window, "Variance window size");
  };
  auto surface_flags = [&](CLI::App* c) {
    c->add_option("--gate", f.gate, "sigmoid | linear | hard_step | polynomial | relu");
    c->add_option("--eta-c", f.eta_c, "Confidence gate width");
    c->add_option("--eta-v", f.eta_v, "Variance gate width");
    c->add_option("--actuator", f.actuator, "hidden_additive | dynamic_temperature");
    c->add_option("--b-u", f.b_u, "Underthinking amplitude as a fraction of d_prot");
    c->add_option("--temp-low", f.temp_low, "Temperature on overthinking steps");
    c->add_option("--temp-high", f.temp_high, "Temperature on underthinking steps");
    c->add_option("--temp-base", f.temp_base, "Temperature otherwise");
  };

  auto* analyze = app.add_subcommand("analyze", "Confidence statistics report");
  common(analyze);
  stats_flags(analyze);
  analyze->add_option("--resamples", f.resamples, "Bootstrap resamples");

  auto* probe_cmd = app.add_subcommand("probe", "Select the steering layer by linear probing");
  common(probe_cmd);
  probe_cmd->add_option("--corpus", f.corpus, "Trace corpus with multi-layer hidden records");
  probe_cmd->add_option("--pca-dim", f.pca_dim, "PCA components");
  probe_cmd->add_option("--lambda", f.lambda, "Ridge penalty");
  probe_cmd->add_option("--train-fraction", f.train_fraction, "Train split fraction");

  auto* extract = app.add_subcommand("extract", "Build the steering artifact");
  common(extract);
  stats_flags(extract);
  extract->add_option("--probe-report", f.probe_report, "Probe report naming the layer");
  extract->add_option("--layer", f.layer, "Steering layer");
  extract->add_option("--rho-m", f.rho_m, "Moderate underthinking fraction of d_prot");
  extract->add_option("--rho-a", f.rho_a, "Aggressive underthinking fraction of d_prot");
  extract->add_option("--robust-quantile", f.robust_quantile,
                      "Quantile replacing the maximum overthink projection");

  auto* fit = app.add_subcommand("fit", "Fit the control surface");
  common(fit);
  surface_flags(fit);
  fit->add_option("--steering", f.steering, "Steering artifact");
  fit->add_option("--corpus-id", f.corpus_id, "Corpus identifier recorded as provenance");

  auto* control = app.add_subcommand("control", "Serve the control protocol");
  control->add_option("--config", f.config, "JSON settings file; flags take precedence");
  control->add_option("--surface", f.surface, "Surface artifact");
  control->add_option("--steering", f.steering, "Steering artifact");
  control->add_flag("--stdio", f.stdio, "Serve on stdin/stdout");
  control->add_option("--tcp", f.tcp, "Serve on this TCP port (0 picks one)");
  control->add_option("--host", f.host, "TCP bind address");

  auto* simulate = app.add_subcommand("simulate", "Closed-loop simulator");
  common(simulate);
  surface_flags(simulate);
  simulate->add_option("--episodes", f.episodes, "Episode count");
  simulate->add_option("--kappa", f.kappa, "Steering gain");
  simulate->add_option("--log", f.log_path, "Episode log (NDJSON)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    Settings s;
    s.load(f.config);
    if (analyze->parsed()) return run_analyze(f, s);
    if (probe_cmd->parsed()) return run_probe(f, s);
    if (extract->parsed()) return run_extract(f, s);
    if (fit->parsed()) return run_fit(f, s);
    if (control->parsed()) return run_control(f, s);
    if (simulate->parsed()) return run_simulate(f, s);
  } catch (const Error& e) {
    std::cerr << "rebalance: error[" << e.code() << "]: " << e.what() << '\n';
    return exit_code(e.kind());
  }
  return 2;
}
