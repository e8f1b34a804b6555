#include "doctest.h"

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <string>

#include "rebalance/artifacts.hpp"
#include "rebalance/json_util.hpp"

using namespace rebalance;
namespace fs = std::filesystem;

namespace {

const std::string kBin = REBALANCE_BIN;
const std::string kGolden = REBALANCE_GOLDEN_DIR;
const std::string kConfigs = REBALANCE_CONFIG_DIR;

struct Run {
  int status = -1;
  std::string out;
};

// Runs the binary with stderr discarded and returns its exit status and stdout.
Run run(const std::string& args, const std::string& stdin_path = "") {
  std::string cmd = kBin + " " + args + " 2>/dev/null";
  if (!stdin_path.empty()) cmd += " < " + stdin_path;
  Run r;
  FILE* p = ::popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int st = ::pclose(p);
  r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("rebalance_cli_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("analyze report") {
  const auto r = run("-q analyze --corpus " + kGolden + "/corpus.ndjson --resamples 200");
  REQUIRE(r.status == 0);
  const auto j = Json::parse(r.out);
  CHECK(j["traces"] == 12);
  CHECK(j["markov"].contains("OR"));
  CHECK(j["markov"].contains("SameRate"));
  CHECK(j["correlation"]["words_vs_min_confidence"].contains("rho"));
  CHECK(run("-q analyze --corpus " + kGolden + "/corpus.ndjson --resamples 200").out == r.out);
}

TEST_CASE("artifact pipeline reproduces the committed fixtures") {
  TempDir tmp;
  const std::string corpus = kGolden + "/corpus.ndjson";
  REQUIRE(run("-q probe --corpus " + corpus + " --out " + (tmp / "probe.json")).status == 0);
  CHECK(artifacts::read_file(tmp / "probe.json") == artifacts::read_file(kGolden + "/probe.json"));
  CHECK(Json::parse(artifacts::read_file(tmp / "probe.json"))["selected_layer"] == 5);

  REQUIRE(run("-q extract --corpus " + corpus + " --probe-report " + (tmp / "probe.json") +
              " --out " + (tmp / "steering.json"))
              .status == 0);
  CHECK(artifacts::read_file(tmp / "steering.json") ==
        artifacts::read_file(kGolden + "/steering.json"));

  REQUIRE(run("-q fit --steering " + (tmp / "steering.json") + " --corpus-id golden --out " +
              (tmp / "surface.json"))
              .status == 0);
  CHECK(artifacts::read_file(tmp / "surface.json") ==
        artifacts::read_file(kGolden + "/surface.json"));

  REQUIRE(run("-q fit --steering " + (tmp / "steering.json") + " --gate hard_step --b-u 0.2 --out " +
              (tmp / "hard.json"))
              .status == 0);
  const auto hard = artifacts::read_surface(artifacts::read_file(tmp / "hard.json"));
  CHECK(hard.surface.gate.shape == surface::GateShape::HardStep);
}

TEST_CASE("control over stdio") {
  const auto ok = run("-q control --stdio --surface " + kGolden + "/surface.json --steering " +
                          kGolden + "/steering.json",
                      kGolden + "/temperature.in.ndjson");
  CHECK(ok.status == 0);
  CHECK(ok.out == artifacts::read_file(kGolden + "/temperature.out.ndjson"));

  const auto bad = run("-q control --stdio --surface " + kGolden + "/surface.json --steering " +
                           kGolden + "/steering.json",
                       kGolden + "/errors.in.ndjson");
  CHECK(bad.status == 4);
  CHECK(bad.out == artifacts::read_file(kGolden + "/errors.out.ndjson"));
}

TEST_CASE("simulate is reproducible") {
  const std::string args = "-q simulate --config " + kConfigs + "/sim_reference.json --episodes 300";
  const auto a = run(args);
  REQUIRE(a.status == 0);
  CHECK(run(args).out == a.out);
  const auto j = Json::parse(a.out);
  CHECK(j["config"]["episodes"] == 300);
  CHECK(j.contains("step_reduction"));
  CHECK(j["baseline"].contains("accuracy"));
  CHECK(run(args + " --seed 99").out != a.out);
}

TEST_CASE("exit codes") {
  TempDir tmp;
  CHECK(run("").status == 2);
  CHECK(run("analyze").status == 2);
  CHECK(run("analyze --bogus").status == 2);
  CHECK(run("control --surface " + kGolden + "/surface.json --steering " + kGolden +
            "/steering.json")
            .status == 2);

  artifacts::write_file(tmp / "cfg.json", R"({"corpsu":"x"})");
  CHECK(run("analyze --config " + (tmp / "cfg.json")).status == 2);
  artifacts::write_file(tmp / "cfg.json", "[1]");
  CHECK(run("analyze --config " + (tmp / "cfg.json")).status == 2);

  CHECK(run("analyze --corpus /nonexistent/corpus.ndjson").status == 3);
  artifacts::write_file(tmp / "bad.ndjson", "{\"kind\":\"token\"}\n");
  CHECK(run("analyze --corpus " + (tmp / "bad.ndjson")).status == 3);

  auto steering = Json::parse(artifacts::read_file(kGolden + "/steering.json"));
  steering["t"] = steering["t"].get<double>() * 2 + 1;
  artifacts::write_file(tmp / "steering.json", steering.dump() + "\n");
  CHECK(run("control --stdio --surface " + kGolden + "/surface.json --steering " +
            (tmp / "steering.json"),
            "/dev/null")
            .status == 3);
}

TEST_CASE("config file with flag override") {
  TempDir tmp;
  artifacts::write_file(tmp / "cfg.json", Json{{"corpus", kGolden + "/corpus.ndjson"},
                                                {"resamples", 50},
                                                {"window", 3}}
                                              .dump());
  const auto from_file = Json::parse(run("-q analyze --config " + (tmp / "cfg.json")).out);
  CHECK(from_file["window"] == 3);
  const auto overridden =
      Json::parse(run("-q analyze --config " + (tmp / "cfg.json") + " --window 2").out);
  CHECK(overridden["window"] == 2);
}
