#pragma once

// Scenario configuration, experiment orchestration and report files.
//
// A scenario is one JSON object. Every key is optional; unknown keys are
// rejected with a ConfigError naming the dotted path. Running a scenario
// yields an ExperimentReport whose body depends only on the configuration,
// so repeated runs produce byte-identical files apart from the header.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "flsec/adversary.hpp"
#include "flsec/attacks.hpp"
#include "flsec/fedcore.hpp"
#include "flsec/secagg.hpp"

namespace flsec::harness {

inline constexpr int kReportSchemaVersion = 1;

enum class ExperimentKind { SecAggRun, AttackDemo, FedTraining, AlphaSweep, CltCheck };
std::string to_string(ExperimentKind k);
ExperimentKind kind_from_string(const std::string& s);  // ConfigError

struct FedSpec {
  FedConfig fed;
  std::size_t examples_per_client = 50;
  std::size_t test_size = 500;
  std::vector<std::size_t> layers{64, 16, 10};
  double pixel_noise = 0.15;
};

struct SweepSpec {
  std::vector<std::uint32_t> client_counts{10, 100, 1000};
  std::vector<double> alphas{0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 0.8, 1.0};
  std::uint32_t seeds = 10;
  std::uint32_t local_evals = 10;
  double slack = 0.02;  // tolerated drop of global accuracy below baseline
  GlyphTaskConfig task;
};

struct CltSpec {
  std::vector<std::uint32_t> client_counts{10, 100, 1000};
  std::vector<double> alphas{0.1, 0.5};
  std::size_t dim = 100;
  std::uint32_t seeds = 30;
  double tolerance = 0.1;  // relative
};

struct AttackSpec {
  std::vector<adversary::AdversaryStrategy> strategies;  // defaults filled in by default_strategies()
  std::vector<std::string> reconstructions{"dlg", "masked_mitm_dlg", "mia", "gan", "lp"};
  std::uint32_t seeds = 10;
  double dlg_alpha = 0.05;
  bool calibrate = false;  // recompute dlg_alpha from dlg_grid first
  std::vector<double> dlg_grid{0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 0.8, 1.0};
  std::uint32_t dlg_t = 2000;
  GanSchedule gan;
  std::vector<double> lp_alphas{0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 0.8, 1.0};
};

// Honest-but-curious, sybil MITM on client 1, share compromise by the other
// clients and strategic dropping, all against the scenario's secagg config.
std::vector<adversary::AdversaryStrategy> default_strategies(const secagg::SecAggConfig& cfg);

struct ScenarioConfig {
  ExperimentKind kind = ExperimentKind::SecAggRun;
  // Base seed. It is copied into secagg.seed and fed.seed; batteries use
  // seed, seed + 1, ...
  std::uint64_t seed = 1;
  secagg::SecAggConfig secagg;
  FedSpec fed;
  SweepSpec sweep;
  CltSpec clt;
  AttackSpec attack;
  std::string output_dir = "out";

  void set_seed(std::uint64_t s);
  void validate() const;  // ConfigError
};

nlohmann::json to_json(const ScenarioConfig& c);
ScenarioConfig scenario_from_json(const nlohmann::json& j);
ScenarioConfig load_scenario(const std::filesystem::path& path);

using Cell = nlohmann::json;  // number, string or bool

struct ExperimentReport {
  int schema_version = kReportSchemaVersion;
  ExperimentKind kind = ExperimentKind::SecAggRun;
  nlohmann::json config;
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;
  nlohmann::json summary = nlohmann::json::object();
  std::vector<std::string> failures;
  std::map<std::string, std::string> artifacts;  // extra files, name -> contents

  bool passed() const { return failures.empty(); }
};

// Everything except the timestamp.
nlohmann::json body_json(const ExperimentReport& r);
std::string csv_body(const ExperimentReport& r);
std::string format_number(double v);  // %.17g, "inf", "-inf", "nan"

// report.json = {"header": {...}, "body": body_json}, rows.csv = two comment
// lines ("# flsec.<kind> v<schema>", "# generated_at <timestamp>") then the
// body, plus the artifacts. Each file is written to a temporary name and
// renamed into place.
void write_report(const ExperimentReport& r, const std::filesystem::path& dir, const std::string& timestamp);
std::string utc_timestamp();

ExperimentReport run_scenario(const ScenarioConfig& cfg);

ExperimentReport secagg_run(const ScenarioConfig& cfg);
ExperimentReport fed_training(const ScenarioConfig& cfg);
ExperimentReport alpha_sweep(const ScenarioConfig& cfg);
ExperimentReport clt_check(const ScenarioConfig& cfg);
ExperimentReport attack_battery(const ScenarioConfig& cfg);

struct CltRow {
  std::uint32_t n = 0;
  double alpha = 0.0;
  double expected = 0.0;  // alpha / sqrt(3n)
  double empirical = 0.0;
  double rel_error = 0.0;
};
// Standard deviation of the coordinates of the mean of n masks of width
// alpha, pooled over dim coordinates and `seeds` draws.
CltRow clt_row(std::uint32_t n, double alpha, std::size_t dim, std::uint32_t seeds, std::uint64_t base_seed);

}  // namespace flsec::harness
