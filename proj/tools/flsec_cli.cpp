// flsec: run scenarios, sweeps, attack batteries and CLT checks; replay
// secure-aggregation transcripts.
//
// Exit codes: 0 success, 1 runtime error, 2 configuration or usage error,
// 3 a check inside the run failed.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "flsec/errors.hpp"
#include "flsec/harness.hpp"
#include "flsec/secagg.hpp"

using namespace flsec;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;
constexpr int kExitCheck = 3;
constexpr const char* kOutputEnv = "FLSEC_OUTPUT_DIR";

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

harness::ScenarioConfig build_config(const Options& o, std::optional<harness::ExperimentKind> forced) {
  json j = json::object();
  if (!o.config.empty()) {
    std::ifstream is(o.config);
    if (!is) throw ConfigError("config", "cannot open " + o.config);
    try {
      j = json::parse(is);
    } catch (const json::parse_error& e) {
      throw ConfigError("config", std::string("not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config", "top level must be an object");
  }
  if (forced) {
    const std::string want = harness::to_string(*forced);
    if (j.contains("kind") && j["kind"] != want) {
      throw ConfigError("kind", "config says " + j["kind"].dump() + " but the subcommand runs " + want);
    }
    j["kind"] = want;
  }
  if (o.seed) j["seed"] = *o.seed;
  auto cfg = harness::scenario_from_json(j);
  if (!o.out.empty()) {
    cfg.output_dir = o.out;
  } else if (const char* env = std::getenv(kOutputEnv); env && *env) {
    cfg.output_dir = env;
  }
  return cfg;
}

void print_table(const harness::ExperimentReport& r, std::ostream& os) {
  std::vector<std::size_t> width(r.columns.size());
  std::vector<std::vector<std::string>> cells;
  for (std::size_t i = 0; i < r.columns.size(); ++i) width[i] = r.columns[i].size();
  for (const auto& row : r.rows) {
    std::vector<std::string> line;
    for (std::size_t i = 0; i < row.size(); ++i) {
      std::string s;
      if (row[i].is_number_float()) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6g", row[i].get<double>());
        s = buf;
      } else if (row[i].is_string()) {
        s = row[i].get<std::string>();
      } else {
        s = row[i].dump();
      }
      width[i] = std::max(width[i], s.size());
      line.push_back(std::move(s));
    }
    cells.push_back(std::move(line));
  }
  auto emit = [&](const std::vector<std::string>& line) {
    for (std::size_t i = 0; i < line.size(); ++i) {
      os << (i ? "  " : "") << line[i] << std::string(width[i] - line[i].size(), ' ');
    }
    os << '\n';
  };
  emit(r.columns);
  for (const auto& line : cells) emit(line);
}

int execute(const Options& o, std::optional<harness::ExperimentKind> forced, std::size_t table_limit) {
  const auto cfg = build_config(o, forced);
  const auto report = harness::run_scenario(cfg);
  harness::write_report(report, cfg.output_dir, harness::utc_timestamp());
  if (report.rows.size() <= table_limit) print_table(report, std::cout);
  std::cout << "summary: " << report.summary.dump() << '\n';
  std::cout << "report written to " << cfg.output_dir << '\n';
  if (!report.passed()) {
    for (const auto& f : report.failures) std::cerr << "FAILED: " << f << '\n';
    return kExitCheck;
  }
  std::cout << "all checks passed\n";
  return kExitOk;
}

int replay_transcript(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("transcript", "cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  secagg::RoundTranscript t;
  try {
    t = secagg::transcript_from_jsonl(ss.str());
  } catch (const json::exception& e) {
    throw ConfigError("transcript", std::string("malformed: ") + e.what());
  } catch (const ParameterError& e) {
    throw ConfigError("transcript", std::string("malformed: ") + e.what());
  }
  const auto check = secagg::replay(t);
  std::cout << "identical: " << (check.identical ? "yes" : "no") << '\n';
  std::cout << "aggregate matches: " << (check.aggregate_matches ? "yes" : "no") << '\n';
  if (!check.identical) std::cout << "first difference at line " << check.first_difference << '\n';
  return check.identical && check.aggregate_matches ? kExitOk : kExitCheck;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Secure aggregation and masking experiments"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;
  std::string transcript;
  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* c = sub->add_option("-c,--config", o.config, "Scenario JSON file");
    if (config_required) c->required();
    sub->add_option("-s,--seed", seed, "Override the base seed");
    sub->add_option("-o,--out", o.out, std::string("Output directory (else $") + kOutputEnv + " or the config)");
  };
  auto* run = app.add_subcommand("run", "Run the scenario described by a config file");
  add_common(run, true);
  auto* sweep = app.add_subcommand("sweep", "Masking sweep over client counts and alphas");
  add_common(sweep, false);
  auto* attack = app.add_subcommand("attack", "Protocol and reconstruction attack battery");
  add_common(attack, false);
  auto* clt = app.add_subcommand("clt-check", "Check the spread of averaged masks");
  add_common(clt, false);
  auto* replay = app.add_subcommand("replay", "Re-execute a secure aggregation transcript");
  replay->add_option("transcript", transcript, "transcript.jsonl written by a secagg_run")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  for (auto* sub : {run, sweep, attack, clt}) {
    if (sub->parsed() && sub->count("--seed")) o.seed = seed;
  }
  try {
    if (replay->parsed()) return replay_transcript(transcript);
    if (run->parsed()) return execute(o, std::nullopt, 50);
    if (sweep->parsed()) return execute(o, harness::ExperimentKind::AlphaSweep, 0);
    if (attack->parsed()) return execute(o, harness::ExperimentKind::AttackDemo, 200);
    if (clt->parsed()) return execute(o, harness::ExperimentKind::CltCheck, 200);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}
