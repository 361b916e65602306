#include "flsec/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "flsec/datasets.hpp"
#include "flsec/errors.hpp"
#include "flsec/parallel.hpp"

namespace flsec::harness {

using nlohmann::json;

namespace {

const std::vector<std::pair<ExperimentKind, std::string>> kKindNames = {
    {ExperimentKind::SecAggRun, "secagg_run"},     {ExperimentKind::AttackDemo, "attack_demo"},
    {ExperimentKind::FedTraining, "fed_training"}, {ExperimentKind::AlphaSweep, "alpha_sweep"},
    {ExperimentKind::CltCheck, "clt_check"}};

// Checks the keys of an object and reads optional typed members.
class Section {
 public:
  Section(const json& j, std::string path, std::vector<std::string> keys) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(path_, "must be an object");
    for (const auto& [k, v] : j.items()) {
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw ConfigError(field(k), "unknown key");
    }
  }

  template <typename T>
  void get(const std::string& key, T& out) const {
    if (!j_.contains(key) || j_.at(key).is_null()) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(field(key), "wrong type");
    }
  }

  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }
  const json& at(const std::string& key) const { return j_.at(key); }
  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const json& j_;
  std::string path_;
};

// Re-raises a sub-parser's ConfigError under a prefix.
template <typename Fn>
auto nested(const std::string& prefix, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    const std::string tail = what.substr(std::min(what.size(), e.field().size() + 2));
    const bool prefixed = e.field().rfind(prefix + ".", 0) == 0;
    throw ConfigError(prefixed ? e.field() : prefix + "." + e.field(), tail);
  } catch (const ParameterError& e) {
    throw ConfigError(prefix, e.what());
  }
}

void require_unit_interval(const std::vector<double>& v, const std::string& field) {
  if (v.empty()) throw ConfigError(field, "must not be empty");
  for (double a : v) {
    if (!(a >= 0.0 && a <= 1.0)) throw ConfigError(field, "values must lie in [0, 1]");
  }
}

void require_counts(const std::vector<std::uint32_t>& v, const std::string& field, std::uint32_t min) {
  if (v.empty()) throw ConfigError(field, "must not be empty");
  for (auto n : v) {
    if (n < min) throw ConfigError(field, "values must be at least " + std::to_string(min));
  }
}

json glyph_task_json(const GlyphTaskConfig& t) {
  return {{"layers", t.layers},       {"train_size", t.train_size}, {"test_size", t.test_size},
          {"pixel_noise", t.pixel_noise}, {"max_shift", t.max_shift}, {"eta", t.eta},
          {"epochs", t.epochs},       {"minibatch", t.minibatch},   {"seed", t.seed}};
}

GlyphTaskConfig glyph_task_from_json(const json& j, const std::string& path) {
  Section s(j, path, {"layers", "train_size", "test_size", "pixel_noise", "max_shift", "eta", "epochs", "minibatch", "seed"});
  GlyphTaskConfig t;
  s.get("layers", t.layers);
  s.get("train_size", t.train_size);
  s.get("test_size", t.test_size);
  s.get("pixel_noise", t.pixel_noise);
  s.get("max_shift", t.max_shift);
  s.get("eta", t.eta);
  s.get("epochs", t.epochs);
  s.get("minibatch", t.minibatch);
  s.get("seed", t.seed);
  return t;
}

json gan_json(const GanSchedule& g) {
  return {{"epochs", g.epochs}, {"steps_per_epoch", g.steps_per_epoch}, {"pretrain_epochs", g.pretrain_epochs},
          {"alpha", g.alpha},   {"batch", g.batch},                     {"eta_g", g.eta_g},
          {"eta_d", g.eta_d},   {"noise_dim", g.noise_dim},             {"hidden", g.hidden}};
}

GanSchedule gan_from_json(const json& j, const std::string& path) {
  Section s(j, path, {"epochs", "steps_per_epoch", "pretrain_epochs", "alpha", "batch", "eta_g", "eta_d", "noise_dim", "hidden"});
  GanSchedule g;
  s.get("epochs", g.epochs);
  s.get("steps_per_epoch", g.steps_per_epoch);
  s.get("pretrain_epochs", g.pretrain_epochs);
  s.get("alpha", g.alpha);
  s.get("batch", g.batch);
  s.get("eta_g", g.eta_g);
  s.get("eta_d", g.eta_d);
  s.get("noise_dim", g.noise_dim);
  s.get("hidden", g.hidden);
  return g;
}

json secagg_json(const secagg::SecAggConfig& c) {
  json dropouts = json::array();
  for (const auto& d : c.dropouts) dropouts.push_back({{"client", d.client}, {"after_round", d.after_round}});
  json inputs = json::array();
  for (const auto& v : c.inputs) inputs.push_back(std::vector<double>(v.begin(), v.end()));
  return {{"n", c.n},
          {"k", c.k},
          {"dim", c.dim},
          {"group", c.group},
          {"share_modulus", c.share_modulus},
          {"codec", {{"frac_bits", c.codec.frac_bits}, {"max_summands", c.codec.max_summands}, {"clip", c.codec.clip}}},
          {"dropouts", dropouts},
          {"ids", c.ids},
          {"inputs", inputs}};
}

secagg::SecAggConfig secagg_from_json(const json& j) {
  Section s(j, "secagg", {"n", "k", "dim", "group", "share_modulus", "codec", "dropouts", "ids", "inputs"});
  secagg::SecAggConfig c;
  s.get("n", c.n);
  s.get("k", c.k);
  s.get("dim", c.dim);
  s.get("group", c.group);
  s.get("share_modulus", c.share_modulus);
  c.codec.max_summands = std::max<std::uint64_t>(c.codec.max_summands, c.n);
  if (s.has("codec")) {
    Section cs(s.at("codec"), "secagg.codec", {"frac_bits", "max_summands", "clip"});
    cs.get("frac_bits", c.codec.frac_bits);
    cs.get("max_summands", c.codec.max_summands);
    cs.get("clip", c.codec.clip);
  }
  if (s.has("dropouts")) {
    const json& arr = s.at("dropouts");
    if (!arr.is_array()) throw ConfigError("secagg.dropouts", "must be an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      Section ds(arr[i], "secagg.dropouts[" + std::to_string(i) + "]", {"client", "after_round"});
      if (!ds.has("client")) throw ConfigError(ds.field("client"), "required");
      secagg::DropEvent d;
      ds.get("client", d.client);
      ds.get("after_round", d.after_round);
      c.dropouts.push_back(d);
    }
  }
  s.get("ids", c.ids);
  if (s.has("inputs")) {
    std::vector<std::vector<double>> raw;
    s.get("inputs", raw);
    for (auto& v : raw) c.inputs.emplace_back(std::move(v));
  }
  return c;
}

adversary::AdversaryStrategy strategy_from_json(const json& j, const std::string& path) {
  Section s(j, path, {"kind", "honest_ids", "controlled_ids", "population", "controlled_count", "selected",
                      "retry_limit", "trusted_third_party"});
  adversary::AdversaryStrategy a;
  if (!s.has("kind")) throw ConfigError(s.field("kind"), "required");
  std::string kind;
  s.get("kind", kind);
  try {
    a.kind = adversary::strategy_from_string(kind);
  } catch (const Error&) {
    throw ConfigError(s.field("kind"), "unknown strategy '" + kind + "'");
  }
  s.get("honest_ids", a.honest_ids);
  s.get("controlled_ids", a.controlled_ids);
  s.get("population", a.population);
  s.get("controlled_count", a.controlled_count);
  s.get("selected", a.selected);
  s.get("retry_limit", a.retry_limit);
  s.get("trusted_third_party", a.trusted_third_party);
  return a;
}

const std::vector<std::string> kReconstructions = {"dlg", "masked_mitm_dlg", "mia", "gan", "lp"};

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::string short_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string csv_cell(const Cell& c) {
  if (c.is_number_float()) return format_number(c.get<double>());
  if (c.is_number()) return c.dump();
  if (c.is_boolean()) return c.get<bool>() ? "true" : "false";
  if (c.is_null()) return "";
  std::string s = c.get<std::string>();
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

void write_atomic(const std::filesystem::path& path, const std::string& contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + tmp.string());
    os << contents;
    if (!os.flush()) throw Error("cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

ExperimentReport make_report(const ScenarioConfig& cfg, std::vector<std::string> columns) {
  ExperimentReport r;
  r.kind = cfg.kind;
  r.config = to_json(cfg);
  r.columns = std::move(columns);
  return r;
}

}  // namespace

std::string to_string(ExperimentKind k) {
  for (const auto& [kind, name] : kKindNames) {
    if (kind == k) return name;
  }
  return "unknown";
}

ExperimentKind kind_from_string(const std::string& s) {
  for (const auto& [kind, name] : kKindNames) {
    if (name == s) return kind;
  }
  throw ConfigError("kind", "unknown experiment kind '" + s + "'");
}

std::vector<adversary::AdversaryStrategy> default_strategies(const secagg::SecAggConfig& cfg) {
  const auto ids = cfg.client_ids();
  using adversary::StrategyKind;
  adversary::AdversaryStrategy hbc, mitm, compromise, drop;
  hbc.kind = StrategyKind::HonestButCurious;
  mitm.kind = StrategyKind::SybilMitm;
  mitm.honest_ids = {ids.front()};
  compromise.kind = StrategyKind::ShareCompromise;
  compromise.controlled_ids.assign(ids.begin() + 1, ids.begin() + std::min<std::size_t>(ids.size(), 1 + cfg.k));
  drop.kind = StrategyKind::StrategicDrop;
  return {hbc, mitm, compromise, drop};
}

// ---------------------------------------------------------------------------
// Configuration

void ScenarioConfig::set_seed(std::uint64_t s) {
  seed = s;
  secagg.seed = s;
  fed.fed.seed = s;
}

void ScenarioConfig::validate() const {
  nested("secagg", [&] {
    secagg.validate();
    return 0;
  });
  nested("fed", [&] {
    fed.fed.validate();
    return 0;
  });
  if (fed.examples_per_client < 1) throw ConfigError("fed.examples_per_client", "must be at least 1");
  if (fed.test_size < 1) throw ConfigError("fed.test_size", "must be at least 1");
  if (fed.layers.size() < 2 || fed.layers.front() != data::kGlyphPixels || fed.layers.back() != data::kGlyphClasses) {
    throw ConfigError("fed.layers", "must map 64 pixels to 10 classes");
  }
  require_counts(sweep.client_counts, "sweep.client_counts", 1);
  require_unit_interval(sweep.alphas, "sweep.alphas");
  if (sweep.seeds < 1) throw ConfigError("sweep.seeds", "must be at least 1");
  if (!(sweep.slack >= 0.0)) throw ConfigError("sweep.slack", "must be non-negative");
  if (sweep.task.layers.size() < 2 || sweep.task.layers.front() != data::kGlyphPixels ||
      sweep.task.layers.back() != data::kGlyphClasses) {
    throw ConfigError("sweep.task.layers", "must map 64 pixels to 10 classes");
  }
  if (sweep.task.train_size < 1 || sweep.task.test_size < 1) throw ConfigError("sweep.task", "empty dataset");
  if (sweep.task.minibatch < 1) throw ConfigError("sweep.task.minibatch", "must be at least 1");
  require_counts(clt.client_counts, "clt.client_counts", 1);
  require_unit_interval(clt.alphas, "clt.alphas");
  for (double a : clt.alphas) {
    if (a == 0.0) throw ConfigError("clt.alphas", "alpha 0 has no spread to check");
  }
  if (clt.dim < 2) throw ConfigError("clt.dim", "must be at least 2");
  if (clt.seeds < 1) throw ConfigError("clt.seeds", "must be at least 1");
  if (!(clt.tolerance > 0.0)) throw ConfigError("clt.tolerance", "must be positive");
  if (attack.seeds < 1) throw ConfigError("attack.seeds", "must be at least 1");
  for (const auto& r : attack.reconstructions) {
    if (std::find(kReconstructions.begin(), kReconstructions.end(), r) == kReconstructions.end()) {
      throw ConfigError("attack.reconstructions", "unknown attack '" + r + "'");
    }
  }
  if (!(attack.dlg_alpha > 0.0 && attack.dlg_alpha <= 1.0)) throw ConfigError("attack.dlg_alpha", "must lie in (0, 1]");
  require_unit_interval(attack.dlg_grid, "attack.dlg_grid");
  if (attack.dlg_t < 1) throw ConfigError("attack.dlg_t", "must be at least 1");
  require_unit_interval(attack.lp_alphas, "attack.lp_alphas");
  if (attack.gan.epochs < 1 || attack.gan.steps_per_epoch < 1 || attack.gan.batch < 1) {
    throw ConfigError("attack.gan", "epochs, steps_per_epoch and batch must be positive");
  }
  if (!(attack.gan.alpha >= 0.0 && attack.gan.alpha <= 1.0)) throw ConfigError("attack.gan.alpha", "must lie in [0, 1]");
  if (output_dir.empty()) throw ConfigError("output_dir", "must not be empty");
}

json to_json(const ScenarioConfig& c) {
  json fed = to_json(c.fed.fed);
  fed["examples_per_client"] = c.fed.examples_per_client;
  fed["test_size"] = c.fed.test_size;
  fed["layers"] = c.fed.layers;
  fed["pixel_noise"] = c.fed.pixel_noise;
  json strategies = json::array();
  for (const auto& s : c.attack.strategies) strategies.push_back(adversary::to_json(s));
  return {{"kind", to_string(c.kind)},
          {"seed", c.seed},
          {"output_dir", c.output_dir},
          {"secagg", secagg_json(c.secagg)},
          {"fed", fed},
          {"sweep",
           {{"client_counts", c.sweep.client_counts},
            {"alphas", c.sweep.alphas},
            {"seeds", c.sweep.seeds},
            {"local_evals", c.sweep.local_evals},
            {"slack", c.sweep.slack},
            {"task", glyph_task_json(c.sweep.task)}}},
          {"clt",
           {{"client_counts", c.clt.client_counts},
            {"alphas", c.clt.alphas},
            {"dim", c.clt.dim},
            {"seeds", c.clt.seeds},
            {"tolerance", c.clt.tolerance}}},
          {"attack",
           {{"strategies", strategies},
            {"reconstructions", c.attack.reconstructions},
            {"seeds", c.attack.seeds},
            {"dlg_alpha", c.attack.dlg_alpha},
            {"calibrate", c.attack.calibrate},
            {"dlg_grid", c.attack.dlg_grid},
            {"dlg_t", c.attack.dlg_t},
            {"gan", gan_json(c.attack.gan)},
            {"lp_alphas", c.attack.lp_alphas}}}};
}

ScenarioConfig scenario_from_json(const json& j) {
  Section top(j, "", {"kind", "seed", "output_dir", "secagg", "fed", "sweep", "clt", "attack"});
  ScenarioConfig c;
  std::string kind = to_string(c.kind);
  top.get("kind", kind);
  c.kind = kind_from_string(kind);
  top.get("seed", c.seed);
  top.get("output_dir", c.output_dir);

  if (top.has("secagg")) {
    c.secagg = secagg_from_json(top.at("secagg"));
  }
  if (top.has("fed")) {
    json fj = top.at("fed");
    if (!fj.is_object()) throw ConfigError("fed", "must be an object");
    json extra = json::object();
    for (const char* key : {"examples_per_client", "test_size", "layers", "pixel_noise"}) {
      if (fj.contains(key)) {
        extra[key] = fj.at(key);
        fj.erase(key);
      }
    }
    fj.erase("seed");
    c.fed.fed = nested("fed", [&] { return fed_config_from_json(fj); });
    Section s(extra, "fed", {"examples_per_client", "test_size", "layers", "pixel_noise"});
    s.get("examples_per_client", c.fed.examples_per_client);
    s.get("test_size", c.fed.test_size);
    s.get("layers", c.fed.layers);
    s.get("pixel_noise", c.fed.pixel_noise);
  }
  if (top.has("sweep")) {
    Section s(top.at("sweep"), "sweep", {"client_counts", "alphas", "seeds", "local_evals", "slack", "task"});
    s.get("client_counts", c.sweep.client_counts);
    s.get("alphas", c.sweep.alphas);
    s.get("seeds", c.sweep.seeds);
    s.get("local_evals", c.sweep.local_evals);
    s.get("slack", c.sweep.slack);
    if (s.has("task")) c.sweep.task = glyph_task_from_json(s.at("task"), "sweep.task");
  }
  if (top.has("clt")) {
    Section s(top.at("clt"), "clt", {"client_counts", "alphas", "dim", "seeds", "tolerance"});
    s.get("client_counts", c.clt.client_counts);
    s.get("alphas", c.clt.alphas);
    s.get("dim", c.clt.dim);
    s.get("seeds", c.clt.seeds);
    s.get("tolerance", c.clt.tolerance);
  }
  bool strategies_given = false;
  if (top.has("attack")) {
    Section s(top.at("attack"), "attack",
              {"strategies", "reconstructions", "seeds", "dlg_alpha", "calibrate", "dlg_grid", "dlg_t", "gan", "lp_alphas"});
    if (s.has("strategies")) {
      const json& arr = s.at("strategies");
      if (!arr.is_array()) throw ConfigError("attack.strategies", "must be an array");
      for (std::size_t i = 0; i < arr.size(); ++i) {
        const std::string path = "attack.strategies[" + std::to_string(i) + "]";
        c.attack.strategies.push_back(strategy_from_json(arr[i], path));
      }
      strategies_given = true;
    }
    s.get("reconstructions", c.attack.reconstructions);
    s.get("seeds", c.attack.seeds);
    s.get("dlg_alpha", c.attack.dlg_alpha);
    s.get("calibrate", c.attack.calibrate);
    s.get("dlg_grid", c.attack.dlg_grid);
    s.get("dlg_t", c.attack.dlg_t);
    if (s.has("gan")) c.attack.gan = gan_from_json(s.at("gan"), "attack.gan");
    s.get("lp_alphas", c.attack.lp_alphas);
  }
  c.set_seed(c.seed);
  c.validate();
  if (!strategies_given) c.attack.strategies = default_strategies(c.secagg);
  return c;
}

ScenarioConfig load_scenario(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config", "cannot open " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("config", std::string("not valid JSON: ") + e.what());
  }
  return scenario_from_json(j);
}

// ---------------------------------------------------------------------------
// Reports

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json body_json(const ExperimentReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows) {
    json o = json::object();
    for (std::size_t i = 0; i < r.columns.size() && i < row.size(); ++i) {
      const Cell& c = row[i];
      if (c.is_number_float() && !std::isfinite(c.get<double>())) {
        o[r.columns[i]] = format_number(c.get<double>());
      } else {
        o[r.columns[i]] = c;
      }
    }
    rows.push_back(o);
  }
  return {{"schema_version", r.schema_version},
          {"kind", to_string(r.kind)},
          {"config", r.config},
          {"columns", r.columns},
          {"rows", rows},
          {"summary", r.summary},
          {"passed", r.passed()},
          {"failures", r.failures}};
}

std::string csv_body(const ExperimentReport& r) {
  std::string out;
  for (std::size_t i = 0; i < r.columns.size(); ++i) out += (i ? "," : "") + r.columns[i];
  out += '\n';
  for (const auto& row : r.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + csv_cell(row[i]);
    out += '\n';
  }
  return out;
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_report(const ExperimentReport& r, const std::filesystem::path& dir, const std::string& timestamp) {
  std::filesystem::create_directories(dir);
  const json doc = {{"header", {{"generated_at", timestamp}, {"tool", "flsec"}}}, {"body", body_json(r)}};
  write_atomic(dir / "report.json", doc.dump(2) + "\n");
  std::string csv = "# flsec." + to_string(r.kind) + " v" + std::to_string(r.schema_version) + "\n";
  csv += "# generated_at " + timestamp + "\n";
  write_atomic(dir / "rows.csv", csv + csv_body(r));
  for (const auto& [name, contents] : r.artifacts) write_atomic(dir / name, contents);
}

// ---------------------------------------------------------------------------
// Experiments

ExperimentReport run_scenario(const ScenarioConfig& cfg) {
  cfg.validate();
  switch (cfg.kind) {
    case ExperimentKind::SecAggRun: return secagg_run(cfg);
    case ExperimentKind::AttackDemo: return attack_battery(cfg);
    case ExperimentKind::FedTraining: return fed_training(cfg);
    case ExperimentKind::AlphaSweep: return alpha_sweep(cfg);
    case ExperimentKind::CltCheck: return clt_check(cfg);
  }
  throw ConfigError("kind", "unhandled experiment kind");
}

ExperimentReport secagg_run(const ScenarioConfig& cfg) {
  auto r = make_report(cfg, {"coordinate", "aggregate", "plain_sum", "aggregate_field", "plain_sum_field"});
  const auto t = secagg::run_secagg(cfg.secagg);
  r.artifacts["transcript.jsonl"] = secagg::to_jsonl(t);
  r.summary["aborted"] = t.aborted;
  r.summary["abort_reason"] = t.abort_reason;
  r.summary["contributors"] = t.contributors;
  if (t.aborted || !t.aggregate_field) {
    r.failures.push_back("protocol aborted: " + t.abort_reason);
    return r;
  }
  const auto ids = cfg.secagg.client_ids();
  const auto inputs = cfg.secagg.client_inputs();
  FieldVector plain = field_zero(cfg.secagg.dim, cfg.secagg.codec.modulus, cfg.secagg.codec.frac_bits);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (std::find(t.contributors.begin(), t.contributors.end(), ids[i]) == t.contributors.end()) continue;
    field_add_inplace(plain, encode_fixed(clip_values(inputs[i], cfg.secagg.codec.clip), cfg.secagg.codec));
  }
  const ParamVector plain_real = decode_fixed(plain);
  for (std::size_t d = 0; d < cfg.secagg.dim; ++d) {
    r.rows.push_back({d, (*t.aggregate)[d], plain_real[d], std::to_string(t.aggregate_field->residues[d]),
                      std::to_string(plain.residues[d])});
  }
  const bool match = t.aggregate_field->residues == plain.residues;
  r.summary["field_match"] = match;
  if (!match) r.failures.push_back("aggregate differs from the plain sum of contributor inputs");
  return r;
}

ExperimentReport fed_training(const ScenarioConfig& cfg) {
  auto r = make_report(cfg, {"round", "n", "alpha", "mean_local_loss", "global_loss", "mean_local_accuracy",
                             "global_accuracy"});
  const FedSpec& f = cfg.fed;
  const Rng master(cfg.seed);
  Rng model_rng = master.split(1), data_rng = master.split(2), test_rng = master.split(3);
  const TinyModel initial = TinyModel::initialized(f.layers, Activation::Tanh, Activation::Identity, model_rng);
  const Batch all = data::glyph_batch(f.examples_per_client * f.fed.n, f.pixel_noise, 1, data_rng);
  const auto clients = data::partition(all, f.fed.n);
  const Batch test = data::glyph_batch(f.test_size, f.pixel_noise, 1, test_rng);
  const auto result = run_fedavg(initial, clients, f.fed, test);
  for (const auto& m : result.rounds) {
    r.rows.push_back({m.round, m.n, m.alpha, m.mean_local_loss, m.global_loss, m.mean_local_accuracy,
                      m.global_accuracy});
  }
  if (!result.rounds.empty()) {
    r.summary["final_global_accuracy"] = result.rounds.back().global_accuracy;
    r.summary["final_global_loss"] = result.rounds.back().global_loss;
    if (!std::isfinite(result.rounds.back().global_loss)) r.failures.push_back("global loss is not finite");
  }
  return r;
}

CltRow clt_row(std::uint32_t n, double alpha, std::size_t dim, std::uint32_t seeds, std::uint64_t base_seed) {
  if (n < 1 || dim < 1 || seeds < 1) throw ParameterError("clt: n, dim and seeds must be positive");
  const Rng master(base_seed);
  std::vector<double> values;
  values.reserve(dim * seeds);
  std::vector<ParamVector> masks(n);
  for (std::uint32_t s = 0; s < seeds; ++s) {
    Rng rng = master.split(n).split(s);
    for (auto& m : masks) m = uniform_mask(dim, alpha, rng);
    const ParamVector avg = vec_mean(masks);
    values.insert(values.end(), avg.begin(), avg.end());
  }
  const double mu = mean_of(values);
  double ss = 0.0;
  for (double v : values) ss += (v - mu) * (v - mu);
  CltRow row;
  row.n = n;
  row.alpha = alpha;
  row.expected = alpha / std::sqrt(3.0 * n);
  row.empirical = std::sqrt(ss / static_cast<double>(values.size() - 1));
  row.rel_error = std::abs(row.empirical - row.expected) / row.expected;
  return row;
}

ExperimentReport clt_check(const ScenarioConfig& cfg) {
  auto r = make_report(cfg, {"n", "alpha", "dim", "seeds", "expected_std", "empirical_std", "rel_error", "within"});
  std::vector<std::pair<std::uint32_t, double>> grid;
  for (auto n : cfg.clt.client_counts) {
    for (double a : cfg.clt.alphas) grid.emplace_back(n, a);
  }
  std::vector<CltRow> rows(grid.size());
  parallel_for(grid.size(), [&](std::size_t i) {
    rows[i] = clt_row(grid[i].first, grid[i].second, cfg.clt.dim, cfg.clt.seeds, cfg.seed);
  });
  double worst = 0.0;
  for (const auto& row : rows) {
    const bool ok = row.rel_error <= cfg.clt.tolerance;
    r.rows.push_back({row.n, row.alpha, cfg.clt.dim, cfg.clt.seeds, row.expected, row.empirical, row.rel_error, ok});
    worst = std::max(worst, row.rel_error);
    if (!ok) {
      r.failures.push_back("n=" + std::to_string(row.n) + " alpha=" + short_number(row.alpha) +
                           ": relative error " + format_number(row.rel_error));
    }
  }
  r.summary["max_rel_error"] = worst;
  r.summary["tolerance"] = cfg.clt.tolerance;
  return r;
}

ExperimentReport alpha_sweep(const ScenarioConfig& cfg) {
  auto r = make_report(cfg, {"n", "alpha", "seed", "local_accuracy_mean", "local_accuracy_max", "global_accuracy",
                             "baseline", "deviation"});
  const SweepSpec& sw = cfg.sweep;
  const GlyphTask task = pretrain_glyph_task(sw.task);
  struct Job {
    std::uint32_t n;
    double alpha;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (auto n : sw.client_counts) {
    for (double a : sw.alphas) {
      for (std::uint32_t s = 0; s < sw.seeds; ++s) jobs.push_back({n, a, cfg.seed + s});
    }
  }
  std::vector<MaskingCell> cells(jobs.size());
  parallel_for(jobs.size(), [&](std::size_t i) {
    cells[i] = masking_cell(task.model, task.test, jobs[i].n, jobs[i].alpha, jobs[i].seed, sw.local_evals);
  });
  for (const auto& c : cells) {
    r.rows.push_back({c.n, c.alpha, c.seed, c.local_accuracy_mean, c.local_accuracy_max, c.global_accuracy,
                      c.baseline, c.deviation});
  }

  // Seed averages per (n, alpha).
  auto average = [&](std::uint32_t n, double alpha, double MaskingCell::*field) {
    std::vector<double> v;
    for (const auto& c : cells) {
      if (c.n == n && c.alpha == alpha) v.push_back(c.*field);
    }
    return mean_of(v);
  };
  r.summary["baseline"] = task.baseline;
  json curves = json::array();
  json tolerated = json::object();
  for (auto n : sw.client_counts) {
    json local = json::array(), global = json::array();
    for (double a : sw.alphas) {
      local.push_back(average(n, a, &MaskingCell::local_accuracy_mean));
      global.push_back(average(n, a, &MaskingCell::global_accuracy));
    }
    curves.push_back({{"n", n}, {"alphas", sw.alphas}, {"local_accuracy", local}, {"global_accuracy", global}});
    tolerated[std::to_string(n)] = tolerated_alpha(cells, n, sw.slack);
  }
  r.summary["curves"] = curves;
  r.summary["tolerated_alpha"] = tolerated;

  for (const auto& c : cells) {
    const bool same = c.local_accuracy_max == c.baseline && c.global_accuracy == c.baseline &&
                      std::abs(c.local_accuracy_mean - c.baseline) <= 1e-12;
    if (c.alpha == 0.0 && !same) {
      r.failures.push_back("alpha 0: local, global and baseline accuracy differ at n=" + std::to_string(c.n));
      break;
    }
  }
  const auto [lo_n, hi_n] = std::minmax_element(sw.client_counts.begin(), sw.client_counts.end());
  // Accuracies are counts over the test set, so differences below one test
  // example are not resolved.
  const double resolution = 1.0 / static_cast<double>(task.test.size());
  bool dominates = true;
  double shortfall = 0.0;
  for (double a : sw.alphas) {
    const double gap =
        average(*lo_n, a, &MaskingCell::global_accuracy) - average(*hi_n, a, &MaskingCell::global_accuracy);
    shortfall = std::max(shortfall, gap);
    if (gap > resolution) {
      dominates = false;
      r.failures.push_back("global accuracy at n=" + std::to_string(*hi_n) + " falls below n=" +
                           std::to_string(*lo_n) + " at alpha " + short_number(a));
    }
  }
  r.summary["largest_n_dominates"] = dominates;
  r.summary["dominance_max_shortfall"] = shortfall;
  r.summary["dominance_resolution"] = resolution;
  const double top = *std::max_element(sw.alphas.begin(), sw.alphas.end());
  double top_local = 0.0;
  for (auto n : sw.client_counts) top_local = std::max(top_local, average(n, top, &MaskingCell::local_accuracy_mean));
  r.summary["top_alpha_local_accuracy"] = top_local;
  return r;
}

// ---------------------------------------------------------------------------
// Attack battery

namespace {

void add_rate_row(ExperimentReport& r, const std::string& attack, const std::string& setting, std::size_t trials,
                  std::size_t successes, double metric, const std::string& metric_name) {
  r.rows.push_back({attack, setting, trials, successes,
                    trials ? static_cast<double>(successes) / static_cast<double>(trials) : 0.0, metric_name, metric});
}

std::string pgm_bytes(const ParamVector& pixels) {
  std::ostringstream os;
  write_pgm(os, pixels, data::kGlyphSide, data::kGlyphSide);
  return os.str();
}

void protocol_attacks(const ScenarioConfig& cfg, ExperimentReport& r) {
  using adversary::StrategyKind;
  json summary = json::array();
  const auto strategies = cfg.attack.strategies.empty() ? default_strategies(cfg.secagg) : cfg.attack.strategies;
  for (const auto& strategy : strategies) {
    std::size_t successes = 0, recovered = 0, mismatches = 0;
    for (std::uint32_t s = 0; s < cfg.attack.seeds; ++s) {
      secagg::SecAggConfig sc = cfg.secagg;
      sc.seed = cfg.seed + s;
      const auto rep = adversary::run_attack(sc, strategy);
      successes += rep.success;
      recovered += rep.recovered.size();
      mismatches += rep.field_mismatches;
    }
    const std::string name = adversary::to_string(strategy.kind);
    add_rate_row(r, name, "unmasked", cfg.attack.seeds, successes, static_cast<double>(recovered), "recovered_inputs");
    summary.push_back({{"strategy", name}, {"successes", successes}, {"recovered_inputs", recovered},
                       {"field_mismatches", mismatches}});
    if (strategy.kind == StrategyKind::HonestButCurious && recovered != 0) {
      r.failures.push_back("honest-but-curious server recovered client inputs");
    }
    if (strategy.kind == StrategyKind::SybilMitm && !strategy.trusted_third_party && successes != cfg.attack.seeds) {
      r.failures.push_back("sybil MITM did not succeed on every seed");
    }
    if (mismatches != 0) r.failures.push_back(name + ": recovered values differ from the true encodings");
  }
  r.summary["protocol_attacks"] = summary;
}

void dlg_attacks(const ScenarioConfig& cfg, ExperimentReport& r, double alpha) {
  const DlgSetup setup;
  DlgConfig dc;
  dc.t = cfg.attack.dlg_t;
  const std::uint32_t seeds = cfg.attack.seeds;
  std::vector<DlgTrial> plain(seeds), masked(seeds);
  parallel_for(2 * seeds, [&](std::size_t i) {
    const auto seed = cfg.seed + i % seeds;
    (i < seeds ? plain[i] : masked[i - seeds]) = dlg_trial(setup, dc, i < seeds ? 0.0 : alpha, seed);
  });
  auto tally = [&](const std::vector<DlgTrial>& ts, const std::string& setting) {
    std::size_t wins = 0;
    std::vector<double> mse;
    for (const auto& t : ts) {
      wins += t.report.success;
      mse.push_back(t.report.mse);
    }
    add_rate_row(r, "dlg", setting, ts.size(), wins, mean_of(mse), "mean_mse");
    return wins;
  };
  tally(plain, "alpha=0");
  const auto masked_wins = tally(masked, "alpha=" + short_number(alpha));
  r.summary["dlg_alpha"] = alpha;
  if (masked_wins != 0) r.failures.push_back("DLG succeeded against masked updates");
  r.artifacts["dlg_truth.pgm"] = pgm_bytes(dlg_victim(setup, dc.loss, 0.0, cfg.seed).truth.inputs[0]);
  r.artifacts["dlg_unmasked.pgm"] = pgm_bytes(plain[0].report.x);
  r.artifacts["dlg_masked.pgm"] = pgm_bytes(masked[0].report.x);
}

// The server runs the sybil MITM on a round whose honest client submits its
// local model, then feeds the recovered vector to DLG.
void masked_mitm_dlg(const ScenarioConfig& cfg, ExperimentReport& r, double alpha) {
  const DlgSetup setup;
  DlgConfig dc;
  dc.t = cfg.attack.dlg_t;
  const std::uint32_t seeds = cfg.attack.seeds;
  std::vector<int> recovered(2 * seeds, 0), success(2 * seeds, 0);
  std::vector<double> mse(2 * seeds, 0.0);
  parallel_for(2 * seeds, [&](std::size_t i) {
    const auto seed = cfg.seed + i % seeds;
    const DlgVictim v = dlg_victim(setup, dc.loss, i < seeds ? 0.0 : alpha, seed);
    secagg::SecAggConfig sc = cfg.secagg;
    sc.seed = seed;
    sc.dim = v.local.dim();
    sc.dropouts.clear();
    const auto ids = sc.client_ids();
    sc.inputs.assign(sc.n, ParamVector(sc.dim));
    sc.inputs[0] = v.local;
    adversary::AdversaryStrategy mitm;
    mitm.kind = adversary::StrategyKind::SybilMitm;
    mitm.honest_ids = {ids.front()};
    const auto rep = adversary::run_mitm(sc, mitm);
    if (!rep.success || !rep.recovered.count(ids.front())) return;
    recovered[i] = 1;
    const auto rec = dlg_from_local(setup, v, rep.recovered.at(ids.front()), dc);
    success[i] = rec.success;
    mse[i] = rec.mse;
  });
  for (int half = 0; half < 2; ++half) {
    std::size_t wins = 0, got = 0;
    std::vector<double> m;
    for (std::uint32_t s = 0; s < seeds; ++s) {
      wins += success[half * seeds + s];
      got += recovered[half * seeds + s];
      m.push_back(mse[half * seeds + s]);
    }
    const std::string setting = half == 0 ? "alpha=0" : "alpha=" + short_number(alpha);
    add_rate_row(r, "mitm_then_dlg", setting, seeds, wins, mean_of(m), "mean_mse");
    r.summary[std::string("mitm_then_dlg_recovered_") + (half == 0 ? "unmasked" : "masked")] = got;
    if (got != seeds) r.failures.push_back("MITM failed to recover the local model (" + setting + ")");
    if (half == 1 && wins != 0) r.failures.push_back("DLG on the MITM-recovered masked model succeeded");
  }
}

// Model inversion against a glyph classifier trained by one client. A run
// counts as a success when the reconstruction is classified as its target.
void mia_attacks(const ScenarioConfig& cfg, ExperimentReport& r) {
  const std::uint32_t seeds = cfg.attack.seeds;
  std::vector<int> hit(seeds);
  std::vector<double> cos(seeds), cost(seeds);
  parallel_for(seeds, [&](std::size_t i) {
    const Rng master(cfg.seed + i);
    Rng model_rng = master.split(1), data_rng = master.split(2);
    TinyModel m = TinyModel::initialized({data::kGlyphPixels, 16, data::kGlyphClasses}, Activation::Tanh,
                                         Activation::Identity, model_rng);
    const Batch train = data::glyph_batch(500, 0.15, 1, data_rng);
    m = m.with_params(client_update(m, train, 200, 0.5));
    const std::size_t label = (cfg.seed + i) % data::kGlyphClasses;
    const auto res = mia_attack(m, label, MiaConfig{});
    hit[i] = argmax(forward(m, res.x)) == label;
    cost[i] = res.cost;
    const ParamVector proto = data::glyph_prototype(label);
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t j = 0; j < proto.dim(); ++j) {
      ab += res.x[j] * proto[j];
      aa += res.x[j] * res.x[j];
      bb += proto[j] * proto[j];
    }
    cos[i] = aa > 0 && bb > 0 ? ab / std::sqrt(aa * bb) : 0.0;
  });
  std::size_t wins = 0;
  for (int h : hit) wins += h;
  add_rate_row(r, "mia", "unmasked", seeds, wins, mean_of(cost), "mean_cost");
  r.summary["mia_mean_prototype_cosine"] = mean_of(cos);
}

void gan_attacks(const ScenarioConfig& cfg, ExperimentReport& r) {
  const auto target = data::GaussianMixture::ring(1, 1.0, 0.05);
  const std::uint32_t seeds = cfg.attack.seeds;
  const GanMode modes[3] = {GanMode::Normal, GanMode::MaskedD, GanMode::PretrainedD};
  std::vector<GanReport> reps(3 * seeds);
  parallel_for(reps.size(), [&](std::size_t i) {
    reps[i] = gan_attack(target, modes[i / seeds], cfg.attack.gan, cfg.seed + i % seeds);
  });
  json summary = json::object();
  for (int m = 0; m < 3; ++m) {
    std::size_t converged = 0, wins = 0;
    std::vector<double> dist;
    for (std::uint32_t s = 0; s < seeds; ++s) {
      const auto& g = reps[m * seeds + s];
      converged += g.converged;
      dist.push_back(g.mode_distance);
      wins += reps[s].mode_distance < g.mode_distance;
    }
    add_rate_row(r, "gan", to_string(modes[m]), seeds, converged, mean_of(dist), "mean_mode_distance");
    if (m > 0) {
      summary[to_string(modes[m])] = {{"normal_wins", wins},
                                      {"sign_test_p", sign_test_p(wins, seeds)},
                                      {"non_converged", seeds - converged}};
    }
  }
  r.summary["gan"] = summary;
}

void lp_attacks(const ScenarioConfig& cfg, ExperimentReport& r) {
  const auto& alphas = cfg.attack.lp_alphas;
  const std::uint32_t seeds = cfg.attack.seeds;
  std::vector<std::vector<LpRow>> per_seed(seeds);
  parallel_for(seeds, [&](std::size_t i) {
    const Rng master(cfg.seed + i);
    Rng data_rng = master.split(1), mask_rng = master.split(2);
    const auto src = data::MarkovSource::random(16, 4, data_rng);
    const auto train = data::markov_corpus(src, 200, 50, data_rng);
    const auto held = data::markov_corpus(src, 50, 20, data_rng);
    const auto lm = BigramLM::fit(train, 16, 0.1, 80.0);
    per_seed[i] = lp_probe(lm, alphas, held, mask_rng);
  });
  json rhos = json::array();
  for (const auto& rows : per_seed) {
    std::vector<double> lp;
    for (const auto& row : rows) lp.push_back(row.mean_lp);
    rhos.push_back(spearman_rho(alphas, lp));
  }
  for (std::size_t a = 0; a < alphas.size(); ++a) {
    std::size_t saturated = 0;
    std::vector<double> finite;
    for (const auto& rows : per_seed) {
      saturated += rows[a].saturation;
      finite.push_back(rows[a].finite_mean_lp);
    }
    add_rate_row(r, "lp_probe", "alpha=" + short_number(alphas[a]), seeds, saturated, mean_of(finite),
                 "mean_finite_lp");
  }
  r.summary["lp_spearman_rho"] = rhos;
}

}  // namespace

ExperimentReport attack_battery(const ScenarioConfig& cfg) {
  auto r = make_report(cfg, {"attack", "setting", "trials", "successes", "success_rate", "metric", "value"});
  protocol_attacks(cfg, r);
  double alpha = cfg.attack.dlg_alpha;
  const auto& recs = cfg.attack.reconstructions;
  auto wanted = [&](const char* name) { return std::find(recs.begin(), recs.end(), name) != recs.end(); };
  if (cfg.attack.calibrate && (wanted("dlg") || wanted("masked_mitm_dlg"))) {
    DlgConfig dc;
    dc.t = cfg.attack.dlg_t;
    std::vector<std::uint64_t> seeds;
    for (std::uint32_t s = 0; s < cfg.attack.seeds; ++s) seeds.push_back(cfg.seed + s);
    const auto cal = calibrate_dlg_alpha(DlgSetup{}, dc, cfg.attack.dlg_grid, seeds);
    r.summary["dlg_calibrated_alpha"] = cal.alpha;
    if (cal.alpha < 0.0) {
      r.failures.push_back("no alpha in the grid stops DLG");
    } else {
      alpha = cal.alpha;
    }
  }
  if (wanted("dlg")) dlg_attacks(cfg, r, alpha);
  if (wanted("masked_mitm_dlg")) masked_mitm_dlg(cfg, r, alpha);
  if (wanted("mia")) mia_attacks(cfg, r);
  if (wanted("gan")) gan_attacks(cfg, r);
  if (wanted("lp")) lp_attacks(cfg, r);
  return r;
}

}  // namespace flsec::harness
