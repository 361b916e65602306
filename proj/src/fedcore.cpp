#include "flsec/fedcore.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "flsec/datasets.hpp"
#include "flsec/errors.hpp"
#include "flsec/kernels.hpp"

namespace flsec {

using nlohmann::json;

namespace {

std::string loss_name(LossKind k) { return k == LossKind::Mse ? "mse" : "cross_entropy"; }

LossKind loss_from_name(const std::string& s) {
  if (s == "cross_entropy") return LossKind::CrossEntropy;
  if (s == "mse") return LossKind::Mse;
  throw ConfigError("fed.loss", "unknown loss '" + s + "'");
}

}  // namespace

void FedConfig::validate() const {
  if (n < 1) throw ConfigError("fed.n", "must be at least 1");
  if (t_global < 1) throw ConfigError("fed.t_global", "must be at least 1");
  if (!(eta > 0.0) || !std::isfinite(eta)) throw ConfigError("fed.eta", "must be positive");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("fed.alpha", "must lie in [0, 1]");
  aggregator.validate();
  if (weighted && aggregator.rule != agg::Rule::Mean) {
    throw ConfigError("fed.weighted", "only the mean rule supports weighting");
  }
  if (announced_threshold > n) throw ConfigError("fed.announced_threshold", "exceeds n");
  if (!(noise_tolerance > 0.0)) throw ConfigError("fed.noise_tolerance", "must be positive");
  if (!(client_min_alpha >= 0.0 && client_min_alpha <= 1.0)) {
    throw ConfigError("fed.client_min_alpha", "must lie in [0, 1]");
  }
}

double implied_alpha(double tolerance, std::uint32_t threshold) {
  if (!(tolerance > 0.0)) throw ParameterError("implied_alpha: tolerance must be positive");
  if (threshold < 1) throw ParameterError("implied_alpha: threshold must be at least 1");
  return std::min(1.0, tolerance * std::sqrt(3.0 * threshold));
}

double FedConfig::effective_alpha() const {
  if (announced_threshold == 0) return alpha;
  const double a = implied_alpha(noise_tolerance, announced_threshold);
  if (a < client_min_alpha) {
    throw ParameterError("client refuses: alpha " + std::to_string(a) + " implied by threshold " +
                         std::to_string(announced_threshold) + " is below its minimum " +
                         std::to_string(client_min_alpha));
  }
  return a;
}

json to_json(const FedConfig& c) {
  return json{{"n", c.n},
              {"t_global", c.t_global},
              {"t_local", c.t_local},
              {"eta", c.eta},
              {"alpha", c.alpha},
              {"aggregator", agg::to_json(c.aggregator)},
              {"loss", loss_name(c.loss)},
              {"seed", c.seed},
              {"weighted", c.weighted},
              {"announced_threshold", c.announced_threshold},
              {"noise_tolerance", c.noise_tolerance},
              {"client_min_alpha", c.client_min_alpha}};
}

FedConfig fed_config_from_json(const json& j) {
  static const std::vector<std::string> keys = {"n",      "t_global", "t_local",  "eta",
                                                "alpha",  "aggregator", "loss",   "seed",
                                                "weighted", "announced_threshold", "noise_tolerance",
                                                "client_min_alpha"};
  if (!j.is_object()) throw ConfigError("fed", "must be an object");
  for (const auto& [k, v] : j.items()) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw ConfigError("fed." + k, "unknown key");
  }
  FedConfig c;
  auto get = [&](const char* key, auto& out) {
    if (!j.contains(key) || j.at(key).is_null()) return;
    try {
      out = j.at(key).get<std::decay_t<decltype(out)>>();
    } catch (const json::exception&) {
      throw ConfigError(std::string("fed.") + key, "wrong type");
    }
  };
  get("n", c.n);
  get("t_global", c.t_global);
  get("t_local", c.t_local);
  get("eta", c.eta);
  get("alpha", c.alpha);
  if (j.contains("aggregator")) c.aggregator = agg::aggregator_from_json(j.at("aggregator"));
  std::string loss = loss_name(c.loss);
  get("loss", loss);
  c.loss = loss_from_name(loss);
  get("seed", c.seed);
  get("weighted", c.weighted);
  get("announced_threshold", c.announced_threshold);
  get("noise_tolerance", c.noise_tolerance);
  get("client_min_alpha", c.client_min_alpha);
  c.validate();
  return c;
}

ParamVector client_update(const TinyModel& model, const Batch& data, std::uint32_t t_local, double eta,
                          LossKind loss) {
  if (data.size() == 0) throw ParameterError("client_update: client has no data");
  TinyModel m = model;
  for (std::uint32_t t = 0; t < t_local; ++t) m = sgd_step(m, data, eta, loss);
  return m.params();
}

ParamVector masked_client_update(const TinyModel& model, const Batch& data, std::uint32_t t_local,
                                 double eta, double alpha, Rng& rng, LossKind loss) {
  ParamVector w = client_update(model, data, t_local, eta, loss);
  w += uniform_mask(w.dim(), alpha, rng);
  return w;
}

ParamVector fedavg_round(std::span<const ParamVector> models) { return vec_mean(models); }

// ---------------------------------------------------------------------------
// DP-SGD

void DpConfig::validate(std::size_t dataset_size) const {
  if (!(gamma > 0.0)) throw ParameterError("dp: gamma must be positive");
  if (!(xi >= 0.0) || !std::isfinite(xi)) throw ParameterError("dp: xi must be finite and non-negative");
  if (xi > 0.0 && std::isinf(gamma)) throw ParameterError("dp: noise needs a finite gamma");
  if (h < 1 || h > dataset_size) throw ParameterError("dp: group size must lie in [1, dataset size]");
  if (t < 1) throw ParameterError("dp: need at least one step");
  if (!(eta >= 0.0) || !std::isfinite(eta)) throw ParameterError("dp: eta must be non-negative");
  if (!(delta_target > 0.0 && delta_target < 1.0)) throw ParameterError("dp: delta target must lie in (0, 1)");
}

void PrivacyLedger::add(PrivacyEntry e) {
  entries.push_back(e);
  epsilon_total += e.epsilon;
  delta_total += e.delta;
}

PrivacyEntry compose_privacy(std::span<const PrivacyEntry> entries) {
  if (entries.empty()) throw ParameterError("compose_privacy: empty ledger");
  PrivacyEntry total;
  for (const auto& e : entries) {
    total.epsilon += e.epsilon;
    total.delta += e.delta;
  }
  return total;
}

PrivacyEntry dp_step_cost(const DpConfig& cfg, std::size_t dataset_size) {
  cfg.validate(dataset_size);
  const double q = static_cast<double>(cfg.h) / static_cast<double>(dataset_size);
  const double d0 = cfg.delta_target / (q * cfg.t);
  if (cfg.xi == 0.0) return {std::numeric_limits<double>::infinity(), q * d0};
  const double e0 = std::sqrt(2.0 * std::log(1.25 / d0)) / cfg.xi;
  return {std::log1p(q * std::expm1(e0)), q * d0};
}

std::vector<std::size_t> sample_group(std::size_t n, std::size_t h, Rng& rng) {
  if (h > n) throw ParameterError("sample_group: h exceeds n");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < h; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform_below(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(h);
  std::sort(idx.begin(), idx.end());
  return idx;
}

double clip_gradient(ParamVector& g, double gamma) {
  const double norm = g.norm2();
  const double div = std::max(1.0, norm / gamma);
  if (div == 1.0) return norm;
  for (double& v : g) v /= div;
  // The rescaled norm can land an ulp above gamma.
  while (g.norm2() > gamma) {
    for (double& v : g) v = std::nextafter(v, 0.0);
  }
  return norm;
}

DpResult dp_sgd(const TinyModel& model, const Batch& data, const DpConfig& cfg, const Rng& rng) {
  cfg.validate(data.size());
  data.validate(model);
  const PrivacyEntry step_cost = dp_step_cost(cfg, data.size());
  DpResult r{model.params(), {}, 0.0};
  TinyModel m = model;
  const double sd = cfg.xi * cfg.gamma;
  const double inv_h = 1.0 / static_cast<double>(cfg.h);
  for (std::uint32_t t = 0; t < cfg.t; ++t) {
    Rng pick = rng.split(2 * std::uint64_t{t});
    ParamVector sum(m.num_params());
    for (std::size_t i : sample_group(data.size(), cfg.h, pick)) {
      ParamVector g = backward_example(m, data, i, cfg.loss).grads.params;
      clip_gradient(g, cfg.gamma);
      r.max_clipped_norm = std::max(r.max_clipped_norm, g.norm2());
      sum += g;
    }
    if (cfg.xi > 0.0) {
      Rng noise = rng.split(2 * std::uint64_t{t} + 1);
      for (double& v : sum) v += sd * noise.normal();
    }
    sum *= inv_h;
    ParamVector w = m.params();
    kernels::axpy(-cfg.eta, sum.span(), w.span());
    m = m.with_params(std::move(w));
    r.ledger.add(step_cost);
  }
  r.params = m.params();
  return r;
}

DpResult masked_dp_sgd(const TinyModel& model, const Batch& data, const DpConfig& cfg, double alpha,
                       const Rng& rng) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("masked_dp_sgd: alpha must lie in [0, 1]");
  DpResult r = dp_sgd(model, data, cfg, rng);
  Rng mask_rng = rng.split(kMaskStream);
  r.params += uniform_mask(r.params.dim(), alpha, mask_rng);
  return r;
}

// ---------------------------------------------------------------------------
// Training loop

FedRunResult run_fedavg(const TinyModel& initial, std::span<const Batch> clients, const FedConfig& cfg,
                        const Batch& eval) {
  cfg.validate();
  if (clients.size() != cfg.n) throw ConfigError("fed.n", "does not match the number of client partitions");
  const double alpha = cfg.effective_alpha();
  const bool momentum = cfg.aggregator.momentum.has_value();
  FedRunResult out{initial, {}};
  std::vector<ParamVector> betas(cfg.n, ParamVector(initial.num_params()));
  const Rng master(cfg.seed);

  for (std::uint32_t round = 0; round < cfg.t_global; ++round) {
    const Rng round_rng = master.split(round);
    const ParamVector w = out.model.params();
    std::vector<ParamVector> sent;
    sent.reserve(cfg.n);
    RoundMetrics met{round, cfg.n, alpha};
    for (std::uint32_t i = 0; i < cfg.n; ++i) {
      Rng rng = round_rng.split(i);
      ParamVector local = masked_client_update(out.model, clients[i], cfg.t_local, cfg.eta, alpha, rng, cfg.loss);
      const TinyModel lm = out.model.with_params(local);
      met.mean_local_loss += evaluate_loss(lm, eval, cfg.loss);
      met.mean_local_accuracy += accuracy(lm, eval.inputs, eval.labels);
      if (momentum) {
        ParamVector delta = w - local;
        betas[i] = agg::worker_momentum(delta, betas[i], *cfg.aggregator.momentum);
        sent.push_back(betas[i]);
      } else {
        sent.push_back(std::move(local));
      }
    }
    met.mean_local_loss /= cfg.n;
    met.mean_local_accuracy /= cfg.n;

    ParamVector combined;
    if (cfg.weighted) {
      double total = 0.0;
      combined = ParamVector(w.dim());
      for (std::uint32_t i = 0; i < cfg.n; ++i) {
        const double wt = static_cast<double>(clients[i].size());
        kernels::axpy(wt, sent[i].span(), combined.span());
        total += wt;
      }
      combined *= 1.0 / total;
    } else {
      combined = agg::aggregate(cfg.aggregator, sent);
    }
    out.model = out.model.with_params(momentum ? w - combined : std::move(combined));
    met.global_loss = evaluate_loss(out.model, eval, cfg.loss);
    met.global_accuracy = accuracy(out.model, eval.inputs, eval.labels);
    out.rounds.push_back(met);
  }
  return out;
}

void write_round_csv(std::ostream& os, std::span<const RoundMetrics> rows) {
  os << "# flsec.fedavg.rounds v" << kRoundCsvVersion << "\n";
  os << "round,n,alpha,mean_local_loss,global_loss,mean_local_accuracy,global_accuracy\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%u,%u,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.round, r.n, r.alpha,
                  r.mean_local_loss, r.global_loss, r.mean_local_accuracy, r.global_accuracy);
    os << buf;
  }
}

// ---------------------------------------------------------------------------
// Masking a pretrained model

GlyphTask pretrain_glyph_task(const GlyphTaskConfig& cfg) {
  if (cfg.layers.size() < 2 || cfg.layers.front() != data::kGlyphPixels ||
      cfg.layers.back() != data::kGlyphClasses) {
    throw ParameterError("glyph task: layers must run from 64 inputs to 10 outputs");
  }
  if (cfg.minibatch == 0 || cfg.train_size % cfg.minibatch != 0) {
    throw ParameterError("glyph task: minibatch must divide the training size");
  }
  Rng rng(cfg.seed);
  GlyphTask task{TinyModel::zeros(cfg.layers, Activation::Tanh, Activation::Identity), {}, {}, 0.0};
  task.train = data::glyph_batch(cfg.train_size, cfg.pixel_noise, cfg.max_shift, rng);
  task.test = data::glyph_batch(cfg.test_size, cfg.pixel_noise, cfg.max_shift, rng);
  TinyModel m = TinyModel::initialized(cfg.layers, Activation::Tanh, Activation::Identity, rng);
  for (std::uint32_t ep = 0; ep < cfg.epochs; ++ep) {
    for (std::size_t s = 0; s < task.train.size(); s += cfg.minibatch) {
      Batch b;
      for (std::size_t i = s; i < s + cfg.minibatch; ++i) {
        b.inputs.push_back(task.train.inputs[i]);
        b.labels.push_back(task.train.labels[i]);
      }
      m = sgd_step(m, b, cfg.eta);
    }
  }
  task.model = std::move(m);
  task.baseline = accuracy(task.model, task.test.inputs, task.test.labels);
  return task;
}

MaskingCell masking_cell(const TinyModel& pretrained, const Batch& test, std::uint32_t n, double alpha,
                         std::uint64_t seed, std::size_t local_evals) {
  if (n < 1) throw ParameterError("masking_cell: n must be at least 1");
  const Rng master(seed);
  const std::size_t dim = pretrained.num_params();
  const std::size_t evals = std::min<std::size_t>(n, local_evals);
  MaskingCell c{n, alpha, seed};
  c.baseline = accuracy(pretrained, test.inputs, test.labels);
  ParamVector mask_sum(dim);
  for (std::uint32_t i = 0; i < n; ++i) {
    Rng rng = master.split(i);
    const ParamVector mask = uniform_mask(dim, alpha, rng);
    if (i < evals) {
      const double acc = accuracy(pretrained.with_params(pretrained.params() + mask), test.inputs, test.labels);
      c.local_accuracy_mean += acc;
      c.local_accuracy_max = std::max(c.local_accuracy_max, acc);
    }
    mask_sum += mask;
  }
  c.local_accuracy_mean /= static_cast<double>(evals);
  mask_sum *= 1.0 / static_cast<double>(n);
  ParamVector global = pretrained.params() + mask_sum;
  c.deviation = (global - pretrained.params()).max_abs();
  c.global_accuracy = accuracy(pretrained.with_params(std::move(global)), test.inputs, test.labels);
  return c;
}

double tolerated_alpha(std::span<const MaskingCell> cells, std::uint32_t n, double slack) {
  std::vector<std::pair<double, std::pair<double, double>>> by_alpha;  // alpha -> (sum acc, sum base)
  std::vector<int> counts;
  for (const auto& c : cells) {
    if (c.n != n) continue;
    auto it = std::find_if(by_alpha.begin(), by_alpha.end(), [&](const auto& p) { return p.first == c.alpha; });
    if (it == by_alpha.end()) {
      by_alpha.push_back({c.alpha, {0.0, 0.0}});
      counts.push_back(0);
      it = by_alpha.end() - 1;
    }
    const auto k = static_cast<std::size_t>(it - by_alpha.begin());
    it->second.first += c.global_accuracy;
    it->second.second += c.baseline;
    ++counts[k];
  }
  double best = 0.0;
  for (std::size_t k = 0; k < by_alpha.size(); ++k) {
    const double acc = by_alpha[k].second.first / counts[k];
    const double base = by_alpha[k].second.second / counts[k];
    if (acc >= base - slack) best = std::max(best, by_alpha[k].first);
  }
  return best;
}

}  // namespace flsec
