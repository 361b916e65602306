#include "flsec/attacks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include "flsec/errors.hpp"
#include "flsec/kernels.hpp"
#include "flsec/parallel.hpp"

namespace flsec {

using nlohmann::json;

namespace {

double mse_between(const ParamVector& a, const ParamVector& b) {
  return kernels::squared_distance(a.span(), b.span()) / static_cast<double>(a.dim());
}

ParamVector example_gradient(const TinyModel& model, const ParamVector& x, const ParamVector& target,
                             LossKind loss) {
  Batch b;
  b.inputs.push_back(x);
  b.targets.push_back(target);
  return backward_example(model, b, 0, loss).grads.params;
}

}  // namespace

// ---------------------------------------------------------------------------
// DLG

void DlgConfig::validate() const {
  if (t < 1) throw ParameterError("dlg: t must be at least 1");
  if (!(fd_step > 0.0)) throw ParameterError("dlg: finite-difference step must be positive");
  if (!(eta > 0.0)) throw ParameterError("dlg: eta must be positive");
  if (!(success_mse > 0.0)) throw ParameterError("dlg: success threshold must be positive");
}

json to_json(const ReconstructionReport& r) {
  return json{{"mse", r.mse},
              {"initial_mse", r.initial_mse},
              {"success", r.success},
              {"aborted", r.aborted},
              {"diagnostic", r.diagnostic},
              {"iterations", r.trace.size()},
              {"final_distance", r.trace.empty() ? 0.0 : r.trace.back()},
              {"x", to_json(r.x)},
              {"y", to_json(r.y)}};
}

ParamVector dlg_label_target(const ParamVector& y, LossKind loss) {
  return loss == LossKind::CrossEntropy ? softmax(y) : y;
}

double gradient_distance(const TinyModel& model, const ParamVector& x, const ParamVector& target,
                         const ParamVector& known, LossKind loss) {
  if (known.dim() != model.num_params()) throw ParameterError("dlg: known gradient has the wrong dimension");
  const ParamVector g = example_gradient(model, x, target, loss);
  return kernels::squared_distance(g.span(), known.span());
}

double dlg_objective(const TinyModel& model, const ParamVector& x, const ParamVector& y,
                     const ParamVector& known, LossKind loss) {
  return gradient_distance(model, x, dlg_label_target(y, loss), known, loss);
}

DlgGradient dlg_gradient(const TinyModel& model, const ParamVector& x, const ParamVector& y,
                         const ParamVector& known, LossKind loss, double h) {
  DlgGradient g{ParamVector(x.dim()), ParamVector(y.dim())};
  ParamVector xs = x, ys = y;
  const double inv = 1.0 / (2.0 * h);
  for (std::size_t i = 0; i < xs.dim(); ++i) {
    const double o = xs[i];
    xs[i] = o + h;
    const double up = dlg_objective(model, xs, ys, known, loss);
    xs[i] = o - h;
    const double dn = dlg_objective(model, xs, ys, known, loss);
    xs[i] = o;
    g.dx[i] = (up - dn) * inv;
  }
  for (std::size_t i = 0; i < ys.dim(); ++i) {
    const double o = ys[i];
    ys[i] = o + h;
    const double up = dlg_objective(model, xs, ys, known, loss);
    ys[i] = o - h;
    const double dn = dlg_objective(model, xs, ys, known, loss);
    ys[i] = o;
    g.dy[i] = (up - dn) * inv;
  }
  return g;
}

ReconstructionReport dlg_attack(const TinyModel& model, const ParamVector& known_gradient, const Batch& truth,
                                const DlgConfig& cfg) {
  cfg.validate();
  if (truth.size() != 1) throw ParameterError("dlg: truth must hold exactly one example");
  const auto start = std::chrono::steady_clock::now();
  Rng rng(cfg.init_seed);
  ReconstructionReport r;
  r.x = ParamVector(model.input_size());
  r.y = ParamVector(model.output_size());
  for (auto& v : r.x) v = rng.normal();
  for (auto& v : r.y) v = rng.normal();
  const ParamVector x0 = r.x;
  r.trace.reserve(cfg.t);
  for (std::uint32_t t = 0; t < cfg.t; ++t) {
    const DlgGradient g = dlg_gradient(model, r.x, r.y, known_gradient, cfg.loss, cfg.fd_step);
    kernels::axpy(-cfg.eta, g.dx.span(), r.x.span());
    kernels::axpy(-cfg.eta, g.dy.span(), r.y.span());
    const double d = dlg_objective(model, r.x, r.y, known_gradient, cfg.loss);
    r.trace.push_back(d);
    if (!std::isfinite(d) || !r.x.all_finite() || !r.y.all_finite()) {
      r.aborted = true;
      r.diagnostic = "gradient distance became non-finite at iteration " + std::to_string(t);
      break;
    }
  }
  r.mse = r.aborted ? std::numeric_limits<double>::infinity() : mse_between(r.x, truth.inputs[0]);
  r.initial_mse = mse_between(x0, truth.inputs[0]);
  r.success = r.mse <= cfg.success_mse;
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

DlgVictim dlg_victim(const DlgSetup& setup, LossKind loss, double alpha, std::uint64_t seed) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("dlg: alpha must lie in [0, 1]");
  const Rng master(seed);
  Rng model_rng = master.split(1), data_rng = master.split(2), mask_rng = master.split(3);
  DlgVictim v{seed, alpha, TinyModel::initialized(setup.layers, setup.hidden, Activation::Identity, model_rng),
              {}, {}, {}, master.split(4).next_u64()};
  const Batch pool = data::glyph_batch(data::kGlyphClasses, setup.pixel_noise, 1, data_rng);
  v.truth = pool.example(static_cast<std::size_t>(seed % data::kGlyphClasses));
  v.gradient = backward(v.model, v.truth, loss).gradient;
  v.local = v.model.params();
  kernels::axpy(-setup.client_eta, v.gradient.span(), v.local.span());
  if (alpha > 0.0) v.local += uniform_mask(v.local.dim(), alpha, mask_rng);
  return v;
}

ReconstructionReport dlg_from_local(const DlgSetup& setup, const DlgVictim& victim, const ParamVector& observed,
                                    const DlgConfig& cfg) {
  if (observed.dim() != victim.model.num_params()) throw ParameterError("dlg: observed model has the wrong size");
  ParamVector known = victim.model.params() - observed;
  known *= 1.0 / setup.client_eta;
  DlgConfig c = cfg;
  c.init_seed = victim.init_seed;
  return dlg_attack(victim.model, known, victim.truth, c);
}

DlgTrial dlg_trial(const DlgSetup& setup, const DlgConfig& cfg, double alpha, std::uint64_t seed) {
  const DlgVictim v = dlg_victim(setup, cfg.loss, alpha, seed);
  if (alpha > 0.0) return DlgTrial{seed, alpha, dlg_from_local(setup, v, v.local, cfg)};
  DlgConfig c = cfg;
  c.init_seed = v.init_seed;
  return DlgTrial{seed, alpha, dlg_attack(v.model, v.gradient, v.truth, c)};
}

DlgCalibration calibrate_dlg_alpha(const DlgSetup& setup, const DlgConfig& cfg, std::span<const double> grid,
                                   std::span<const std::uint64_t> seeds) {
  if (grid.empty() || seeds.empty()) throw ParameterError("dlg calibration: empty grid or seed list");
  auto battery = [&](double alpha) {
    std::vector<DlgTrial> out(seeds.size());
    parallel_for(seeds.size(), [&](std::size_t i) { out[i] = dlg_trial(setup, cfg, alpha, seeds[i]); });
    return out;
  };
  DlgCalibration cal;
  cal.unmasked = battery(0.0);
  for (const auto& t : cal.unmasked) cal.max_unmasked_mse = std::max(cal.max_unmasked_mse, t.report.mse);
  std::vector<double> sorted(grid.begin(), grid.end());
  std::sort(sorted.begin(), sorted.end());
  for (double alpha : sorted) {
    DlgCalibrationRow row{alpha, 0, std::numeric_limits<double>::infinity(), 0.0, true};
    for (const auto& t : battery(alpha)) {
      row.successes += t.report.success;
      row.min_mse = std::min(row.min_mse, t.report.mse);
      row.max_initial_mse = std::max(row.max_initial_mse, t.report.initial_mse);
      row.fails = row.fails && !t.report.success &&
                  t.report.mse >= std::max(10.0 * cal.max_unmasked_mse, t.report.initial_mse);
    }
    cal.rows.push_back(row);
    if (row.fails) {
      cal.alpha = alpha;
      break;
    }
  }
  return cal;
}

// ---------------------------------------------------------------------------
// Model inversion

double mia_cost(const TinyModel& model, const ParamVector& x, std::size_t label) {
  if (label >= model.output_size()) throw ParameterError("mia: label out of range");
  return 1.0 - softmax(forward(model, x))[label];
}

MiaResult mia_attack(const TinyModel& model, std::size_t label, const MiaConfig& cfg) {
  if (cfg.t < 1) throw ParameterError("mia: t must be at least 1");
  if (cfg.zeta < 1) throw ParameterError("mia: zeta must be at least 1");
  if (!(cfg.lo < cfg.hi)) throw ParameterError("mia: empty input range");
  if (label >= model.output_size()) throw ParameterError("mia: label out of range");
  MiaResult r;
  ParamVector x(model.input_size());
  std::vector<ParamVector> visited{x};
  r.trace.push_back(mia_cost(model, x, label));
  for (std::uint32_t t = 1; t <= cfg.t; ++t) {
    // dC/do_j = -p_l (1[j = l] - p_j)
    const ParamVector p = softmax(forward(model, x));
    ParamVector og(p.dim());
    for (std::size_t j = 0; j < p.dim(); ++j) og[j] = p[label] * p[j];
    og[label] -= p[label];
    const ParamVector gx = backprop(model, x, og).input;
    kernels::axpy(-cfg.eta, gx.span(), x.span());
    for (auto& v : x) v = std::clamp(v, cfg.lo, cfg.hi);
    const double c = mia_cost(model, x, label);
    r.trace.push_back(c);
    visited.push_back(x);
    if (c <= cfg.gamma) break;
    const std::size_t from = t >= cfg.zeta ? t - cfg.zeta : 0;
    const double window_max = *std::max_element(r.trace.begin() + static_cast<std::ptrdiff_t>(from),
                                                r.trace.begin() + static_cast<std::ptrdiff_t>(t));
    if (c >= window_max) break;
  }
  r.argmin = static_cast<std::size_t>(std::min_element(r.trace.begin(), r.trace.end()) - r.trace.begin());
  r.x = visited[r.argmin];
  r.cost = r.trace[r.argmin];
  return r;
}

// ---------------------------------------------------------------------------
// GAN attack

std::string to_string(GanMode m) {
  switch (m) {
    case GanMode::Normal: return "normal";
    case GanMode::MaskedD: return "masked_d";
    case GanMode::PretrainedD: return "pretrained_d";
  }
  return "?";
}

GanMode gan_mode_from_string(const std::string& s) {
  if (s == "normal") return GanMode::Normal;
  if (s == "masked_d") return GanMode::MaskedD;
  if (s == "pretrained_d") return GanMode::PretrainedD;
  throw ParameterError("unknown GAN mode '" + s + "'");
}

json to_json(const GanReport& r) {
  return json{{"mode", to_string(r.mode)},         {"seed", r.seed},
              {"initial_loss", r.initial_loss},   {"min_loss_after", r.min_loss_after},
              {"converged", r.converged},         {"mode_distance", r.mode_distance},
              {"sample_mean", to_json(r.sample_mean)}, {"diverged", r.diverged},
              {"generator_steps", r.generator_loss.size()}};
}

namespace {

constexpr std::size_t kGanBlock = 10;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct Gan {
  TinyModel g;
  TinyModel d;
};

ParamVector noise(std::size_t dim, Rng& rng) {
  ParamVector z(dim);
  for (auto& v : z) v = rng.normal();
  return z;
}

// One discriminator step: real samples labelled real, generated ones fake.
TinyModel train_d(const TinyModel& d, const TinyModel& g, const data::GaussianMixture& target,
                  const GanSchedule& s, Rng& rng) {
  ParamVector grad(d.num_params());
  for (std::size_t b = 0; b < s.batch; ++b) {
    const ParamVector real = target.sample(rng);
    const double o_real = forward(d, real)[0];
    grad += backprop(d, real, ParamVector{sigmoid(o_real) - 1.0}).params;
    const ParamVector fake = forward(g, noise(s.noise_dim, rng));
    const double o_fake = forward(d, fake)[0];
    grad += backprop(d, fake, ParamVector{sigmoid(o_fake)}).params;
  }
  ParamVector w = d.params();
  kernels::axpy(-s.eta_d / static_cast<double>(2 * s.batch), grad.span(), w.span());
  return d.with_params(std::move(w));
}

// One generator step against `d` on the non-saturating loss -log D(G(z)).
// Returns its batch mean.
double train_g(TinyModel& g, const TinyModel& d, const GanSchedule& s, Rng& rng) {
  ParamVector grad(g.num_params());
  double loss = 0.0;
  for (std::size_t b = 0; b < s.batch; ++b) {
    const ParamVector z = noise(s.noise_dim, rng);
    const ParamVector x = forward(g, z);
    const double o = forward(d, x)[0];
    // -log sigmoid(o) = softplus(-o)
    loss += o > 0 ? std::log1p(std::exp(-o)) : -o + std::log1p(std::exp(o));
    const ParamVector dx = backprop(d, x, ParamVector{sigmoid(o) - 1.0}).input;
    grad += backprop(g, z, dx).params;
  }
  ParamVector w = g.params();
  kernels::axpy(-s.eta_g / static_cast<double>(s.batch), grad.span(), w.span());
  g = g.with_params(std::move(w));
  return loss / static_cast<double>(s.batch);
}

Gan fresh_gan(const GanSchedule& s, Rng& rng) {
  return Gan{TinyModel::initialized({s.noise_dim, s.hidden, 2}, Activation::Tanh, Activation::Identity, rng),
             TinyModel::initialized({2, s.hidden, 1}, Activation::Tanh, Activation::Identity, rng)};
}

}  // namespace

GanReport gan_attack(const data::GaussianMixture& target, GanMode mode, const GanSchedule& s, std::uint64_t seed) {
  if (s.epochs < 1 || s.steps_per_epoch < 1 || s.batch < 1 || s.noise_dim < 1 || s.hidden < 1) {
    throw ParameterError("gan: schedule sizes must be positive");
  }
  if (!(s.alpha >= 0.0 && s.alpha <= 1.0)) throw ParameterError("gan: alpha must lie in [0, 1]");
  if (target.means.empty()) throw ParameterError("gan: empty target mixture");
  const Rng master(seed);
  Rng init = master.split(1), train = master.split(2), mask = master.split(3), eval = master.split(4);
  Gan gan = fresh_gan(s, init);

  if (mode == GanMode::PretrainedD) {
    Rng other = master.split(5);
    Gan pre = fresh_gan(s, other);
    for (std::uint32_t k = 0; k < s.pretrain_epochs * s.steps_per_epoch; ++k) {
      gan.d = train_d(gan.d, pre.g, target, s, train);
      train_g(pre.g, gan.d, s, train);
    }
  }

  GanReport r;
  r.mode = mode;
  r.seed = seed;
  for (std::uint32_t e = 0; e < s.epochs && !r.diverged; ++e) {
    for (std::uint32_t k = 0; k < s.steps_per_epoch; ++k) {
      if (mode != GanMode::PretrainedD) gan.d = train_d(gan.d, gan.g, target, s, train);
      double loss;
      if (mode == GanMode::MaskedD) {
        ParamVector w = gan.d.params();
        w += uniform_mask(w.dim(), s.alpha, mask);
        loss = train_g(gan.g, gan.d.with_params(std::move(w)), s, train);
      } else {
        loss = train_g(gan.g, gan.d, s, train);
      }
      r.generator_loss.push_back(loss);
      if (!std::isfinite(loss) || !gan.g.params().all_finite() || !gan.d.params().all_finite()) {
        r.diverged = true;
        break;
      }
    }
  }

  // Means of consecutive 10-step blocks; the first block is the baseline.
  const std::size_t steps = r.generator_loss.size();
  r.initial_loss = std::numeric_limits<double>::infinity();
  r.min_loss_after = std::numeric_limits<double>::infinity();
  for (std::size_t b = 0; b + kGanBlock <= steps; b += kGanBlock) {
    const double m = std::accumulate(r.generator_loss.begin() + static_cast<std::ptrdiff_t>(b),
                                     r.generator_loss.begin() + static_cast<std::ptrdiff_t>(b + kGanBlock), 0.0) /
                     static_cast<double>(kGanBlock);
    if (b == 0) {
      r.initial_loss = m;
    } else {
      r.min_loss_after = std::min(r.min_loss_after, m);
    }
  }
  r.converged = !r.diverged && r.min_loss_after < r.initial_loss;

  const std::size_t samples = 500;
  r.sample_mean = ParamVector(2);
  double dist = 0.0;
  for (std::size_t i = 0; i < samples; ++i) {
    const ParamVector x = forward(gan.g, noise(s.noise_dim, eval));
    dist += target.nearest_mean_distance(x);
    r.sample_mean += x;
  }
  r.sample_mean *= 1.0 / static_cast<double>(samples);
  r.mode_distance = r.diverged ? std::numeric_limits<double>::infinity() : dist / static_cast<double>(samples);
  return r;
}

double sign_test_p(std::size_t wins, std::size_t trials) {
  if (wins > trials) throw ParameterError("sign test: wins exceed trials");
  // sum_{k >= wins} C(trials, k) / 2^trials, via log-gamma for stability
  double p = 0.0;
  for (std::size_t k = wins; k <= trials; ++k) {
    const double lc = std::lgamma(trials + 1.0) - std::lgamma(k + 1.0) - std::lgamma(trials - k + 1.0);
    p += std::exp(lc - static_cast<double>(trials) * std::log(2.0));
  }
  return std::min(1.0, p);
}

// ---------------------------------------------------------------------------
// Log-perplexity probe

std::vector<LpRow> lp_probe(const BigramLM& lm, std::span<const double> alphas,
                            std::span<const std::vector<std::size_t>> corpus, Rng& rng) {
  if (corpus.empty()) throw ParameterError("lp_probe: empty corpus");
  std::vector<LpRow> rows;
  for (double alpha : alphas) {
    const BigramLM m = lm.masked(alpha, rng);
    LpRow row{alpha, 0.0, 0.0, 0, corpus.size(), false};
    for (const auto& seq : corpus) {
      const auto lp = lm_log_perplexity(m, seq);
      if (lp.saturated) {
        ++row.saturated;
      } else {
        row.finite_mean_lp += lp.bits;
      }
    }
    const std::size_t finite = corpus.size() - row.saturated;
    row.finite_mean_lp = finite ? row.finite_mean_lp / static_cast<double>(finite)
                                : std::numeric_limits<double>::infinity();
    row.saturation = row.saturated > 0;
    row.mean_lp = row.saturation ? std::numeric_limits<double>::infinity() : row.finite_mean_lp;
    rows.push_back(row);
  }
  return rows;
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman_rho(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ParameterError("spearman: need two equal-length samples");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

// ---------------------------------------------------------------------------
// Images

void write_pgm(std::ostream& os, const ParamVector& pixels, std::size_t width, std::size_t height, double lo,
               double hi) {
  if (pixels.dim() != width * height) throw ParameterError("pgm: pixel count does not match the size");
  if (!(lo < hi)) throw ParameterError("pgm: empty value range");
  os << "P5\n" << width << ' ' << height << "\n255\n";
  for (double v : pixels) {
    const double u = (std::clamp(v, lo, hi) - lo) / (hi - lo);
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(u * 255.0))));
  }
}

}  // namespace flsec
