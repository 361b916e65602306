#pragma once

// Reconstruction and extraction attacks on tiny models: gradient matching
// (DLG), model inversion, the collaborative GAN attack and a log-perplexity
// probe for language models.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "flsec/datasets.hpp"
#include "flsec/models.hpp"
#include "flsec/numeric.hpp"

namespace flsec {

// --- Deep leakage from gradients -------------------------------------------

struct DlgConfig {
  std::uint32_t t = 2000;
  double eta = 0.1;
  std::uint64_t init_seed = 0;
  double fd_step = 1e-4;
  double success_mse = 0.01;
  LossKind loss = LossKind::CrossEntropy;

  void validate() const;  // ParameterError
};

struct ReconstructionReport {
  ParamVector x;  // reconstructed input
  ParamVector y;  // reconstructed label parameters
  double mse = 0.0;  // against the scoring truth
  double initial_mse = 0.0;  // of the Gaussian starting point
  std::vector<double> trace;  // D after each iteration
  bool success = false;
  bool aborted = false;
  std::string diagnostic;
  double wall_seconds = 0.0;
};

nlohmann::json to_json(const ReconstructionReport& r);

// Label parameters map to a training target: through softmax for
// cross-entropy, unchanged for mse.
ParamVector dlg_label_target(const ParamVector& y, LossKind loss);

// D = |grad_w L(f_w(x), target) - known|^2 for an explicit target vector.
double gradient_distance(const TinyModel& model, const ParamVector& x, const ParamVector& target,
                         const ParamVector& known, LossKind loss);

// D as a function of the label parameters.
double dlg_objective(const TinyModel& model, const ParamVector& x, const ParamVector& y,
                     const ParamVector& known, LossKind loss);

// Central finite differences of dlg_objective in x and y.
struct DlgGradient {
  ParamVector dx;
  ParamVector dy;
};
DlgGradient dlg_gradient(const TinyModel& model, const ParamVector& x, const ParamVector& y,
                         const ParamVector& known, LossKind loss, double h);

// Gradient descent on (x', y') from N(0, 1) initial values. `truth` (a
// single-example batch) is read only after the loop, to score the result.
ReconstructionReport dlg_attack(const TinyModel& model, const ParamVector& known_gradient,
                                const Batch& truth, const DlgConfig& cfg);

// One attack on one glyph example.
struct DlgSetup {
  std::vector<std::size_t> layers{64, 7, 10};
  Activation hidden = Activation::Sigmoid;
  double client_eta = 0.1;  // learning rate of the victim's local step
  double pixel_noise = 0.1;
};

struct DlgTrial {
  std::uint64_t seed = 0;
  double alpha = 0.0;
  ReconstructionReport report;
};

// The victim of one trial: model from Rng(seed).split(1), glyph example
// seed % 10 drawn from split(2), mask from split(3). `local` is the model the
// client sends, w - client_eta g plus the mask when alpha > 0.
struct DlgVictim {
  std::uint64_t seed = 0;
  double alpha = 0.0;
  TinyModel model;
  Batch truth;
  ParamVector gradient;
  ParamVector local;
  std::uint64_t init_seed = 0;  // attacker's starting point
};
DlgVictim dlg_victim(const DlgSetup& setup, LossKind loss, double alpha, std::uint64_t seed);

// Attack on a local model observed by the server, e.g. one recovered from a
// secure aggregation round: the gradient guess is (w - observed) / client_eta.
ReconstructionReport dlg_from_local(const DlgSetup& setup, const DlgVictim& victim, const ParamVector& observed,
                                    const DlgConfig& cfg);

// alpha = 0: the attacker sees the victim's gradient g. Otherwise it sees the
// masked local model w~ = w - client_eta g + U[-alpha, alpha] and uses
// (w - w~) / client_eta as the gradient.
DlgTrial dlg_trial(const DlgSetup& setup, const DlgConfig& cfg, double alpha, std::uint64_t seed);

struct DlgCalibrationRow {
  double alpha = 0.0;
  std::size_t successes = 0;
  double min_mse = 0.0;
  double max_initial_mse = 0.0;
  bool fails = false;
};

struct DlgCalibration {
  std::vector<DlgTrial> unmasked;
  double max_unmasked_mse = 0.0;
  std::vector<DlgCalibrationRow> rows;
  double alpha = -1.0;  // -1 when no grid value qualifies
};

// Smallest alpha of the grid at which no seed succeeds and every seed's MSE is
// at least max(10 x the worst unmasked MSE, that seed's random-guess MSE).
// The grid is scanned in increasing order and stops at the first hit.
DlgCalibration calibrate_dlg_alpha(const DlgSetup& setup, const DlgConfig& cfg, std::span<const double> grid,
                                   std::span<const std::uint64_t> seeds);

// --- Model inversion ----------------------------------------------------------

struct MiaConfig {
  std::uint32_t t = 500;
  std::uint32_t zeta = 10;  // plateau window
  double gamma = 0.0;  // stop once the cost is at most this
  double eta = 0.1;
  double lo = -1.0;  // input range enforced after each step
  double hi = 1.0;
};

struct MiaResult {
  ParamVector x;
  double cost = 0.0;
  std::vector<double> trace;  // cost of every visited iterate, x_0 first
  std::size_t argmin = 0;
};

// Cost C(x) = 1 - softmax(f(x))[label]; the auxiliary term is zero.
double mia_cost(const TinyModel& model, const ParamVector& x, std::size_t label);

// Gradient descent on C from x_0 = 0, clamping into [lo, hi]. Stops after t
// steps, when C(x_t) >= max(C(x_{t-1}), ..., C(x_{t-zeta})), or when
// C(x_t) <= gamma. Returns the visited iterate of least cost (earliest on ties).
MiaResult mia_attack(const TinyModel& model, std::size_t label, const MiaConfig& cfg);

// --- GAN attack ------------------------------------------------------------------

enum class GanMode { Normal, MaskedD, PretrainedD };
std::string to_string(GanMode m);
GanMode gan_mode_from_string(const std::string& s);

struct GanSchedule {
  std::uint32_t epochs = 40;
  std::uint32_t steps_per_epoch = 25;
  std::uint32_t pretrain_epochs = 5;  // PretrainedD
  double alpha = 0.5;  // MaskedD
  std::size_t batch = 32;
  double eta_g = 0.2;
  double eta_d = 0.2;
  std::size_t noise_dim = 2;
  std::size_t hidden = 16;
};

struct GanReport {
  GanMode mode = GanMode::Normal;
  std::uint64_t seed = 0;
  std::vector<double> generator_loss;  // one value per generator step
  double initial_loss = 0.0;  // mean of the first 10 steps
  double min_loss_after = 0.0;  // least later 10-step block mean
  bool converged = false;  // some later block mean fell below initial_loss
  double mode_distance = 0.0;  // mean distance of samples to the nearest mean
  ParamVector sample_mean;
  bool diverged = false;
};

nlohmann::json to_json(const GanReport& r);

// Collaborative GAN attack on a 2-D Gaussian mixture standing in for the
// victim's class. The discriminator is the shared model: the victim trains it
// on real samples (label real), the attacker trains it on generated samples
// relabelled fake and updates its generator through it.
//   Normal:      alternating updates from the start.
//   MaskedD:     the attacker only ever sees the discriminator plus a fresh
//                U[-alpha, alpha] mask, drawn again for every step.
//   PretrainedD: the discriminator first trains for pretrain_epochs in a GAN
//                with a different generator. A fresh generator then attacks
//                it and can no longer influence its weights.
// Generator loss is -log D(G(z)). `converged` compares 10-step block means of
// the loss with the first block.
GanReport gan_attack(const data::GaussianMixture& target, GanMode mode, const GanSchedule& schedule,
                     std::uint64_t seed);

// One-sided sign test: P(X >= wins) for X ~ Binomial(trials, 1/2).
double sign_test_p(std::size_t wins, std::size_t trials);

// --- Log-perplexity probe --------------------------------------------------------

struct LpRow {
  double alpha = 0.0;
  double mean_lp = 0.0;  // +infinity when any sequence saturates
  double finite_mean_lp = 0.0;  // over the sequences that did not saturate
  std::size_t saturated = 0;
  std::size_t sequences = 0;
  bool saturation = false;
};

// For each alpha, masks the model once with fresh noise from `rng` and scores
// every corpus sequence.
std::vector<LpRow> lp_probe(const BigramLM& lm, std::span<const double> alphas,
                            std::span<const std::vector<std::size_t>> corpus, Rng& rng);

// Spearman rank correlation with average ranks for ties.
double spearman_rho(std::span<const double> a, std::span<const double> b);

// --- Images ----------------------------------------------------------------------

// Binary greyscale PGM (P5). Values are clamped to [lo, hi] and mapped onto 0..255.
void write_pgm(std::ostream& os, const ParamVector& pixels, std::size_t width, std::size_t height,
               double lo = -1.0, double hi = 1.0);

}  // namespace flsec
