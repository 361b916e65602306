#pragma once

// Federated training loops: FedAvg, FedAvg with a uniform weight mask, DP-SGD
// and DP-SGD with a mask, plus a basic-composition privacy ledger.

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "flsec/aggregators.hpp"
#include "flsec/models.hpp"
#include "flsec/numeric.hpp"

namespace flsec {

struct FedConfig {
  std::uint32_t n = 10;
  std::uint32_t t_global = 1;
  std::uint32_t t_local = 1;
  double eta = 0.1;
  double alpha = 0.0;
  agg::AggregatorSpec aggregator;
  LossKind loss = LossKind::CrossEntropy;
  std::uint64_t seed = 0;
  // Mean weighted by client dataset size. Only valid with the Mean rule.
  bool weighted = false;

  // Server-announced minimum number of clients per aggregation (0 = none).
  // When set, each client derives its mask width from it, see implied_alpha().
  std::uint32_t announced_threshold = 0;
  // Largest standard deviation of the averaged mask a client will accept on
  // the global model.
  double noise_tolerance = 0.01;
  // A client refuses to take part when the derived alpha falls below this.
  double client_min_alpha = 0.0;

  // Throws ConfigError naming the offending field.
  void validate() const;
  // Alpha each client uses: `alpha`, or the threshold-derived value.
  double effective_alpha() const;
};

nlohmann::json to_json(const FedConfig& c);
FedConfig fed_config_from_json(const nlohmann::json& j);

// The mean of m masks drawn from U[-a, a] has standard deviation a / sqrt(3m),
// so a client aiming for `tolerance` at threshold m uses
// a = min(1, tolerance * sqrt(3m)).
double implied_alpha(double tolerance, std::uint32_t threshold);

// T_local full-batch SGD steps on the client's data.
ParamVector client_update(const TinyModel& model, const Batch& data, std::uint32_t t_local,
                          double eta, LossKind loss = LossKind::CrossEntropy);

// client_update followed by one mask U[-alpha, alpha] on the final weights.
ParamVector masked_client_update(const TinyModel& model, const Batch& data, std::uint32_t t_local,
                                 double eta, double alpha, Rng& rng,
                                 LossKind loss = LossKind::CrossEntropy);

ParamVector fedavg_round(std::span<const ParamVector> models);

// --- Differential privacy ---------------------------------------------------

struct DpConfig {
  double xi = 1.0;  // noise scale
  double gamma = 1.0;  // clipping threshold; +infinity disables clipping
  std::size_t h = 1;  // group size
  std::uint32_t t = 1;  // steps
  double eta = 0.1;
  double delta_target = 1e-5;
  LossKind loss = LossKind::CrossEntropy;

  // Throws ParameterError. dataset_size bounds h.
  void validate(std::size_t dataset_size) const;
};

struct PrivacyEntry {
  double epsilon = 0.0;
  double delta = 0.0;
  friend bool operator==(const PrivacyEntry&, const PrivacyEntry&) = default;
};

struct PrivacyLedger {
  std::vector<PrivacyEntry> entries;
  double epsilon_total = 0.0;
  double delta_total = 0.0;

  void add(PrivacyEntry e);
  friend bool operator==(const PrivacyLedger&, const PrivacyLedger&) = default;
};

// Basic composition: the sums of the entries' epsilons and deltas.
PrivacyEntry compose_privacy(std::span<const PrivacyEntry> entries);

// Per-step cost of one noisy group sum.
//
// Clipping bounds each example's contribution to the sum by gamma in L2, and
// the noise is N(0, xi^2 gamma^2 I). The Gaussian mechanism with sensitivity
// gamma and standard deviation sigma = xi * gamma is (e0, d0)-DP for
//   e0 = sqrt(2 ln(1.25 / d0)) * gamma / sigma = sqrt(2 ln(1.25 / d0)) / xi.
// Sampling a group with rate q = h / N amplifies this to
//   e = ln(1 + q (e^e0 - 1)),  d = q d0.
// d0 is chosen so the T steps together spend delta_target: d0 = delta_target / (q T).
// xi = 0 gives an infinite epsilon.
PrivacyEntry dp_step_cost(const DpConfig& cfg, std::size_t dataset_size);

// Fixed-size sample of h distinct indices from [0, n), ascending.
std::vector<std::size_t> sample_group(std::size_t n, std::size_t h, Rng& rng);

// Clips g in place to L2 norm at most gamma: g / max(1, |g| / gamma).
// Returns the norm before clipping.
double clip_gradient(ParamVector& g, double gamma);

struct DpResult {
  ParamVector params;
  PrivacyLedger ledger;
  // Largest per-example gradient norm after clipping, over all steps.
  double max_clipped_norm = 0.0;
};

// Step t draws its group from rng.split(2t) and its noise from rng.split(2t + 1).
// With xi = 0 no noise is drawn.
DpResult dp_sgd(const TinyModel& model, const Batch& data, const DpConfig& cfg, const Rng& rng);

// dp_sgd followed by one mask U[-alpha, alpha], drawn from rng.split(kMaskStream).
inline constexpr std::uint64_t kMaskStream = 0x4d41534b;
DpResult masked_dp_sgd(const TinyModel& model, const Batch& data, const DpConfig& cfg, double alpha,
                       const Rng& rng);

// --- Training loop ------------------------------------------------------------

struct RoundMetrics {
  std::uint32_t round = 0;
  std::uint32_t n = 0;
  double alpha = 0.0;
  double mean_local_loss = 0.0;
  double global_loss = 0.0;
  double mean_local_accuracy = 0.0;
  double global_accuracy = 0.0;
};

struct FedRunResult {
  TinyModel model;
  std::vector<RoundMetrics> rounds;
};

// Clients run in id order; client i in round r masks with
// Rng(seed).split(r).split(i). Accuracies are measured on `eval` (local ones
// on the masked local models). Worker momentum, when configured, applies to
// the per-client update w_global - w_local and the server steps by the
// aggregated momentum.
FedRunResult run_fedavg(const TinyModel& initial, std::span<const Batch> clients,
                        const FedConfig& cfg, const Batch& eval);

inline constexpr int kRoundCsvVersion = 1;
// "# flsec.fedavg.rounds v1" followed by
// round,n,alpha,mean_local_loss,global_loss,mean_local_accuracy,global_accuracy
void write_round_csv(std::ostream& os, std::span<const RoundMetrics> rows);

// --- Masking a pretrained model -------------------------------------------------

struct GlyphTaskConfig {
  std::vector<std::size_t> layers{64, 16, 16, 16, 16, 16, 10};
  std::size_t train_size = 2000;
  std::size_t test_size = 1000;
  double pixel_noise = 0.15;
  int max_shift = 1;
  double eta = 0.3;
  std::uint32_t epochs = 150;
  std::size_t minibatch = 20;
  std::uint64_t seed = 42;
};

struct GlyphTask {
  TinyModel model;
  Batch train;
  Batch test;
  double baseline = 0.0;
};

// Trains the tanh MLP with minibatch SGD on glyph samples.
GlyphTask pretrain_glyph_task(const GlyphTaskConfig& cfg = {});

struct MaskingCell {
  std::uint32_t n = 0;
  double alpha = 0.0;
  std::uint64_t seed = 0;
  double local_accuracy_mean = 0.0;
  double local_accuracy_max = 0.0;
  double global_accuracy = 0.0;
  double baseline = 0.0;
  // max-abs difference between the masked and unmasked aggregates
  double deviation = 0.0;
};

// n clients each hold the pretrained weights and add their own mask, drawn
// from Rng(seed).split(i). Local accuracy is measured on the first
// min(n, local_evals) masked models; global accuracy on their mean.
MaskingCell masking_cell(const TinyModel& pretrained, const Batch& test, std::uint32_t n, double alpha,
                         std::uint64_t seed, std::size_t local_evals = 10);

// Largest alpha whose seed-averaged global accuracy stays within `slack` of
// the baseline. Cells with other n are ignored; 0 when none qualifies.
double tolerated_alpha(std::span<const MaskingCell> cells, std::uint32_t n, double slack);

}  // namespace flsec
