#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flsec/numeric.hpp"

namespace flsec {

enum class Activation : std::uint8_t { Sigmoid = 0, Relu = 1, Tanh = 2, Identity = 3 };
enum class LossKind : std::uint8_t { CrossEntropy = 0, Mse = 1 };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

// Fully connected network with manual backprop. Parameters live in one flat
// vector, layer by layer: row-major weights (out x in) followed by biases.
// Hidden layers use `hidden`, the final layer uses `output`.
class TinyModel {
 public:
  TinyModel(std::vector<std::size_t> layer_sizes, Activation hidden, Activation output,
            ParamVector params);

  static TinyModel zeros(std::vector<std::size_t> layer_sizes, Activation hidden,
                         Activation output);
  // Weights and biases uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in)].
  static TinyModel initialized(std::vector<std::size_t> layer_sizes, Activation hidden,
                               Activation output, Rng& rng);
  static std::size_t param_count(std::span<const std::size_t> layer_sizes);

  const std::vector<std::size_t>& layer_sizes() const { return sizes_; }
  std::size_t num_layers() const { return sizes_.size() - 1; }
  std::size_t input_size() const { return sizes_.front(); }
  std::size_t output_size() const { return sizes_.back(); }
  std::size_t num_params() const { return params_.dim(); }
  Activation hidden_activation() const { return hidden_; }
  Activation output_activation() const { return output_; }
  Activation activation_of(std::size_t layer) const {
    return layer + 1 == num_layers() ? output_ : hidden_;
  }

  const ParamVector& params() const { return params_; }
  ParamVector flatten() const { return params_; }
  TinyModel with_params(ParamVector params) const;

  std::size_t weight_offset(std::size_t layer) const { return offsets_[layer]; }
  std::size_t bias_offset(std::size_t layer) const {
    return offsets_[layer] + sizes_[layer] * sizes_[layer + 1];
  }

 private:
  std::vector<std::size_t> sizes_;
  std::vector<std::size_t> offsets_;
  Activation hidden_;
  Activation output_;
  ParamVector params_;
};

// Examples plus either class labels or per-example target vectors. For
// cross-entropy a target vector is a (soft) class distribution; for mse it is
// the regression target. Labels under mse mean one-hot targets.
struct Batch {
  std::vector<ParamVector> inputs;
  std::vector<std::size_t> labels;
  std::vector<ParamVector> targets;

  std::size_t size() const { return inputs.size(); }
  Batch example(std::size_t i) const;
  void validate(const TinyModel& model) const;
};

struct LossAndGradient {
  double loss = 0.0;
  ParamVector gradient;
};

struct Gradients {
  ParamVector params;
  ParamVector input;
};

ParamVector forward(const TinyModel& model, const ParamVector& x);

// Reverse pass for one example given dLoss/dOutput.
Gradients backprop(const TinyModel& model, const ParamVector& x, const ParamVector& output_grad);

// Loss of one output vector and its derivative with respect to that output.
struct OutputLoss {
  double loss = 0.0;
  ParamVector output_grad;
};
OutputLoss output_loss(const ParamVector& output, const Batch& batch, std::size_t example,
                       LossKind kind);

// Batch-averaged loss and parameter gradient. The gradient is the in-order sum
// of per-example gradients scaled by 1/h.
LossAndGradient backward(const TinyModel& model, const Batch& batch, LossKind loss);

// Loss of one example together with parameter and input gradients.
struct ExampleGradients {
  double loss = 0.0;
  Gradients grads;
};
ExampleGradients backward_example(const TinyModel& model, const Batch& batch, std::size_t i,
                                  LossKind loss);

double evaluate_loss(const TinyModel& model, const Batch& batch, LossKind loss);

TinyModel sgd_step(const TinyModel& model, const Batch& batch, double eta,
                   LossKind loss = LossKind::CrossEntropy);

ParamVector softmax(const ParamVector& logits);
std::size_t argmax(const ParamVector& v);
double accuracy(const TinyModel& model, std::span<const ParamVector> inputs,
                std::span<const std::size_t> labels);

// Checkpoint layout (little-endian): "FLTM" u32 version(1) u32 n_sizes,
// n_sizes x u64, u8 hidden, u8 output, then the flat parameters as an
// embedded ParamVector record.
void write_checkpoint(std::ostream& os, const TinyModel& model);
TinyModel read_checkpoint(std::istream& is);
nlohmann::json to_json(const TinyModel& model);
TinyModel model_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Bigram language model.
//
// Each row of the V x V weight table holds next-token logits divided by
// `gain`; logits = gain * weights. The gain stands for the amplification a
// deep language model applies between its weights and its output logits, so
// a uniform mask on the weights moves logits by up to gain * alpha.
class BigramLM {
 public:
  BigramLM(std::size_t vocab, std::vector<double> weights, double gain = 1.0);

  static BigramLM uniform(std::size_t vocab, double gain = 1.0);
  // Maximum-likelihood bigram counts with add-`smoothing` smoothing.
  static BigramLM fit(std::span<const std::vector<std::size_t>> corpus, std::size_t vocab,
                      double smoothing, double gain);

  std::size_t vocab() const { return vocab_; }
  double gain() const { return gain_; }
  const std::vector<double>& weights() const { return weights_; }

  BigramLM masked(double alpha, Rng& rng) const;
  // Softmax of row `prev`, in double precision.
  std::vector<double> row_probabilities(std::size_t prev) const;

 private:
  std::size_t vocab_;
  std::vector<double> weights_;
  double gain_;
};

// Probabilities below the smallest positive single-precision value are zero in
// the model's working precision; such a transition makes LP infinite.
inline constexpr double kLmProbabilityFloor = 1.401298464324817e-45;

struct LogPerplexity {
  double bits = 0.0;
  bool saturated = false;
};

// LP = sum_i -log2 Pr(x_i | x_{i-1}). The first token is scored against
// `context` when given, otherwise against a uniform prior.
LogPerplexity lm_log_perplexity(const BigramLM& lm, std::span<const std::size_t> tokens,
                                std::optional<std::size_t> context = std::nullopt);

}  // namespace flsec
