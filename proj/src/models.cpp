#include "flsec/models.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>

#include "flsec/errors.hpp"
#include "flsec/kernels.hpp"

namespace flsec {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Relu: return "relu";
    case Activation::Tanh: return "tanh";
    case Activation::Identity: return "identity";
  }
  return "identity";
}

Activation activation_from_string(const std::string& s) {
  if (s == "sigmoid") return Activation::Sigmoid;
  if (s == "relu") return Activation::Relu;
  if (s == "tanh") return Activation::Tanh;
  if (s == "identity") return Activation::Identity;
  throw ParameterError("unknown activation '" + s + "'");
}

namespace {

inline double activate(Activation a, double z) {
  switch (a) {
    case Activation::Sigmoid: return 1.0 / (1.0 + std::exp(-z));
    case Activation::Relu: return z > 0.0 ? z : 0.0;
    case Activation::Tanh: return std::tanh(z);
    case Activation::Identity: return z;
  }
  return z;
}

// Derivative expressed through the activation output.
inline double activation_slope(Activation a, double out) {
  switch (a) {
    case Activation::Sigmoid: return out * (1.0 - out);
    case Activation::Relu: return out > 0.0 ? 1.0 : 0.0;
    case Activation::Tanh: return 1.0 - out * out;
    case Activation::Identity: return 1.0;
  }
  return 1.0;
}

// Activations of every layer, a[0] = x.
std::vector<std::vector<double>> forward_trace(const TinyModel& m, const ParamVector& x) {
  if (x.dim() != m.input_size()) {
    throw ParameterError("forward: input has dimension " + std::to_string(x.dim()) +
                         ", model expects " + std::to_string(m.input_size()));
  }
  const auto& sizes = m.layer_sizes();
  const double* p = m.params().values().data();
  std::vector<std::vector<double>> acts;
  acts.reserve(sizes.size());
  acts.push_back(x.values());
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    const std::size_t in = sizes[l], out = sizes[l + 1];
    const double* w = p + m.weight_offset(l);
    const double* b = p + m.bias_offset(l);
    const Activation act = m.activation_of(l);
    std::vector<double> next(out);
    const std::span<const double> prev(acts.back());
    for (std::size_t o = 0; o < out; ++o) {
      const double z = b[o] + kernels::dot(std::span<const double>(w + o * in, in), prev);
      next[o] = activate(act, z);
    }
    acts.push_back(std::move(next));
  }
  return acts;
}

ParamVector target_for(const Batch& batch, std::size_t i, std::size_t out_dim) {
  if (!batch.targets.empty()) return batch.targets[i];
  ParamVector onehot(out_dim);
  onehot[batch.labels[i]] = 1.0;
  return onehot;
}

}  // namespace

// ---------------------------------------------------------------------------

std::size_t TinyModel::param_count(std::span<const std::size_t> sizes) {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) n += sizes[l] * sizes[l + 1] + sizes[l + 1];
  return n;
}

TinyModel::TinyModel(std::vector<std::size_t> layer_sizes, Activation hidden, Activation output,
                     ParamVector params)
    : sizes_(std::move(layer_sizes)), hidden_(hidden), output_(output), params_(std::move(params)) {
  if (sizes_.size() < 2) throw ParameterError("TinyModel needs at least input and output sizes");
  for (auto s : sizes_)
    if (s == 0) throw ParameterError("TinyModel layer sizes must be positive");
  if (params_.dim() != param_count(sizes_)) {
    throw ParameterError("TinyModel expects " + std::to_string(param_count(sizes_)) +
                         " parameters, got " + std::to_string(params_.dim()));
  }
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    offsets_.push_back(off);
    off += sizes_[l] * sizes_[l + 1] + sizes_[l + 1];
  }
}

TinyModel TinyModel::zeros(std::vector<std::size_t> layer_sizes, Activation hidden,
                           Activation output) {
  const std::size_t n = param_count(layer_sizes);
  return TinyModel(std::move(layer_sizes), hidden, output, ParamVector(n));
}

TinyModel TinyModel::initialized(std::vector<std::size_t> layer_sizes, Activation hidden,
                                 Activation output, Rng& rng) {
  TinyModel m = zeros(std::move(layer_sizes), hidden, output);
  auto& p = m.params_.values();
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(m.sizes_[l]));
    const std::size_t begin = m.offsets_[l];
    const std::size_t end = begin + m.sizes_[l] * m.sizes_[l + 1] + m.sizes_[l + 1];
    for (std::size_t i = begin; i < end; ++i) p[i] = rng.uniform(-bound, bound);
  }
  return m;
}

TinyModel TinyModel::with_params(ParamVector params) const {
  return TinyModel(sizes_, hidden_, output_, std::move(params));
}

// ---------------------------------------------------------------------------

Batch Batch::example(std::size_t i) const {
  Batch b;
  b.inputs.push_back(inputs.at(i));
  if (!labels.empty()) b.labels.push_back(labels.at(i));
  if (!targets.empty()) b.targets.push_back(targets.at(i));
  return b;
}

void Batch::validate(const TinyModel& model) const {
  if (inputs.empty()) throw ParameterError("batch is empty");
  if (labels.empty() == targets.empty()) {
    throw ParameterError("batch needs exactly one of labels or targets");
  }
  if (!labels.empty() && labels.size() != inputs.size()) {
    throw ParameterError("batch label count differs from input count");
  }
  if (!targets.empty() && targets.size() != inputs.size()) {
    throw ParameterError("batch target count differs from input count");
  }
  for (const auto& x : inputs) {
    if (x.dim() != model.input_size()) {
      throw ParameterError("batch input dimension " + std::to_string(x.dim()) +
                           " differs from model input size " + std::to_string(model.input_size()));
    }
  }
  for (auto y : labels) {
    if (y >= model.output_size()) throw ParameterError("batch label out of range");
  }
  for (const auto& t : targets) {
    if (t.dim() != model.output_size()) throw ParameterError("batch target dimension mismatch");
  }
}

ParamVector forward(const TinyModel& model, const ParamVector& x) {
  return ParamVector(std::move(forward_trace(model, x).back()));
}

Gradients backprop(const TinyModel& model, const ParamVector& x, const ParamVector& output_grad) {
  if (output_grad.dim() != model.output_size()) {
    throw ParameterError("backprop: output gradient dimension mismatch");
  }
  const auto acts = forward_trace(model, x);
  const auto& sizes = model.layer_sizes();
  const double* p = model.params().values().data();
  Gradients g{ParamVector(model.num_params()), ParamVector(model.input_size())};
  double* gp = g.params.values().data();

  std::vector<double> delta = output_grad.values();
  for (std::size_t l = model.num_layers(); l-- > 0;) {
    const Activation act = model.activation_of(l);
    const auto& out_act = acts[l + 1];
    for (std::size_t o = 0; o < delta.size(); ++o) delta[o] *= activation_slope(act, out_act[o]);

    const std::size_t in = sizes[l], out = sizes[l + 1];
    const double* w = p + model.weight_offset(l);
    double* gw = gp + model.weight_offset(l);
    double* gb = gp + model.bias_offset(l);
    std::vector<double> prev_delta(in, 0.0);
    for (std::size_t o = 0; o < out; ++o) {
      gb[o] += delta[o];
      if (delta[o] == 0.0) continue;
      kernels::axpy(delta[o], acts[l], std::span<double>(gw + o * in, in));
      kernels::axpy(delta[o], std::span<const double>(w + o * in, in), prev_delta);
    }
    delta = std::move(prev_delta);
  }
  g.input = ParamVector(std::move(delta));
  return g;
}

OutputLoss output_loss(const ParamVector& output, const Batch& batch, std::size_t i,
                       LossKind kind) {
  const std::size_t k = output.dim();
  OutputLoss r{0.0, ParamVector(k)};
  if (kind == LossKind::Mse) {
    const ParamVector t = target_for(batch, i, k);
    const double inv_k = 1.0 / static_cast<double>(k);
    for (std::size_t j = 0; j < k; ++j) {
      const double d = output[j] - t[j];
      r.loss += d * d * inv_k;
      r.output_grad[j] = 2.0 * d * inv_k;
    }
    return r;
  }
  // Softmax cross-entropy on the raw outputs.
  const double mx = *std::max_element(output.begin(), output.end());
  double z = 0.0;
  for (std::size_t j = 0; j < k; ++j) z += std::exp(output[j] - mx);
  const double log_z = mx + std::log(z);
  if (batch.targets.empty()) {
    const std::size_t y = batch.labels[i];
    r.loss = log_z - output[y];
    for (std::size_t j = 0; j < k; ++j) r.output_grad[j] = std::exp(output[j] - log_z);
    r.output_grad[y] -= 1.0;
  } else {
    const ParamVector& t = batch.targets[i];
    double mass = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      r.loss -= t[j] * (output[j] - log_z);
      mass += t[j];
    }
    for (std::size_t j = 0; j < k; ++j) r.output_grad[j] = std::exp(output[j] - log_z) * mass - t[j];
  }
  return r;
}

ExampleGradients backward_example(const TinyModel& model, const Batch& batch, std::size_t i,
                                  LossKind loss) {
  const ParamVector out = forward(model, batch.inputs[i]);
  const OutputLoss ol = output_loss(out, batch, i, loss);
  return ExampleGradients{ol.loss, backprop(model, batch.inputs[i], ol.output_grad)};
}

LossAndGradient backward(const TinyModel& model, const Batch& batch, LossKind loss) {
  batch.validate(model);
  LossAndGradient r{0.0, ParamVector(model.num_params())};
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto eg = backward_example(model, batch, i, loss);
    r.loss += eg.loss;
    r.gradient += eg.grads.params;
  }
  const double inv_h = 1.0 / static_cast<double>(batch.size());
  r.loss *= inv_h;
  r.gradient *= inv_h;
  return r;
}

double evaluate_loss(const TinyModel& model, const Batch& batch, LossKind loss) {
  batch.validate(model);
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    total += output_loss(forward(model, batch.inputs[i]), batch, i, loss).loss;
  }
  return total / static_cast<double>(batch.size());
}

TinyModel sgd_step(const TinyModel& model, const Batch& batch, double eta, LossKind loss) {
  if (!(eta >= 0.0)) throw ParameterError("sgd_step: eta must be non-negative");
  const auto lg = backward(model, batch, loss);
  ParamVector w = model.params();
  kernels::axpy(-eta, lg.gradient.span(), w.span());
  return model.with_params(std::move(w));
}

ParamVector softmax(const ParamVector& logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  ParamVector p(logits.dim());
  double z = 0.0;
  for (std::size_t j = 0; j < logits.dim(); ++j) z += (p[j] = std::exp(logits[j] - mx));
  p *= 1.0 / z;
  return p;
}

std::size_t argmax(const ParamVector& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

double accuracy(const TinyModel& model, std::span<const ParamVector> inputs,
                std::span<const std::size_t> labels) {
  if (inputs.size() != labels.size() || inputs.empty()) {
    throw ParameterError("accuracy: inputs and labels must be non-empty and aligned");
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) correct += argmax(forward(model, inputs[i])) == labels[i];
  return static_cast<double>(correct) / static_cast<double>(inputs.size());
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
std::uint64_t get_uint(std::istream& is, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = is.get();
    if (c == EOF) throw ParameterError("checkpoint: truncated input");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

}  // namespace

void write_checkpoint(std::ostream& os, const TinyModel& model) {
  os.write("FLTM", 4);
  put_u32(os, 1);
  put_u32(os, static_cast<std::uint32_t>(model.layer_sizes().size()));
  for (auto s : model.layer_sizes()) put_u64(os, s);
  os.put(static_cast<char>(model.hidden_activation()));
  os.put(static_cast<char>(model.output_activation()));
  write_binary(os, model.params());
}

TinyModel read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "FLTM", 4) != 0) {
    throw ParameterError("checkpoint: bad magic");
  }
  if (get_uint(is, 4) != 1) throw ParameterError("checkpoint: unsupported version");
  const auto n = get_uint(is, 4);
  if (n < 2 || n > 64) throw ParameterError("checkpoint: implausible layer count");
  std::vector<std::size_t> sizes(n);
  for (auto& s : sizes) s = get_uint(is, 8);
  const auto hidden = static_cast<Activation>(get_uint(is, 1));
  const auto output = static_cast<Activation>(get_uint(is, 1));
  if (static_cast<int>(hidden) > 3 || static_cast<int>(output) > 3) {
    throw ParameterError("checkpoint: unknown activation code");
  }
  return TinyModel(std::move(sizes), hidden, output, read_param_vector(is));
}

nlohmann::json to_json(const TinyModel& model) {
  return nlohmann::json{{"type", "TinyModel"},
                        {"layer_sizes", model.layer_sizes()},
                        {"hidden_activation", to_string(model.hidden_activation())},
                        {"output_activation", to_string(model.output_activation())},
                        {"params", model.params().values()}};
}

TinyModel model_from_json(const nlohmann::json& j) {
  return TinyModel(j.at("layer_sizes").get<std::vector<std::size_t>>(),
                   activation_from_string(j.at("hidden_activation").get<std::string>()),
                   activation_from_string(j.at("output_activation").get<std::string>()),
                   ParamVector(j.at("params").get<std::vector<double>>()));
}

// ---------------------------------------------------------------------------
// Bigram LM

BigramLM::BigramLM(std::size_t vocab, std::vector<double> weights, double gain)
    : vocab_(vocab), weights_(std::move(weights)), gain_(gain) {
  if (vocab_ == 0) throw ParameterError("BigramLM: vocabulary must be non-empty");
  if (weights_.size() != vocab_ * vocab_) throw ParameterError("BigramLM: weight table must be V x V");
  if (!(gain_ > 0.0)) throw ParameterError("BigramLM: gain must be positive");
}

BigramLM BigramLM::uniform(std::size_t vocab, double gain) {
  return BigramLM(vocab, std::vector<double>(vocab * vocab, 0.0), gain);
}

BigramLM BigramLM::fit(std::span<const std::vector<std::size_t>> corpus, std::size_t vocab,
                       double smoothing, double gain) {
  if (!(smoothing > 0.0)) throw ParameterError("BigramLM::fit: smoothing must be positive");
  std::vector<double> counts(vocab * vocab, 0.0);
  for (const auto& seq : corpus) {
    for (std::size_t i = 1; i < seq.size(); ++i) {
      if (seq[i] >= vocab || seq[i - 1] >= vocab) throw ParameterError("BigramLM::fit: token out of range");
      counts[seq[i - 1] * vocab + seq[i]] += 1.0;
    }
  }
  std::vector<double> w(vocab * vocab);
  for (std::size_t r = 0; r < vocab; ++r) {
    double row = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) row += counts[r * vocab + c];
    const double denom = row + smoothing * static_cast<double>(vocab);
    for (std::size_t c = 0; c < vocab; ++c) {
      w[r * vocab + c] = std::log((counts[r * vocab + c] + smoothing) / denom) / gain;
    }
  }
  return BigramLM(vocab, std::move(w), gain);
}

BigramLM BigramLM::masked(double alpha, Rng& rng) const {
  const ParamVector mask = uniform_mask(weights_.size(), alpha, rng);
  std::vector<double> w = weights_;
  for (std::size_t i = 0; i < w.size(); ++i) w[i] += mask[i];
  return BigramLM(vocab_, std::move(w), gain_);
}

std::vector<double> BigramLM::row_probabilities(std::size_t prev) const {
  if (prev >= vocab_) throw ParameterError("BigramLM: token out of range");
  std::vector<double> p(vocab_);
  const double* row = weights_.data() + prev * vocab_;
  double mx = row[0];
  for (std::size_t c = 1; c < vocab_; ++c) mx = std::max(mx, row[c]);
  double z = 0.0;
  for (std::size_t c = 0; c < vocab_; ++c) z += (p[c] = std::exp(gain_ * (row[c] - mx)));
  for (auto& x : p) x /= z;
  return p;
}

LogPerplexity lm_log_perplexity(const BigramLM& lm, std::span<const std::size_t> tokens,
                                std::optional<std::size_t> context) {
  if (tokens.empty()) throw ParameterError("lm_log_perplexity: empty sequence");
  LogPerplexity lp;
  auto score = [&](double p) {
    if (p < kLmProbabilityFloor) {
      lp.saturated = true;
      lp.bits = std::numeric_limits<double>::infinity();
    } else if (!lp.saturated) {
      lp.bits += -std::log2(p);
    }
  };
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= lm.vocab()) throw ParameterError("lm_log_perplexity: token out of range");
    if (i == 0 && !context) {
      score(1.0 / static_cast<double>(lm.vocab()));
    } else {
      const std::size_t prev = i == 0 ? *context : tokens[i - 1];
      score(lm.row_probabilities(prev)[tokens[i]]);
    }
  }
  return lp;
}

}  // namespace flsec
