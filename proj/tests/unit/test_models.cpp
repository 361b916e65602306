#include <doctest.h>

#include <cmath>
#include <sstream>

#include "flsec/datasets.hpp"
#include "flsec/errors.hpp"
#include "flsec/models.hpp"

using namespace flsec;

namespace {

double act_ref(Activation a, double z) {
  if (a == Activation::Sigmoid) return 1.0 / (1.0 + std::exp(-z));
  if (a == Activation::Tanh) return std::tanh(z);
  if (a == Activation::Relu) return z > 0 ? z : 0.0;
  return z;
}

// Straight-line forward pass written without the library's helpers.
std::vector<double> forward_ref(const TinyModel& m, std::vector<double> a) {
  const auto& p = m.params().values();
  std::size_t off = 0;
  const auto& s = m.layer_sizes();
  for (std::size_t l = 0; l + 1 < s.size(); ++l) {
    std::vector<double> next(s[l + 1]);
    for (std::size_t o = 0; o < s[l + 1]; ++o) {
      double z = p[off + s[l] * s[l + 1] + o];
      for (std::size_t i = 0; i < s[l]; ++i) z += p[off + o * s[l] + i] * a[i];
      next[o] = act_ref(l + 2 == s.size() ? m.output_activation() : m.hidden_activation(), z);
    }
    off += s[l] * s[l + 1] + s[l + 1];
    a = next;
  }
  return a;
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

Batch random_batch(const TinyModel& m, std::size_t h, bool soft, Rng& rng) {
  Batch b;
  for (std::size_t i = 0; i < h; ++i) {
    ParamVector x(m.input_size());
    for (auto& v : x) v = rng.uniform(-1, 1);
    b.inputs.push_back(x);
    if (soft) {
      ParamVector t(m.output_size());
      for (auto& v : t) v = rng.uniform01();
      b.targets.push_back(t);
    } else {
      b.labels.push_back(rng.uniform_below(m.output_size()));
    }
  }
  return b;
}

}  // namespace

TEST_CASE("forward trivial examples") {
  auto z = TinyModel::zeros({3, 4, 2}, Activation::Sigmoid, Activation::Sigmoid);
  auto y = forward(z, ParamVector{0.3, -2.0, 7.0});
  for (double v : y) CHECK(v == 0.5);

  TinyModel lin({1, 1}, Activation::Identity, Activation::Identity, ParamVector{2.0, 1.0});
  CHECK(forward(lin, ParamVector{3.0})[0] == 7.0);
  CHECK_THROWS_AS(forward(lin, ParamVector{1.0, 2.0}), ParameterError);
}

TEST_CASE("forward matches straight-line oracle") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto m = TinyModel::initialized({5, 7, 6, 3}, Activation::Tanh, Activation::Sigmoid, rng);
    ParamVector x(5);
    for (auto& v : x) v = rng.uniform(-2, 2);
    const auto got = forward(m, x);
    const auto want = forward_ref(m, x.values());
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-14));
  }
}

TEST_CASE("backward matches central finite differences across layer configurations") {
  const std::vector<std::vector<std::size_t>> shapes = {{3, 2}, {4, 5, 3}, {2, 8, 2}, {5, 4, 4, 3}};
  const Activation hidden[] = {Activation::Sigmoid, Activation::Tanh, Activation::Relu};
  const Activation output[] = {Activation::Sigmoid, Activation::Identity};
  const LossKind losses[] = {LossKind::CrossEntropy, LossKind::Mse};
  Rng rng(2024);
  double worst = 0.0;
  for (const auto& shape : shapes)
    for (auto ha : hidden)
      for (auto oa : output)
        for (auto loss : losses)
          for (bool soft : {false, true}) {
            auto m = TinyModel::initialized(shape, ha, oa, rng);
            const Batch b = random_batch(m, 3, soft, rng);
            const auto lg = backward(m, b, loss);
            const double h = 1e-5;
            for (int c = 0; c < 50; ++c) {
              const std::size_t k = rng.uniform_below(m.num_params());
              ParamVector p = m.params();
              p[k] += h;
              const double up = evaluate_loss(m.with_params(p), b, loss);
              p[k] -= 2 * h;
              const double dn = evaluate_loss(m.with_params(p), b, loss);
              worst = std::max(worst, rel_err(lg.gradient[k], (up - dn) / (2 * h)));
            }
          }
  CHECK(worst < 1e-4);
}

TEST_CASE("input gradient matches finite differences") {
  Rng rng(5);
  auto m = TinyModel::initialized({6, 5, 4}, Activation::Sigmoid, Activation::Sigmoid, rng);
  const Batch b = random_batch(m, 1, true, rng);
  const auto eg = backward_example(m, b, 0, LossKind::Mse);
  for (std::size_t i = 0; i < 6; ++i) {
    Batch bp = b, bm = b;
    bp.inputs[0][i] += 1e-5;
    bm.inputs[0][i] -= 1e-5;
    const double fd = (evaluate_loss(m, bp, LossKind::Mse) - evaluate_loss(m, bm, LossKind::Mse)) / 2e-5;
    CHECK(rel_err(eg.grads.input[i], fd) < 1e-4);
  }
}

TEST_CASE("mse gradient properties") {
  Rng rng(9);
  auto m = TinyModel::initialized({3, 4, 2}, Activation::Tanh, Activation::Identity, rng);
  Batch b = random_batch(m, 4, true, rng);
  Batch exact = b;
  for (std::size_t i = 0; i < b.size(); ++i) exact.targets[i] = forward(m, b.inputs[i]);
  CHECK(backward(m, exact, LossKind::Mse).gradient.max_abs() <= 1e-12);

  // Doubling every residual doubles the gradient.
  Batch doubled = b;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const auto out = forward(m, b.inputs[i]);
    for (std::size_t j = 0; j < out.dim(); ++j) doubled.targets[i][j] = out[j] - 2 * (out[j] - b.targets[i][j]);
  }
  const auto g1 = backward(m, b, LossKind::Mse).gradient;
  const auto g2 = backward(m, doubled, LossKind::Mse).gradient;
  for (std::size_t k = 0; k < g1.dim(); ++k) CHECK(g2[k] == doctest::Approx(2 * g1[k]).epsilon(1e-9));
}

TEST_CASE("sgd_step") {
  Rng rng(3);
  auto m = TinyModel::initialized({2, 3, 2}, Activation::Sigmoid, Activation::Sigmoid, rng);
  const Batch b = data::xor_batch();
  CHECK(sgd_step(m, b, 0.0).params() == m.params());
  CHECK_THROWS_AS(sgd_step(m, b, -1.0), ParameterError);
}

TEST_CASE("XOR 2-8-2 reaches full training accuracy") {
  Rng rng(1);
  auto m = TinyModel::initialized({2, 8, 2}, Activation::Sigmoid, Activation::Identity, rng);
  const Batch b = data::xor_batch();
  int steps = 0;
  for (; steps < 5000 && accuracy(m, b.inputs, b.labels) < 1.0; ++steps) m = sgd_step(m, b, 0.5);
  MESSAGE("XOR converged after " << steps << " steps");
  CHECK(accuracy(m, b.inputs, b.labels) == 1.0);
}

TEST_CASE("single linear neuron learns y = 2x") {
  Batch b;
  for (double x : {-1.0, -0.5, 0.25, 0.5, 1.0}) {
    b.inputs.push_back(ParamVector{x});
    b.targets.push_back(ParamVector{2 * x});
  }
  // Closed-form least squares for y = w x + c on noiseless data gives w = 2, c = 0.
  double sxx = 0, sxy = 0, sx = 0, sy = 0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const double x = b.inputs[i][0], y = b.targets[i][0];
    sxx += x * x; sxy += x * y; sx += x; sy += y;
  }
  const double n = static_cast<double>(b.size());
  const double w_ls = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  auto m = TinyModel::zeros({1, 1}, Activation::Identity, Activation::Identity);
  for (int t = 0; t < 2000; ++t) m = sgd_step(m, b, 0.1, LossKind::Mse);
  CHECK(std::abs(m.params()[0] - w_ls) < 1e-3);
  CHECK(std::abs(m.params()[0] - 2.0) < 1e-3);
}

TEST_CASE("softmax is a probability simplex") {
  Rng rng(8);
  for (int t = 0; t < 100; ++t) {
    ParamVector z(10);
    for (auto& v : z) v = rng.uniform(-50, 50);
    const auto p = softmax(z);
    double s = 0;
    for (double v : p) {
      CHECK(v >= 0.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
}

TEST_CASE("flatten and checkpoints round-trip exactly") {
  Rng rng(4);
  auto m = TinyModel::initialized({4, 6, 3}, Activation::Relu, Activation::Sigmoid, rng);
  const auto again = m.with_params(m.flatten());
  CHECK(again.params() == m.params());
  CHECK(TinyModel::param_count(m.layer_sizes()) == 4 * 6 + 6 + 6 * 3 + 3);

  std::stringstream ss;
  write_checkpoint(ss, m);
  const auto back = read_checkpoint(ss);
  CHECK(back.layer_sizes() == m.layer_sizes());
  CHECK(back.hidden_activation() == Activation::Relu);
  CHECK(back.output_activation() == Activation::Sigmoid);
  CHECK(back.params() == m.params());

  const auto j = model_from_json(to_json(m));
  CHECK(j.params() == m.params());

  std::stringstream bad("XXXX");
  CHECK_THROWS_AS(read_checkpoint(bad), ParameterError);
  CHECK_THROWS_AS(TinyModel({2, 2}, Activation::Relu, Activation::Relu, ParamVector(3)), ParameterError);
}

TEST_CASE("log perplexity examples") {
  const auto u = BigramLM::uniform(4);
  const std::vector<std::size_t> s = {0, 3, 1};
  CHECK(lm_log_perplexity(u, s).bits == doctest::Approx(6.0).epsilon(1e-12));

  std::vector<std::size_t> abab(40);
  for (std::size_t i = 0; i < abab.size(); ++i) abab[i] = i % 2;
  const std::vector<std::vector<std::size_t>> corpus = {abab};
  const auto lm = BigramLM::fit(corpus, 2, 0.5, 1.0);
  const std::vector<std::size_t> q1 = {0, 1, 0, 1}, q2 = {0, 0, 0, 0};
  CHECK(lm_log_perplexity(lm, q1).bits < lm_log_perplexity(lm, q2).bits);

  for (std::size_t r = 0; r < 2; ++r) {
    const auto p = lm.row_probabilities(r);
    CHECK(std::abs(p[0] + p[1] - 1.0) < 1e-9);
  }
  const std::vector<std::size_t> bad = {0, 7};
  CHECK_THROWS_AS(lm_log_perplexity(lm, bad), ParameterError);
}

TEST_CASE("log perplexity is additive across a split") {
  Rng rng(6);
  auto src = data::MarkovSource::random(6, 3, rng);
  const auto corpus = data::markov_corpus(src, 20, 30, rng);
  const auto lm = BigramLM::fit(corpus, 6, 0.1, 1.0);
  const auto& seq = corpus[0];
  for (std::size_t cut = 1; cut < seq.size(); cut += 7) {
    const std::span<const std::size_t> all(seq), s1 = all.first(cut), s2 = all.subspan(cut);
    const double whole = lm_log_perplexity(lm, all).bits;
    const double parts = lm_log_perplexity(lm, s1).bits + lm_log_perplexity(lm, s2, seq[cut - 1]).bits;
    CHECK(std::abs(whole - parts) < 1e-9);
  }
}

TEST_CASE("saturation below the single-precision floor") {
  // One logit gap of 200 nats gives exp(-200) ~ 1.4e-87, far below the floor.
  BigramLM lm(2, {0.0, -200.0, 0.0, 0.0}, 1.0);
  const std::vector<std::size_t> s = {0, 1};
  const auto lp = lm_log_perplexity(lm, s);
  CHECK(lp.saturated);
  CHECK(std::isinf(lp.bits));
  const std::vector<std::size_t> ok = {1, 0};
  CHECK_FALSE(lm_log_perplexity(lm, ok).saturated);
}

TEST_CASE("datasets") {
  const auto x = data::xor_batch();
  CHECK(x.size() == 4);
  Rng rng(12);
  const auto g = data::glyph_batch(50, 0.1, 1, rng);
  CHECK(g.size() == 50);
  CHECK(g.labels[13] == 3);
  for (const auto& v : g.inputs) {
    CHECK(v.dim() == 64);
    CHECK(v.max_abs() <= 1.0);
  }
  Rng a(3), b(3);
  CHECK(data::glyph_batch(5, 0.2, 1, a).inputs[4] == data::glyph_batch(5, 0.2, 1, b).inputs[4]);
  const auto parts = data::partition(g, 7);
  std::size_t total = 0;
  for (const auto& p : parts) total += p.size();
  CHECK(total == 50);

  const auto mix = data::GaussianMixture::ring(8, 2.0, 0.02);
  CHECK(mix.nearest_mean_distance(ParamVector{2.0, 0.0}) == doctest::Approx(0.0));
  const auto src = data::MarkovSource::random(5, 2, rng);
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 5; ++c) s += src.transition[r * 5 + c];
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}
