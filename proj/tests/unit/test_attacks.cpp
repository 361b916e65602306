#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "flsec/attacks.hpp"
#include "flsec/errors.hpp"

using namespace flsec;

namespace {

double cosine(const ParamVector& a, const ParamVector& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.dim(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

// Closed-form gradient of D for a single linear layer o = Wx + b under mse,
// with the label parameters used directly as the target t.
struct LinearOracle {
  ParamVector dx, dt;
};

LinearOracle linear_mse_gradient(const TinyModel& m, const ParamVector& x, const ParamVector& t,
                                 const ParamVector& known) {
  const std::size_t in = m.input_size(), k = m.output_size();
  const auto& p = m.params();
  auto W = [&](std::size_t i, std::size_t j) { return p[i * in + j]; };
  std::vector<double> r(k), eb(k), ewx(k);
  std::vector<std::vector<double>> ew(k, std::vector<double>(in));
  for (std::size_t i = 0; i < k; ++i) {
    double o = p[k * in + i];
    for (std::size_t j = 0; j < in; ++j) o += W(i, j) * x[j];
    r[i] = 2.0 * (o - t[i]) / static_cast<double>(k);
  }
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < in; ++j) ew[i][j] = r[i] * x[j] - known[i * in + j];
    eb[i] = r[i] - known[k * in + i];
    ewx[i] = eb[i];
    for (std::size_t j = 0; j < in; ++j) ewx[i] += ew[i][j] * x[j];
  }
  LinearOracle o{ParamVector(in), ParamVector(k)};
  const double c = 2.0 / static_cast<double>(k);
  for (std::size_t mi = 0; mi < in; ++mi) {
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i) s += c * W(i, mi) * ewx[i] + ew[i][mi] * r[i];
    o.dx[mi] = 2.0 * s;
  }
  for (std::size_t i = 0; i < k; ++i) o.dt[i] = -2.0 * c * ewx[i];
  return o;
}

}  // namespace

TEST_CASE("gradient distance is zero at the true example") {
  Rng rng(1);
  const auto m = TinyModel::initialized({64, 7, 10}, Activation::Sigmoid, Activation::Identity, rng);
  const Batch data = data::glyph_batch(10, 0.1, 1, rng);
  for (std::size_t i = 0; i < 10; ++i) {
    const Batch one = data.example(i);
    const ParamVector known = backward(m, one, LossKind::CrossEntropy).gradient;
    ParamVector onehot(10);
    onehot[one.labels[0]] = 1.0;
    CHECK(gradient_distance(m, one.inputs[0], onehot, known, LossKind::CrossEntropy) == 0.0);
  }
}

TEST_CASE("finite-difference DLG gradient matches the closed form on a linear layer") {
  Rng rng(2);
  const auto m = TinyModel::initialized({6, 4}, Activation::Identity, Activation::Identity, rng);
  ParamVector known(m.num_params());
  for (auto& v : known) v = rng.normal();
  for (int trial = 0; trial < 5; ++trial) {
    ParamVector x(6), t(4);
    for (auto& v : x) v = rng.normal();
    for (auto& v : t) v = rng.normal();
    const auto fd = dlg_gradient(m, x, t, known, LossKind::Mse, 1e-4);
    const auto ref = linear_mse_gradient(m, x, t, known);
    for (std::size_t i = 0; i < 6; ++i) CHECK(fd.dx[i] == doctest::Approx(ref.dx[i]).epsilon(1e-6));
    for (std::size_t i = 0; i < 4; ++i) CHECK(fd.dy[i] == doctest::Approx(ref.dt[i]).epsilon(1e-6));
  }
}

TEST_CASE("dlg reconstructs an unmasked glyph and fails at alpha 0.05") {
  DlgSetup setup;
  DlgConfig cfg;
  const auto plain = dlg_trial(setup, cfg, 0.0, 0);
  CHECK(plain.report.success);
  CHECK(plain.report.mse < 0.01);
  CHECK(plain.report.trace.size() == cfg.t);
  CHECK(plain.report.trace.back() < plain.report.trace.front());

  const auto masked = dlg_trial(setup, cfg, 0.05, 0);
  CHECK_FALSE(masked.report.success);
  CHECK(masked.report.mse >= 10.0 * plain.report.mse);
  CHECK(masked.report.mse >= masked.report.initial_mse);
}

TEST_CASE("dlg contracts") {
  Rng rng(3);
  const auto m = TinyModel::initialized({4, 3, 2}, Activation::Sigmoid, Activation::Identity, rng);
  Batch truth;
  truth.inputs = {ParamVector{0.1, -0.2, 0.3, 0.0}};
  truth.labels = {1};
  const ParamVector known = backward(m, truth, LossKind::CrossEntropy).gradient;
  DlgConfig cfg;
  cfg.t = 5;

  ParamVector bad = known;
  bad[0] = std::numeric_limits<double>::infinity();
  const auto r = dlg_attack(m, bad, truth, cfg);
  CHECK(r.aborted);
  CHECK(r.diagnostic.find("non-finite") != std::string::npos);
  CHECK_FALSE(r.success);

  Batch two = truth;
  two.inputs.push_back(truth.inputs[0]);
  two.labels.push_back(0);
  CHECK_THROWS_AS(dlg_attack(m, known, two, cfg), ParameterError);
  CHECK_THROWS_AS(dlg_attack(m, ParamVector(3), truth, cfg), ParameterError);
  cfg.fd_step = 0.0;
  CHECK_THROWS_AS(dlg_attack(m, known, truth, cfg), ParameterError);

  cfg = DlgConfig{};
  cfg.t = 20;
  const auto a = dlg_attack(m, known, truth, cfg);
  const auto b = dlg_attack(m, known, truth, cfg);
  CHECK(a.x == b.x);
  CHECK(a.trace == b.trace);
  CHECK(a.success == (a.mse <= cfg.success_mse));
}

TEST_CASE("dlg calibration stops at the first failing alpha") {
  DlgSetup setup;
  setup.layers = {64, 4, 10};
  DlgConfig cfg;
  cfg.t = 150;
  const std::vector<double> grid{0.5, 0.01};
  const std::vector<std::uint64_t> seeds{1, 2};
  const auto cal = calibrate_dlg_alpha(setup, cfg, grid, seeds);
  REQUIRE_FALSE(cal.rows.empty());
  CHECK(cal.rows.front().alpha == 0.01);
  for (std::size_t i = 0; i + 1 < cal.rows.size(); ++i) CHECK_FALSE(cal.rows[i].fails);
  if (cal.alpha >= 0.0) CHECK(cal.rows.back().fails);
  CHECK(cal.unmasked.size() == 2);
}

TEST_CASE("mia stops immediately on a flat cost") {
  const auto m = TinyModel::zeros({5, 3}, Activation::Identity, Activation::Identity);
  MiaConfig cfg;
  cfg.zeta = 1;
  const auto r = mia_attack(m, 1, cfg);
  CHECK(r.argmin == 0);
  CHECK(r.x == ParamVector(5));
  CHECK(r.cost == doctest::Approx(2.0 / 3.0));
  CHECK(r.trace.size() == 2);
}

TEST_CASE("mia on a linear softmax classifier follows the class direction") {
  Rng rng(4);
  const std::size_t in = 16, k = 5;
  auto m = TinyModel::initialized({in, k}, Activation::Identity, Activation::Identity, rng);
  ParamVector p = m.params();
  std::fill(p.begin() + static_cast<std::ptrdiff_t>(k * in), p.end(), 0.0);
  m = m.with_params(p);
  MiaConfig cfg;
  cfg.t = 5;
  cfg.eta = 0.01;
  cfg.lo = -10.0;
  cfg.hi = 10.0;
  for (std::size_t label = 0; label < k; ++label) {
    // At x = 0 the logits are equal, so -dC/dx is proportional to W_l - mean_j W_j.
    ParamVector dir(in);
    for (std::size_t j = 0; j < in; ++j) {
      double mean = 0.0;
      for (std::size_t c = 0; c < k; ++c) mean += p[c * in + j];
      dir[j] = p[label * in + j] - mean / static_cast<double>(k);
    }
    const auto r = mia_attack(m, label, cfg);
    CAPTURE(label);
    CHECK(r.argmin > 0);
    CHECK(cosine(r.x, dir) >= 0.99);
    for (std::size_t i = 0; i <= r.argmin; ++i) CHECK(r.trace[r.argmin] <= r.trace[i]);
  }
}

TEST_CASE("mia clamps into the input range and honours gamma") {
  Rng rng(5);
  const auto m = TinyModel::initialized({8, 6, 3}, Activation::Tanh, Activation::Identity, rng);
  MiaConfig cfg;
  cfg.eta = 5.0;
  cfg.t = 50;
  const auto r = mia_attack(m, 2, cfg);
  for (double v : r.x) CHECK((v >= -1.0 && v <= 1.0));
  for (std::size_t i = 0; i < r.trace.size(); ++i) CHECK(r.cost <= r.trace[i]);
  cfg.gamma = 1.0;
  CHECK(mia_attack(m, 2, cfg).trace.size() == 2);
  CHECK_THROWS_AS(mia_attack(m, 3, cfg), ParameterError);
}

TEST_CASE("gan attack: normal training beats the degraded modes") {
  const auto target = data::GaussianMixture::ring(1, 1.0, 0.05);
  GanSchedule s;
  const auto n = gan_attack(target, GanMode::Normal, s, 0);
  const auto m = gan_attack(target, GanMode::MaskedD, s, 0);
  const auto p = gan_attack(target, GanMode::PretrainedD, s, 0);
  CHECK(n.mode_distance < m.mode_distance);
  CHECK(n.mode_distance < p.mode_distance);
  CHECK(n.mode_distance < 0.2);
  CHECK(n.generator_loss.size() == s.epochs * s.steps_per_epoch);
  CHECK_FALSE(n.diverged);
  const auto again = gan_attack(target, GanMode::MaskedD, s, 0);
  CHECK(again.generator_loss == m.generator_loss);
  CHECK(again.mode_distance == m.mode_distance);
  CHECK(n.converged == (n.min_loss_after < n.initial_loss));
}

TEST_CASE("gan attack validation and mode names") {
  const auto target = data::GaussianMixture::ring(1, 1.0, 0.05);
  GanSchedule s;
  s.epochs = 0;
  CHECK_THROWS_AS(gan_attack(target, GanMode::Normal, s, 0), ParameterError);
  s = GanSchedule{};
  s.alpha = 2.0;
  CHECK_THROWS_AS(gan_attack(target, GanMode::MaskedD, s, 0), ParameterError);
  for (auto mode : {GanMode::Normal, GanMode::MaskedD, GanMode::PretrainedD}) {
    CHECK(gan_mode_from_string(to_string(mode)) == mode);
  }
  CHECK_THROWS_AS(gan_mode_from_string("dcgan"), ParameterError);
}

TEST_CASE("sign test") {
  CHECK(sign_test_p(10, 10) == doctest::Approx(1.0 / 1024));
  CHECK(sign_test_p(9, 10) == doctest::Approx(11.0 / 1024));
  CHECK(sign_test_p(8, 10) == doctest::Approx(56.0 / 1024));
  CHECK(sign_test_p(0, 10) == doctest::Approx(1.0));
  CHECK_THROWS_AS(sign_test_p(11, 10), ParameterError);
}

TEST_CASE("lp probe") {
  Rng rng(6);
  const auto src = data::MarkovSource::random(16, 4, rng);
  const auto train = data::markov_corpus(src, 200, 50, rng);
  const auto held = data::markov_corpus(src, 30, 20, rng);
  const auto lm = BigramLM::fit(train, 16, 0.1, 80.0);
  const std::vector<double> alphas{0.0, 0.1, 0.5, 1.0};
  Rng mask(7);
  const auto rows = lp_probe(lm, alphas, held, mask);
  REQUIRE(rows.size() == 4);

  double plain = 0.0;
  for (const auto& s : held) plain += lm_log_perplexity(lm, s).bits;
  CHECK(rows[0].mean_lp == doctest::Approx(plain / held.size()).epsilon(1e-12));
  CHECK_FALSE(rows[0].saturation);
  CHECK(rows[1].mean_lp > rows[0].mean_lp);
  CHECK(rows[3].saturation);
  CHECK(std::isinf(rows[3].mean_lp));
  CHECK(rows[3].saturated > 0);
  CHECK_THROWS_AS(lp_probe(lm, alphas, std::vector<std::vector<std::size_t>>{}, mask), ParameterError);
}

TEST_CASE("spearman rho") {
  const std::vector<double> a{1, 2, 3, 4}, up{10, 20, 30, 40}, down{4, 3, 2, 1};
  CHECK(spearman_rho(a, up) == doctest::Approx(1.0));
  CHECK(spearman_rho(a, down) == doctest::Approx(-1.0));
  const std::vector<double> x{1, 2, 3}, ties{1, 1, 2};
  CHECK(spearman_rho(x, ties) == doctest::Approx(1.5 / std::sqrt(3.0)));
  const double inf = std::numeric_limits<double>::infinity();
  const std::vector<double> with_inf{1, 5, inf, inf};
  CHECK(spearman_rho(a, with_inf) == doctest::Approx(4.5 / std::sqrt(5.0 * 4.5)));
  CHECK_THROWS_AS(spearman_rho(a, x), ParameterError);
}

TEST_CASE("pgm output") {
  std::ostringstream os;
  write_pgm(os, ParamVector{-1.0, 0.0, 1.0, 2.0}, 2, 2);
  const std::string s = os.str();
  const std::string header = "P5\n2 2\n255\n";
  REQUIRE(s.size() == header.size() + 4);
  CHECK(s.substr(0, header.size()) == header);
  CHECK(static_cast<unsigned char>(s[header.size()]) == 0);
  CHECK(static_cast<unsigned char>(s[header.size() + 1]) == 128);
  CHECK(static_cast<unsigned char>(s[header.size() + 2]) == 255);
  CHECK(static_cast<unsigned char>(s[header.size() + 3]) == 255);
  CHECK_THROWS_AS(write_pgm(os, ParamVector(3), 2, 2), ParameterError);
}
