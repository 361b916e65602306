#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "flsec/aggregators.hpp"
#include "flsec/errors.hpp"

using namespace flsec;
using namespace flsec::agg;

namespace {

std::vector<ParamVector> scalars(std::initializer_list<double> xs) {
  std::vector<ParamVector> out;
  for (double x : xs) out.push_back(ParamVector({x}));
  return out;
}

std::vector<ParamVector> random_set(Rng& rng, std::size_t n, std::size_t dim, double spread = 1.0) {
  std::vector<ParamVector> out;
  for (std::size_t i = 0; i < n; ++i) {
    ParamVector v(dim);
    for (auto& x : v) x = spread * rng.normal();
    out.push_back(std::move(v));
  }
  return out;
}

double sq(const ParamVector& a, const ParamVector& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

// Krum by definition: for each candidate, the minimum over every subset of
// the other inputs of the right size, found by enumerating bitmasks.
// Ties go to the lowest index, or to the lexicographically smaller vector.
std::size_t krum_brute(const std::vector<ParamVector>& vs, std::size_t m, bool by_value = false) {
  const std::size_t n = vs.size();
  std::size_t best = 0;
  double best_score = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    double score = std::numeric_limits<double>::infinity();
    for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
      if (mask & (1u << i) || static_cast<std::size_t>(__builtin_popcount(mask)) != m) continue;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (mask & (1u << j)) s += sq(vs[i], vs[j]);
      }
      score = std::min(score, s);
    }
    const bool tie_win = by_value && score == best_score &&
                         std::lexicographical_compare(vs[i].begin(), vs[i].end(), vs[best].begin(), vs[best].end());
    if (score < best_score || tie_win) {
      best_score = score;
      best = i;
    }
  }
  return best;
}

// Bulyan by definition with Krum selection: repeated brute-force Krum on the
// shrinking pool, then per coordinate the size-zeta subset minimising the
// summed distance to the median, found by enumeration.
ParamVector bulyan_brute(std::vector<ParamVector> pool, std::size_t d) {
  const std::size_t n = pool.size();
  const std::size_t gamma = n - 2 * d, zeta = gamma - 2 * d;
  std::vector<ParamVector> sel;
  while (sel.size() < gamma) {
    const std::size_t r = pool.size();
    const std::size_t m = r >= 3 ? r - 2 : 1;
    const std::size_t i = r == 1 ? 0 : krum_brute(pool, m, true);
    sel.push_back(pool[i]);
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(i));
  }
  ParamVector out(sel[0].dim());
  for (std::size_t c = 0; c < out.dim(); ++c) {
    std::vector<double> col;
    for (const auto& v : sel) col.push_back(v[c]);
    std::vector<double> s = col;
    std::sort(s.begin(), s.end());
    const double med = gamma % 2 ? s[gamma / 2] : 0.5 * (s[gamma / 2 - 1] + s[gamma / 2]);
    double best = std::numeric_limits<double>::infinity(), best_mean = 0.0;
    for (std::uint32_t mask = 0; mask < (1u << gamma); ++mask) {
      if (static_cast<std::size_t>(__builtin_popcount(mask)) != zeta) continue;
      double cost = 0.0, sum = 0.0;
      for (std::size_t j = 0; j < gamma; ++j) {
        if (mask & (1u << j)) {
          cost += std::abs(col[j] - med);
          sum += col[j];
        }
      }
      if (cost < best) {
        best = cost;
        best_mean = sum / static_cast<double>(zeta);
      }
    }
    out[c] = best_mean;
  }
  return out;
}

bool in_box(const ParamVector& v, const std::vector<ParamVector>& honest) {
  for (std::size_t c = 0; c < v.dim(); ++c) {
    double lo = honest[0][c], hi = honest[0][c];
    for (const auto& h : honest) {
      lo = std::min(lo, h[c]);
      hi = std::max(hi, h[c]);
    }
    if (v[c] < lo - 1e-9 || v[c] > hi + 1e-9) return false;
  }
  return true;
}

std::vector<AggregatorSpec> all_rules() {
  std::vector<AggregatorSpec> out;
  for (auto r : {Rule::Mean, Rule::Krum, Rule::GeometricMedian, Rule::Bulyan, Rule::TrimmedMean, Rule::CoordMedian,
                 Rule::CenteredClip}) {
    AggregatorSpec s;
    s.rule = r;
    s.delta = 0.1;
    s.zeta = 0.2;
    s.tau = 0.5;
    s.clip_iters = 3;
    out.push_back(s);
  }
  return out;
}

}  // namespace

TEST_CASE("krum on +-1 returns one of the inputs") {
  const auto vs = scalars({1, -1, 1, -1, 1});
  CHECK(mean(vs)[0] == doctest::Approx(0.2));
  const double k = krum(vs, 0.0)[0];
  CHECK((k == 1.0 || k == -1.0));
  const double m = coord_median(vs)[0];
  CHECK((m == 1.0 || m == -1.0));
  for (std::size_t n : {3u, 7u, 9u, 11u}) {
    std::vector<ParamVector> alt;
    for (std::size_t i = 0; i < n; ++i) alt.push_back(ParamVector({i % 2 ? -1.0 : 1.0}));
    CHECK(std::abs(krum(alt, 0.0)[0]) == 1.0);
    CHECK(std::abs(coord_median(alt)[0]) == 1.0);
  }
}

TEST_CASE("krum matches the exhaustive score oracle") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto vs = random_set(rng, 6, 3, 0.1);
    ParamVector far(3, 50.0);
    vs.insert(vs.begin() + trial % 7, far);
    for (double delta : {0.0, 0.15, 0.3}) {
      const std::size_t excluded = static_cast<std::size_t>(std::floor(delta * 7));
      const std::size_t m = 7 - excluded - 2;
      CHECK(krum_index(vs, delta) == krum_brute(vs, m));
      CHECK(krum(vs, delta) != far);
    }
  }
  const std::vector<ParamVector> same(4, ParamVector({2.0, 3.0}));
  CHECK(krum(same, 0.0) == same[0]);
  CHECK(krum_index(same, 0.0) == 0);
  CHECK_THROWS_AS(krum(scalars({1, 2}), 0.0), ParameterError);
  CHECK_THROWS_AS(krum(scalars({1, 2, 3, 4}), 0.5), ParameterError);
}

TEST_CASE("geometric median") {
  const std::vector<ParamVector> square{{0, 0}, {2, 0}, {0, 2}, {2, 2}};
  const auto c = geometric_median(square, 1000, 1e-10);
  CHECK(c[0] == doctest::Approx(1.0).epsilon(1e-8));
  CHECK(c[1] == doctest::Approx(1.0).epsilon(1e-8));

  // 1-D: grid scan of the summed absolute deviation.
  const auto line = scalars({0, 1, 10});
  double best_x = 0, best = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= 100000; ++i) {
    const double x = i * 1e-4;
    const double cost = std::abs(x) + std::abs(x - 1) + std::abs(x - 10);
    if (cost < best) {
      best = cost;
      best_x = x;
    }
  }
  CHECK(geometric_median(line, 10000, 1e-10)[0] == doctest::Approx(best_x).epsilon(1e-6));

  CHECK(geometric_median(scalars({4.5}), 10, 1e-8)[0] == doctest::Approx(4.5));
  // Starting point (the mean) lands on an input: the perturbation moves it off.
  const auto on = geometric_median(scalars({-1, 0, 1}), 1000, 1e-9);
  CHECK(std::abs(on[0]) < 1e-6);
}

TEST_CASE("bulyan") {
  const std::vector<ParamVector> same(7, ParamVector({1.5, -2.0}));
  AggregatorSpec inner;
  inner.rule = Rule::Krum;
  CHECK(bulyan(same, inner, 1) == same[0]);

  Rng rng(9);
  const auto vs = random_set(rng, 5, 4);
  const auto d0 = bulyan(vs, inner, 0);
  const auto m = mean(vs);
  for (std::size_t c = 0; c < 4; ++c) CHECK(d0[c] == doctest::Approx(m[c]).epsilon(1e-12));

  for (int trial = 0; trial < 10; ++trial) {
    auto honest = random_set(rng, 6, 3, 0.2);
    ParamVector bad(3);
    for (auto& x : bad) x = 100.0 + rng.normal();
    auto all = honest;
    all.insert(all.begin() + trial % 7, bad);
    const auto got = bulyan(all, inner, 1);
    const auto want = bulyan_brute(all, 1);
    for (std::size_t c = 0; c < 3; ++c) CHECK(got[c] == doctest::Approx(want[c]).epsilon(1e-12));
    CHECK(in_box(got, honest));
  }
  CHECK_THROWS_AS(bulyan(random_set(rng, 6, 2), inner, 1), ParameterError);
  AggregatorSpec nested;
  nested.rule = Rule::Bulyan;
  CHECK_THROWS_AS(bulyan(random_set(rng, 7, 2), nested, 1), ParameterError);

  AggregatorSpec gm;
  gm.rule = Rule::GeometricMedian;
  CHECK(bulyan(same, gm, 1) == same[0]);
}

TEST_CASE("trimmed mean") {
  CHECK(trimmed_mean(scalars({1, 2, 3, 100}), 0.25)[0] == doctest::Approx(2.5));
  Rng rng(2);
  const auto vs = random_set(rng, 9, 5);
  const auto m = mean(vs);
  const auto t0 = trimmed_mean(vs, 0.0);
  for (std::size_t c = 0; c < 5; ++c) CHECK(t0[c] == doctest::Approx(m[c]).epsilon(1e-12));

  // Second implementation: repeatedly strike the current min and max.
  for (int trial = 0; trial < 20; ++trial) {
    const auto set = random_set(rng, 11, 4);
    const double zeta = 0.1 * (trial % 5);
    const auto got = trimmed_mean(set, zeta);
    const std::size_t t = static_cast<std::size_t>(std::floor(zeta * 11));
    for (std::size_t c = 0; c < 4; ++c) {
      std::vector<double> col;
      for (const auto& v : set) col.push_back(v[c]);
      for (std::size_t k = 0; k < t; ++k) {
        col.erase(std::min_element(col.begin(), col.end()));
        col.erase(std::max_element(col.begin(), col.end()));
      }
      const double want = std::accumulate(col.begin(), col.end(), 0.0) / static_cast<double>(col.size());
      CHECK(got[c] == doctest::Approx(want).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(trimmed_mean(scalars({1, 2}), 0.5), ParameterError);
}

TEST_CASE("coordinate median") {
  const std::vector<ParamVector> vs{{1, 5}, {2, 4}, {3, 3}};
  CHECK(coord_median(vs) == ParamVector({2, 4}));
  CHECK(coord_median(scalars({1, 2, 3, 10}))[0] == 2.5);
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto set = random_set(rng, 7 + trial % 2, 3);
    const auto got = coord_median(set);
    for (std::size_t c = 0; c < 3; ++c) {
      // A median has at least half the values on each side.
      std::size_t below = 0, above = 0;
      for (const auto& v : set) {
        below += v[c] <= got[c];
        above += v[c] >= got[c];
      }
      CHECK(2 * below >= set.size());
      CHECK(2 * above >= set.size());
    }
  }
}

TEST_CASE("centered clip") {
  const auto two = scalars({0, 10});
  CHECK(centered_clip(two, ParamVector({0.0}), 1.0, 1)[0] == 0.5);
  Rng rng(8);
  const auto vs = random_set(rng, 6, 3);
  const ParamVector v0(3, 0.25);
  CHECK(centered_clip(vs, v0, 0.0, 5) == v0);
  const auto m = mean(vs);
  const auto big = centered_clip(vs, v0, 1e9, 1);
  for (std::size_t c = 0; c < 3; ++c) CHECK(big[c] == doctest::Approx(m[c]).epsilon(1e-12));
  CHECK(centered_clip(vs, m, std::numeric_limits<double>::infinity(), 1) == centered_clip(vs, m, 1e300, 1));
}

TEST_CASE("worker momentum") {
  const ParamVector g({1.0, -2.0}), prev({5.0, 5.0});
  CHECK(worker_momentum(g, prev, 0.0) == g);
  CHECK(worker_momentum(g, prev, 1.0) == prev);
  ParamVector beta(2);
  for (int t = 0; t < 200; ++t) beta = worker_momentum(g, beta, 0.9);
  CHECK(std::abs(beta[0] - 1.0) < 1e-6);
  CHECK(std::abs(beta[1] + 2.0) < 1e-6);
  CHECK_THROWS_AS(worker_momentum(g, prev, 1.5), ParameterError);
}

TEST_CASE("every rule is permutation invariant and fixes identical inputs") {
  Rng rng(12);
  for (const auto& spec : all_rules()) {
    CAPTURE(to_string(spec.rule));
    const std::vector<ParamVector> same(9, ParamVector({0.5, -1.0, 2.0}));
    const auto fixed = aggregate(spec, same);
    for (std::size_t c = 0; c < 3; ++c) CHECK(fixed[c] == doctest::Approx(same[0][c]).epsilon(1e-9));

    auto vs = random_set(rng, 9, 4);
    const auto base = aggregate(spec, vs);
    for (int p = 0; p < 5; ++p) {
      for (std::size_t i = vs.size(); i > 1; --i) std::swap(vs[i - 1], vs[rng.uniform_below(i)]);
      const auto again = aggregate(spec, vs);
      for (std::size_t c = 0; c < 4; ++c) CHECK(again[c] == doctest::Approx(base[c]).epsilon(1e-9));
    }
  }
}

TEST_CASE("one huge outlier breaks the mean but not the robust rules") {
  Rng rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<ParamVector> honest;
    for (int i = 0; i < 9; ++i) {
      ParamVector v(5);
      for (auto& x : v) x = rng.normal();
      v *= 1.0 / v.norm2();
      honest.push_back(v);
    }
    auto all = honest;
    all.insert(all.begin() + trial, ParamVector(5, 1e6));
    CHECK((mean(all) - mean(honest)).norm2() > 1e4);
    CHECK(in_box(krum(all, 0.1), honest));
    CHECK(in_box(trimmed_mean(all, 0.1), honest));
    CHECK(in_box(coord_median(all), honest));
    CHECK(in_box(geometric_median(all, 1000, 1e-10), honest));
  }
}

TEST_CASE("averaging rules keep mask cancellation") {
  // Masked minus unmasked output for n=1000 uniform masks on [-alpha, alpha]
  // stays within c * 5 * alpha / sqrt(3n) per coordinate, with c = 2.
  const double alpha = 0.5, c = 2.0;
  const std::size_t n = 1000, dim = 8;
  Rng rng(33);
  std::vector<ParamVector> clean, masked;
  for (std::size_t i = 0; i < n; ++i) {
    ParamVector w(dim);
    for (auto& x : w) x = 1.0 + 0.05 * rng.normal();
    clean.push_back(w);
    masked.push_back(w + uniform_mask(dim, alpha, rng));
  }
  const double bound = c * 5.0 * alpha / std::sqrt(3.0 * n);
  AggregatorSpec clip;
  clip.rule = Rule::CenteredClip;
  clip.tau = 10.0;
  clip.clip_iters = 2;
  AggregatorSpec tm;
  tm.rule = Rule::TrimmedMean;
  tm.zeta = 0.1;
  for (const auto& spec : {AggregatorSpec{}, tm, clip}) {
    CAPTURE(to_string(spec.rule));
    const auto diff = aggregate(spec, masked) - aggregate(spec, clean);
    CHECK(diff.max_abs() < bound);
  }
}

TEST_CASE("spec validation and JSON") {
  AggregatorSpec s;
  s.rule = Rule::Bulyan;
  s.d = 2;
  s.inner = std::make_shared<AggregatorSpec>();
  s.inner->rule = Rule::GeometricMedian;
  s.momentum = 0.9;
  const auto j = to_json(s);
  CHECK(to_json(aggregator_from_json(j)) == j);

  auto bad = [](nlohmann::json j, const std::string& field) {
    try {
      aggregator_from_json(j);
      FAIL("no error for " << field);
    } catch (const ConfigError& e) {
      CHECK(e.field() == field);
    }
  };
  bad({{"rule", "trimmed_mean"}, {"zeta", 0.5}}, "aggregator.zeta");
  bad({{"rule", "centered_clip"}, {"tau", -1.0}}, "aggregator.tau");
  bad({{"rule", "bulyan"}, {"inner", {{"rule", "bulyan"}}}}, "aggregator.inner");
  bad({{"rule", "median"}}, "aggregator.rule");
  bad({{"rule", "mean"}, {"colour", 1}}, "aggregator.colour");
  bad({{"rule", "mean"}, {"momentum", 2.0}}, "aggregator.momentum");
}
