#include "flsec/aggregators.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "flsec/errors.hpp"
#include "flsec/kernels.hpp"

namespace flsec::agg {

using nlohmann::json;

std::string to_string(Rule r) {
  switch (r) {
    case Rule::Mean: return "mean";
    case Rule::Krum: return "krum";
    case Rule::GeometricMedian: return "geometric_median";
    case Rule::Bulyan: return "bulyan";
    case Rule::TrimmedMean: return "trimmed_mean";
    case Rule::CoordMedian: return "coord_median";
    case Rule::CenteredClip: return "centered_clip";
  }
  return "?";
}

Rule rule_from_string(const std::string& s) {
  for (auto r : {Rule::Mean, Rule::Krum, Rule::GeometricMedian, Rule::Bulyan, Rule::TrimmedMean, Rule::CoordMedian,
                 Rule::CenteredClip}) {
    if (to_string(r) == s) return r;
  }
  throw ConfigError("aggregator.rule", "unknown rule '" + s + "'");
}

void AggregatorSpec::validate() const {
  if (!(delta >= 0.0 && delta < 1.0)) throw ConfigError("aggregator.delta", "must lie in [0, 1)");
  if (max_iters < 1) throw ConfigError("aggregator.max_iters", "must be at least 1");
  if (!(tol > 0.0)) throw ConfigError("aggregator.tol", "must be positive");
  if (!(zeta >= 0.0 && zeta < 0.5)) throw ConfigError("aggregator.zeta", "must lie in [0, 0.5)");
  if (!(tau >= 0.0)) throw ConfigError("aggregator.tau", "must be non-negative");
  if (clip_iters < 1) throw ConfigError("aggregator.clip_iters", "must be at least 1");
  if (momentum && !(*momentum >= 0.0 && *momentum <= 1.0)) {
    throw ConfigError("aggregator.momentum", "must lie in [0, 1]");
  }
  if (inner) {
    if (inner->rule == Rule::Bulyan) throw ConfigError("aggregator.inner", "bulyan cannot nest bulyan");
    inner->validate();
  }
}

json to_json(const AggregatorSpec& s) {
  json j{{"rule", to_string(s.rule)}, {"delta", s.delta},  {"max_iters", s.max_iters},
         {"tol", s.tol},              {"d", s.d},          {"zeta", s.zeta},
         {"tau", s.tau},              {"clip_iters", s.clip_iters}};
  j["inner"] = s.inner ? to_json(*s.inner) : json(nullptr);
  j["momentum"] = s.momentum ? json(*s.momentum) : json(nullptr);
  return j;
}

AggregatorSpec aggregator_from_json(const json& j) {
  static const std::vector<std::string> keys = {"rule", "delta", "max_iters",  "tol",   "d",
                                                "zeta", "tau",   "clip_iters", "inner", "momentum"};
  if (!j.is_object()) throw ConfigError("aggregator", "must be an object");
  for (const auto& [k, v] : j.items()) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw ConfigError("aggregator." + k, "unknown key");
  }
  AggregatorSpec s;
  auto get = [&](const char* key, auto& out) {
    if (!j.contains(key) || j.at(key).is_null()) return;
    try {
      out = j.at(key).get<std::decay_t<decltype(out)>>();
    } catch (const json::exception&) {
      throw ConfigError(std::string("aggregator.") + key, "wrong type");
    }
  };
  std::string rule = "mean";
  get("rule", rule);
  s.rule = rule_from_string(rule);
  get("delta", s.delta);
  get("max_iters", s.max_iters);
  get("tol", s.tol);
  get("d", s.d);
  get("zeta", s.zeta);
  get("tau", s.tau);
  get("clip_iters", s.clip_iters);
  if (j.contains("inner") && !j.at("inner").is_null()) {
    s.inner = std::make_shared<AggregatorSpec>(aggregator_from_json(j.at("inner")));
  }
  if (j.contains("momentum") && !j.at("momentum").is_null()) {
    double m = 0.0;
    get("momentum", m);
    s.momentum = m;
  }
  s.validate();
  return s;
}

namespace {

std::size_t check_inputs(std::span<const ParamVector> vs, const char* who) {
  if (vs.empty()) throw ParameterError(std::string(who) + ": no input vectors");
  const std::size_t dim = vs.front().dim();
  for (const auto& v : vs) {
    if (v.dim() != dim) throw ParameterError(std::string(who) + ": dimension mismatch");
  }
  return dim;
}

double sqdist(const ParamVector& a, const ParamVector& b) { return kernels::squared_distance(a.span(), b.span()); }

double median_of(std::vector<double>& xs) {
  const std::size_t n = xs.size();
  std::sort(xs.begin(), xs.end());
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

// Strictly better score, or an equal score on a lexicographically smaller
// vector, so the choice does not depend on input order.
bool better(double s, const ParamVector& v, double best_s, const ParamVector& best_v) {
  if (s != best_s) return s < best_s;
  return std::lexicographical_compare(v.begin(), v.end(), best_v.begin(), best_v.end());
}

std::size_t nearest_input(std::span<const ParamVector> vs, const ParamVector& target) {
  std::size_t best = 0;
  double best_d = sqdist(vs[0], target);
  for (std::size_t i = 1; i < vs.size(); ++i) {
    const double d = sqdist(vs[i], target);
    if (better(d, vs[i], best_d, vs[best])) {
      best = i;
      best_d = d;
    }
  }
  return best;
}

// Neighbour count for a Krum score over n inputs.
std::size_t krum_neighbours(std::size_t n, double delta) {
  const auto excluded = static_cast<std::size_t>(std::floor(delta * static_cast<double>(n)));
  if (n < excluded + 3) {
    throw ParameterError("krum: need n >= floor(delta n) + 3, got n=" + std::to_string(n));
  }
  return n - excluded - 2;
}

double score_with(std::span<const ParamVector> vs, std::size_t i, std::size_t m) {
  std::vector<double> d;
  d.reserve(vs.size() - 1);
  for (std::size_t j = 0; j < vs.size(); ++j) {
    if (j != i) d.push_back(sqdist(vs[i], vs[j]));
  }
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(m), d.end());
  double s = 0.0;
  for (std::size_t t = 0; t < m; ++t) s += d[t];
  return s;
}

// Index chosen by the inner rule of Bulyan. Krum shrinks its neighbour
// count as the pool shrinks; other rules pick the input nearest their output.
// Once Krum counts a single neighbour, mutual nearest neighbours tie, hence
// the value-based tie-break.
std::size_t inner_select(const AggregatorSpec& inner, std::span<const ParamVector> pool) {
  if (pool.size() == 1) return 0;
  if (inner.rule == Rule::Krum) {
    const std::size_t n = pool.size();
    const auto excluded = static_cast<std::size_t>(std::floor(inner.delta * static_cast<double>(n)));
    const std::size_t m = n >= excluded + 3 ? n - excluded - 2 : 1;
    std::size_t best = 0;
    double best_s = score_with(pool, 0, m);
    for (std::size_t i = 1; i < n; ++i) {
      const double s = score_with(pool, i, m);
      if (better(s, pool[i], best_s, pool[best])) {
        best = i;
        best_s = s;
      }
    }
    return best;
  }
  return nearest_input(pool, aggregate(inner, pool));
}

}  // namespace

ParamVector mean(std::span<const ParamVector> vs) {
  const std::size_t dim = check_inputs(vs, "mean");
  ParamVector out(dim);
  for (const auto& v : vs) kernels::axpy(1.0, v.span(), out.span());
  kernels::scale(1.0 / static_cast<double>(vs.size()), out.span());
  return out;
}

double krum_score(std::span<const ParamVector> vs, std::size_t i, double delta) {
  check_inputs(vs, "krum");
  if (i >= vs.size()) throw ParameterError("krum: index out of range");
  return score_with(vs, i, krum_neighbours(vs.size(), delta));
}

std::size_t krum_index(std::span<const ParamVector> vs, double delta) {
  check_inputs(vs, "krum");
  if (!(delta >= 0.0 && delta < 1.0)) throw ParameterError("krum: delta must lie in [0, 1)");
  const std::size_t m = krum_neighbours(vs.size(), delta);
  std::size_t best = 0;
  double best_s = score_with(vs, 0, m);
  for (std::size_t i = 1; i < vs.size(); ++i) {
    const double s = score_with(vs, i, m);
    if (s < best_s) {
      best = i;
      best_s = s;
    }
  }
  return best;
}

ParamVector krum(std::span<const ParamVector> vs, double delta) { return vs[krum_index(vs, delta)]; }

ParamVector geometric_median(std::span<const ParamVector> vs, std::uint32_t max_iters, double tol) {
  const std::size_t dim = check_inputs(vs, "geometric_median");
  if (!(tol > 0.0)) throw ParameterError("geometric_median: tol must be positive");
  ParamVector nu = mean(vs);
  for (std::uint32_t it = 0; it < max_iters; ++it) {
    ParamVector num(dim);
    double den = 0.0;
    bool on_point = false;
    for (const auto& v : vs) {
      const double dist = std::sqrt(sqdist(v, nu));
      if (dist == 0.0) {
        on_point = true;
        break;
      }
      kernels::axpy(1.0 / dist, v.span(), num.span());
      den += 1.0 / dist;
    }
    if (on_point) {
      for (auto& x : nu) x += tol;
      continue;
    }
    kernels::scale(1.0 / den, num.span());
    const double step = std::sqrt(sqdist(num, nu));
    nu = std::move(num);
    if (step < tol) break;
  }
  return nu;
}

ParamVector bulyan(std::span<const ParamVector> vs, const AggregatorSpec& inner, std::uint32_t d) {
  const std::size_t dim = check_inputs(vs, "bulyan");
  if (inner.rule == Rule::Bulyan) throw ParameterError("bulyan: inner rule cannot be bulyan");
  const std::size_t n = vs.size();
  if (n < 4 * std::size_t{d} + 3) {
    throw ParameterError("bulyan: need n >= 4d + 3, got n=" + std::to_string(n) + ", d=" + std::to_string(d));
  }
  const std::size_t gamma = n - 2 * std::size_t{d};
  const std::size_t keep = gamma - 2 * std::size_t{d};

  std::vector<ParamVector> pool(vs.begin(), vs.end());
  std::vector<ParamVector> selected;
  while (selected.size() < gamma) {
    const std::size_t i = inner_select(inner, pool);
    selected.push_back(pool[i]);
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(i));
  }

  ParamVector out(dim);
  std::vector<double> col(gamma);
  std::vector<std::size_t> order(gamma);
  for (std::size_t c = 0; c < dim; ++c) {
    for (std::size_t s = 0; s < gamma; ++s) col[s] = selected[s][c];
    std::vector<double> sorted = col;
    const double med = median_of(sorted);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return std::abs(col[a] - med) < std::abs(col[b] - med); });
    double sum = 0.0;
    for (std::size_t t = 0; t < keep; ++t) sum += col[order[t]];
    out[c] = sum / static_cast<double>(keep);
  }
  return out;
}

ParamVector trimmed_mean(std::span<const ParamVector> vs, double zeta) {
  const std::size_t dim = check_inputs(vs, "trimmed_mean");
  if (!(zeta >= 0.0 && zeta < 0.5)) throw ParameterError("trimmed_mean: zeta must lie in [0, 0.5)");
  const std::size_t n = vs.size();
  const auto t = static_cast<std::size_t>(std::floor(zeta * static_cast<double>(n)));
  if (n <= 2 * t) throw ParameterError("trimmed_mean: every value would be trimmed");
  ParamVector out(dim);
  std::vector<double> col(n);
  for (std::size_t c = 0; c < dim; ++c) {
    for (std::size_t i = 0; i < n; ++i) col[i] = vs[i][c];
    std::sort(col.begin(), col.end());
    double sum = 0.0;
    for (std::size_t i = t; i < n - t; ++i) sum += col[i];
    out[c] = sum / static_cast<double>(n - 2 * t);
  }
  return out;
}

ParamVector coord_median(std::span<const ParamVector> vs) {
  const std::size_t dim = check_inputs(vs, "coord_median");
  ParamVector out(dim);
  std::vector<double> col(vs.size());
  for (std::size_t c = 0; c < dim; ++c) {
    for (std::size_t i = 0; i < vs.size(); ++i) col[i] = vs[i][c];
    out[c] = median_of(col);
  }
  return out;
}

ParamVector centered_clip(std::span<const ParamVector> vs, const ParamVector& v0, double tau, std::uint32_t iters) {
  const std::size_t dim = check_inputs(vs, "centered_clip");
  if (v0.dim() != dim) throw ParameterError("centered_clip: v0 dimension mismatch");
  if (!(tau >= 0.0)) throw ParameterError("centered_clip: tau must be non-negative");
  if (iters < 1) throw ParameterError("centered_clip: need at least one iteration");
  ParamVector nu = v0;
  ParamVector diff(dim);
  for (std::uint32_t it = 0; it < iters; ++it) {
    ParamVector step(dim);
    for (const auto& v : vs) {
      kernels::sub(v.span(), nu.span(), diff.span());
      const double norm = diff.norm2();
      const double factor = norm == 0.0 ? 1.0 : std::min(1.0, tau / norm);
      kernels::axpy(factor, diff.span(), step.span());
    }
    kernels::axpy(1.0 / static_cast<double>(vs.size()), step.span(), nu.span());
  }
  return nu;
}

ParamVector worker_momentum(const ParamVector& grad, const ParamVector& prev_beta, double zeta_t) {
  if (grad.dim() != prev_beta.dim()) throw ParameterError("worker_momentum: dimension mismatch");
  if (!(zeta_t >= 0.0 && zeta_t <= 1.0)) throw ParameterError("worker_momentum: zeta_t must lie in [0, 1]");
  ParamVector out(grad.dim());
  for (std::size_t i = 0; i < grad.dim(); ++i) out[i] = (1.0 - zeta_t) * grad[i] + zeta_t * prev_beta[i];
  return out;
}

ParamVector aggregate(const AggregatorSpec& spec, std::span<const ParamVector> vs) {
  switch (spec.rule) {
    case Rule::Mean: return mean(vs);
    case Rule::Krum: return krum(vs, spec.delta);
    case Rule::GeometricMedian: return geometric_median(vs, spec.max_iters, spec.tol);
    case Rule::Bulyan: {
      AggregatorSpec k;
      k.rule = Rule::Krum;
      return bulyan(vs, spec.inner ? *spec.inner : k, spec.d);
    }
    case Rule::TrimmedMean: return trimmed_mean(vs, spec.zeta);
    case Rule::CoordMedian: return coord_median(vs);
    case Rule::CenteredClip: return centered_clip(vs, coord_median(vs), spec.tau, spec.clip_iters);
  }
  throw ParameterError("unknown aggregation rule");
}

}  // namespace flsec::agg
