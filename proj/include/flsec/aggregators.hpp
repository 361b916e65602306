#pragma once

// Byzantine-tolerant aggregation rules. All rules are pure functions of their
// inputs; input order matters only through documented tie-breaks.

#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "flsec/numeric.hpp"

namespace flsec::agg {

enum class Rule { Mean, Krum, GeometricMedian, Bulyan, TrimmedMean, CoordMedian, CenteredClip };
std::string to_string(Rule r);
Rule rule_from_string(const std::string& s);

struct AggregatorSpec {
  Rule rule = Rule::Mean;
  double delta = 0.0;            // Krum: excluded fraction
  std::uint32_t max_iters = 1000;  // GeometricMedian
  double tol = 1e-8;             // GeometricMedian
  std::uint32_t d = 1;           // Bulyan: tolerated Byzantine count
  std::shared_ptr<AggregatorSpec> inner;  // Bulyan selection rule; Krum if null
  double zeta = 0.1;             // TrimmedMean: fraction trimmed per side
  double tau = 1.0;              // CenteredClip radius
  std::uint32_t clip_iters = 1;  // CenteredClip
  // Worker momentum: clients send beta_t = (1 - zeta_t) g + zeta_t beta_{t-1}.
  std::optional<double> momentum;

  // Throws ConfigError naming the offending field.
  void validate() const;
};

nlohmann::json to_json(const AggregatorSpec& s);
AggregatorSpec aggregator_from_json(const nlohmann::json& j);

ParamVector mean(std::span<const ParamVector> vs);

// Index of the Krum choice: the input minimising the sum of squared distances
// to its n - floor(delta n) - 2 nearest other inputs. Ties go to the lowest index.
std::size_t krum_index(std::span<const ParamVector> vs, double delta);
double krum_score(std::span<const ParamVector> vs, std::size_t i, double delta);
ParamVector krum(std::span<const ParamVector> vs, double delta);

// Weiszfeld iteration from the mean. When the iterate lands on an input it is
// shifted by tol in every coordinate.
ParamVector geometric_median(std::span<const ParamVector> vs, std::uint32_t max_iters = 1000, double tol = 1e-8);

// Selects n - 2d inputs with the inner rule, then averages per coordinate the
// n - 4d selected values closest to the coordinate median.
ParamVector bulyan(std::span<const ParamVector> vs, const AggregatorSpec& inner, std::uint32_t d);

ParamVector trimmed_mean(std::span<const ParamVector> vs, double zeta);
ParamVector coord_median(std::span<const ParamVector> vs);
ParamVector centered_clip(std::span<const ParamVector> vs, const ParamVector& v0, double tau, std::uint32_t iters);

ParamVector worker_momentum(const ParamVector& grad, const ParamVector& prev_beta, double zeta_t);

// Applies the configured rule. CenteredClip starts from the coordinate median.
ParamVector aggregate(const AggregatorSpec& spec, std::span<const ParamVector> vs);

}  // namespace flsec::agg
