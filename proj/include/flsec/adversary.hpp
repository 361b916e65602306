#pragma once

// Malicious-server strategies run against the secagg state machines. Every
// client the server controls (sybil or compromised) runs the genuine client
// code; the attack only reads the states and the transcript afterwards.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "flsec/numeric.hpp"
#include "flsec/secagg.hpp"

namespace flsec::adversary {

using secagg::ClientId;

enum class StrategyKind { HonestButCurious, SybilMitm, ShareCompromise, StrategicDrop };
std::string to_string(StrategyKind k);
StrategyKind strategy_from_string(const std::string& s);

struct AdversaryStrategy {
  StrategyKind kind = StrategyKind::HonestButCurious;
  // SybilMitm: client ids that are real. Everything else is a sybil.
  std::vector<ClientId> honest_ids;
  // ShareCompromise: ids of compromised clients in the round.
  std::vector<ClientId> controlled_ids;
  // StrategicDrop: registered population and how many the server controls.
  std::uint32_t population = 20;
  std::uint32_t controlled_count = 15;
  std::uint32_t selected = 8;
  std::uint32_t retry_limit = 10;
  // SybilMitm: a trusted party hands out keys, so sybils cannot register.
  bool trusted_third_party = false;
};

nlohmann::json to_json(const AdversaryStrategy& s);
AdversaryStrategy strategy_from_json(const nlohmann::json& j);

struct AttackReport {
  StrategyKind strategy = StrategyKind::HonestButCurious;
  bool success = false;
  std::string reason;
  std::map<ClientId, FieldVector> recovered_field;  // encode(w_i) as recovered
  std::map<ClientId, ParamVector> recovered;        // decoded
  std::map<ClientId, ParamVector> truth;            // clip(w_i) for comparison
  double max_abs_error = 0.0;                       // decoded, over recovered clients
  std::size_t field_mismatches = 0;                 // coordinates not bit-equal
  std::uint32_t rounds = 0;                         // protocol sessions run
  // Smallest number of secrets consistent with the pooled shares when
  // reconstruction is impossible (toy share fields only; -1 if not scanned).
  long long consistent_candidates = -1;
  std::vector<std::string> log;
};

nlohmann::json to_json(const AttackReport& r);

// Server runs one isolated session per honest client in which every other id
// is a sybil it controls. The honest inputs come from cfg.
AttackReport run_mitm(const secagg::SecAggConfig& cfg, const AdversaryStrategy& strategy);

// The controlled clients in an ordinary session pool the shares they hold.
AttackReport run_share_compromise(const secagg::SecAggConfig& cfg, const AdversaryStrategy& strategy);

// A third party draws `selected` clients from the population each attempt.
// With fewer than k controlled clients in the draw the server declares honest
// clients dropped until the round falls below threshold and is redrawn; with
// at least k it proceeds as share compromise. cfg supplies dim, k, group,
// codec and seed; n and ids are set per attempt.
AttackReport run_strategic_drop(const secagg::SecAggConfig& cfg, const AdversaryStrategy& strategy);

// Honest protocol; the server keeps only what it is given.
AttackReport run_honest_but_curious(const secagg::SecAggConfig& cfg);

AttackReport run_attack(const secagg::SecAggConfig& cfg, const AdversaryStrategy& strategy);

// Two-party mean: the server holding x2 learns x1 = 2y - x2.
ParamVector two_party_solve(const ParamVector& y, const ParamVector& x2);

}  // namespace flsec::adversary
