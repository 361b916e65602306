#include "flsec/adversary.hpp"

#include <algorithm>
#include <set>

#include "flsec/crypto.hpp"
#include "flsec/errors.hpp"

namespace flsec::adversary {

using nlohmann::json;
using secagg::SecAggConfig;
using secagg::SessionResult;

std::string to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::HonestButCurious: return "honest_but_curious";
    case StrategyKind::SybilMitm: return "sybil_mitm";
    case StrategyKind::ShareCompromise: return "share_compromise";
    case StrategyKind::StrategicDrop: return "strategic_drop";
  }
  return "?";
}

StrategyKind strategy_from_string(const std::string& s) {
  for (auto k : {StrategyKind::HonestButCurious, StrategyKind::SybilMitm, StrategyKind::ShareCompromise,
                 StrategyKind::StrategicDrop}) {
    if (to_string(k) == s) return k;
  }
  throw ParameterError("unknown adversary strategy '" + s + "'");
}

json to_json(const AdversaryStrategy& s) {
  return {{"kind", to_string(s.kind)},
          {"honest_ids", s.honest_ids},
          {"controlled_ids", s.controlled_ids},
          {"population", s.population},
          {"controlled_count", s.controlled_count},
          {"selected", s.selected},
          {"retry_limit", s.retry_limit},
          {"trusted_third_party", s.trusted_third_party}};
}

AdversaryStrategy strategy_from_json(const json& j) {
  AdversaryStrategy s;
  s.kind = strategy_from_string(j.at("kind"));
  s.honest_ids = j.at("honest_ids").get<std::vector<ClientId>>();
  s.controlled_ids = j.at("controlled_ids").get<std::vector<ClientId>>();
  s.population = j.at("population");
  s.controlled_count = j.at("controlled_count");
  s.selected = j.at("selected");
  s.retry_limit = j.at("retry_limit");
  s.trusted_third_party = j.at("trusted_third_party");
  return s;
}

json to_json(const AttackReport& r) {
  json rec = json::object(), truth = json::object(), rec_field = json::object();
  for (const auto& [id, v] : r.recovered) rec[std::to_string(id)] = v.values();
  for (const auto& [id, v] : r.recovered_field) rec_field[std::to_string(id)] = flsec::to_json(v);
  for (const auto& [id, v] : r.truth) truth[std::to_string(id)] = v.values();
  return {{"strategy", to_string(r.strategy)},
          {"success", r.success},
          {"reason", r.reason},
          {"recovered", rec},
          {"recovered_field", rec_field},
          {"truth", truth},
          {"max_abs_error", r.max_abs_error},
          {"field_mismatches", r.field_mismatches},
          {"rounds", r.rounds},
          {"consistent_candidates", r.consistent_candidates},
          {"log", r.log}};
}

namespace {

ParamVector input_of(const SecAggConfig& cfg, ClientId id) {
  const auto ids = cfg.client_ids();
  const auto it = std::find(ids.begin(), ids.end(), id);
  if (it == ids.end()) throw ParameterError("client " + std::to_string(id) + " is not in the round");
  return cfg.client_inputs()[static_cast<std::size_t>(it - ids.begin())];
}

// What the server pulls out of a finished session: masked inputs, the set
// that shared keys, and every share it was legitimately sent in unmasking.
struct ServerView {
  std::map<ClientId, FieldVector> masked;
  std::set<ClientId> u2;
  std::map<ClientId, std::vector<crypto::ShamirShare>> self_shares;
};

ServerView view_of(const SessionResult& s) {
  const auto& cfg = s.transcript.config;
  ServerView v;
  for (const auto& e : s.transcript.events) {
    if (!e.message || e.message->to != secagg::kServerId) continue;
    const auto& m = *e.message;
    if (std::holds_alternative<secagg::KeyShares>(m.body)) v.u2.insert(m.from);
    if (const auto* mi = std::get_if<secagg::MaskedInput>(&m.body)) v.masked[m.from] = mi->masked;
    if (const auto* us = std::get_if<secagg::UnmaskShares>(&m.body)) {
      for (const auto& [owner, val] : us->self_shares) {
        v.self_shares[owner].push_back({m.from, val, cfg.k, cfg.n, cfg.share_modulus});
      }
    }
  }
  for (const auto& [id, r] : s.transcript.policy.declared_drops) {
    if (r <= 1) v.u2.erase(id);
  }
  return v;
}

std::uint64_t reconstruct_unique(std::vector<crypto::ShamirShare> shares) {
  std::sort(shares.begin(), shares.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
  shares.erase(std::unique(shares.begin(), shares.end(),
                           [](const auto& a, const auto& b) { return a.index == b.index; }),
               shares.end());
  return crypto::shamir_reconstruct(shares);
}

// Recovers encode(w_victim) from the server view plus the states of the
// clients the server controls. Throws ThresholdError when a seed is out of
// reach.
FieldVector recover_one(const SessionResult& s, const ServerView& v, ClientId victim,
                        const std::set<ClientId>& controlled) {
  const auto& cfg = s.transcript.config;
  const auto mit = v.masked.find(victim);
  if (mit == v.masked.end()) throw ProtocolError("no masked input from client " + std::to_string(victim));

  auto self_shares = v.self_shares.count(victim) ? v.self_shares.at(victim) : std::vector<crypto::ShamirShare>{};
  for (ClientId c : controlled) {
    const auto& held = s.clients.at(c).held;
    if (auto it = held.find(victim); it != held.end()) {
      self_shares.push_back({c, it->second.self_share, cfg.k, cfg.n, cfg.share_modulus});
    }
  }
  FieldVector out = field_sub(mit->second, secagg::self_mask(reconstruct_unique(self_shares), cfg.dim));

  for (ClientId m : v.u2) {
    if (m == victim) continue;
    std::uint64_t seed = 0;
    if (controlled.count(m)) {
      seed = s.clients.at(m).seeds.at(victim);
    } else {
      // Either end's sharing of the pair seed will do.
      std::vector<crypto::ShamirShare> from_victim, from_peer;
      for (ClientId c : controlled) {
        const auto& held = s.clients.at(c).held;
        if (auto it = held.find(victim); it != held.end() && it->second.seed_shares.count(m)) {
          from_victim.push_back({c, it->second.seed_shares.at(m), cfg.k, cfg.n, cfg.share_modulus});
        }
        if (auto it = held.find(m); it != held.end() && it->second.seed_shares.count(victim)) {
          from_peer.push_back({c, it->second.seed_shares.at(victim), cfg.k, cfg.n, cfg.share_modulus});
        }
      }
      const auto& best = from_victim.size() >= from_peer.size() ? from_victim : from_peer;
      if (best.size() < cfg.k) {
        throw ThresholdError("seed of pair (" + std::to_string(victim) + "," + std::to_string(m) + "): " +
                             std::to_string(best.size()) + " shares < k=" + std::to_string(cfg.k));
      }
      seed = crypto::shamir_reconstruct(best);
    }
    field_sub_inplace(out, secagg::pairwise_mask(victim, m, seed, cfg.dim));
  }
  return out;
}

// Smallest count of candidate secrets in [0, q) consistent with the shares
// the controlled clients hold of any seed shared between two honest clients.
long long min_consistent_candidates(const SessionResult& s, const std::set<ClientId>& controlled,
                                    const std::vector<ClientId>& honest) {
  const auto& cfg = s.transcript.config;
  std::vector<std::uint64_t> candidates(cfg.share_modulus);
  for (std::uint64_t x = 0; x < cfg.share_modulus; ++x) candidates[x] = x;
  long long best = -1;
  for (ClientId i : honest) {
    for (ClientId m : honest) {
      if (m == i) continue;
      std::vector<crypto::ShamirShare> known;
      for (ClientId c : controlled) {
        const auto& held = s.clients.at(c).held;
        if (auto it = held.find(i); it != held.end() && it->second.seed_shares.count(m)) {
          known.push_back({c, it->second.seed_shares.at(m), cfg.k, cfg.n, cfg.share_modulus});
        }
      }
      const auto n = static_cast<long long>(crypto::consistent_secrets(known, candidates).size());
      best = best < 0 ? n : std::min(best, n);
    }
  }
  return best;
}

void score(AttackReport& r, const SecAggConfig& cfg, ClientId id, const FieldVector& got) {
  const ParamVector truth = clip_values(input_of(cfg, id), cfg.codec.clip);
  const FieldVector enc = encode_fixed(truth, cfg.codec);
  for (std::size_t d = 0; d < enc.dim(); ++d) {
    if (enc.residues[d] != got.residues[d]) ++r.field_mismatches;
  }
  const ParamVector dec = decode_fixed(got);
  for (std::size_t d = 0; d < dec.dim(); ++d) r.max_abs_error = std::max(r.max_abs_error, std::abs(dec[d] - truth[d]));
  r.recovered_field[id] = got;
  r.recovered[id] = dec;
  r.truth[id] = truth;
}

// Tries every victim; success only if all are recovered bit-exactly.
void recover_all(AttackReport& r, const SessionResult& s, const SecAggConfig& truth_cfg,
                 const std::vector<ClientId>& victims, const std::set<ClientId>& controlled) {
  if (s.transcript.aborted) {
    r.reason = "session aborted: " + s.transcript.abort_reason;
    return;
  }
  const ServerView v = view_of(s);
  try {
    for (ClientId id : victims) score(r, truth_cfg, id, recover_one(s, v, id, controlled));
  } catch (const ThresholdError& e) {
    r.recovered.clear();
    r.recovered_field.clear();
    r.truth.clear();
    r.field_mismatches = 0;
    r.max_abs_error = 0.0;
    r.reason = std::string("cannot reconstruct masks: ") + e.what();
    return;
  }
  r.success = r.field_mismatches == 0 && !victims.empty();
  r.reason = r.success ? "recovered " + std::to_string(victims.size()) + " honest input(s) exactly"
                       : std::to_string(r.field_mismatches) + " coordinate(s) differ from the true encoding";
}

std::vector<ClientId> sorted_unique(std::vector<ClientId> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

}  // namespace

AttackReport run_honest_but_curious(const SecAggConfig& cfg) {
  AttackReport r;
  r.strategy = StrategyKind::HonestButCurious;
  const auto s = secagg::run_session(cfg);
  r.rounds = 1;
  recover_all(r, s, cfg, cfg.client_ids(), {});
  r.log.push_back("honest session, server holds " + std::to_string(view_of(s).masked.size()) + " masked inputs");
  if (!r.success) r.recovered.clear();
  return r;
}

AttackReport run_mitm(const SecAggConfig& cfg, const AdversaryStrategy& strategy) {
  cfg.validate();
  AttackReport r;
  r.strategy = StrategyKind::SybilMitm;
  const auto ids = cfg.client_ids();
  const auto honest = sorted_unique(strategy.honest_ids);
  if (honest.empty()) throw ParameterError("mitm needs at least one honest client");
  for (ClientId h : honest) {
    if (std::find(ids.begin(), ids.end(), h) == ids.end()) {
      throw ParameterError("honest client " + std::to_string(h) + " is not in the round");
    }
  }

  if (strategy.trusted_third_party) {
    // Keys come from a party the server does not control: sybils are refused
    // registration and only the real clients take part.
    r.log.push_back("trusted third party distributes keys; " + std::to_string(ids.size() - honest.size()) +
                    " sybil registration(s) rejected");
    if (honest.size() >= 2 && honest.size() >= cfg.k) {
      SecAggConfig real = cfg;
      real.n = static_cast<std::uint32_t>(honest.size());
      real.ids = honest;
      real.inputs.clear();
      for (ClientId h : honest) real.inputs.push_back(input_of(cfg, h));
      real.dropouts.clear();
      const auto s = secagg::run_session(real);
      r.rounds = 1;
      AttackReport probe;
      recover_all(probe, s, real, honest, {});
      r.log.push_back("honest-only session: " + probe.reason);
    }
    r.success = false;
    r.reason = "trusted third party performs key distribution; sybils cannot impersonate peers";
    return r;
  }

  for (ClientId h : honest) {
    // Isolation: h sees a full round, but every peer key belongs to the server.
    SecAggConfig iso = cfg;
    iso.ids = ids;
    iso.dropouts.clear();
    iso.seed = splitmix64(cfg.seed ^ (0x4d49544dULL << 32) ^ h);  // "MITM"
    iso.inputs.clear();
    for (ClientId id : ids) iso.inputs.push_back(id == h ? input_of(cfg, h) : ParamVector(cfg.dim));
    const auto s = secagg::run_session(iso);
    ++r.rounds;
    std::set<ClientId> sybils(ids.begin(), ids.end());
    sybils.erase(h);
    AttackReport one;
    recover_all(one, s, iso, {h}, sybils);
    r.log.push_back("client " + std::to_string(h) + " isolated with " + std::to_string(sybils.size()) +
                    " sybils: " + one.reason);
    if (!one.success) {
      r.success = false;
      r.reason = "client " + std::to_string(h) + ": " + one.reason;
      r.recovered.clear();
      return r;
    }
    r.field_mismatches += one.field_mismatches;
    r.max_abs_error = std::max(r.max_abs_error, one.max_abs_error);
    r.recovered_field[h] = one.recovered_field[h];
    r.recovered[h] = one.recovered[h];
    r.truth[h] = one.truth[h];
  }
  r.success = r.field_mismatches == 0;
  r.reason = "recovered " + std::to_string(honest.size()) + " honest input(s) exactly";
  return r;
}

AttackReport run_share_compromise(const SecAggConfig& cfg, const AdversaryStrategy& strategy) {
  cfg.validate();
  AttackReport r;
  r.strategy = StrategyKind::ShareCompromise;
  const auto ids = cfg.client_ids();
  const auto controlled_v = sorted_unique(strategy.controlled_ids);
  const std::set<ClientId> controlled(controlled_v.begin(), controlled_v.end());
  std::vector<ClientId> honest;
  for (ClientId id : ids) {
    if (!controlled.count(id)) honest.push_back(id);
  }
  for (ClientId c : controlled) {
    if (std::find(ids.begin(), ids.end(), c) == ids.end()) {
      throw ParameterError("controlled client " + std::to_string(c) + " is not in the round");
    }
  }
  if (honest.empty()) throw ParameterError("share compromise needs at least one honest client");

  const auto s = secagg::run_session(cfg);
  r.rounds = 1;
  r.log.push_back("server controls " + std::to_string(controlled.size()) + " of " + std::to_string(ids.size()) +
                  " clients, k=" + std::to_string(cfg.k));
  recover_all(r, s, cfg, honest, controlled);
  if (!r.success && !s.transcript.aborted && cfg.share_modulus <= 4096 && honest.size() >= 2) {
    r.consistent_candidates = min_consistent_candidates(s, controlled, honest);
    r.log.push_back("toy field scan: at least " + std::to_string(r.consistent_candidates) +
                    " seed values consistent with the pooled shares");
  }
  return r;
}

AttackReport run_strategic_drop(const SecAggConfig& cfg, const AdversaryStrategy& st) {
  AttackReport r;
  r.strategy = StrategyKind::StrategicDrop;
  if (st.population < 2) throw ConfigError("strategy.population", "must be at least 2");
  if (st.controlled_count > st.population) throw ConfigError("strategy.controlled_count", "exceeds the population");
  if (st.selected < 2 || st.selected > st.population) {
    throw ConfigError("strategy.selected", "must lie in [2, population]");
  }
  if (cfg.k < 1 || cfg.k > st.selected) throw ConfigError("k", "threshold must satisfy 1 <= k <= selected");
  if (st.retry_limit < 1) throw ConfigError("strategy.retry_limit", "must be at least 1");

  std::vector<ClientId> population(st.population);
  for (std::uint32_t i = 0; i < st.population; ++i) population[i] = i + 1;
  std::vector<ParamVector> pop_inputs;
  if (cfg.inputs.size() == st.population) {
    pop_inputs = cfg.inputs;
  } else {
    SecAggConfig gen = cfg;
    gen.n = st.population;
    gen.inputs.clear();
    pop_inputs = gen.client_inputs();
  }

  // Which registered clients the server owns.
  Rng own_rng = Rng(cfg.seed).split(0x4354524cULL);  // "CTRL"
  std::vector<ClientId> shuffled = population;
  for (std::size_t i = shuffled.size(); i > 1; --i) std::swap(shuffled[i - 1], shuffled[own_rng.uniform_below(i)]);
  const std::set<ClientId> controlled(shuffled.begin(), shuffled.begin() + st.controlled_count);

  // Selection is outside the server's control: its own stream.
  Rng ttp = Rng(cfg.seed).split(0x5454505345ULL);  // "TTPSE"
  for (std::uint32_t attempt = 1; attempt <= st.retry_limit; ++attempt) {
    Rng draw = ttp.split(attempt);
    std::vector<ClientId> pool = population;
    for (std::uint32_t i = 0; i < st.selected; ++i) {
      std::swap(pool[i], pool[i + draw.uniform_below(pool.size() - i)]);
    }
    std::vector<ClientId> sel(pool.begin(), pool.begin() + st.selected);
    std::sort(sel.begin(), sel.end());
    std::vector<ClientId> honest;
    std::set<ClientId> ctl;
    for (ClientId id : sel) {
      if (controlled.count(id)) {
        ctl.insert(id);
      } else {
        honest.push_back(id);
      }
    }
    const std::string head = "attempt " + std::to_string(attempt) + ": " + std::to_string(ctl.size()) +
                             " controlled, " + std::to_string(honest.size()) + " honest selected";
    r.rounds = attempt;
    if (honest.empty()) {
      r.log.push_back(head + "; round pretended complete");
      continue;
    }

    SecAggConfig round = cfg;
    round.n = st.selected;
    round.ids = sel;
    round.inputs.clear();
    for (ClientId id : sel) round.inputs.push_back(pop_inputs[id - 1]);
    round.dropouts.clear();
    round.seed = splitmix64(cfg.seed ^ (std::uint64_t{attempt} << 40));

    secagg::ServerPolicy policy;
    if (ctl.size() < cfg.k) {
      // Too few insiders: claim every honest client vanished so the round
      // falls below threshold and a fresh selection is drawn.
      for (ClientId h : honest) policy.declared_drops[h] = 0;
      const auto s = secagg::run_session(round, policy);
      r.log.push_back(head + "; declared " + std::to_string(honest.size()) + " honest dropped, round discarded (" +
                      (s.transcript.aborted ? s.transcript.abort_reason : "completed") + ")");
      continue;
    }
    const auto s = secagg::run_session(round, policy);
    AttackReport one;
    recover_all(one, s, round, honest, ctl);
    r.log.push_back(head + "; " + one.reason);
    if (one.success) {
      r.success = true;
      r.reason = "recovered " + std::to_string(honest.size()) + " honest input(s) on attempt " + std::to_string(attempt);
      r.recovered = one.recovered;
      r.recovered_field = one.recovered_field;
      r.truth = one.truth;
      r.max_abs_error = one.max_abs_error;
      r.field_mismatches = one.field_mismatches;
      return r;
    }
  }
  r.success = false;
  r.reason = "retry limit exhausted after " + std::to_string(st.retry_limit) + " attempt(s)";
  return r;
}

AttackReport run_attack(const SecAggConfig& cfg, const AdversaryStrategy& strategy) {
  switch (strategy.kind) {
    case StrategyKind::HonestButCurious: return run_honest_but_curious(cfg);
    case StrategyKind::SybilMitm: return run_mitm(cfg, strategy);
    case StrategyKind::ShareCompromise: return run_share_compromise(cfg, strategy);
    case StrategyKind::StrategicDrop: return run_strategic_drop(cfg, strategy);
  }
  throw ParameterError("unknown strategy");
}

ParamVector two_party_solve(const ParamVector& y, const ParamVector& x2) {
  if (y.dim() != x2.dim()) throw ParameterError("two_party_solve: dimension mismatch");
  ParamVector x1(y.dim());
  for (std::size_t i = 0; i < y.dim(); ++i) x1[i] = 2.0 * y[i] - x2[i];
  return x1;
}

}  // namespace flsec::adversary
