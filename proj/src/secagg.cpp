#include "flsec/secagg.hpp"

#include <algorithm>
#include <sstream>

#include "flsec/errors.hpp"

namespace flsec::secagg {

using crypto::BigInt;
using crypto::Bytes;
using nlohmann::json;

std::string to_string(Phase p) {
  switch (p) {
    case Phase::Advertise: return "advertise";
    case Phase::ShareKeys: return "share_keys";
    case Phase::MaskedInput: return "masked_input";
    case Phase::Consistency: return "consistency";
    case Phase::Unmask: return "unmask";
    case Phase::Done: return "done";
    case Phase::Aborted: return "aborted";
  }
  return "?";
}

std::string round_name(int round) {
  static const char* names[] = {"advertise_keys", "share_keys", "masked_input", "consistency", "unmask"};
  if (round < 0 || round >= kRoundCount) return "none";
  return names[round];
}

// ---------------------------------------------------------------------------
// Encoding helpers

Bytes survivor_list_bytes(const std::vector<ClientId>& survivors) {
  Bytes out = {'U', '3'};
  for (ClientId id : survivors) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>((id >> s) & 0xff));
  }
  return out;
}

Bytes advert_bytes(ClientId id, const BigInt& pk1, const BigInt& pk2, const crypto::DhParams& params) {
  Bytes out = {'A', 'D', 'V'};
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>((id >> s) & 0xff));
  const std::size_t w = params.byte_length();
  for (const auto* pk : {&pk1, &pk2}) {
    const Bytes b = crypto::to_bytes(*pk, w);
    out.insert(out.end(), b.begin(), b.end());
  }
  return out;
}

FieldVector pairwise_mask(ClientId i, ClientId j, std::uint64_t seed, std::size_t dim) {
  FieldVector m = crypto::prg_expand(seed, dim, kMersenne61);
  return i < j ? m : field_negate(m);
}

FieldVector self_mask(std::uint64_t self_seed, std::size_t dim) {
  // Separate stream from pairwise masks so equal seeds never collide.
  return crypto::prg_expand(splitmix64(self_seed ^ 0x73656c666d61736bULL), dim, kMersenne61);
}

namespace {

std::vector<std::uint64_t> keystream(std::uint64_t seed, std::size_t len, std::uint64_t q) {
  return crypto::prg_expand(seed, len, q).residues;
}

std::string dec(std::uint64_t v) { return std::to_string(v); }
std::uint64_t undec(const json& j) {
  const auto s = j.get<std::string>();
  std::size_t pos = 0;
  const auto v = std::stoull(s, &pos);
  if (pos != s.size()) throw ParameterError("bad decimal '" + s + "'");
  return v;
}

json advert_json(const KeyAdvert& a) {
  return {{"pk1", crypto::to_decimal(a.pk1)}, {"pk2", crypto::to_decimal(a.pk2)}, {"sig", crypto::to_json(a.sig)}};
}
KeyAdvert advert_from(const json& j) {
  return KeyAdvert{crypto::from_decimal(j.at("pk1")), crypto::from_decimal(j.at("pk2")),
                   crypto::signature_from_json(j.at("sig"))};
}

json bundles_json(const std::vector<EncryptedBundle>& bs) {
  json arr = json::array();
  for (const auto& b : bs) {
    json ct = json::array();
    for (auto v : b.ciphertext) ct.push_back(dec(v));
    arr.push_back({{"from", b.from}, {"to", b.to}, {"ciphertext", ct}});
  }
  return arr;
}
std::vector<EncryptedBundle> bundles_from(const json& arr) {
  std::vector<EncryptedBundle> out;
  for (const auto& j : arr) {
    EncryptedBundle b{j.at("from"), j.at("to"), {}};
    for (const auto& v : j.at("ciphertext")) b.ciphertext.push_back(undec(v));
    out.push_back(std::move(b));
  }
  return out;
}

json body_json(const Body& body) {
  return std::visit(
      [](const auto& b) -> json {
        using T = std::decay_t<decltype(b)>;
        if constexpr (std::is_same_v<T, KeyAdvert>) {
          return advert_json(b);
        } else if constexpr (std::is_same_v<T, KeyList>) {
          json arr = json::array();
          for (const auto& [id, a] : b.adverts) {
            json e = advert_json(a);
            e["id"] = id;
            arr.push_back(e);
          }
          return {{"adverts", arr}};
        } else if constexpr (std::is_same_v<T, KeyShares> || std::is_same_v<T, ShareDelivery>) {
          return {{"bundles", bundles_json(b.bundles)}};
        } else if constexpr (std::is_same_v<T, MaskedInput>) {
          return {{"masked", flsec::to_json(b.masked)}};
        } else if constexpr (std::is_same_v<T, SurvivorList>) {
          return {{"survivors", b.survivors}};
        } else if constexpr (std::is_same_v<T, ConsistencySig>) {
          return {{"sig", crypto::to_json(b.sig)}};
        } else if constexpr (std::is_same_v<T, UnmaskRequest>) {
          json signers = json::array();
          for (const auto& [id, sig] : b.signers) signers.push_back({{"id", id}, {"sig", crypto::to_json(sig)}});
          return {{"survivors", b.survivors}, {"signers", signers}};
        } else {
          json self = json::array(), seeds = json::array();
          for (const auto& [owner, v] : b.self_shares) self.push_back({{"owner", owner}, {"value", dec(v)}});
          for (const auto& s : b.seed_shares) {
            seeds.push_back({{"owner", s.owner}, {"peer", s.peer}, {"value", dec(s.value)}});
          }
          return {{"self_shares", self}, {"seed_shares", seeds}};
        }
      },
      body);
}

Body body_from(const std::string& kind, const json& j) {
  if (kind == "KeyAdvert") return advert_from(j);
  if (kind == "KeyList") {
    KeyList l;
    for (const auto& e : j.at("adverts")) l.adverts[e.at("id").get<ClientId>()] = advert_from(e);
    return l;
  }
  if (kind == "KeyShares") return KeyShares{bundles_from(j.at("bundles"))};
  if (kind == "ShareDelivery") return ShareDelivery{bundles_from(j.at("bundles"))};
  if (kind == "MaskedInput") return MaskedInput{field_vector_from_json(j.at("masked"))};
  if (kind == "SurvivorList") return SurvivorList{j.at("survivors").get<std::vector<ClientId>>()};
  if (kind == "ConsistencySig") return ConsistencySig{crypto::signature_from_json(j.at("sig"))};
  if (kind == "UnmaskRequest") {
    UnmaskRequest r;
    r.survivors = j.at("survivors").get<std::vector<ClientId>>();
    for (const auto& e : j.at("signers")) r.signers[e.at("id").get<ClientId>()] = crypto::signature_from_json(e.at("sig"));
    return r;
  }
  if (kind == "UnmaskShares") {
    UnmaskShares u;
    for (const auto& e : j.at("self_shares")) u.self_shares[e.at("owner").get<ClientId>()] = undec(e.at("value"));
    for (const auto& e : j.at("seed_shares")) {
      u.seed_shares.push_back(SeedShare{e.at("owner"), e.at("peer"), undec(e.at("value"))});
    }
    return u;
  }
  throw ParameterError("unknown message type '" + kind + "'");
}

}  // namespace

std::string type_name(const Body& b) {
  static const char* names[] = {"KeyAdvert",      "KeyList",        "KeyShares",
                                "ShareDelivery",  "MaskedInput",    "SurvivorList",
                                "ConsistencySig", "UnmaskRequest",  "UnmaskShares"};
  return names[b.index()];
}

json to_json(const Message& m) {
  return {{"round", m.round}, {"from", m.from}, {"to", m.to}, {"kind", type_name(m.body)}, {"body", body_json(m.body)}};
}

Message message_from_json(const json& j) {
  return Message{j.at("round"), j.at("from"), j.at("to"), body_from(j.at("kind"), j.at("body"))};
}

// ---------------------------------------------------------------------------
// Configuration

std::vector<ClientId> SecAggConfig::client_ids() const {
  if (!ids.empty()) return ids;
  std::vector<ClientId> out(n);
  for (std::uint32_t i = 0; i < n; ++i) out[i] = i + 1;
  return out;
}

std::vector<ParamVector> SecAggConfig::client_inputs() const {
  if (!inputs.empty()) return inputs;
  Rng rng = Rng(seed).split(0x696e707574ULL);  // "input"
  std::vector<ParamVector> out;
  for (std::uint32_t i = 0; i < n; ++i) {
    ParamVector v(dim);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    out.push_back(std::move(v));
  }
  return out;
}

void SecAggConfig::validate() const {
  if (n < 2) throw ConfigError("n", "need at least 2 clients");
  if (k < 1 || k > n) throw ConfigError("k", "threshold must satisfy 1 <= k <= n");
  if (dim < 1) throw ConfigError("dim", "must be at least 1");
  crypto::DhParams params;
  try {
    params = crypto::DhParams::by_name(group);
  } catch (const ParameterError&) {
    throw ConfigError("group", "unknown DH group '" + group + "'");
  }
  if (share_modulus < 3 || share_modulus >= (std::uint64_t{1} << 62) ||
      mpz_probab_prime_p(BigInt(std::to_string(share_modulus)).get_mpz_t(), 25) == 0) {
    throw ConfigError("share_modulus", "must be a prime below 2^62");
  }
  if (codec.frac_bits < 0 || codec.frac_bits > 40) throw ConfigError("codec.frac_bits", "must lie in [0, 40]");
  if (codec.modulus != kMersenne61) throw ConfigError("codec.modulus", "masks live in Z_(2^61-1)");
  if (codec.max_summands < n) throw ConfigError("codec.max_summands", "must be at least n");
  if (!(codec.clip > 0.0)) throw ConfigError("codec.clip", "must be positive");
  const auto idv = client_ids();
  if (idv.size() != n) throw ConfigError("ids", "need exactly n ids");
  std::set<ClientId> unique(idv.begin(), idv.end());
  if (unique.size() != n) throw ConfigError("ids", "ids must be distinct");
  for (auto id : idv) {
    if (id == kServerId) throw ConfigError("ids", "id 0 is reserved for the server");
    if (id >= share_modulus) throw ConfigError("ids", "ids must be below share_modulus");
  }
  if (!inputs.empty()) {
    if (inputs.size() != n) throw ConfigError("inputs", "need one input per client");
    for (const auto& v : inputs) {
      if (v.dim() != dim) throw ConfigError("inputs", "input dimension differs from dim");
      if (!v.all_finite()) throw ConfigError("inputs", "inputs must be finite");
    }
  }
  std::set<ClientId> dropped;
  for (const auto& d : dropouts) {
    if (!unique.count(d.client)) throw ConfigError("dropouts", "unknown client " + std::to_string(d.client));
    if (d.after_round < -1 || d.after_round >= kRoundCount - 1) {
      throw ConfigError("dropouts", "after_round must lie in [-1, 3]");
    }
    if (!dropped.insert(d.client).second) throw ConfigError("dropouts", "client listed twice");
  }
}

json to_json(const SecAggConfig& c) {
  json drops = json::array();
  for (const auto& d : c.dropouts) drops.push_back({{"client", d.client}, {"after_round", d.after_round}});
  json inputs = json::array();
  for (const auto& v : c.inputs) inputs.push_back(v.values());
  return {{"n", c.n},
          {"k", c.k},
          {"dim", c.dim},
          {"group", c.group},
          {"share_modulus", std::to_string(c.share_modulus)},
          {"codec",
           {{"frac_bits", c.codec.frac_bits},
            {"modulus", std::to_string(c.codec.modulus)},
            {"max_summands", c.codec.max_summands},
            {"clip", c.codec.clip}}},
          {"dropouts", drops},
          {"seed", std::to_string(c.seed)},
          {"ids", c.ids},
          {"inputs", inputs}};
}

SecAggConfig secagg_config_from_json(const json& j) {
  SecAggConfig c;
  c.n = j.at("n");
  c.k = j.at("k");
  c.dim = j.at("dim");
  c.group = j.at("group");
  c.share_modulus = undec(j.at("share_modulus"));
  const auto& cj = j.at("codec");
  c.codec.frac_bits = cj.at("frac_bits");
  c.codec.modulus = undec(cj.at("modulus"));
  c.codec.max_summands = cj.at("max_summands");
  c.codec.clip = cj.at("clip");
  for (const auto& d : j.at("dropouts")) c.dropouts.push_back(DropEvent{d.at("client"), d.at("after_round")});
  c.seed = undec(j.at("seed"));
  c.ids = j.at("ids").get<std::vector<ClientId>>();
  for (const auto& v : j.at("inputs")) c.inputs.emplace_back(v.get<std::vector<double>>());
  return c;
}

// ---------------------------------------------------------------------------
// Client

ClientState make_client(ClientId id, const SecAggConfig& cfg, const ParamVector& input,
                        const crypto::KeyPair& signing, Rng rng) {
  const auto params = crypto::DhParams::by_name(cfg.group);
  ClientState s;
  s.id = id;
  s.k = cfg.k;
  s.dim = cfg.dim;
  s.share_modulus = cfg.share_modulus;
  s.codec = cfg.codec;
  s.input = input;
  s.signing = signing;
  s.kp1 = crypto::KeyPair::generate(params, rng);
  s.kp2 = crypto::KeyPair::generate(params, rng);
  s.self_seed = crypto::derive_seed(s.kp2.sk, params, "self", cfg.share_modulus);
  // Remaining randomness (Shamir coefficients) comes from a child stream.
  s.encoded_input = encode_fixed(clip_values(input, cfg.codec.clip), cfg.codec);
  return s;
}

namespace {

void abort_client(ClientState& s, std::string reason) {
  s.phase = Phase::Aborted;
  s.abort_reason = std::move(reason);
}

template <typename T>
const T* only_body(const std::vector<Message>& inbox) {
  if (inbox.size() != 1) return nullptr;
  return std::get_if<T>(&inbox.front().body);
}

Rng client_rng(const ClientState& s) {
  // Shamir randomness: derived from the client's private key so the state
  // machine needs no mutable generator.
  const auto h = crypto::sha256(crypto::to_bytes(s.kp1.sk + s.kp2.sk, 512));
  std::uint64_t seed = 0;
  for (int i = 0; i < 8; ++i) seed = (seed << 8) | h[static_cast<std::size_t>(i)];
  return Rng(seed, s.id);
}

}  // namespace

std::vector<Message> client_step(ClientState& s, const std::vector<Message>& inbox, const Pki& pki) {
  const auto& params = pki.params;
  const std::uint64_t q = s.share_modulus;
  switch (s.phase) {
    case Phase::Advertise: {
      KeyAdvert adv{s.kp1.pk, s.kp2.pk, crypto::sign(advert_bytes(s.id, s.kp1.pk, s.kp2.pk, params), s.signing, params)};
      s.phase = Phase::ShareKeys;
      return {Message{0, s.id, kServerId, adv}};
    }

    case Phase::ShareKeys: {
      const auto* list = only_body<KeyList>(inbox);
      if (!list) throw ProtocolError("client " + std::to_string(s.id) + " expected a key list");
      for (const auto& [id, adv] : list->adverts) {
        const auto it = pki.signing_keys.find(id);
        if (it == pki.signing_keys.end()) {
          abort_client(s, "client " + std::to_string(id) + " is not registered");
          return {};
        }
        if (!crypto::verify(advert_bytes(id, adv.pk1, adv.pk2, params), adv.sig, it->second, params)) {
          abort_client(s, "bad advert signature from client " + std::to_string(id));
          return {};
        }
      }
      const auto self = list->adverts.find(s.id);
      if (self == list->adverts.end() || self->second.pk1 != s.kp1.pk || self->second.pk2 != s.kp2.pk) {
        abort_client(s, "own keys missing from the key list");
        return {};
      }
      if (list->adverts.size() < s.k) {
        abort_client(s, "below threshold: " + std::to_string(list->adverts.size()) + " keys < k=" + std::to_string(s.k));
        return {};
      }
      s.peers = list->adverts;
      std::vector<ClientId> ids, others;
      for (const auto& [id, adv] : s.peers) {
        ids.push_back(id);
        if (id == s.id) continue;
        others.push_back(id);
        const BigInt secret = crypto::dh_shared_secret(s.kp1, adv.pk1, params);
        s.seeds[id] = crypto::derive_seed(secret, params, "mask", q);
        s.enc_seeds[id] = crypto::derive_seed(secret, params, "enc", kMersenne61);
      }
      Rng rng = client_rng(s);
      const auto self_shares = crypto::shamir_split_at(s.self_seed, s.k, ids, rng, q);
      std::map<ClientId, std::vector<crypto::ShamirShare>> seed_shares;
      for (ClientId m : others) seed_shares[m] = crypto::shamir_split_at(s.seeds[m], s.k, ids, rng, q);

      KeyShares out;
      for (std::size_t pos = 0; pos < ids.size(); ++pos) {
        const ClientId to = ids[pos];
        std::vector<std::uint64_t> pt = {s.id, to, self_shares[pos].value};
        for (ClientId m : others) pt.push_back(seed_shares[m][pos].value);
        if (to == s.id) {
          HeldShares& h = s.held[s.id];
          h.self_share = pt[2];
          for (std::size_t i = 0; i < others.size(); ++i) h.seed_shares[others[i]] = pt[3 + i];
          continue;
        }
        const auto ks = keystream(s.enc_seeds[to], pt.size(), q);
        EncryptedBundle b{s.id, to, {}};
        for (std::size_t i = 0; i < pt.size(); ++i) b.ciphertext.push_back(mod_add(pt[i] % q, ks[i], q));
        out.bundles.push_back(std::move(b));
      }
      s.phase = Phase::MaskedInput;
      return {Message{1, s.id, kServerId, out}};
    }

    case Phase::MaskedInput: {
      const auto* delivery = only_body<ShareDelivery>(inbox);
      if (!delivery) throw ProtocolError("client " + std::to_string(s.id) + " expected share delivery");
      s.u2 = {s.id};
      for (const auto& b : delivery->bundles) {
        if (b.to != s.id || !s.peers.count(b.from) || b.from == s.id) {
          abort_client(s, "misaddressed share bundle");
          return {};
        }
        const auto ks = keystream(s.enc_seeds[b.from], b.ciphertext.size(), q);
        std::vector<std::uint64_t> pt(b.ciphertext.size());
        for (std::size_t i = 0; i < pt.size(); ++i) pt[i] = mod_sub(b.ciphertext[i], ks[i], q);
        if (pt.size() != 2 + s.peers.size() || pt[0] != b.from || pt[1] != s.id) {
          abort_client(s, "share bundle from client " + std::to_string(b.from) + " failed to decrypt");
          return {};
        }
        HeldShares& h = s.held[b.from];
        h.self_share = pt[2];
        std::size_t i = 3;
        for (const auto& [m, adv] : s.peers) {
          if (m != b.from) h.seed_shares[m] = pt[i++];
        }
        s.u2.insert(b.from);
      }
      if (s.u2.size() < s.k) {
        abort_client(s, "below threshold: " + std::to_string(s.u2.size()) + " clients shared keys < k=" + std::to_string(s.k));
        return {};
      }
      FieldVector c = s.encoded_input;
      field_add_inplace(c, self_mask(s.self_seed, s.dim));
      for (ClientId j : s.u2) {
        if (j != s.id) field_add_inplace(c, pairwise_mask(s.id, j, s.seeds[j], s.dim));
      }
      s.masked_input = c;
      s.phase = Phase::Consistency;
      return {Message{2, s.id, kServerId, MaskedInput{std::move(c)}}};
    }

    case Phase::Consistency: {
      const auto* list = only_body<SurvivorList>(inbox);
      if (!list) throw ProtocolError("client " + std::to_string(s.id) + " expected a survivor list");
      const auto& u3 = list->survivors;
      if (!std::is_sorted(u3.begin(), u3.end()) || std::adjacent_find(u3.begin(), u3.end()) != u3.end()) {
        abort_client(s, "survivor list is not canonical");
        return {};
      }
      for (ClientId j : u3) {
        if (!s.u2.count(j)) {
          abort_client(s, "survivor list names client " + std::to_string(j) + " that never shared keys");
          return {};
        }
      }
      if (u3.size() < s.k) {
        abort_client(s, "below threshold: " + std::to_string(u3.size()) + " survivors < k=" + std::to_string(s.k));
        return {};
      }
      s.u3 = u3;
      s.phase = Phase::Unmask;
      return {Message{3, s.id, kServerId, ConsistencySig{crypto::sign(survivor_list_bytes(u3), s.signing, params)}}};
    }

    case Phase::Unmask: {
      const auto* req = only_body<UnmaskRequest>(inbox);
      if (!req) throw ProtocolError("client " + std::to_string(s.id) + " expected an unmask request");
      if (req->survivors != s.u3) {
        abort_client(s, "survivor list changed between rounds");
        return {};
      }
      if (req->signers.size() < s.k) {
        abort_client(s, "below threshold: " + std::to_string(req->signers.size()) + " signatures < k=" + std::to_string(s.k));
        return {};
      }
      const Bytes signed_list = survivor_list_bytes(s.u3);
      for (const auto& [id, sig] : req->signers) {
        const auto it = pki.signing_keys.find(id);
        if (!std::binary_search(s.u3.begin(), s.u3.end(), id) || it == pki.signing_keys.end() ||
            !crypto::verify(signed_list, sig, it->second, params)) {
          abort_client(s, "bad consistency signature from client " + std::to_string(id));
          return {};
        }
      }
      UnmaskShares out;
      for (ClientId j : s.u3) out.self_shares[j] = s.held.at(j).self_share;
      for (ClientId j : s.u2) {
        if (std::binary_search(s.u3.begin(), s.u3.end(), j)) continue;
        for (ClientId m : s.u3) out.seed_shares.push_back(SeedShare{j, m, s.held.at(j).seed_shares.at(m)});
      }
      s.phase = Phase::Done;
      return {Message{4, s.id, kServerId, out}};
    }

    case Phase::Done:
    case Phase::Aborted:
      return {};
  }
  return {};
}

// ---------------------------------------------------------------------------
// Server

ServerState make_server(const SecAggConfig& cfg, ServerPolicy policy) {
  ServerState s;
  s.k = cfg.k;
  s.dim = cfg.dim;
  s.share_modulus = cfg.share_modulus;
  s.codec = cfg.codec;
  s.policy = std::move(policy);
  return s;
}

namespace {

bool declared_dropped(const ServerState& s, ClientId id, int round) {
  const auto it = s.policy.declared_drops.find(id);
  return it != s.policy.declared_drops.end() && round >= it->second;
}

bool below_threshold(ServerState& s, const std::vector<ClientId>& set, const char* what) {
  if (set.size() >= s.k) return false;
  s.aborted = true;
  s.abort_reason = "below threshold: " + std::to_string(set.size()) + " " + what + " < k=" + std::to_string(s.k);
  return true;
}

}  // namespace

std::vector<Message> server_step(ServerState& s, const std::vector<Message>& inbox) {
  if (s.aborted) return {};
  const int r = s.round;
  if (r >= kRoundCount) throw ProtocolError("server already finished");
  std::map<ClientId, const Message*> from;
  for (const auto& m : inbox) {
    if (m.round != r || m.to != kServerId) throw ProtocolError("server received a message for another round");
    if (declared_dropped(s, m.from, r)) continue;
    if (from.count(m.from)) throw ProtocolError("duplicate message from client " + std::to_string(m.from));
    from[m.from] = &m;
  }
  auto allowed = [&](const std::vector<ClientId>& prev, ClientId id) {
    return std::binary_search(prev.begin(), prev.end(), id);
  };
  std::vector<Message> out;
  ++s.round;

  switch (r) {
    case 0: {
      for (const auto& [id, m] : from) {
        const auto* adv = std::get_if<KeyAdvert>(&m->body);
        if (!adv) throw ProtocolError("round 0 expects key adverts");
        s.adverts[id] = *adv;
        s.u1.push_back(id);
      }
      if (below_threshold(s, s.u1, "clients advertised keys")) return {};
      KeyList list{s.adverts};
      for (ClientId id : s.u1) out.push_back(Message{1, kServerId, id, list});
      return out;
    }
    case 1: {
      for (const auto& [id, m] : from) {
        if (!allowed(s.u1, id)) continue;
        const auto* ks = std::get_if<KeyShares>(&m->body);
        if (!ks) throw ProtocolError("round 1 expects key shares");
        s.bundles[id] = ks->bundles;
        s.u2.push_back(id);
      }
      if (below_threshold(s, s.u2, "clients shared keys")) return {};
      for (ClientId to : s.u2) {
        ShareDelivery d;
        for (ClientId sender : s.u2) {
          for (const auto& b : s.bundles[sender]) {
            if (b.to == to) d.bundles.push_back(b);
          }
        }
        out.push_back(Message{2, kServerId, to, std::move(d)});
      }
      return out;
    }
    case 2: {
      for (const auto& [id, m] : from) {
        if (!allowed(s.u2, id)) continue;
        const auto* mi = std::get_if<MaskedInput>(&m->body);
        if (!mi) throw ProtocolError("round 2 expects masked inputs");
        if (mi->masked.dim() != s.dim || mi->masked.modulus != kMersenne61) {
          throw ProtocolError("masked input from client " + std::to_string(id) + " has the wrong shape");
        }
        s.masked[id] = mi->masked;
        s.u3.push_back(id);
      }
      if (below_threshold(s, s.u3, "clients sent masked input")) return {};
      for (ClientId id : s.u3) out.push_back(Message{3, kServerId, id, SurvivorList{s.u3}});
      return out;
    }
    case 3: {
      for (const auto& [id, m] : from) {
        if (!allowed(s.u3, id)) continue;
        const auto* cs = std::get_if<ConsistencySig>(&m->body);
        if (!cs) throw ProtocolError("round 3 expects consistency signatures");
        s.consistency[id] = cs->sig;
        s.u4.push_back(id);
      }
      if (below_threshold(s, s.u4, "clients signed the survivor list")) return {};
      UnmaskRequest req{s.u3, s.consistency};
      for (ClientId id : s.u4) out.push_back(Message{4, kServerId, id, req});
      return out;
    }
    case 4: {
      for (const auto& [id, m] : from) {
        if (!allowed(s.u4, id)) continue;
        const auto* us = std::get_if<UnmaskShares>(&m->body);
        if (!us) throw ProtocolError("round 4 expects unmask shares");
        s.unmask[id] = *us;
        s.u5.push_back(id);
      }
      if (below_threshold(s, s.u5, "clients sent unmask shares")) return {};

      const std::uint32_t total = static_cast<std::uint32_t>(s.u1.size());
      FieldVector agg = field_zero(s.dim, kMersenne61, s.codec.frac_bits);
      for (ClientId j : s.u3) field_add_inplace(agg, s.masked.at(j));
      try {
        for (ClientId j : s.u3) {
          std::vector<crypto::ShamirShare> shares;
          for (ClientId l : s.u5) {
            const auto& ss = s.unmask.at(l).self_shares;
            if (auto it = ss.find(j); it != ss.end()) {
              shares.push_back(crypto::ShamirShare{l, it->second, s.k, total, s.share_modulus});
            }
          }
          field_sub_inplace(agg, self_mask(crypto::shamir_reconstruct(shares), s.dim));
        }
        std::map<std::pair<ClientId, ClientId>, std::vector<crypto::ShamirShare>> pair_shares;
        for (ClientId l : s.u5) {
          for (const auto& sh : s.unmask.at(l).seed_shares) {
            pair_shares[{sh.owner, sh.peer}].push_back(crypto::ShamirShare{l, sh.value, s.k, total, s.share_modulus});
          }
        }
        for (ClientId j : s.u2) {
          if (allowed(s.u3, j)) continue;
          for (ClientId m : s.u3) {
            const std::uint64_t seed = crypto::shamir_reconstruct(pair_shares[{j, m}]);
            field_sub_inplace(agg, pairwise_mask(m, j, seed, s.dim));
          }
        }
      } catch (const ThresholdError& e) {
        s.aborted = true;
        s.abort_reason = std::string("below threshold: missing unmask shares (") + e.what() + ")";
        return {};
      }
      s.aggregate = std::move(agg);
      return {};
    }
  }
  return {};
}

// ---------------------------------------------------------------------------
// Sessions

namespace {

const char* kind_name(TranscriptEvent::Kind k) {
  switch (k) {
    case TranscriptEvent::Kind::Message: return "message";
    case TranscriptEvent::Kind::Dropout: return "dropout";
    case TranscriptEvent::Kind::DeclaredDrop: return "declared_drop";
    case TranscriptEvent::Kind::ClientAbort: return "client_abort";
  }
  return "?";
}

TranscriptEvent::Kind kind_from(const std::string& s) {
  if (s == "message") return TranscriptEvent::Kind::Message;
  if (s == "dropout") return TranscriptEvent::Kind::Dropout;
  if (s == "declared_drop") return TranscriptEvent::Kind::DeclaredDrop;
  if (s == "client_abort") return TranscriptEvent::Kind::ClientAbort;
  throw ParameterError("unknown transcript event '" + s + "'");
}

json policy_json(const ServerPolicy& p) {
  json arr = json::array();
  for (const auto& [id, r] : p.declared_drops) arr.push_back({{"client", id}, {"round", r}});
  return {{"declared_drops", arr}};
}

ServerPolicy policy_from(const json& j) {
  ServerPolicy p;
  for (const auto& e : j.at("declared_drops")) p.declared_drops[e.at("client").get<ClientId>()] = e.at("round");
  return p;
}

}  // namespace

SessionResult run_session(const SecAggConfig& cfg, const ServerPolicy& policy) {
  cfg.validate();
  const auto params = crypto::DhParams::by_name(cfg.group);
  const auto ids = cfg.client_ids();
  const auto inputs = cfg.client_inputs();
  Rng master(cfg.seed);

  Pki pki{params, {}};
  SessionResult res;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    Rng key_rng = master.split(0x5349474eULL).split(ids[i]);  // "SIGN"
    const auto signing = crypto::KeyPair::generate(params, key_rng);
    pki.signing_keys[ids[i]] = signing.pk;
    res.clients.emplace(ids[i], make_client(ids[i], cfg, inputs[i], signing, master.split(ids[i])));
  }
  std::map<ClientId, int> last_round;  // last round a client sends in
  for (ClientId id : ids) last_round[id] = kRoundCount - 1;
  for (const auto& d : cfg.dropouts) last_round[d.client] = d.after_round;

  RoundTranscript& t = res.transcript;
  t.config = cfg;
  t.policy = policy;
  ServerState server = make_server(cfg, policy);
  std::map<ClientId, std::vector<Message>> inbox;

  for (int r = 0; r < kRoundCount; ++r) {
    std::vector<Message> to_server;
    for (ClientId id : ids) {
      if (last_round[id] == r - 1) {
        t.events.push_back({TranscriptEvent::Kind::Dropout, r, id, "dropped after " + round_name(r - 1), {}});
      }
      if (last_round[id] < r) continue;
      auto& st = res.clients.at(id);
      if (st.phase == Phase::Done || st.phase == Phase::Aborted) continue;
      if (r > 0 && inbox[id].empty()) continue;  // not addressed this round
      auto out = client_step(st, inbox[id], pki);
      if (st.phase == Phase::Aborted) {
        t.events.push_back({TranscriptEvent::Kind::ClientAbort, r, id, st.abort_reason, {}});
      }
      for (auto& m : out) {
        t.events.push_back({TranscriptEvent::Kind::Message, r, m.from, "", m});
        to_server.push_back(std::move(m));
      }
    }
    for (const auto& [id, dr] : policy.declared_drops) {
      if (dr == r) t.events.push_back({TranscriptEvent::Kind::DeclaredDrop, r, id, "server declares client dropped", {}});
    }
    inbox.clear();
    auto from_server = server_step(server, to_server);
    for (auto& m : from_server) {
      t.events.push_back({TranscriptEvent::Kind::Message, r, kServerId, "", m});
      inbox[m.to].push_back(std::move(m));
    }
    if (server.aborted) break;
  }

  t.aborted = server.aborted;
  t.abort_reason = server.abort_reason;
  t.contributors = server.u3;
  if (server.aggregate) {
    t.aggregate_field = server.aggregate;
    t.aggregate = decode_fixed(*server.aggregate);
  }
  return res;
}

RoundTranscript run_secagg(const SecAggConfig& cfg) { return run_session(cfg).transcript; }

std::string to_jsonl(const RoundTranscript& t) {
  std::ostringstream os;
  os << json{{"type", "header"},
             {"schema", "flsec.secagg.transcript"},
             {"version", RoundTranscript::kSchemaVersion},
             {"config", to_json(t.config)},
             {"policy", policy_json(t.policy)}}
            .dump()
     << '\n';
  for (const auto& e : t.events) {
    json j{{"type", kind_name(e.kind)}, {"round", e.round}, {"client", e.client}};
    if (!e.detail.empty()) j["detail"] = e.detail;
    if (e.message) j["message"] = to_json(*e.message);
    os << j.dump() << '\n';
  }
  json result{{"type", "result"},
              {"aborted", t.aborted},
              {"abort_reason", t.abort_reason},
              {"contributors", t.contributors},
              {"aggregate_field", t.aggregate_field ? flsec::to_json(*t.aggregate_field) : json(nullptr)},
              {"aggregate", t.aggregate ? json(t.aggregate->values()) : json(nullptr)}};
  os << result.dump() << '\n';
  return os.str();
}

RoundTranscript transcript_from_jsonl(const std::string& text) {
  RoundTranscript t;
  std::istringstream is(text);
  std::string line;
  bool header = false, result = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    const std::string type = j.at("type");
    if (type == "header") {
      if (j.at("version") != RoundTranscript::kSchemaVersion) throw ParameterError("unsupported transcript version");
      t.config = secagg_config_from_json(j.at("config"));
      t.policy = policy_from(j.at("policy"));
      header = true;
    } else if (type == "result") {
      t.aborted = j.at("aborted");
      t.abort_reason = j.at("abort_reason");
      t.contributors = j.at("contributors").get<std::vector<ClientId>>();
      if (!j.at("aggregate_field").is_null()) t.aggregate_field = field_vector_from_json(j.at("aggregate_field"));
      if (!j.at("aggregate").is_null()) t.aggregate = ParamVector(j.at("aggregate").get<std::vector<double>>());
      result = true;
    } else {
      TranscriptEvent e;
      e.kind = kind_from(type);
      e.round = j.at("round");
      e.client = j.at("client");
      if (j.contains("detail")) e.detail = j.at("detail");
      if (j.contains("message")) e.message = message_from_json(j.at("message"));
      t.events.push_back(std::move(e));
    }
  }
  if (!header || !result) throw ParameterError("transcript is missing its header or result line");
  return t;
}

std::optional<FieldVector> replay_server(const RoundTranscript& t) {
  ServerState server = make_server(t.config, t.policy);
  for (int r = 0; r < kRoundCount && !server.aborted; ++r) {
    std::vector<Message> inbox;
    for (const auto& e : t.events) {
      if (e.message && e.message->round == r && e.message->to == kServerId) inbox.push_back(*e.message);
    }
    server_step(server, inbox);
  }
  if (server.aborted) return std::nullopt;
  return server.aggregate;
}

ReplayCheck replay(const RoundTranscript& t) {
  const auto again = run_session(t.config, t.policy).transcript;
  ReplayCheck c;
  const std::string a = to_jsonl(t), b = to_jsonl(again);
  c.identical = a == b;
  if (!c.identical) {
    std::istringstream sa(a), sb(b);
    std::string la, lb;
    std::size_t line = 0;
    while (true) {
      ++line;
      const bool ga = static_cast<bool>(std::getline(sa, la));
      const bool gb = static_cast<bool>(std::getline(sb, lb));
      if (!ga || !gb || la != lb) break;
    }
    c.first_difference = line;
  }
  const auto replayed = replay_server(t);
  c.aggregate_matches = replayed == t.aggregate_field;
  return c;
}

}  // namespace flsec::secagg
