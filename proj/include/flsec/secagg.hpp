#pragma once

// Five-round secure aggregation over an in-process message transport.
//
// Rounds: 0 advertise keys, 1 share keys, 2 masked input, 3 consistency,
// 4 unmask. Participant sets shrink monotonically: U1 advertised, U2 shared
// keys, U3 sent masked input, U4 signed the survivor list, U5 sent unmask
// shares. A client in U3 is always part of the aggregate, even if it drops
// later.
//
// Key material per client i:
//   keypair 1 (sk1, pk1): s_ij = pk1_j^sk1_i; the pairwise mask seed is
//     H("mask", s_ij) and the share-encryption key is H("enc", s_ij).
//   keypair 2 (sk2, pk2): the individual mask seed b_i = H("self", sk2).
// b_i and every pairwise seed are Shamir-shared over Z_q (share_modulus).
// Client i adds +PRG(seed_ij) for j > i and -PRG(seed_ij) for j < i.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "flsec/crypto.hpp"
#include "flsec/numeric.hpp"

namespace flsec::secagg {

using ClientId = std::uint32_t;
inline constexpr ClientId kServerId = 0;

enum class Phase { Advertise, ShareKeys, MaskedInput, Consistency, Unmask, Done, Aborted };
std::string to_string(Phase p);

inline constexpr int kRoundCount = 5;
std::string round_name(int round);

// ---------------------------------------------------------------------------
// Messages

struct KeyAdvert {
  crypto::BigInt pk1;
  crypto::BigInt pk2;
  crypto::Signature sig;
};

// Server -> client, round 1: every advert the server accepted.
struct KeyList {
  std::map<ClientId, KeyAdvert> adverts;
};

// Shares one client sends another, encrypted under their pairwise key.
// Plaintext: [from, to, share of b_from, shares of seed_(from,m) for every
// other m in the key list, ascending].
struct EncryptedBundle {
  ClientId from = 0;
  ClientId to = 0;
  std::vector<std::uint64_t> ciphertext;
};

struct KeyShares {
  std::vector<EncryptedBundle> bundles;
};

struct ShareDelivery {
  std::vector<EncryptedBundle> bundles;
};

struct MaskedInput {
  FieldVector masked;
};

struct SurvivorList {
  std::vector<ClientId> survivors;  // U3, ascending
};

struct ConsistencySig {
  crypto::Signature sig;
};

struct UnmaskRequest {
  std::vector<ClientId> survivors;                // U3
  std::map<ClientId, crypto::Signature> signers;  // U4 and their signatures
};

struct SeedShare {
  ClientId owner = 0;  // dropped client whose seed this is
  ClientId peer = 0;   // survivor on the other end of the pair
  std::uint64_t value = 0;
};

struct UnmaskShares {
  std::map<ClientId, std::uint64_t> self_shares;  // shares of b_j, j in U3
  std::vector<SeedShare> seed_shares;             // j in U2 \ U3
};

using Body = std::variant<KeyAdvert, KeyList, KeyShares, ShareDelivery, MaskedInput, SurvivorList,
                          ConsistencySig, UnmaskRequest, UnmaskShares>;

struct Message {
  int round = 0;
  ClientId from = 0;
  ClientId to = 0;
  Body body;
};

std::string type_name(const Body& b);
nlohmann::json to_json(const Message& m);
Message message_from_json(const nlohmann::json& j);

// Canonical bytes signed in the consistency round: "U3" then each id as a
// 4-byte big-endian integer, ascending.
crypto::Bytes survivor_list_bytes(const std::vector<ClientId>& survivors);
// Bytes signed when advertising: "ADV", id (4 bytes), pk1, pk2 at group width.
crypto::Bytes advert_bytes(ClientId id, const crypto::BigInt& pk1, const crypto::BigInt& pk2,
                           const crypto::DhParams& params);

// ---------------------------------------------------------------------------
// Configuration

struct DropEvent {
  ClientId client = 0;
  // The client sends its message for this round and then disappears.
  // -1 means it never shows up.
  int after_round = -1;

  friend bool operator==(const DropEvent&, const DropEvent&) = default;
};

struct SecAggConfig {
  std::uint32_t n = 3;
  std::uint32_t k = 2;
  std::size_t dim = 4;
  std::string group = "rfc3526-2048";
  std::uint64_t share_modulus = kMersenne61;
  FixedPointCodec codec;
  std::vector<DropEvent> dropouts;
  std::uint64_t seed = 1;
  // Client ids; empty means 1..n.
  std::vector<ClientId> ids;
  // Per-client inputs in id order; empty means uniform on [-1, 1] from seed.
  std::vector<ParamVector> inputs;

  void validate() const;
  std::vector<ClientId> client_ids() const;
  std::vector<ParamVector> client_inputs() const;
};

nlohmann::json to_json(const SecAggConfig& c);
SecAggConfig secagg_config_from_json(const nlohmann::json& j);

// Long-term signing keys known to every participant.
struct Pki {
  crypto::DhParams params;
  std::map<ClientId, crypto::BigInt> signing_keys;
};

// ---------------------------------------------------------------------------
// Client

struct HeldShares {
  std::uint64_t self_share = 0;                  // share of the owner's b
  std::map<ClientId, std::uint64_t> seed_shares; // peer m -> share of seed_(owner,m)
};

struct ClientState {
  ClientId id = 0;
  Phase phase = Phase::Advertise;
  std::string abort_reason;
  std::uint32_t k = 0;
  std::size_t dim = 0;
  std::uint64_t share_modulus = kMersenne61;
  FixedPointCodec codec;
  ParamVector input;

  crypto::KeyPair signing;
  crypto::KeyPair kp1;
  crypto::KeyPair kp2;
  std::uint64_t self_seed = 0;  // b_i

  std::map<ClientId, KeyAdvert> peers;          // key list as received
  std::map<ClientId, std::uint64_t> seeds;      // seed_ij
  std::map<ClientId, std::uint64_t> enc_seeds;  // keystream seeds
  std::map<ClientId, HeldShares> held;          // shares received, incl. own
  std::set<ClientId> u2;
  std::vector<ClientId> u3;
  FieldVector encoded_input;
  FieldVector masked_input;
};

ClientState make_client(ClientId id, const SecAggConfig& cfg, const ParamVector& input,
                        const crypto::KeyPair& signing, Rng rng);

// One protocol step. The inbox holds the server's message for the current
// round (empty for the advertise round). Returns the messages to send.
std::vector<Message> client_step(ClientState& state, const std::vector<Message>& inbox,
                                 const Pki& pki);

// ---------------------------------------------------------------------------
// Server

struct ServerPolicy {
  // The server treats these clients as dropped from the given round on,
  // whether or not they are still responding.
  std::map<ClientId, int> declared_drops;
};

struct ServerState {
  std::uint32_t k = 0;
  std::size_t dim = 0;
  std::uint64_t share_modulus = kMersenne61;
  FixedPointCodec codec;
  ServerPolicy policy;
  int round = 0;
  bool aborted = false;
  std::string abort_reason;

  std::vector<ClientId> u1, u2, u3, u4, u5;
  std::map<ClientId, KeyAdvert> adverts;
  std::map<ClientId, std::vector<EncryptedBundle>> bundles;  // by sender
  std::map<ClientId, FieldVector> masked;
  std::map<ClientId, crypto::Signature> consistency;
  std::map<ClientId, UnmaskShares> unmask;
  std::optional<FieldVector> aggregate;
};

ServerState make_server(const SecAggConfig& cfg, ServerPolicy policy = {});

// Consumes every client message for the server's current round and returns
// the server's outgoing messages. Sets `aborted` when a participant set falls
// below k. After round 4 the aggregate is available.
std::vector<Message> server_step(ServerState& state, const std::vector<Message>& inbox);

// ---------------------------------------------------------------------------
// Sessions and transcripts

struct TranscriptEvent {
  enum class Kind { Message, Dropout, DeclaredDrop, ClientAbort };
  Kind kind = Kind::Message;
  int round = 0;
  ClientId client = 0;
  std::string detail;
  std::optional<Message> message;
};

struct RoundTranscript {
  static constexpr int kSchemaVersion = 1;
  SecAggConfig config;
  ServerPolicy policy;
  std::vector<TranscriptEvent> events;
  bool aborted = false;
  std::string abort_reason;
  std::vector<ClientId> contributors;  // U3
  std::optional<FieldVector> aggregate_field;
  std::optional<ParamVector> aggregate;
};

// JSON lines: a header with schema version and the config, one line per event,
// and a final result line. Field elements are decimal strings.
std::string to_jsonl(const RoundTranscript& t);
RoundTranscript transcript_from_jsonl(const std::string& text);

struct SessionResult {
  RoundTranscript transcript;
  std::map<ClientId, ClientState> clients;
};

SessionResult run_session(const SecAggConfig& cfg, const ServerPolicy& policy = {});
RoundTranscript run_secagg(const SecAggConfig& cfg);

// Feeds the logged client-to-server messages through a fresh server and
// returns its aggregate (nullopt if that server aborts).
std::optional<FieldVector> replay_server(const RoundTranscript& t);

// Reruns the session from the transcript's config and compares every line.
struct ReplayCheck {
  bool identical = false;
  bool aggregate_matches = false;
  std::size_t first_difference = 0;  // line number, 0 if none
};
ReplayCheck replay(const RoundTranscript& t);

// Masks as the protocol defines them, for oracles and attacks.
FieldVector pairwise_mask(ClientId i, ClientId j, std::uint64_t seed, std::size_t dim);
FieldVector self_mask(std::uint64_t self_seed, std::size_t dim);

}  // namespace flsec::secagg
