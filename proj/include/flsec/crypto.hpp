#pragma once

// Simulation-grade cryptography. Nothing here is constant time and none of it
// should protect real data.

#include <gmpxx.h>

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "flsec/numeric.hpp"

namespace flsec::crypto {

using BigInt = mpz_class;
using Bytes = std::vector<std::uint8_t>;

// base^exp mod modulus by left-to-right square-and-multiply.
BigInt modexp(const BigInt& base, const BigInt& exp, const BigInt& modulus);

BigInt from_decimal(const std::string& s);
std::string to_decimal(const BigInt& v);
// Big-endian, left-padded with zeros to `width` bytes.
Bytes to_bytes(const BigInt& v, std::size_t width);
BigInt from_bytes(std::span<const std::uint8_t> bytes);

std::array<std::uint8_t, 32> sha256(std::span<const std::uint8_t> data);

struct DhParams {
  std::string name;
  BigInt p;
  BigInt g;

  // RFC 3526 group 14 (2048-bit MODP), generator 2.
  static DhParams rfc3526_2048();
  // p = 23, g = 5.
  static DhParams toy();
  // 64-bit safe prime p = 2q + 1, g = 4 generating the order-q subgroup.
  static DhParams safe64();
  static DhParams by_name(const std::string& name);

  void validate() const;
  std::size_t byte_length() const;
};

struct KeyPair {
  BigInt sk;
  BigInt pk;

  // sk uniform in [1, p - 2].
  static KeyPair generate(const DhParams& params, Rng& rng);
  static KeyPair from_secret(const BigInt& sk, const DhParams& params);
};

// pk_j^{sk_i} mod p. Rejects their_pk outside (1, p).
BigInt dh_shared_secret(const KeyPair& mine, const BigInt& their_pk, const DhParams& params);

// First 8 bytes (big-endian) of SHA-256(label || 0x00 || bytes(secret)), with
// bytes(secret) padded to the group width, reduced mod `modulus`.
std::uint64_t derive_seed(const BigInt& secret, const DhParams& params, std::string_view label,
                          std::uint64_t modulus);

// `dim` field elements drawn from Rng(seed) by rejection sampling.
FieldVector prg_expand(std::uint64_t seed, std::size_t dim, std::uint64_t modulus = kMersenne61);

// ---------------------------------------------------------------------------
// Shamir secret sharing over the prime field Z_q, q < 2^62.

struct ShamirShare {
  std::uint32_t index = 0;
  std::uint64_t value = 0;
  std::uint32_t threshold = 0;
  std::uint32_t total = 0;
  std::uint64_t modulus = kMersenne61;

  friend bool operator==(const ShamirShare&, const ShamirShare&) = default;
};

std::vector<ShamirShare> shamir_split(std::uint64_t secret, std::uint32_t k, std::uint32_t n,
                                      Rng& rng, std::uint64_t modulus = kMersenne61);

// Shares evaluated at arbitrary distinct nonzero indices (for example client
// ids); `total` is set to indices.size().
std::vector<ShamirShare> shamir_split_at(std::uint64_t secret, std::uint32_t k,
                                         std::span<const std::uint32_t> indices, Rng& rng,
                                         std::uint64_t modulus = kMersenne61);

// Lagrange interpolation at 0 over the first `threshold` shares.
std::uint64_t shamir_reconstruct(std::span<const ShamirShare> shares);

// Secrets s among `candidates` for which some polynomial of degree < k passes
// through (0, s) and every known share.
std::vector<std::uint64_t> consistent_secrets(std::span<const ShamirShare> known,
                                              std::span<const std::uint64_t> candidates);

// ---------------------------------------------------------------------------
// Schnorr signatures over a DH group, exponents mod p - 1.
//   k = H(sk || m) mod (p-1), R = g^k, e = H(R || pk || m) mod (p-1),
//   s = k + e*sk mod (p-1); valid iff g^s == R * pk^e mod p.
// Integers are hashed as fixed-width big-endian strings of the group width.

struct Signature {
  BigInt r;
  BigInt s;
};

Signature sign(std::span<const std::uint8_t> message, const KeyPair& key, const DhParams& params);
bool verify(std::span<const std::uint8_t> message, const Signature& sig, const BigInt& pk,
            const DhParams& params);

// ---------------------------------------------------------------------------
// Textbook RSA, used only to show the multiplicative homomorphism.

struct RsaKey {
  BigInt n;
  BigInt e;
  BigInt d;

  static RsaKey from_primes(const BigInt& p, const BigInt& q, const BigInt& e);
};

BigInt rsa_encrypt(const BigInt& m, const RsaKey& key);
BigInt rsa_decrypt(const BigInt& c, const RsaKey& key);

struct RsaHomomorphism {
  BigInt lhs;
  BigInt rhs;
  bool equal = false;
};
RsaHomomorphism rsa_homomorphism_demo(const BigInt& m1, const BigInt& m2, const RsaKey& key);

nlohmann::json to_json(const Signature& sig);
Signature signature_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ShamirShare& s);
ShamirShare share_from_json(const nlohmann::json& j);

}  // namespace flsec::crypto
