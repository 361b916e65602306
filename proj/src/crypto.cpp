#include "flsec/crypto.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <set>

#include "flsec/errors.hpp"

namespace flsec::crypto {

BigInt modexp(const BigInt& base, const BigInt& exp, const BigInt& modulus) {
  if (modulus < 2) throw ParameterError("modexp: modulus must be at least 2");
  if (exp < 0) throw ParameterError("modexp: exponent must be non-negative");
  BigInt b = base % modulus;
  if (b < 0) b += modulus;
  BigInt result = 1;
  const std::size_t bits = mpz_sizeinbase(exp.get_mpz_t(), 2);
  for (std::size_t i = bits; i-- > 0;) {
    result = result * result % modulus;
    if (mpz_tstbit(exp.get_mpz_t(), i)) result = result * b % modulus;
  }
  return result % modulus;
}

BigInt from_decimal(const std::string& s) {
  BigInt v;
  if (s.empty() || v.set_str(s, 10) != 0) throw ParameterError("not a decimal integer: '" + s + "'");
  return v;
}

std::string to_decimal(const BigInt& v) { return v.get_str(10); }

Bytes to_bytes(const BigInt& v, std::size_t width) {
  if (v < 0) throw ParameterError("to_bytes: negative integer");
  const std::size_t need = (mpz_sizeinbase(v.get_mpz_t(), 2) + 7) / 8;
  if (need > width) throw ParameterError("to_bytes: integer wider than the requested width");
  Bytes out(width, 0);
  std::size_t count = 0;
  mpz_export(out.data() + (width - need), &count, 1, 1, 1, 0, v.get_mpz_t());
  return out;
}

BigInt from_bytes(std::span<const std::uint8_t> bytes) {
  BigInt v;
  if (!bytes.empty()) mpz_import(v.get_mpz_t(), bytes.size(), 1, 1, 1, 0, bytes.data());
  return v;
}

std::array<std::uint8_t, 32> sha256(std::span<const std::uint8_t> data) {
  std::array<std::uint8_t, 32> out{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 || len != 32) {
    throw Error("sha256 failed");
  }
  return out;
}

// ---------------------------------------------------------------------------

DhParams DhParams::rfc3526_2048() {
  DhParams d;
  d.name = "rfc3526-2048";
  d.p.set_str(
      "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74020BBEA63B139B22514A08798E3404DD"
      "EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
      "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F"
      "83655D23DCA3AD961C62F356208552BB9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
      "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF6955817183995497CEA956AE515D2261898FA0510"
      "15728E5A8AACAA68FFFFFFFFFFFFFFFF",
      16);
  d.g = 2;
  return d;
}

DhParams DhParams::toy() { return DhParams{"toy", 23, 5}; }

DhParams DhParams::safe64() {
  DhParams d;
  d.name = "safe64";
  d.p = from_decimal("12118870745514474443");
  d.g = 4;
  return d;
}

DhParams DhParams::by_name(const std::string& name) {
  if (name == "rfc3526-2048") return rfc3526_2048();
  if (name == "toy") return toy();
  if (name == "safe64") return safe64();
  throw ParameterError("unknown DH group '" + name + "'");
}

void DhParams::validate() const {
  if (p < 5) throw ParameterError("DH modulus too small");
  if (!(g > 1 && g < p)) throw ParameterError("DH generator must satisfy 1 < g < p");
  if (mpz_probab_prime_p(p.get_mpz_t(), 25) == 0) throw ParameterError("DH modulus is not prime");
}

std::size_t DhParams::byte_length() const { return (mpz_sizeinbase(p.get_mpz_t(), 2) + 7) / 8; }

namespace {

BigInt random_below(const BigInt& bound, Rng& rng) {
  // Oversample by 64 bits so the modular bias is below 2^-64.
  const std::size_t words = mpz_sizeinbase(bound.get_mpz_t(), 2) / 64 + 2;
  BigInt acc = 0;
  for (std::size_t i = 0; i < words; ++i) {
    acc <<= 64;
    const std::uint64_t w = rng.next_u64();
    acc += BigInt(static_cast<unsigned long>(w >> 32)) << 32;
    acc += static_cast<unsigned long>(w & 0xffffffffu);
  }
  return acc % bound;
}

BigInt hash_to_int(std::initializer_list<std::span<const std::uint8_t>> parts) {
  Bytes buf;
  for (auto p : parts) buf.insert(buf.end(), p.begin(), p.end());
  const auto h = sha256(buf);
  return from_bytes(h);
}

}  // namespace

KeyPair KeyPair::generate(const DhParams& params, Rng& rng) {
  return from_secret(random_below(params.p - 2, rng) + 1, params);
}

KeyPair KeyPair::from_secret(const BigInt& sk, const DhParams& params) {
  if (sk < 1 || sk > params.p - 2) throw ParameterError("secret key outside [1, p-2]");
  return KeyPair{sk, modexp(params.g, sk, params.p)};
}

BigInt dh_shared_secret(const KeyPair& mine, const BigInt& their_pk, const DhParams& params) {
  if (!(their_pk > 1 && their_pk < params.p)) {
    throw ProtocolError("peer public key outside (1, p)");
  }
  return modexp(their_pk, mine.sk, params.p);
}

std::uint64_t derive_seed(const BigInt& secret, const DhParams& params, std::string_view label,
                          std::uint64_t modulus) {
  if (modulus < 2) throw ParameterError("derive_seed: modulus must be at least 2");
  Bytes buf(label.begin(), label.end());
  buf.push_back(0);
  const Bytes s = to_bytes(secret, params.byte_length());
  buf.insert(buf.end(), s.begin(), s.end());
  const auto h = sha256(buf);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v = (v << 8) | h[static_cast<std::size_t>(i)];
  return v % modulus;
}

FieldVector prg_expand(std::uint64_t seed, std::size_t dim, std::uint64_t modulus) {
  if (modulus < 2) throw ParameterError("prg_expand: modulus must be at least 2");
  Rng rng(seed, 0x5052470000000000ULL);  // "PRG" stream
  FieldVector out;
  out.modulus = modulus;
  out.residues.resize(dim);
  for (auto& r : out.residues) r = rng.uniform_below(modulus);
  return out;
}

// ---------------------------------------------------------------------------

std::vector<ShamirShare> shamir_split_at(std::uint64_t secret, std::uint32_t k,
                                         std::span<const std::uint32_t> indices, Rng& rng,
                                         std::uint64_t modulus) {
  const auto n = static_cast<std::uint32_t>(indices.size());
  if (k < 1 || k > n) throw ParameterError("shamir_split: need 1 <= k <= n");
  if (n >= modulus) throw ParameterError("shamir_split: need n < q");
  if (secret >= modulus) throw ParameterError("shamir_split: secret must be a field element");
  std::set<std::uint64_t> seen;
  for (auto x : indices) {
    if (x % modulus == 0) throw ParameterError("shamir_split: share index must be nonzero mod q");
    if (!seen.insert(x % modulus).second) throw ParameterError("shamir_split: duplicate share index");
  }
  std::vector<std::uint64_t> coeff(k);
  coeff[0] = secret;
  for (std::uint32_t i = 1; i < k; ++i) coeff[i] = rng.uniform_below(modulus);
  std::vector<ShamirShare> shares;
  shares.reserve(n);
  for (auto x : indices) {
    const std::uint64_t xm = x % modulus;
    std::uint64_t y = 0;
    for (std::uint32_t i = k; i-- > 0;) y = mod_add(mod_mul(y, xm, modulus), coeff[i], modulus);
    shares.push_back(ShamirShare{x, y, k, n, modulus});
  }
  return shares;
}

std::vector<ShamirShare> shamir_split(std::uint64_t secret, std::uint32_t k, std::uint32_t n,
                                      Rng& rng, std::uint64_t modulus) {
  if (k < 1 || k > n) throw ParameterError("shamir_split: need 1 <= k <= n");
  std::vector<std::uint32_t> xs(n);
  for (std::uint32_t i = 0; i < n; ++i) xs[i] = i + 1;
  return shamir_split_at(secret, k, xs, rng, modulus);
}

namespace {

// Value at `at` of the polynomial through the given points.
std::uint64_t lagrange_at(std::span<const std::uint64_t> xs, std::span<const std::uint64_t> ys,
                          std::uint64_t at, std::uint64_t q) {
  std::uint64_t acc = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    std::uint64_t num = 1, den = 1;
    for (std::size_t j = 0; j < xs.size(); ++j) {
      if (i == j) continue;
      num = mod_mul(num, mod_sub(at % q, xs[j] % q, q), q);
      den = mod_mul(den, mod_sub(xs[i] % q, xs[j] % q, q), q);
    }
    acc = mod_add(acc, mod_mul(ys[i], mod_mul(num, mod_inverse(den, q), q), q), q);
  }
  return acc;
}

void check_shares(std::span<const ShamirShare> shares) {
  std::set<std::uint32_t> seen;
  for (const auto& s : shares) {
    if (s.modulus != shares.front().modulus || s.threshold != shares.front().threshold) {
      throw ParameterError("shares come from different sharings");
    }
    if (s.index == 0 || s.index % s.modulus == 0) throw ParameterError("share index must be nonzero");
    if (!seen.insert(s.index).second) {
      throw ParameterError("duplicate share index " + std::to_string(s.index));
    }
  }
}

}  // namespace

std::uint64_t shamir_reconstruct(std::span<const ShamirShare> shares) {
  if (shares.empty()) throw ThresholdError("no shares supplied");
  check_shares(shares);
  const std::uint32_t k = shares.front().threshold;
  if (shares.size() < k) {
    throw ThresholdError("need " + std::to_string(k) + " shares, got " + std::to_string(shares.size()));
  }
  const std::uint64_t q = shares.front().modulus;
  std::vector<std::uint64_t> xs, ys;
  for (std::uint32_t i = 0; i < k; ++i) {
    xs.push_back(shares[i].index);
    ys.push_back(shares[i].value);
  }
  return lagrange_at(xs, ys, 0, q);
}

std::vector<std::uint64_t> consistent_secrets(std::span<const ShamirShare> known,
                                              std::span<const std::uint64_t> candidates) {
  if (known.empty()) return {candidates.begin(), candidates.end()};
  check_shares(known);
  const std::uint32_t k = known.front().threshold;
  const std::uint64_t q = known.front().modulus;
  std::vector<std::uint64_t> out;
  for (std::uint64_t c : candidates) {
    if (c >= q) continue;
    // Fit through (0, c) and the first k-1 shares, then test the rest.
    std::vector<std::uint64_t> xs{0}, ys{c};
    std::size_t used = 0;
    for (; used < known.size() && xs.size() < k; ++used) {
      xs.push_back(known[used].index);
      ys.push_back(known[used].value);
    }
    bool ok = true;
    for (std::size_t i = used; i < known.size() && ok; ++i) {
      ok = lagrange_at(xs, ys, known[i].index, q) == known[i].value;
    }
    if (ok) out.push_back(c);
  }
  return out;
}

// ---------------------------------------------------------------------------

Signature sign(std::span<const std::uint8_t> message, const KeyPair& key, const DhParams& params) {
  const std::size_t w = params.byte_length();
  const BigInt order = params.p - 1;
  const Bytes skb = to_bytes(key.sk, w);
  const BigInt k = hash_to_int({skb, message}) % order;
  const BigInt r = modexp(params.g, k, params.p);
  const Bytes rb = to_bytes(r, w), pkb = to_bytes(key.pk, w);
  const BigInt e = hash_to_int({rb, pkb, message}) % order;
  BigInt s = (k + e * key.sk) % order;
  return Signature{r, s};
}

bool verify(std::span<const std::uint8_t> message, const Signature& sig, const BigInt& pk,
            const DhParams& params) {
  if (!(sig.r >= 1 && sig.r < params.p)) return false;
  if (!(sig.s >= 0 && sig.s < params.p - 1)) return false;
  if (!(pk > 1 && pk < params.p)) return false;
  const std::size_t w = params.byte_length();
  const Bytes rb = to_bytes(sig.r, w), pkb = to_bytes(pk, w);
  const BigInt e = hash_to_int({rb, pkb, message}) % (params.p - 1);
  const BigInt lhs = modexp(params.g, sig.s, params.p);
  const BigInt rhs = sig.r * modexp(pk, e, params.p) % params.p;
  return lhs == rhs;
}

// ---------------------------------------------------------------------------

RsaKey RsaKey::from_primes(const BigInt& p, const BigInt& q, const BigInt& e) {
  const BigInt phi = (p - 1) * (q - 1);
  BigInt d;
  if (mpz_invert(d.get_mpz_t(), e.get_mpz_t(), phi.get_mpz_t()) == 0) {
    throw ParameterError("RSA exponent is not invertible mod phi(n)");
  }
  return RsaKey{p * q, e, d};
}

BigInt rsa_encrypt(const BigInt& m, const RsaKey& key) {
  if (m < 0 || m >= key.n) throw ParameterError("RSA message outside [0, n)");
  return modexp(m, key.e, key.n);
}

BigInt rsa_decrypt(const BigInt& c, const RsaKey& key) {
  if (c < 0 || c >= key.n) throw ParameterError("RSA ciphertext outside [0, n)");
  return modexp(c, key.d, key.n);
}

RsaHomomorphism rsa_homomorphism_demo(const BigInt& m1, const BigInt& m2, const RsaKey& key) {
  if (m1 * m2 >= key.n) throw ParameterError("m1 * m2 must stay below the RSA modulus");
  RsaHomomorphism r;
  r.lhs = rsa_encrypt(m1, key) * rsa_encrypt(m2, key) % key.n;
  r.rhs = rsa_encrypt(m1 * m2, key);
  r.equal = r.lhs == r.rhs;
  return r;
}

nlohmann::json to_json(const Signature& sig) {
  return {{"r", to_decimal(sig.r)}, {"s", to_decimal(sig.s)}};
}

Signature signature_from_json(const nlohmann::json& j) {
  return Signature{from_decimal(j.at("r").get<std::string>()), from_decimal(j.at("s").get<std::string>())};
}

nlohmann::json to_json(const ShamirShare& s) {
  return {{"index", s.index},
          {"value", std::to_string(s.value)},
          {"threshold", s.threshold},
          {"total", s.total},
          {"modulus", std::to_string(s.modulus)}};
}

ShamirShare share_from_json(const nlohmann::json& j) {
  ShamirShare s;
  s.index = j.at("index").get<std::uint32_t>();
  s.value = std::stoull(j.at("value").get<std::string>());
  s.threshold = j.at("threshold").get<std::uint32_t>();
  s.total = j.at("total").get<std::uint32_t>();
  s.modulus = std::stoull(j.at("modulus").get<std::string>());
  return s;
}

}  // namespace flsec::crypto
