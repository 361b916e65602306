#include <doctest.h>

#include <fstream>
#include <set>

#include "flsec/crypto.hpp"
#include "flsec/errors.hpp"

using namespace flsec;
using namespace flsec::crypto;

namespace {

nlohmann::json vectors() {
  std::ifstream in(std::string(FLSEC_VECTOR_DIR) + "/crypto_vectors.json");
  REQUIRE(in.good());
  return nlohmann::json::parse(in);
}

BigInt naive_pow(std::uint64_t b, std::uint64_t e, std::uint64_t m) {
  std::uint64_t r = 1 % m;
  for (std::uint64_t i = 0; i < e; ++i) r = r * b % m;
  return BigInt(static_cast<unsigned long>(r));
}

Bytes hex_bytes(const std::string& hex) {
  Bytes out;
  for (std::size_t i = 0; i + 1 < hex.size(); i += 2) out.push_back(static_cast<std::uint8_t>(std::stoi(hex.substr(i, 2), nullptr, 16)));
  return out;
}

Bytes msg(const std::string& s) { return Bytes(s.begin(), s.end()); }

// Evaluates every polynomial a0 + a1 x + ... + a_{k-1} x^{k-1} over Z_q with
// a0 = secret and checks whether one matches all the known shares.
bool brute_force_consistent(const std::vector<ShamirShare>& known, std::uint64_t secret,
                            std::uint32_t k, std::uint64_t q) {
  std::vector<std::uint64_t> a(k, 0);
  a[0] = secret;
  while (true) {
    bool ok = true;
    for (const auto& s : known) {
      std::uint64_t y = 0, xp = 1;
      for (std::uint32_t i = 0; i < k; ++i) {
        y = (y + a[i] * xp) % q;
        xp = xp * s.index % q;
      }
      if (y != s.value) { ok = false; break; }
    }
    if (ok) return true;
    std::uint32_t i = 1;
    while (i < k && ++a[i] == q) a[i++] = 0;
    if (i == k) return false;
  }
}

}  // namespace

TEST_CASE("modexp") {
  CHECK(modexp(2, 10, 1000) == 24);
  for (int x : {0, 1, 7, 12345}) CHECK(modexp(x, 0, 97) == 1);
  CHECK(modexp(5, 15, 23) == naive_pow(5, 15, 23));
  CHECK(modexp(5, 15, 23) == 19);
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    const auto m = 2 + rng.uniform_below(5000), b = rng.uniform_below(10000), e = rng.uniform_below(300);
    CHECK(modexp(BigInt(static_cast<unsigned long>(b)), BigInt(static_cast<unsigned long>(e)),
                 BigInt(static_cast<unsigned long>(m))) == naive_pow(b, e, m));
  }
  CHECK_THROWS_AS(modexp(2, 3, 1), ParameterError);
  CHECK(modexp(-3, 3, 7) == 1);  // (-27) mod 7
}

TEST_CASE("byte encoding") {
  CHECK(to_bytes(BigInt(258), 4) == Bytes{0, 0, 1, 2});
  CHECK(from_bytes(Bytes{0, 0, 1, 2}) == 258);
  CHECK(to_bytes(BigInt(0), 2) == Bytes{0, 0});
  CHECK_THROWS_AS(to_bytes(BigInt(65536), 2), ParameterError);
  // SHA-256("abc") from FIPS 180-2.
  const auto h = sha256(msg("abc"));
  CHECK(h[0] == 0xba);
  CHECK(h[1] == 0x78);
  CHECK(h[31] == 0xad);
}

TEST_CASE("groups validate") {
  for (const char* n : {"toy", "safe64", "rfc3526-2048"}) {
    const auto g = DhParams::by_name(n);
    CHECK_NOTHROW(g.validate());
  }
  CHECK(DhParams::rfc3526_2048().byte_length() == 256);
  CHECK_THROWS_AS(DhParams::by_name("nope"), ParameterError);
  CHECK_THROWS_AS((DhParams{"bad", 21, 2}.validate()), ParameterError);
}

TEST_CASE("dh shared secret") {
  const auto toy = DhParams::toy();
  const auto a = KeyPair::from_secret(6, toy), b = KeyPair::from_secret(15, toy);
  CHECK(a.pk == 8);
  CHECK(b.pk == 19);
  CHECK(dh_shared_secret(a, b.pk, toy) == 2);
  CHECK(dh_shared_secret(b, a.pk, toy) == 2);
  CHECK(dh_shared_secret(a, a.pk, toy) == dh_shared_secret(a, a.pk, toy));
  CHECK_THROWS_AS(dh_shared_secret(a, 1, toy), ProtocolError);
  CHECK_THROWS_AS(dh_shared_secret(a, 23, toy), ProtocolError);
  CHECK_THROWS_AS(KeyPair::from_secret(0, toy), ParameterError);
}

TEST_CASE("dh symmetry under the 2048-bit group") {
  const auto g = DhParams::rfc3526_2048();
  Rng rng(77);
  for (int t = 0; t < 1000; ++t) {
    const auto a = KeyPair::generate(g, rng), b = KeyPair::generate(g, rng);
    REQUIRE(dh_shared_secret(a, b.pk, g) == dh_shared_secret(b, a.pk, g));
  }
}

TEST_CASE("key generation range") {
  const auto toy = DhParams::toy();
  Rng rng(3);
  std::set<std::string> seen;
  for (int t = 0; t < 2000; ++t) {
    const auto k = KeyPair::generate(toy, rng);
    CHECK(k.sk >= 1);
    CHECK(k.sk <= 21);
    seen.insert(to_decimal(k.sk));
  }
  CHECK(seen.size() == 21);
}

TEST_CASE("vectors: dh and seed derivation") {
  const auto v = vectors();
  for (const auto& e : v["dh"]) {
    const auto g = DhParams::by_name(e["group"]);
    const auto a = KeyPair::from_secret(from_decimal(e["sk_a"]), g);
    const auto b = KeyPair::from_secret(from_decimal(e["sk_b"]), g);
    CHECK(to_decimal(a.pk) == e["pk_a"].get<std::string>());
    CHECK(to_decimal(b.pk) == e["pk_b"].get<std::string>());
    CHECK(to_decimal(dh_shared_secret(a, b.pk, g)) == e["shared"].get<std::string>());
  }
  for (const auto& e : v["seed"]) {
    const auto g = DhParams::by_name(e["group"]);
    const auto s = derive_seed(from_decimal(e["secret"]), g, e["label"].get<std::string>(),
                               std::stoull(e["modulus"].get<std::string>()));
    CHECK(std::to_string(s) == e["seed"].get<std::string>());
  }
}

TEST_CASE("vectors: schnorr") {
  const auto v = vectors();
  for (const auto& e : v["schnorr"]) {
    const auto g = DhParams::by_name(e["group"]);
    const auto key = KeyPair::from_secret(from_decimal(e["sk"]), g);
    CHECK(to_decimal(key.pk) == e["pk"].get<std::string>());
    const Bytes m = hex_bytes(e["message_hex"]);
    const auto sig = sign(m, key, g);
    CHECK(to_decimal(sig.r) == e["r"].get<std::string>());
    CHECK(to_decimal(sig.s) == e["s"].get<std::string>());
    CHECK(verify(m, sig, key.pk, g));
  }
}

TEST_CASE("vectors: shamir") {
  const auto v = vectors();
  for (const auto& e : v["shamir"]) {
    const std::uint64_t q = std::stoull(e["modulus"].get<std::string>());
    const std::uint32_t k = e["k"], n = e["n"];
    std::vector<ShamirShare> shares;
    for (const auto& s : e["shares"]) {
      shares.push_back(ShamirShare{s["index"], std::stoull(s["value"].get<std::string>()), k, n, q});
    }
    // Every k-subset, enumerated by bitmask.
    for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
      if (static_cast<std::uint32_t>(__builtin_popcount(mask)) != k) continue;
      std::vector<ShamirShare> sub;
      for (std::uint32_t i = 0; i < n; ++i)
        if (mask & (1u << i)) sub.push_back(shares[i]);
      CHECK(std::to_string(shamir_reconstruct(sub)) == e["secret"].get<std::string>());
    }
  }
}

TEST_CASE("shamir split and reconstruct") {
  Rng rng(5);
  SUBCASE("k = 1 shares equal the secret") {
    for (const auto& s : shamir_split(42, 1, 6, rng)) CHECK(s.value == 42);
  }
  SUBCASE("secret 5, k 2, n 3, q 7919: every pair reconstructs") {
    const auto sh = shamir_split(5, 2, 3, rng, 7919);
    for (int i = 0; i < 3; ++i)
      for (int j = i + 1; j < 3; ++j) {
        const std::vector<ShamirShare> pair = {sh[i], sh[j]};
        CHECK(shamir_reconstruct(pair) == 5);
      }
  }
  SUBCASE("k 3, n 5: all ten subsets agree") {
    const auto sh = shamir_split(123456789, 3, 5, rng);
    std::set<std::uint64_t> results;
    for (int a = 0; a < 5; ++a)
      for (int b = a + 1; b < 5; ++b)
        for (int c = b + 1; c < 5; ++c) {
          const std::vector<ShamirShare> sub = {sh[a], sh[b], sh[c]};
          results.insert(shamir_reconstruct(sub));
        }
    CHECK(results == std::set<std::uint64_t>{123456789});
  }
  SUBCASE("500 random round trips") {
    for (int t = 0; t < 500; ++t) {
      const auto n = static_cast<std::uint32_t>(1 + rng.uniform_below(12));
      const auto k = static_cast<std::uint32_t>(1 + rng.uniform_below(n));
      const auto m = rng.uniform_below(kMersenne61);
      auto sh = shamir_split(m, k, n, rng);
      // Shuffle so reconstruction sees arbitrary indices.
      for (std::size_t i = sh.size(); i > 1; --i) std::swap(sh[i - 1], sh[rng.uniform_below(i)]);
      REQUIRE(shamir_reconstruct(sh) == m);
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(shamir_split(1, 4, 3, rng), ParameterError);
    CHECK_THROWS_AS(shamir_split(1, 0, 3, rng), ParameterError);
    const auto sh = shamir_split(9, 3, 5, rng);
    const std::vector<ShamirShare> two = {sh[0], sh[1]};
    CHECK_THROWS_AS(shamir_reconstruct(two), ThresholdError);
    const std::vector<ShamirShare> dup = {sh[0], sh[0], sh[1]};
    CHECK_THROWS_AS(shamir_reconstruct(dup), ParameterError);
  }
}

TEST_CASE("k-1 shares hide the secret") {
  const std::uint64_t q = 101;
  Rng rng(17);
  const auto sh = shamir_split(37, 3, 5, rng, q);
  const std::vector<ShamirShare> known = {sh[1], sh[3]};
  std::vector<std::uint64_t> candidates(100);
  for (std::uint64_t c = 0; c < 100; ++c) candidates[c] = c;
  const auto lib = consistent_secrets(known, candidates);
  CHECK(lib.size() == 100);
  std::size_t brute = 0;
  for (auto c : candidates) brute += brute_force_consistent(known, c, 3, q);
  CHECK(brute == 100);
  // With k shares only the true secret survives.
  const std::vector<ShamirShare> three = {sh[0], sh[1], sh[3]};
  CHECK(consistent_secrets(three, candidates) == std::vector<std::uint64_t>{37});
}

TEST_CASE("prg_expand") {
  CHECK(prg_expand(99, 50) == prg_expand(99, 50));
  Rng rng(4);
  for (int t = 0; t < 5; ++t) {
    const auto a = prg_expand(rng.next_u64(), 10000), b = prg_expand(rng.next_u64(), 10000);
    std::size_t diff = 0;
    for (std::size_t i = 0; i < 10000; ++i) diff += a.residues[i] != b.residues[i];
    CHECK(diff >= 9900);
    for (auto r : a.residues) REQUIRE(r < kMersenne61);
  }
  const auto m = prg_expand(7, 64);
  CHECK(field_add(m, field_negate(m)) == field_zero(64));
  for (auto r : prg_expand(7, 1000, 101).residues) REQUIRE(r < 101);
}

TEST_CASE("schnorr round trip and soundness") {
  for (const auto& g : {DhParams::toy(), DhParams::safe64(), DhParams::rfc3526_2048()}) {
    Rng rng(12);
    const int count = g.name == "rfc3526-2048" ? 10 : 100;
    for (int t = 0; t < count; ++t) {
      const auto key = KeyPair::generate(g, rng), other = KeyPair::generate(g, rng);
      Bytes m(1 + rng.uniform_below(40));
      for (auto& b : m) b = static_cast<std::uint8_t>(rng.uniform_below(256));
      const auto sig = sign(m, key, g);
      CHECK(verify(m, sig, key.pk, g));
      if (g.name != "toy") {
        // The toy group has too few exponents for soundness to be meaningful.
        Bytes flipped = m;
        flipped[rng.uniform_below(m.size())] ^= 0x01;
        CHECK_FALSE(verify(flipped, sig, key.pk, g));
        if (other.pk != key.pk) CHECK_FALSE(verify(m, sig, other.pk, g));
      }
    }
  }
  const auto g = DhParams::safe64();
  const auto key = KeyPair::from_secret(12345, g);
  const auto m = msg("hello");
  CHECK_FALSE(verify(m, Signature{0, 1}, key.pk, g));
  CHECK_FALSE(verify(m, Signature{1, g.p}, key.pk, g));
  CHECK_FALSE(verify(m, Signature{-5, 3}, key.pk, g));
}

TEST_CASE("rsa homomorphism") {
  const auto key = RsaKey::from_primes(61, 53, 17);
  CHECK(key.n == 3233);
  const auto demo = rsa_homomorphism_demo(2, 3, key);
  CHECK(demo.equal);
  CHECK(demo.lhs == modexp(6, 17, 3233));
  CHECK(demo.lhs == naive_pow(2, 17, 3233) * naive_pow(3, 17, 3233) % 3233);
  CHECK(rsa_homomorphism_demo(77, 1, key).lhs == rsa_encrypt(77, key));
  Rng rng(8);
  for (int t = 0; t < 100; ++t) {
    const BigInt m = static_cast<unsigned long>(rng.uniform_below(3233));
    CHECK(rsa_decrypt(rsa_encrypt(m, key), key) == m);
  }
  CHECK_THROWS_AS(rsa_homomorphism_demo(100, 100, key), ParameterError);
}

TEST_CASE("json forms") {
  const Signature s{BigInt(12), BigInt(34)};
  const auto back = signature_from_json(to_json(s));
  CHECK(back.r == 12);
  CHECK(back.s == 34);
  const ShamirShare sh{3, 99, 2, 5, 7919};
  CHECK(share_from_json(to_json(sh)) == sh);
}
