#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace flsec {

// Flat real-valued vector of model weights or gradients.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::size_t dim, double fill = 0.0) : values_(dim, fill) {}
  explicit ParamVector(std::vector<double> values) : values_(std::move(values)) {}
  ParamVector(std::initializer_list<double> values) : values_(values) {}

  std::size_t dim() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  std::span<double> span() { return values_; }
  std::span<const double> span() const { return values_; }
  const std::vector<double>& values() const { return values_; }
  std::vector<double>& values() { return values_; }

  auto begin() const { return values_.begin(); }
  auto end() const { return values_.end(); }
  auto begin() { return values_.begin(); }
  auto end() { return values_.end(); }

  bool all_finite() const;
  double norm2() const;
  double max_abs() const;

  ParamVector& operator+=(const ParamVector& o);
  ParamVector& operator-=(const ParamVector& o);
  ParamVector& operator*=(double s);
  friend ParamVector operator+(ParamVector a, const ParamVector& b) { return a += b; }
  friend ParamVector operator-(ParamVector a, const ParamVector& b) { return a -= b; }
  friend ParamVector operator*(ParamVector a, double s) { return a *= s; }
  friend bool operator==(const ParamVector&, const ParamVector&) = default;

 private:
  std::vector<double> values_;
};

// Counter-based generator: Philox4x32 with 10 rounds (Salmon et al., "Parallel
// random numbers: as easy as 1, 2, 3"). The 64-bit seed is the key; the
// 128-bit counter is (block index, stream id). Every output is a pure function
// of (seed, stream, position), so runs are reproducible on every platform and
// child streams never overlap their parent.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}

  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53 random bits.
  double uniform01();
  double uniform(double lo, double hi);
  // Standard normal via Box-Muller; consumes two outputs.
  double normal();
  // Unbiased integer in [0, bound) by rejection.
  std::uint64_t uniform_below(std::uint64_t bound);

  // Independent child stream. Stream ids are mixed with splitmix64 so that
  // split(a).split(b) and split(b).split(a) differ.
  Rng split(std::uint64_t child) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  // Number of 64-bit outputs consumed so far.
  std::uint64_t position() const { return position_; }

  // One Philox4x32-10 block; exposed for known-answer tests.
  static std::array<std::uint32_t, 4> philox_block(std::array<std::uint32_t, 4> counter,
                                                   std::array<std::uint32_t, 2> key);

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t position_ = 0;
  std::uint64_t cached_block_ = ~std::uint64_t{0};
  std::array<std::uint64_t, 2> cache_{};
};

std::uint64_t splitmix64(std::uint64_t x);

// Mersenne prime 2^61 - 1: the default mask and sharing field.
inline constexpr std::uint64_t kMersenne61 = (std::uint64_t{1} << 61) - 1;

// Integers modulo a prime, each residue in [0, modulus). frac_bits records the
// fixed-point scale of the encoded reals.
struct FieldVector {
  std::vector<std::uint64_t> residues;
  std::uint64_t modulus = kMersenne61;
  int frac_bits = 24;

  std::size_t dim() const { return residues.size(); }
  friend bool operator==(const FieldVector&, const FieldVector&) = default;
};

FieldVector field_zero(std::size_t dim, std::uint64_t modulus = kMersenne61, int frac_bits = 24);
FieldVector field_add(const FieldVector& a, const FieldVector& b);
FieldVector field_sub(const FieldVector& a, const FieldVector& b);
FieldVector field_negate(const FieldVector& a);
void field_add_inplace(FieldVector& acc, const FieldVector& b);
void field_sub_inplace(FieldVector& acc, const FieldVector& b);

// Modular helpers for any modulus below 2^62.
std::uint64_t mod_add(std::uint64_t a, std::uint64_t b, std::uint64_t m);
std::uint64_t mod_sub(std::uint64_t a, std::uint64_t b, std::uint64_t m);
std::uint64_t mod_mul(std::uint64_t a, std::uint64_t b, std::uint64_t m);
std::uint64_t mod_pow(std::uint64_t base, std::uint64_t exp, std::uint64_t m);
std::uint64_t mod_inverse(std::uint64_t a, std::uint64_t prime);

// Fixed-point codec: residue = round(v * 2^frac_bits) mod p, negatives wrap to
// p - |r|. Encoding refuses any |v| * 2^f >= p / (2 * max_summands), so a sum of
// up to max_summands encoded values never wraps.
struct FixedPointCodec {
  int frac_bits = 24;
  std::uint64_t modulus = kMersenne61;
  std::uint64_t max_summands = 10000;
  // Pre-encoding clip applied by protocol clients.
  double clip = 32.0;

  double magnitude_bound() const;
};

FieldVector encode_fixed(const ParamVector& v, const FixedPointCodec& codec = {});
// Convenience overload: max_summands keeps its default.
FieldVector encode_fixed(const ParamVector& v, int frac_bits, std::uint64_t modulus);
ParamVector decode_fixed(const FieldVector& fv);
ParamVector clip_values(const ParamVector& v, double bound);

// Coordinate-wise i.i.d. uniform noise on [-alpha, alpha].
ParamVector uniform_mask(std::size_t dim, double alpha, Rng& rng);

ParamVector vec_mean(std::span<const ParamVector> vs);
ParamVector vec_sum(std::span<const ParamVector> vs);

// Binary layout, all integers and doubles little-endian:
//   ParamVector: "FLPV" u32 version(1) u64 dim, dim x f64
//   FieldVector: "FLFV" u32 version(1) u64 modulus u32 frac_bits u64 dim, dim x u64
void write_binary(std::ostream& os, const ParamVector& v);
void write_binary(std::ostream& os, const FieldVector& v);
ParamVector read_param_vector(std::istream& is);
FieldVector read_field_vector(std::istream& is);

// JSON debug form. Field residues are decimal strings.
nlohmann::json to_json(const ParamVector& v);
nlohmann::json to_json(const FieldVector& v);
ParamVector param_vector_from_json(const nlohmann::json& j);
FieldVector field_vector_from_json(const nlohmann::json& j);

}  // namespace flsec
