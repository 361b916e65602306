#include "flsec/numeric.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <numbers>
#include <ostream>

#include "flsec/errors.hpp"
#include "flsec/kernels.hpp"

namespace flsec {

bool ParamVector::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double x) { return std::isfinite(x); });
}

double ParamVector::norm2() const { return std::sqrt(kernels::dot(values_, values_)); }

double ParamVector::max_abs() const {
  double m = 0.0;
  for (double x : values_) m = std::max(m, std::abs(x));
  return m;
}

ParamVector& ParamVector::operator+=(const ParamVector& o) {
  if (o.dim() != dim()) throw ParameterError("ParamVector dimension mismatch");
  kernels::add(values_, o.values_, values_);
  return *this;
}

ParamVector& ParamVector::operator-=(const ParamVector& o) {
  if (o.dim() != dim()) throw ParameterError("ParamVector dimension mismatch");
  kernels::sub(values_, o.values_, values_);
  return *this;
}

ParamVector& ParamVector::operator*=(double s) {
  kernels::scale(s, values_);
  return *this;
}

// ---------------------------------------------------------------------------
// Rng

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::array<std::uint32_t, 4> Rng::philox_block(std::array<std::uint32_t, 4> c,
                                               std::array<std::uint32_t, 2> k) {
  constexpr std::uint32_t kM0 = 0xD2511F53u;
  constexpr std::uint32_t kM1 = 0xCD9E8D57u;
  constexpr std::uint32_t kW0 = 0x9E3779B9u;
  constexpr std::uint32_t kW1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      k[0] += kW0;
      k[1] += kW1;
    }
    const std::uint64_t p0 = std::uint64_t{kM0} * c[0];
    const std::uint64_t p1 = std::uint64_t{kM1} * c[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    c = {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
  }
  return c;
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t block = position_ >> 1;
  if (block != cached_block_) {
    const auto out = philox_block(
        {static_cast<std::uint32_t>(block), static_cast<std::uint32_t>(block >> 32),
         static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)},
        {static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)});
    cache_[0] = std::uint64_t{out[0]} | (std::uint64_t{out[1]} << 32);
    cache_[1] = std::uint64_t{out[2]} | (std::uint64_t{out[3]} << 32);
    cached_block_ = block;
  }
  return cache_[position_++ & 1];
}

double Rng::uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

double Rng::normal() {
  // 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform01();
  const double u2 = uniform01();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::uniform_below(std::uint64_t bound) {
  if (bound == 0) throw ParameterError("uniform_below: bound must be positive");
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
  for (;;) {
    const std::uint64_t x = next_u64();
    if (x < limit) return x % bound;
  }
}

Rng Rng::split(std::uint64_t child) const {
  return Rng(seed_, splitmix64(stream_ * 0x9E3779B97F4A7C15ULL ^ splitmix64(child + 1)));
}

// ---------------------------------------------------------------------------
// Modular arithmetic

std::uint64_t mod_add(std::uint64_t a, std::uint64_t b, std::uint64_t m) {
  const std::uint64_t s = a + b;
  return s >= m ? s - m : s;
}

std::uint64_t mod_sub(std::uint64_t a, std::uint64_t b, std::uint64_t m) {
  return a >= b ? a - b : a + (m - b);
}

std::uint64_t mod_mul(std::uint64_t a, std::uint64_t b, std::uint64_t m) {
  return static_cast<std::uint64_t>((static_cast<unsigned __int128>(a) * b) % m);
}

std::uint64_t mod_pow(std::uint64_t base, std::uint64_t exp, std::uint64_t m) {
  std::uint64_t result = 1 % m;
  base %= m;
  while (exp > 0) {
    if (exp & 1) result = mod_mul(result, base, m);
    base = mod_mul(base, base, m);
    exp >>= 1;
  }
  return result;
}

std::uint64_t mod_inverse(std::uint64_t a, std::uint64_t prime) {
  if (a % prime == 0) throw ParameterError("mod_inverse: zero has no inverse");
  return mod_pow(a, prime - 2, prime);
}

// ---------------------------------------------------------------------------
// FieldVector

namespace {

void check_compatible(const FieldVector& a, const FieldVector& b) {
  if (a.modulus != b.modulus) throw ParameterError("field vectors use different moduli");
  if (a.dim() != b.dim()) throw ParameterError("field vector dimension mismatch");
}

}  // namespace

FieldVector field_zero(std::size_t dim, std::uint64_t modulus, int frac_bits) {
  return FieldVector{std::vector<std::uint64_t>(dim, 0), modulus, frac_bits};
}

void field_add_inplace(FieldVector& acc, const FieldVector& b) {
  check_compatible(acc, b);
  kernels::add_mod(acc.residues, b.residues, acc.residues, acc.modulus);
}

void field_sub_inplace(FieldVector& acc, const FieldVector& b) {
  check_compatible(acc, b);
  kernels::sub_mod(acc.residues, b.residues, acc.residues, acc.modulus);
}

FieldVector field_add(const FieldVector& a, const FieldVector& b) {
  FieldVector out = a;
  field_add_inplace(out, b);
  return out;
}

FieldVector field_sub(const FieldVector& a, const FieldVector& b) {
  FieldVector out = a;
  field_sub_inplace(out, b);
  return out;
}

FieldVector field_negate(const FieldVector& a) {
  return field_sub(field_zero(a.dim(), a.modulus, a.frac_bits), a);
}

// ---------------------------------------------------------------------------
// Fixed-point codec

double FixedPointCodec::magnitude_bound() const {
  return static_cast<double>(modulus) / (2.0 * static_cast<double>(max_summands)) /
         std::ldexp(1.0, frac_bits);
}

FieldVector encode_fixed(const ParamVector& v, const FixedPointCodec& codec) {
  if (codec.frac_bits < 0 || codec.frac_bits > 40) {
    throw ParameterError("encode_fixed: frac_bits must lie in [0, 40]");
  }
  if (codec.modulus < 3 || codec.modulus >= (std::uint64_t{1} << 62)) {
    throw ParameterError("encode_fixed: modulus must lie in [3, 2^62)");
  }
  const double scale = std::ldexp(1.0, codec.frac_bits);
  const double limit = static_cast<double>(codec.modulus) /
                       (2.0 * static_cast<double>(std::max<std::uint64_t>(codec.max_summands, 1)));
  FieldVector out{std::vector<std::uint64_t>(v.dim()), codec.modulus, codec.frac_bits};
  for (std::size_t i = 0; i < v.dim(); ++i) {
    const double scaled = v[i] * scale;
    if (!std::isfinite(scaled) || std::abs(scaled) >= limit) {
      throw RangeError("encode_fixed: coordinate " + std::to_string(i) + " (value " +
                           std::to_string(v[i]) + ") exceeds the field range",
                       i);
    }
    const long long r = std::llround(scaled);
    out.residues[i] = r >= 0 ? static_cast<std::uint64_t>(r)
                             : codec.modulus - static_cast<std::uint64_t>(-r);
    if (out.residues[i] == codec.modulus) out.residues[i] = 0;
  }
  return out;
}

FieldVector encode_fixed(const ParamVector& v, int frac_bits, std::uint64_t modulus) {
  FixedPointCodec codec;
  codec.frac_bits = frac_bits;
  codec.modulus = modulus;
  return encode_fixed(v, codec);
}

ParamVector decode_fixed(const FieldVector& fv) {
  const double inv_scale = std::ldexp(1.0, -fv.frac_bits);
  const std::uint64_t half = fv.modulus / 2;
  ParamVector out(fv.dim());
  for (std::size_t i = 0; i < fv.dim(); ++i) {
    const std::uint64_t r = fv.residues[i];
    const double signed_value = r > half ? -static_cast<double>(fv.modulus - r)
                                         : static_cast<double>(r);
    out[i] = signed_value * inv_scale;
  }
  return out;
}

ParamVector clip_values(const ParamVector& v, double bound) {
  ParamVector out = v;
  for (double& x : out.values()) x = std::clamp(x, -bound, bound);
  return out;
}

// ---------------------------------------------------------------------------

ParamVector uniform_mask(std::size_t dim, double alpha, Rng& rng) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ParameterError("uniform_mask: alpha must lie in [0, 1]");
  }
  ParamVector out(dim);
  for (std::size_t i = 0; i < dim; ++i) out[i] = alpha * (2.0 * rng.uniform01() - 1.0);
  return out;
}

ParamVector vec_sum(std::span<const ParamVector> vs) {
  if (vs.empty()) throw ParameterError("vec_sum: empty input");
  ParamVector acc(vs.front().dim());
  for (const auto& v : vs) {
    if (v.dim() != acc.dim()) throw ParameterError("vec_sum: dimension mismatch");
    acc += v;
  }
  return acc;
}

ParamVector vec_mean(std::span<const ParamVector> vs) {
  if (vs.empty()) throw ParameterError("vec_mean: empty input");
  ParamVector acc = vec_sum(vs);
  const double inv = 1.0 / static_cast<double>(vs.size());
  acc *= inv;
  return acc;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

template <typename T>
void put_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
    throw ParameterError("binary vector: truncated input");
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

void expect_magic(std::istream& is, const char (&magic)[5]) {
  char got[4];
  if (!is.read(got, 4) || std::memcmp(got, magic, 4) != 0) {
    throw ParameterError(std::string("binary vector: bad magic, expected ") + magic);
  }
  if (get_le<std::uint32_t>(is) != 1) throw ParameterError("binary vector: unsupported version");
}

}  // namespace

void write_binary(std::ostream& os, const ParamVector& v) {
  os.write("FLPV", 4);
  put_le<std::uint32_t>(os, 1);
  put_le<std::uint64_t>(os, v.dim());
  for (double x : v) put_le<double>(os, x);
}

void write_binary(std::ostream& os, const FieldVector& v) {
  os.write("FLFV", 4);
  put_le<std::uint32_t>(os, 1);
  put_le<std::uint64_t>(os, v.modulus);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(v.frac_bits));
  put_le<std::uint64_t>(os, v.dim());
  for (auto r : v.residues) put_le<std::uint64_t>(os, r);
}

ParamVector read_param_vector(std::istream& is) {
  expect_magic(is, "FLPV");
  const auto dim = get_le<std::uint64_t>(is);
  ParamVector v(dim);
  for (std::uint64_t i = 0; i < dim; ++i) v[i] = get_le<double>(is);
  return v;
}

FieldVector read_field_vector(std::istream& is) {
  expect_magic(is, "FLFV");
  FieldVector v;
  v.modulus = get_le<std::uint64_t>(is);
  v.frac_bits = static_cast<int>(get_le<std::uint32_t>(is));
  const auto dim = get_le<std::uint64_t>(is);
  v.residues.resize(dim);
  for (auto& r : v.residues) {
    r = get_le<std::uint64_t>(is);
    if (r >= v.modulus) throw ParameterError("binary vector: residue out of range");
  }
  return v;
}

nlohmann::json to_json(const ParamVector& v) {
  return nlohmann::json{{"type", "ParamVector"}, {"dim", v.dim()}, {"values", v.values()}};
}

nlohmann::json to_json(const FieldVector& v) {
  nlohmann::json residues = nlohmann::json::array();
  for (auto r : v.residues) residues.push_back(std::to_string(r));
  return nlohmann::json{{"type", "FieldVector"},
                        {"modulus", std::to_string(v.modulus)},
                        {"frac_bits", v.frac_bits},
                        {"residues", residues}};
}

ParamVector param_vector_from_json(const nlohmann::json& j) {
  return ParamVector(j.at("values").get<std::vector<double>>());
}

FieldVector field_vector_from_json(const nlohmann::json& j) {
  FieldVector v;
  v.modulus = std::stoull(j.at("modulus").get<std::string>());
  v.frac_bits = j.at("frac_bits").get<int>();
  for (const auto& r : j.at("residues")) {
    v.residues.push_back(std::stoull(r.get<std::string>()));
    if (v.residues.back() >= v.modulus) throw ParameterError("json vector: residue out of range");
  }
  return v;
}

}  // namespace flsec
