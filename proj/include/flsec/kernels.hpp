#pragma once

// Data-parallel inner loops shared by every module.
//
// Each kernel has a portable scalar reference and an AVX2 variant; the active
// backend is chosen once at startup from CPUID and can be pinned for testing.
// Both backends are bit-identical: reductions use four interleaved partial
// sums combined as (s0 + s1) + (s2 + s3) followed by the scalar tail, and no
// kernel uses fused multiply-add.

#include <cstdint>
#include <span>
#include <string_view>

namespace flsec::kernels {

enum class Backend { Scalar, Avx2 };

std::string_view backend_name(Backend b);
bool avx2_available();
Backend active_backend();
// Throws ParameterError when the requested backend is unavailable on this CPU.
void set_backend(Backend b);

// out[i] = a[i] + b[i]
void add(std::span<const double> a, std::span<const double> b, std::span<double> out);
// out[i] = a[i] - b[i]
void sub(std::span<const double> a, std::span<const double> b, std::span<double> out);
// y[i] = y[i] + alpha * x[i]
void axpy(double alpha, std::span<const double> x, std::span<double> y);
// x[i] = alpha * x[i]
void scale(double alpha, std::span<double> x);
double dot(std::span<const double> a, std::span<const double> b);
double squared_distance(std::span<const double> a, std::span<const double> b);

// Modular vector arithmetic for residues in [0, m), m < 2^62.
void add_mod(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b,
             std::span<std::uint64_t> out, std::uint64_t m);
void sub_mod(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b,
             std::span<std::uint64_t> out, std::uint64_t m);

// Direct access to one backend, bypassing dispatch. Used by equivalence tests.
struct Table {
  void (*add)(const double*, const double*, double*, std::size_t);
  void (*sub)(const double*, const double*, double*, std::size_t);
  void (*axpy)(double, const double*, double*, std::size_t);
  void (*scale)(double, double*, std::size_t);
  double (*dot)(const double*, const double*, std::size_t);
  double (*squared_distance)(const double*, const double*, std::size_t);
  void (*add_mod)(const std::uint64_t*, const std::uint64_t*, std::uint64_t*, std::size_t,
                  std::uint64_t);
  void (*sub_mod)(const std::uint64_t*, const std::uint64_t*, std::uint64_t*, std::size_t,
                  std::uint64_t);
};

const Table& table(Backend b);

namespace detail {
const Table& scalar_table();
// Null when the library was built without AVX2 support.
const Table* avx2_table();
}  // namespace detail

}  // namespace flsec::kernels
