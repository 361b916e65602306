#include <atomic>

#include "flsec/errors.hpp"
#include "flsec/kernels.hpp"

namespace flsec::kernels {

#ifndef FLSEC_HAVE_AVX2
namespace detail {
const Table* avx2_table() { return nullptr; }
}  // namespace detail
#endif

namespace {

Backend detect() { return avx2_available() ? Backend::Avx2 : Backend::Scalar; }

std::atomic<const Table*>& active_slot() {
  static std::atomic<const Table*> slot{&table(detect())};
  return slot;
}

std::atomic<Backend>& active_kind() {
  static std::atomic<Backend> kind{detect()};
  return kind;
}

void check_same(std::size_t a, std::size_t b) {
  if (a != b) throw ParameterError("kernel operands differ in length");
}

}  // namespace

std::string_view backend_name(Backend b) { return b == Backend::Avx2 ? "avx2" : "scalar"; }

bool avx2_available() {
#if defined(FLSEC_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
  return __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

const Table& table(Backend b) {
  if (b == Backend::Avx2) {
    const Table* t = detail::avx2_table();
    if (t == nullptr || !avx2_available()) throw ParameterError("AVX2 backend unavailable");
    return *t;
  }
  return detail::scalar_table();
}

Backend active_backend() { return active_kind().load(); }

void set_backend(Backend b) {
  active_slot().store(&table(b));
  active_kind().store(b);
}

void add(std::span<const double> a, std::span<const double> b, std::span<double> out) {
  check_same(a.size(), b.size());
  check_same(a.size(), out.size());
  active_slot().load()->add(a.data(), b.data(), out.data(), a.size());
}

void sub(std::span<const double> a, std::span<const double> b, std::span<double> out) {
  check_same(a.size(), b.size());
  check_same(a.size(), out.size());
  active_slot().load()->sub(a.data(), b.data(), out.data(), a.size());
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  check_same(x.size(), y.size());
  active_slot().load()->axpy(alpha, x.data(), y.data(), x.size());
}

void scale(double alpha, std::span<double> x) {
  active_slot().load()->scale(alpha, x.data(), x.size());
}

double dot(std::span<const double> a, std::span<const double> b) {
  check_same(a.size(), b.size());
  return active_slot().load()->dot(a.data(), b.data(), a.size());
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  check_same(a.size(), b.size());
  return active_slot().load()->squared_distance(a.data(), b.data(), a.size());
}

void add_mod(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b,
             std::span<std::uint64_t> out, std::uint64_t m) {
  check_same(a.size(), b.size());
  check_same(a.size(), out.size());
  active_slot().load()->add_mod(a.data(), b.data(), out.data(), a.size(), m);
}

void sub_mod(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b,
             std::span<std::uint64_t> out, std::uint64_t m) {
  check_same(a.size(), b.size());
  check_same(a.size(), out.size());
  active_slot().load()->sub_mod(a.data(), b.data(), out.data(), a.size(), m);
}

}  // namespace flsec::kernels
