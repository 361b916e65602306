// Compiled with -mavx2 only (no -mfma); see kernels.hpp for the lane contract.
#include <immintrin.h>

#include "flsec/kernels.hpp"

namespace flsec::kernels::detail {
namespace {

void add_avx2(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_avx2(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d prod = _mm256_mul_pd(va, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
  }
  for (; i < n; ++i) y[i] = y[i] + alpha * x[i];
}

void scale_avx2(double alpha, double* x, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(x + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
  }
  for (; i < n; ++i) x[i] = alpha * x[i];
}

inline double reduce_lanes(__m256d acc) {
  alignas(32) double lane[4];
  _mm256_store_pd(lane, acc);
  return (lane[0] + lane[1]) + (lane[2] + lane[3]);
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc = _mm256_add_pd(acc, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  double s = reduce_lanes(acc);
  for (; i < n; ++i) s = s + a[i] * b[i];
  return s;
}

double squared_distance_avx2(const double* a, const double* b, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d d = _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
    acc = _mm256_add_pd(acc, _mm256_mul_pd(d, d));
  }
  double s = reduce_lanes(acc);
  for (; i < n; ++i) {
    const double d = a[i] - b[i];
    s = s + d * d;
  }
  return s;
}

// Residues are < 2^62, so signed 64-bit compares are exact.
void add_mod_avx2(const std::uint64_t* a, const std::uint64_t* b, std::uint64_t* out,
                  std::size_t n, std::uint64_t m) {
  const __m256i vm = _mm256_set1_epi64x(static_cast<long long>(m));
  const __m256i vm1 = _mm256_set1_epi64x(static_cast<long long>(m - 1));
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256i va = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(a + i));
    const __m256i vb = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(b + i));
    const __m256i s = _mm256_add_epi64(va, vb);
    const __m256i over = _mm256_cmpgt_epi64(s, vm1);
    _mm256_storeu_si256(reinterpret_cast<__m256i*>(out + i),
                        _mm256_sub_epi64(s, _mm256_and_si256(over, vm)));
  }
  for (; i < n; ++i) {
    const std::uint64_t s = a[i] + b[i];
    out[i] = s >= m ? s - m : s;
  }
}

void sub_mod_avx2(const std::uint64_t* a, const std::uint64_t* b, std::uint64_t* out,
                  std::size_t n, std::uint64_t m) {
  const __m256i vm = _mm256_set1_epi64x(static_cast<long long>(m));
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256i va = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(a + i));
    const __m256i vb = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(b + i));
    const __m256i under = _mm256_cmpgt_epi64(vb, va);
    const __m256i d = _mm256_sub_epi64(va, vb);
    _mm256_storeu_si256(reinterpret_cast<__m256i*>(out + i),
                        _mm256_add_epi64(d, _mm256_and_si256(under, vm)));
  }
  for (; i < n; ++i) {
    out[i] = a[i] >= b[i] ? a[i] - b[i] : a[i] + (m - b[i]);
  }
}

}  // namespace

const Table* avx2_table() {
  static const Table t{add_avx2, sub_avx2, axpy_avx2, scale_avx2,
                       dot_avx2, squared_distance_avx2, add_mod_avx2, sub_mod_avx2};
  return &t;
}

}  // namespace flsec::kernels::detail
