// Compiled with -mavx2 -mfma; only reached after a runtime CPU check.
#include <immintrin.h>

#include "condigsum/kernels.hpp"

namespace condigsum::kernels {

namespace {

template <typename T>
struct Vec;

template <>
struct Vec<float> {
  using Reg = __m256;
  static constexpr std::size_t kWidth = 8;
  static Reg zero() { return _mm256_setzero_ps(); }
  static Reg broadcast(float x) { return _mm256_set1_ps(x); }
  static Reg load(const float* p) { return _mm256_loadu_ps(p); }
  static void store(float* p, Reg r) { _mm256_storeu_ps(p, r); }
  static Reg fmadd(Reg a, Reg b, Reg c) { return _mm256_fmadd_ps(a, b, c); }
  static Reg add(Reg a, Reg b) { return _mm256_add_ps(a, b); }
  static float hsum(Reg r) {
    __m128 lo = _mm256_castps256_ps128(r);
    __m128 hi = _mm256_extractf128_ps(r, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 shuf = _mm_movehdup_ps(lo);
    __m128 sums = _mm_add_ps(lo, shuf);
    shuf = _mm_movehl_ps(shuf, sums);
    sums = _mm_add_ss(sums, shuf);
    return _mm_cvtss_f32(sums);
  }
};

template <>
struct Vec<double> {
  using Reg = __m256d;
  static constexpr std::size_t kWidth = 4;
  static Reg zero() { return _mm256_setzero_pd(); }
  static Reg broadcast(double x) { return _mm256_set1_pd(x); }
  static Reg load(const double* p) { return _mm256_loadu_pd(p); }
  static void store(double* p, Reg r) { _mm256_storeu_pd(p, r); }
  static Reg fmadd(Reg a, Reg b, Reg c) { return _mm256_fmadd_pd(a, b, c); }
  static Reg add(Reg a, Reg b) { return _mm256_add_pd(a, b); }
  static double hsum(Reg r) {
    __m128d lo = _mm256_castpd256_pd128(r);
    __m128d hi = _mm256_extractf128_pd(r, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d high64 = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, high64));
  }
};

template <typename T>
void axpy(std::size_t n, T alpha, const T* x, T* y) {
  using V = Vec<T>;
  const auto va = V::broadcast(alpha);
  std::size_t j = 0;
  for (; j + 2 * V::kWidth <= n; j += 2 * V::kWidth) {
    V::store(y + j, V::fmadd(va, V::load(x + j), V::load(y + j)));
    V::store(y + j + V::kWidth,
             V::fmadd(va, V::load(x + j + V::kWidth), V::load(y + j + V::kWidth)));
  }
  for (; j + V::kWidth <= n; j += V::kWidth) {
    V::store(y + j, V::fmadd(va, V::load(x + j), V::load(y + j)));
  }
  for (; j < n; ++j) y[j] += alpha * x[j];
}

template <typename T>
T dot(std::size_t n, const T* x, const T* y) {
  using V = Vec<T>;
  auto acc0 = V::zero();
  auto acc1 = V::zero();
  std::size_t j = 0;
  for (; j + 2 * V::kWidth <= n; j += 2 * V::kWidth) {
    acc0 = V::fmadd(V::load(x + j), V::load(y + j), acc0);
    acc1 = V::fmadd(V::load(x + j + V::kWidth), V::load(y + j + V::kWidth), acc1);
  }
  for (; j + V::kWidth <= n; j += V::kWidth) {
    acc0 = V::fmadd(V::load(x + j), V::load(y + j), acc0);
  }
  T acc = V::hsum(V::add(acc0, acc1));
  for (; j < n; ++j) acc += x[j] * y[j];
  return acc;
}

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  using V = Vec<T>;
  constexpr std::size_t kBlock = 4 * V::kWidth;
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    std::size_t j = 0;
    // Keep a 4-register strip of the output row resident across the k loop.
    for (; j + kBlock <= n; j += kBlock) {
      auto c0 = V::load(crow + j);
      auto c1 = V::load(crow + j + V::kWidth);
      auto c2 = V::load(crow + j + 2 * V::kWidth);
      auto c3 = V::load(crow + j + 3 * V::kWidth);
      for (std::size_t p = 0; p < k; ++p) {
        const auto va = V::broadcast(arow[p]);
        const T* brow = b + p * n + j;
        c0 = V::fmadd(va, V::load(brow), c0);
        c1 = V::fmadd(va, V::load(brow + V::kWidth), c1);
        c2 = V::fmadd(va, V::load(brow + 2 * V::kWidth), c2);
        c3 = V::fmadd(va, V::load(brow + 3 * V::kWidth), c3);
      }
      V::store(crow + j, c0);
      V::store(crow + j + V::kWidth, c1);
      V::store(crow + j + 2 * V::kWidth, c2);
      V::store(crow + j + 3 * V::kWidth, c3);
    }
    for (; j + V::kWidth <= n; j += V::kWidth) {
      auto c0 = V::load(crow + j);
      for (std::size_t p = 0; p < k; ++p) {
        c0 = V::fmadd(V::broadcast(arow[p]), V::load(b + p * n + j), c0);
      }
      V::store(crow + j, c0);
    }
    for (; j < n; ++j) {
      T acc = crow[j];
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * b[p * n + j];
      crow[j] = acc;
    }
  }
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] += dot<T>(k, arow, b + j * k);
  }
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      axpy<T>(n, a[p * m + i], brow, c + i * n);
    }
  }
}

}  // namespace

template <typename T>
const Table<T>* avx2_table() {
  if (!cpu_supports_avx2()) return nullptr;
  static const Table<T> table{Isa::kAvx2, &gemm_nn<T>, &gemm_nt<T>, &gemm_tn<T>, &axpy<T>,
                              &dot<T>};
  return &table;
}

template const Table<float>* avx2_table<float>();
template const Table<double>* avx2_table<double>();

}  // namespace condigsum::kernels
