#pragma once

#include <cstddef>
#include <string_view>

// Dense inner loops behind the tensor engine. Every table entry has a scalar
// reference implementation; an AVX2+FMA variant is used when the CPU supports
// it. All matrices are row-major and every gemm accumulates into C.
namespace condigsum::kernels {

enum class Isa { kScalar, kAvx2 };

std::string_view isa_name(Isa isa);

template <typename T>
struct Table {
  Isa isa;
  /// C[m x n] += A[m x k] * B[k x n]
  void (*gemm_nn)(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);
  /// C[m x n] += A[m x k] * B[n x k]^T
  void (*gemm_nt)(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);
  /// C[m x n] += A[k x m]^T * B[k x n]
  void (*gemm_tn)(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);
  /// y += alpha * x
  void (*axpy)(std::size_t n, T alpha, const T* x, T* y);
  T (*dot)(std::size_t n, const T* x, const T* y);
};

template <typename T>
const Table<T>& scalar_table();

/// nullptr when the build or the CPU lacks AVX2+FMA.
template <typename T>
const Table<T>* avx2_table();

/// Table chosen once per process: AVX2 when available unless the environment
/// variable CONDIGSUM_SIMD=scalar forces the reference path.
template <typename T>
const Table<T>& active();

bool cpu_supports_avx2();

}  // namespace condigsum::kernels
