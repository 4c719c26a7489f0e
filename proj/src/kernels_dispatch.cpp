#include <cstdlib>
#include <string_view>

#include "condigsum/kernels.hpp"

namespace condigsum::kernels {

std::string_view isa_name(Isa isa) { return isa == Isa::kAvx2 ? "avx2" : "scalar"; }

bool cpu_supports_avx2() {
#if defined(CONDIGSUM_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
  static const bool supported =
      __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return supported;
#else
  return false;
#endif
}

#if !defined(CONDIGSUM_HAVE_AVX2)
template <typename T>
const Table<T>* avx2_table() {
  return nullptr;
}
template const Table<float>* avx2_table<float>();
template const Table<double>* avx2_table<double>();
#endif

namespace {

bool scalar_forced() {
  const char* env = std::getenv("CONDIGSUM_SIMD");
  return env != nullptr && std::string_view(env) == "scalar";
}

}  // namespace

template <typename T>
const Table<T>& active() {
  static const Table<T>& table = [] () -> const Table<T>& {
    if (!scalar_forced()) {
      if (const Table<T>* simd = avx2_table<T>()) return *simd;
    }
    return scalar_table<T>();
  }();
  return table;
}

template const Table<float>& active<float>();
template const Table<double>& active<double>();

}  // namespace condigsum::kernels
