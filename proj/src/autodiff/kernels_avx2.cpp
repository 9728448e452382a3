#include "mcl/kernels.hpp"

#include <stdexcept>

#if defined(__x86_64__) && (defined(__GNUC__) || defined(__clang__))
#define MCL_HAVE_AVX2_PATH 1
#include <immintrin.h>
#endif

namespace mcl::kernels::avx2 {

#ifdef MCL_HAVE_AVX2_PATH

// Four independent accumulators, combined in a fixed order.
__attribute__((target("avx2,fma"))) double dot(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  acc0 = _mm256_add_pd(acc0, acc1);
  alignas(32) double lanes[4];
  _mm256_store_pd(lanes, acc0);
  double s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

__attribute__((target("avx2,fma"))) void axpy(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

__attribute__((target("avx2"))) void max_update(const double* src, double* dst, std::uint32_t* arg,
                                                std::uint32_t index, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d s = _mm256_loadu_pd(src + i);
    const __m256d d = _mm256_loadu_pd(dst + i);
    const __m256d gt = _mm256_cmp_pd(s, d, _CMP_GT_OQ);
    const int bits = _mm256_movemask_pd(gt);
    if (bits == 0) continue;
    _mm256_storeu_pd(dst + i, _mm256_blendv_pd(d, s, gt));
    for (int j = 0; j < 4; ++j)
      if (bits & (1 << j)) arg[i + j] = index;
  }
  for (; i < n; ++i) {
    if (src[i] > dst[i]) {
      dst[i] = src[i];
      arg[i] = index;
    }
  }
}

#else

double dot(const double*, const double*, std::size_t) { throw std::logic_error("AVX2 path not compiled"); }
void axpy(double, const double*, double*, std::size_t) { throw std::logic_error("AVX2 path not compiled"); }
void max_update(const double*, double*, std::uint32_t*, std::uint32_t, std::size_t) {
  throw std::logic_error("AVX2 path not compiled");
}

#endif

}  // namespace mcl::kernels::avx2
