#include "mcl/kernels.hpp"

namespace mcl::kernels::scalar {

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void max_update(const double* src, double* dst, std::uint32_t* arg, std::uint32_t index, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    if (src[i] > dst[i]) {
      dst[i] = src[i];
      arg[i] = index;
    }
  }
}

}  // namespace mcl::kernels::scalar
