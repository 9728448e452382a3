#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "mcl/kernels.hpp"

namespace mcl::kernels {

std::string_view isa_name(Isa isa) { return isa == Isa::Avx2 ? "avx2" : "scalar"; }

Isa detected_isa() {
#if defined(__x86_64__) && (defined(__GNUC__) || defined(__clang__))
  static const bool ok = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return ok ? Isa::Avx2 : Isa::Scalar;
#else
  return Isa::Scalar;
#endif
}

namespace {

Isa initial_isa() {
  if (const char* env = std::getenv("MCL_ISA"); env && std::string(env) == "scalar") return Isa::Scalar;
  return detected_isa();
}

std::atomic<Isa>& isa_slot() {
  static std::atomic<Isa> slot{initial_isa()};
  return slot;
}

}  // namespace

Isa active_isa() { return isa_slot().load(std::memory_order_relaxed); }

void set_active_isa(Isa isa) {
  if (isa == Isa::Avx2 && detected_isa() != Isa::Avx2)
    throw std::invalid_argument("AVX2 requested but not supported by this CPU");
  isa_slot().store(isa, std::memory_order_relaxed);
}

double dot(const double* a, const double* b, std::size_t n) {
  return active_isa() == Isa::Avx2 ? avx2::dot(a, b, n) : scalar::dot(a, b, n);
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  if (active_isa() == Isa::Avx2)
    avx2::axpy(alpha, x, y, n);
  else
    scalar::axpy(alpha, x, y, n);
}

void max_update(const double* src, double* dst, std::uint32_t* arg, std::uint32_t index, std::size_t n) {
  if (active_isa() == Isa::Avx2)
    avx2::max_update(src, dst, arg, index, n);
  else
    scalar::max_update(src, dst, arg, index, n);
}

}  // namespace mcl::kernels
