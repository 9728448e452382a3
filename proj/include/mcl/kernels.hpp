#pragma once

// Inner-loop arithmetic used by the tape operations. Each kernel has a scalar
// reference version and an AVX2/FMA version; the dispatching entry points pick
// one at runtime. The choice is fixed for the process unless overridden, so a
// run is reproducible on a given machine.

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace mcl::kernels {

enum class Isa { Scalar, Avx2 };

std::string_view isa_name(Isa isa);

/// Best instruction set the CPU supports.
Isa detected_isa();

/// Instruction set used by the dispatching kernels. Defaults to detected_isa(),
/// or Scalar when the environment variable MCL_ISA=scalar is set.
Isa active_isa();

/// Overrides the active instruction set. Throws std::invalid_argument if the CPU
/// lacks it.
void set_active_isa(Isa isa);

double dot(const double* a, const double* b, std::size_t n);
/// y += alpha * x
void axpy(double alpha, const double* x, double* y, std::size_t n);
/// Where src > dst: dst = src and arg = index. Strict comparison keeps the
/// lowest index on ties when channels are visited in ascending order.
void max_update(const double* src, double* dst, std::uint32_t* arg, std::uint32_t index, std::size_t n);

namespace scalar {
double dot(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void max_update(const double* src, double* dst, std::uint32_t* arg, std::uint32_t index, std::size_t n);
}  // namespace scalar

namespace avx2 {
double dot(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void max_update(const double* src, double* dst, std::uint32_t* arg, std::uint32_t index, std::size_t n);
}  // namespace avx2

}  // namespace mcl::kernels
