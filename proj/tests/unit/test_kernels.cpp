#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "mcl/kernels.hpp"
#include "mcl/ops.hpp"
#include "test_util.hpp"

using namespace mcl;
namespace k = mcl::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-2.0, 2.0);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

bool have_avx2() { return k::detected_isa() == k::Isa::Avx2; }

class IsaGuard {
 public:
  explicit IsaGuard(k::Isa isa) : saved_(k::active_isa()) { k::set_active_isa(isa); }
  ~IsaGuard() { k::set_active_isa(saved_); }

 private:
  k::Isa saved_;
};

}  // namespace

TEST(Kernels, ScalarReference) {
  const double a[] = {1, 2, 3};
  const double b[] = {4, 5, 6};
  EXPECT_EQ(k::scalar::dot(a, b, 3), 32.0);
  double y[] = {1, 1, 1};
  k::scalar::axpy(2.0, a, y, 3);
  EXPECT_EQ(y[2], 7.0);
  double dst[] = {1, 5, 5};
  std::uint32_t arg[] = {0, 0, 0};
  const double src[] = {3, 2, 5};
  k::scalar::max_update(src, dst, arg, 1, 3);
  EXPECT_EQ(dst[0], 3.0);
  EXPECT_EQ(arg[0], 1u);
  EXPECT_EQ(arg[1], 0u);
  EXPECT_EQ(arg[2], 0u);  // tie keeps the earlier index
}

TEST(Kernels, Avx2MatchesScalar) {
  if (!have_avx2()) GTEST_SKIP() << "AVX2 not available";
  for (std::size_t n : {0u, 1u, 3u, 4u, 7u, 8u, 9u, 31u, 64u, 1000u}) {
    const auto a = random_vec(n, n + 1), b = random_vec(n, n + 2);
    const double ds = k::scalar::dot(a.data(), b.data(), n);
    const double dv = k::avx2::dot(a.data(), b.data(), n);
    EXPECT_NEAR(ds, dv, 1e-12 * std::max(1.0, std::abs(ds))) << n;

    auto ys = random_vec(n, n + 3), yv = ys;
    k::scalar::axpy(0.37, a.data(), ys.data(), n);
    k::avx2::axpy(0.37, a.data(), yv.data(), n);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(ys[i], yv[i], 1e-15);

    // max_update must agree exactly, including arg indices.
    auto ms = random_vec(n, n + 4), mv = ms;
    std::vector<std::uint32_t> as(n, 0), av(n, 0);
    for (std::uint32_t c = 1; c < 5; ++c) {
      auto src = random_vec(n, 100 * c + n);
      if (n > 2) src[1] = ms[1];  // exact tie
      k::scalar::max_update(src.data(), ms.data(), as.data(), c, n);
      k::avx2::max_update(src.data(), mv.data(), av.data(), c, n);
    }
    EXPECT_EQ(ms, mv);
    EXPECT_EQ(as, av);
  }
}

TEST(Kernels, ConvAndLinearAgreeAcrossIsas) {
  if (!have_avx2()) GTEST_SKIP() << "AVX2 not available";
  const Tensor x = tsupport::random_tensor({2, 3, 9, 9}, 5);
  const Tensor w = tsupport::random_tensor({4, 3, 3, 3}, 6);
  auto run = [&](k::Isa isa) {
    IsaGuard g(isa);
    ad::Tape t;
    ad::Var xv = t.leaf(x), wv = t.leaf(w);
    ad::Var y = ad::conv2d(xv, wv, 2, 1);
    ad::Var p = ad::reduce_max(ad::reshape(y, {2, 4, 25}), 1);
    t.backward(ad::sum(ad::mul(p, p)));
    return std::make_tuple(y.value(), t.grad(xv), t.grad(wv));
  };
  const auto [ys, gxs, gws] = run(k::Isa::Scalar);
  const auto [yv, gxv, gwv] = run(k::Isa::Avx2);
  EXPECT_LT(tsupport::max_abs_diff(ys, yv), 1e-12);
  EXPECT_LT(tsupport::max_abs_diff(gxs, gxv), 1e-11);
  EXPECT_LT(tsupport::max_abs_diff(gws, gwv), 1e-11);
}

TEST(Kernels, OverrideRejectsUnsupported) {
  if (have_avx2()) GTEST_SKIP() << "cannot test rejection on an AVX2 machine";
  EXPECT_THROW(k::set_active_isa(k::Isa::Avx2), std::invalid_argument);
}
