#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "sedx/kernels.hpp"

using namespace sedx;
using sedx::testing::random_array;

namespace {

// Direct zero-padded convolution, one output element at a time.
DenseArray direct_conv(const DenseArray& x, const DenseArray& w, const DenseArray& b) {
  const std::size_t ci_n = x.dim(0), H = x.dim(1), W = x.dim(2), co_n = w.dim(0), K = w.dim(2);
  const long pad = static_cast<long>(K / 2);
  DenseArray out(Shape{co_n, H, W});
  for (std::size_t co = 0; co < co_n; ++co) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t c = 0; c < W; ++c) {
        double s = b[co];
        for (std::size_t ci = 0; ci < ci_n; ++ci) {
          for (std::size_t kh = 0; kh < K; ++kh) {
            for (std::size_t kw = 0; kw < K; ++kw) {
              const long r = static_cast<long>(h + kh) - pad;
              const long q = static_cast<long>(c + kw) - pad;
              if (r < 0 || q < 0 || r >= static_cast<long>(H) || q >= static_cast<long>(W)) continue;
              s += w[((co * ci_n + ci) * K + kh) * K + kw] * x(ci, r, q);
            }
          }
        }
        out(co, h, c) = s;
      }
    }
  }
  return out;
}

}  // namespace

TEST(Gemm, AllTransposeCombinationsMatchNaiveLoops) {
  Rng rng(1);
  for (std::size_t m : {1u, 3u, 4u, 9u}) {
    for (std::size_t n : {1u, 7u, 8u, 19u}) {
      for (std::size_t k : {1u, 5u, 13u}) {
        const DenseArray a = random_array({m * k}, rng);
        const DenseArray b = random_array({k * n}, rng);
        const DenseArray c0 = random_array({m * n}, rng);
        for (bool ta : {false, true}) {
          for (bool tb : {false, true}) {
            for (bool accumulate : {false, true}) {
              DenseArray c = c0;
              kernels::gemm(ta, tb, m, n, k, a.ptr(), b.ptr(), c.ptr(), accumulate);
              for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                  double s = accumulate ? c0[i * n + j] : 0.0;
                  for (std::size_t p = 0; p < k; ++p) {
                    s += (ta ? a[p * m + i] : a[i * k + p]) * (tb ? b[j * k + p] : b[p * n + j]);
                  }
                  EXPECT_NEAR(c[i * n + j], s, 1e-12);
                }
              }
            }
          }
        }
      }
    }
  }
}

TEST(Conv, ForwardMatchesDirectLoops) {
  Rng rng(2);
  for (std::size_t K : {1u, 3u, 5u}) {
    const DenseArray x = random_array({3, 6, 5}, rng);
    const DenseArray w = random_array({4, 3, K, K}, rng);
    const DenseArray b = random_array({4}, rng);
    DenseArray out(Shape{4, 6, 5});
    kernels::conv2d_forward({3, 4, 6, 5, K}, x.ptr(), w.ptr(), b.ptr(), out.ptr());
    const DenseArray ref = direct_conv(x, w, b);
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-12);
  }
}

TEST(Conv, BackwardIsTheAdjointOfForward) {
  // <g, conv(x)> is linear in x and in w, so its gradients equal the
  // backward outputs exactly; probe them through the direct convolution.
  Rng rng(3);
  const kernels::ConvDims d{2, 3, 5, 4, 3};
  const DenseArray x = random_array({2, 5, 4}, rng);
  const DenseArray w = random_array({3, 2, 3, 3}, rng);
  const DenseArray zero_b(Shape{3});
  const DenseArray g = random_array({3, 5, 4}, rng);
  DenseArray dx(x.shape()), dw(w.shape()), db(Shape{3});
  kernels::conv2d_backward(d, x.ptr(), w.ptr(), g.ptr(), dx.ptr(), dw.ptr(), db.ptr());

  auto inner = [&](const DenseArray& xv, const DenseArray& wv) {
    const DenseArray y = direct_conv(xv, wv, zero_b);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * g[i];
    return s;
  };
  for (std::size_t i = 0; i < x.size(); ++i) {
    DenseArray e(x.shape());
    e[i] = 1.0;
    EXPECT_NEAR(dx[i], inner(e, w), 1e-12);
  }
  for (std::size_t i = 0; i < w.size(); ++i) {
    DenseArray e(w.shape());
    e[i] = 1.0;
    EXPECT_NEAR(dw[i], inner(x, e), 1e-12);
  }
  for (std::size_t co = 0; co < 3; ++co) {
    double s = 0.0;
    for (std::size_t i = 0; i < 20; ++i) s += g[co * 20 + i];
    EXPECT_NEAR(db[co], s, 1e-12);
  }
}
