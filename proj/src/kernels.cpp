#include "sedx/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace sedx::kernels {

namespace {

// C += op(A) B with a 4x8 register tile: each tile of C is summed over p in
// order, then added to C once. op(A)(i, p) reads A[p][i] when TransA.
template <bool TransA>
void gemm_tiled(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                double* c) {
  auto at = [&](std::size_t i, std::size_t p) { return TransA ? a[p * m + i] : a[i * k + p]; };
  constexpr std::size_t kRows = 4;
  constexpr std::size_t kCols = 8;
  std::size_t i = 0;
  for (; i + kRows <= m; i += kRows) {
    std::size_t j = 0;
    for (; j + kCols <= n; j += kCols) {
      double acc[kRows][kCols] = {};
      for (std::size_t p = 0; p < k; ++p) {
        const double* bp = b + p * n + j;
        for (std::size_t r = 0; r < kRows; ++r) {
          const double av = at(i + r, p);
          for (std::size_t q = 0; q < kCols; ++q) acc[r][q] += av * bp[q];
        }
      }
      for (std::size_t r = 0; r < kRows; ++r) {
        for (std::size_t q = 0; q < kCols; ++q) c[(i + r) * n + j + q] += acc[r][q];
      }
    }
    for (; j < n; ++j) {
      for (std::size_t r = 0; r < kRows; ++r) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += at(i + r, p) * b[p * n + j];
        c[(i + r) * n + j] += acc;
      }
    }
  }
  for (; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = at(i, p);
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

}  // namespace

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  if (!trans_a && !trans_b) {
    gemm_tiled<false>(m, n, k, a, b, c);
  } else if (trans_a && !trans_b) {
    gemm_tiled<true>(m, n, k, a, b, c);
  } else if (!trans_a && trans_b && m >= 4) {
    // B is [n x k]; a transposed copy lets the tiled kernel stream its rows.
    thread_local std::vector<double> bt;
    bt.resize(k * n);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
    }
    gemm_tiled<false>(m, n, k, a, bt.data(), c);
  } else if (!trans_a && trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* ai = a + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const double* bj = b + j * k;
        double acc[4] = {0.0, 0.0, 0.0, 0.0};
        std::size_t p = 0;
        for (; p + 4 <= k; p += 4) {
          for (std::size_t l = 0; l < 4; ++l) acc[l] += ai[p + l] * bj[p + l];
        }
        for (; p < k; ++p) acc[0] += ai[p] * bj[p];
        c[i * n + j] += (acc[0] + acc[1]) + (acc[2] + acc[3]);
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
        c[i * n + j] += acc;
      }
    }
  }
}

namespace {

// Column matrix [in_channels * k * k x plane]: row (ci, kh, kw) holds the
// input shifted by (kh - pad, kw - pad), zero outside the image.
void im2col(const ConvDims& d, const double* in, double* col) {
  const std::size_t plane = d.height * d.width;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(d.kernel / 2);
  const auto H = static_cast<std::ptrdiff_t>(d.height);
  const auto W = static_cast<std::ptrdiff_t>(d.width);
  for (std::size_t ci = 0; ci < d.in_channels; ++ci) {
    const double* x = in + ci * plane;
    for (std::size_t kh = 0; kh < d.kernel; ++kh) {
      for (std::size_t kw = 0; kw < d.kernel; ++kw) {
        double* row = col + ((ci * d.kernel + kh) * d.kernel + kw) * plane;
        const std::ptrdiff_t dh = static_cast<std::ptrdiff_t>(kh) - pad;
        const std::ptrdiff_t dw = static_cast<std::ptrdiff_t>(kw) - pad;
        const std::ptrdiff_t c_lo = std::max<std::ptrdiff_t>(0, -dw);
        const std::ptrdiff_t c_hi = std::min(W, W - dw);
        for (std::ptrdiff_t h = 0; h < H; ++h) {
          double* r = row + h * W;
          const std::ptrdiff_t src = h + dh;
          if (src < 0 || src >= H) {
            std::fill(r, r + W, 0.0);
            continue;
          }
          std::fill(r, r + c_lo, 0.0);
          const double* xr = x + src * W + dw;
          for (std::ptrdiff_t c = c_lo; c < c_hi; ++c) r[c] = xr[c];
          std::fill(r + c_hi, r + W, 0.0);
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add column rows back onto the input planes.
void col2im_add(const ConvDims& d, const double* col, double* in) {
  const std::size_t plane = d.height * d.width;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(d.kernel / 2);
  const auto H = static_cast<std::ptrdiff_t>(d.height);
  const auto W = static_cast<std::ptrdiff_t>(d.width);
  for (std::size_t ci = 0; ci < d.in_channels; ++ci) {
    double* x = in + ci * plane;
    for (std::size_t kh = 0; kh < d.kernel; ++kh) {
      for (std::size_t kw = 0; kw < d.kernel; ++kw) {
        const double* row = col + ((ci * d.kernel + kh) * d.kernel + kw) * plane;
        const std::ptrdiff_t dh = static_cast<std::ptrdiff_t>(kh) - pad;
        const std::ptrdiff_t dw = static_cast<std::ptrdiff_t>(kw) - pad;
        const std::ptrdiff_t c_lo = std::max<std::ptrdiff_t>(0, -dw);
        const std::ptrdiff_t c_hi = std::min(W, W - dw);
        for (std::ptrdiff_t h = 0; h < H; ++h) {
          const std::ptrdiff_t src = h + dh;
          if (src < 0 || src >= H) continue;
          const double* r = row + h * W;
          double* xr = x + src * W + dw;
          for (std::ptrdiff_t c = c_lo; c < c_hi; ++c) xr[c] += r[c];
        }
      }
    }
  }
}

}  // namespace

void conv2d_forward(const ConvDims& d, const double* in, const double* w, const double* bias,
                    double* out) {
  const std::size_t plane = d.height * d.width;
  const std::size_t taps = d.in_channels * d.kernel * d.kernel;
  std::vector<double> col(taps * plane);
  im2col(d, in, col.data());
  for (std::size_t co = 0; co < d.out_channels; ++co) {
    std::fill(out + co * plane, out + (co + 1) * plane, bias ? bias[co] : 0.0);
  }
  gemm(false, false, d.out_channels, plane, taps, w, col.data(), out, true);
}

void conv2d_backward(const ConvDims& d, const double* in, const double* w, const double* d_out,
                     double* d_in, double* d_w, double* d_bias) {
  const std::size_t plane = d.height * d.width;
  const std::size_t taps = d.in_channels * d.kernel * d.kernel;
  if (d_bias) {
    for (std::size_t co = 0; co < d.out_channels; ++co) {
      const double* g = d_out + co * plane;
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += g[i];
      d_bias[co] += acc;
    }
  }
  std::vector<double> col(taps * plane);
  if (d_w) {
    im2col(d, in, col.data());
    gemm(false, true, d.out_channels, taps, plane, d_out, col.data(), d_w, true);
  }
  if (d_in) {
    gemm(true, false, taps, plane, d.out_channels, w, d_out, col.data(), false);
    col2im_add(d, col.data(), d_in);
  }
}

namespace {

inline double logistic(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

void gru_forward(const GruDims& d, const double* x, const double* w_in, const double* w_hid,
                 const double* b_in, const double* b_hid, double* out, GruTrace& trace) {
  const std::size_t H = d.hidden;
  const std::size_t G = 3 * H;
  std::vector<double> gx(d.steps * G);
  gemm(false, false, d.steps, G, d.input, x, w_in, gx.data(), false);
  for (std::size_t t = 0; t < d.steps; ++t) {
    for (std::size_t g = 0; g < G; ++g) gx[t * G + g] += b_in[g];
  }

  trace.steps = d.steps;
  trace.hidden = H;
  trace.reset.assign(d.steps * H, 0.0);
  trace.update.assign(d.steps * H, 0.0);
  trace.candidate.assign(d.steps * H, 0.0);
  trace.hidden_gate.assign(d.steps * H, 0.0);
  trace.prev.assign(d.steps * H, 0.0);

  std::vector<double> h(H, 0.0);
  std::vector<double> gh(G);
  for (std::size_t s = 0; s < d.steps; ++s) {
    const std::size_t t = d.reverse ? d.steps - 1 - s : s;
    std::copy(b_hid, b_hid + G, gh.begin());
    gemm(false, false, 1, G, H, h.data(), w_hid, gh.data(), true);
    const double* gxt = gx.data() + t * G;
    for (std::size_t u = 0; u < H; ++u) {
      const double r = logistic(gxt[u] + gh[u]);
      const double z = logistic(gxt[H + u] + gh[H + u]);
      const double hn = gh[2 * H + u];
      const double n = std::tanh(gxt[2 * H + u] + r * hn);
      const std::size_t at = t * H + u;
      trace.reset[at] = r;
      trace.update[at] = z;
      trace.candidate[at] = n;
      trace.hidden_gate[at] = hn;
      trace.prev[at] = h[u];
      h[u] = (1.0 - z) * n + z * h[u];
      out[at] = h[u];
    }
  }
}

void gru_backward(const GruDims& d, const double* x, const double* w_in, const double* w_hid,
                  const GruTrace& trace, const double* d_out, double* d_x, double* d_w_in,
                  double* d_w_hid, double* d_b_in, double* d_b_hid) {
  const std::size_t H = d.hidden;
  const std::size_t G = 3 * H;
  std::vector<double> dgx(d.steps * G, 0.0);
  std::vector<double> dgh(G);
  std::vector<double> dh_next(H, 0.0);
  std::vector<double> dh_prev(H);

  for (std::size_t s = d.steps; s-- > 0;) {
    const std::size_t t = d.reverse ? d.steps - 1 - s : s;
    double* dgxt = dgx.data() + t * G;
    for (std::size_t u = 0; u < H; ++u) {
      const std::size_t at = t * H + u;
      const double r = trace.reset[at];
      const double z = trace.update[at];
      const double n = trace.candidate[at];
      const double hn = trace.hidden_gate[at];
      const double hp = trace.prev[at];
      const double dh = d_out[at] + dh_next[u];
      const double dn = dh * (1.0 - z);
      const double dz = dh * (hp - n);
      dh_prev[u] = dh * z;
      const double dan = dn * (1.0 - n * n);
      const double dar = dan * hn * r * (1.0 - r);
      const double daz = dz * z * (1.0 - z);
      dgxt[u] = dar;
      dgxt[H + u] = daz;
      dgxt[2 * H + u] = dan;
      dgh[u] = dar;
      dgh[H + u] = daz;
      dgh[2 * H + u] = dan * r;
    }
    const double* hp = trace.prev.data() + t * H;
    if (d_w_hid) gemm(true, false, H, G, 1, hp, dgh.data(), d_w_hid, true);
    if (d_b_hid) {
      for (std::size_t g = 0; g < G; ++g) d_b_hid[g] += dgh[g];
    }
    // dh_next = dh * z + dgh W_hid^T
    gemm(false, true, 1, H, G, dgh.data(), w_hid, dh_prev.data(), true);
    dh_next.swap(dh_prev);
  }
  if (d_w_in) gemm(true, false, d.input, G, d.steps, x, dgx.data(), d_w_in, true);
  if (d_b_in) {
    for (std::size_t t = 0; t < d.steps; ++t) {
      for (std::size_t g = 0; g < G; ++g) d_b_in[g] += dgx[t * G + g];
    }
  }
  if (d_x) gemm(false, true, d.steps, d.input, G, dgx.data(), w_in, d_x, true);
}

}  // namespace sedx::kernels
