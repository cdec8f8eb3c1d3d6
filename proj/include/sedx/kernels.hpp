#pragma once

#include <cstddef>
#include <vector>

// Raw loops behind the tape ops. Pointers are row-major and non-aliasing.
namespace sedx::kernels {

/// c[M x N] (+)= op(a) op(b), where op(a) is [M x K] and op(b) is [K x N].
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate);

struct ConvDims {
  std::size_t in_channels;
  std::size_t out_channels;
  std::size_t height;
  std::size_t width;
  std::size_t kernel;  // odd; padding is kernel / 2
};

void conv2d_forward(const ConvDims& d, const double* in, const double* w, const double* bias,
                    double* out);
/// Accumulates into d_in (may be null), d_w and d_bias (may be null).
void conv2d_backward(const ConvDims& d, const double* in, const double* w, const double* d_out,
                     double* d_in, double* d_w, double* d_bias);

/// Cached activations of one GRU pass, needed by the backward sweep.
struct GruTrace {
  std::size_t steps = 0;
  std::size_t hidden = 0;
  std::vector<double> reset;       // [T x H] in time order
  std::vector<double> update;      // [T x H]
  std::vector<double> candidate;   // [T x H]
  std::vector<double> hidden_gate; // [T x H], h_prev W_hn + b_hn
  std::vector<double> prev;        // [T x H], hidden state before the step
};

struct GruDims {
  std::size_t steps;
  std::size_t input;
  std::size_t hidden;
  bool reverse;
};

/// out: [T x H] hidden states in time order.
void gru_forward(const GruDims& d, const double* x, const double* w_in, const double* w_hid,
                 const double* b_in, const double* b_hid, double* out, GruTrace& trace);
/// Gradients are accumulated. Any output pointer may be null.
void gru_backward(const GruDims& d, const double* x, const double* w_in, const double* w_hid,
                  const GruTrace& trace, const double* d_out, double* d_x, double* d_w_in,
                  double* d_w_hid, double* d_b_in, double* d_b_hid);

}  // namespace sedx::kernels
