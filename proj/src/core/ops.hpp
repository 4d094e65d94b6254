#pragma once

#include <vector>

#include "tensor.hpp"

namespace sb {

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor square(const Tensor& x);
Tensor sqrt_op(const Tensor& x);  // d/dx at 0 defined as 0 (flushed variances)
Tensor log_op(const Tensor& x);
Tensor tanh_op(const Tensor& x);
Tensor sigmoid_op(const Tensor& x);
Tensor relu_op(const Tensor& x);
Tensor softplus_op(const Tensor& x);

// y = x if x >= cutoff else 0; gradient masked in the flushed region.
Tensor flush_below(const Tensor& x, double cutoff);

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x);                 // -> scalar
Tensor mean_axis(const Tensor& x, int axis); // drops the given axis
Tensor mean_last_axis(const Tensor& x);      // drops the trailing axis

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);        // [m,k]x[k,n]
Tensor add_bias_cols(const Tensor& x, const Tensor& b); // [m,n] + [n]

// Broadcast over the channel axis of x[B,C,...].
Tensor mul_channel(const Tensor& x, const Tensor& v);   // x * v[C]
Tensor add_channel(const Tensor& x, const Tensor& v);   // x + v[C]
Tensor channel_affine(const Tensor& x, const Tensor& s,
                      const Tensor& b);                 // x*s[C] + b[C]
Tensor channel_affine_sq(const Tensor& x, const Tensor& s,
                         const Tensor& b);              // x^2*s[C] + b[C]

// mean + sqrt(var) * eps with eps ~ N(0,1) drawn inside the op, one value
// per output element. Gradients: d/dmean = 1, d/dvar = eps / (2 sqrt(var)),
// treated as 0 where var == 0.
Tensor gaussian_perturb(const Tensor& mean, const Tensor& var, Rng& rng);

// Fills out[0..n) with standard normals from the stream (Box-Muller pairs).
void fill_standard_normal(Rng& rng, double* out, std::size_t n);

// ---- shape -----------------------------------------------------------------

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor transpose_last2(const Tensor& x);
Tensor slice(const Tensor& x, int axis, int start, int len);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor gather_rows(const Tensor& x, const std::vector<int>& indices);

// ---- neural-net kernels ----------------------------------------------------

// Dilated cross-correlation, zero "same" padding (odd kernels). Stride > 1
// shortens the output to ceil(T/stride).
// x: [B,Cin,T]  kernel: [Cout,Cin,K]  bias: [Cout] (optional, pass undefined)
Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              int stride = 1, int dilation = 1);

// x: [B,Cin,T,W]  kernel: [Cout,Cin,Kt,Kw]  stride 1, same padding.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              int dilation_t = 1, int dilation_w = 1);

// Adjoint of the strided conv1d; output length (T-1)*stride - 2*pad + K +
// output_pad. kernel: [Cin,Cout,K].
Tensor transposed_conv1d(const Tensor& x, const Tensor& kernel,
                         const Tensor& bias, int stride, int pad,
                         int output_pad);

// x: [B,C,T,W]; ties route the gradient to the first element in scan order.
Tensor maxpool2d(const Tensor& x, int win_t, int win_w, int stride_t,
                 int stride_w);

// Per-(sample,group) standardization over [B,C,spatial...], then channel
// affine. gain/bias: [C].
Tensor group_norm(const Tensor& x, int groups, double eps, const Tensor& gain,
                  const Tensor& bias);

// Full sequence GRU, gate order [reset|update|candidate].
// x: [B,T,F]  w_input: [F,3H]  w_hidden: [H,3H]  b_input,b_hidden: [3H]
// h0 zero; returns [B,T,H].
Tensor gru(const Tensor& x, const Tensor& w_input, const Tensor& w_hidden,
           const Tensor& b_input, const Tensor& b_hidden);

// ---- optimizer -------------------------------------------------------------

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  long step = 0;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One update over `params` from their accumulated gradients.
void adam_step(std::vector<Tensor>& params, AdamState& state,
               const AdamConfig& cfg);

}  // namespace sb
