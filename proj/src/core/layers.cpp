#include "layers.hpp"

#include <cmath>

namespace sb {

namespace {

Tensor uniform_tensor(Rng& rng, const Shape& shape, double bound) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from(shape, std::move(v));
}

double max_sigma_of(const VariationalParam& vp) {
  if (!vp.has_rho()) return 0.0;
  double m = 0.0;
  for (std::size_t i = 0; i < vp.rho.numel(); ++i) {
    const double r = vp.rho.value(i);
    const double s =
        r > 0.0 ? r + std::log1p(std::exp(-r)) : std::log1p(std::exp(r));
    m = std::max(m, s);
  }
  return m;
}

void push(const std::string& name, const Tensor& t, std::vector<ParamRef>& out) {
  out.push_back({name, t});
}

}  // namespace

Tensor effective_sigma(const Tensor& rho) {
  return flush_below(sigma_from_rho(rho), kSigmaFloor);
}

// ---- Dense -----------------------------------------------------------------

Dense::Dense(int in, int out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  w.mu = uniform_tensor(rng, {in, out}, bound);
  b.mu = uniform_tensor(rng, {out}, bound);
}

Tensor Dense::forward(const Tensor& x) const {
  return add_bias_cols(matmul(x, w.mu), b.mu);
}

Moments Dense::var_moments(const Tensor& x) const {
  return linear_reparam_moments(x, w, b);
}

Tensor Dense::forward_var(const Tensor& x, Rng& rng) const {
  return apply_output_noise(var_moments(x), rng);
}

void Dense::init_variational(double rho0) {
  w.init_rho(rho0);
  b.init_rho(rho0);
}

void Dense::collect_mu(const std::string& p, std::vector<ParamRef>& out) const {
  push(p + ".w", w.mu, out);
  push(p + ".b", b.mu, out);
}

void Dense::collect_rho(const std::string& p, std::vector<ParamRef>& out) const {
  if (w.has_rho()) push(p + ".w", w.rho, out);
  if (b.has_rho()) push(p + ".b", b.rho, out);
}

void Dense::collect_vps(std::vector<const VariationalParam*>& out) const {
  out.push_back(&w);
  out.push_back(&b);
}

double Dense::max_sigma() const {
  return std::max(max_sigma_of(w), max_sigma_of(b));
}

// ---- Conv1d ----------------------------------------------------------------

Conv1dLayer::Conv1dLayer(int c_in, int c_out, int k, int stride_, int dilation_,
                         Rng& rng)
    : stride(stride_), dilation(dilation_) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(c_in) * k);
  kernel.mu = uniform_tensor(rng, {c_out, c_in, k}, bound);
  bias.mu = uniform_tensor(rng, {c_out}, bound);
}

Tensor Conv1dLayer::forward(const Tensor& x) const {
  return conv1d(x, kernel.mu, bias.mu, stride, dilation);
}

Moments Conv1dLayer::var_moments(const Tensor& x) const {
  if (!kernel.has_rho() || !bias.has_rho())
    throw ConfigError("conv1d: variational parameters not initialized");
  Tensor mean = conv1d(x, kernel.mu, bias.mu, stride, dilation);
  Tensor var = conv1d(square(x), square(effective_sigma(kernel.rho)),
                      square(effective_sigma(bias.rho)), stride, dilation);
  return {mean, var};
}

Tensor Conv1dLayer::forward_var(const Tensor& x, Rng& rng) const {
  return apply_output_noise(var_moments(x), rng);
}

void Conv1dLayer::init_variational(double rho0) {
  kernel.init_rho(rho0);
  bias.init_rho(rho0);
}

void Conv1dLayer::collect_mu(const std::string& p,
                             std::vector<ParamRef>& out) const {
  push(p + ".kernel", kernel.mu, out);
  push(p + ".bias", bias.mu, out);
}

void Conv1dLayer::collect_rho(const std::string& p,
                              std::vector<ParamRef>& out) const {
  if (kernel.has_rho()) push(p + ".kernel", kernel.rho, out);
  if (bias.has_rho()) push(p + ".bias", bias.rho, out);
}

void Conv1dLayer::collect_vps(std::vector<const VariationalParam*>& out) const {
  out.push_back(&kernel);
  out.push_back(&bias);
}

double Conv1dLayer::max_sigma() const {
  return std::max(max_sigma_of(kernel), max_sigma_of(bias));
}

// ---- Conv2d ----------------------------------------------------------------

Conv2dLayer::Conv2dLayer(int c_in, int c_out, int k_t, int k_w, int dil_t_,
                         int dil_w_, Rng& rng)
    : dil_t(dil_t_), dil_w(dil_w_) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(c_in) * k_t * k_w);
  kernel.mu = uniform_tensor(rng, {c_out, c_in, k_t, k_w}, bound);
  bias.mu = uniform_tensor(rng, {c_out}, bound);
}

Tensor Conv2dLayer::forward(const Tensor& x) const {
  return conv2d(x, kernel.mu, bias.mu, dil_t, dil_w);
}

Moments Conv2dLayer::var_moments(const Tensor& x) const {
  if (!kernel.has_rho() || !bias.has_rho())
    throw ConfigError("conv2d: variational parameters not initialized");
  Tensor mean = conv2d(x, kernel.mu, bias.mu, dil_t, dil_w);
  Tensor var = conv2d(square(x), square(effective_sigma(kernel.rho)),
                      square(effective_sigma(bias.rho)), dil_t, dil_w);
  return {mean, var};
}

Tensor Conv2dLayer::forward_var(const Tensor& x, Rng& rng) const {
  return apply_output_noise(var_moments(x), rng);
}

void Conv2dLayer::init_variational(double rho0) {
  kernel.init_rho(rho0);
  bias.init_rho(rho0);
}

void Conv2dLayer::collect_mu(const std::string& p,
                             std::vector<ParamRef>& out) const {
  push(p + ".kernel", kernel.mu, out);
  push(p + ".bias", bias.mu, out);
}

void Conv2dLayer::collect_rho(const std::string& p,
                              std::vector<ParamRef>& out) const {
  if (kernel.has_rho()) push(p + ".kernel", kernel.rho, out);
  if (bias.has_rho()) push(p + ".bias", bias.rho, out);
}

void Conv2dLayer::collect_vps(std::vector<const VariationalParam*>& out) const {
  out.push_back(&kernel);
  out.push_back(&bias);
}

double Conv2dLayer::max_sigma() const {
  return std::max(max_sigma_of(kernel), max_sigma_of(bias));
}

// ---- TConv1d ---------------------------------------------------------------

TConv1dLayer::TConv1dLayer(int c_in, int c_out, int k, Rng& rng) {
  if (k % 2 == 0)
    throw ConfigError("transposed conv kernel must be odd for x2 upsampling");
  pad = (k - 1) / 2;
  output_pad = 1;
  const double bound = 1.0 / std::sqrt(static_cast<double>(c_in) * k);
  kernel.mu = uniform_tensor(rng, {c_in, c_out, k}, bound);
  bias.mu = uniform_tensor(rng, {c_out}, bound);
}

Tensor TConv1dLayer::forward(const Tensor& x) const {
  return transposed_conv1d(x, kernel.mu, bias.mu, stride, pad, output_pad);
}

Moments TConv1dLayer::var_moments(const Tensor& x) const {
  if (!kernel.has_rho() || !bias.has_rho())
    throw ConfigError("transposed conv: variational parameters not initialized");
  Tensor mean = transposed_conv1d(x, kernel.mu, bias.mu, stride, pad, output_pad);
  Tensor var = transposed_conv1d(square(x), square(effective_sigma(kernel.rho)),
                                 square(effective_sigma(bias.rho)), stride, pad,
                                 output_pad);
  return {mean, var};
}

Tensor TConv1dLayer::forward_var(const Tensor& x, Rng& rng) const {
  return apply_output_noise(var_moments(x), rng);
}

void TConv1dLayer::init_variational(double rho0) {
  kernel.init_rho(rho0);
  bias.init_rho(rho0);
}

void TConv1dLayer::collect_mu(const std::string& p,
                              std::vector<ParamRef>& out) const {
  push(p + ".kernel", kernel.mu, out);
  push(p + ".bias", bias.mu, out);
}

void TConv1dLayer::collect_rho(const std::string& p,
                               std::vector<ParamRef>& out) const {
  if (kernel.has_rho()) push(p + ".kernel", kernel.rho, out);
  if (bias.has_rho()) push(p + ".bias", bias.rho, out);
}

void TConv1dLayer::collect_vps(std::vector<const VariationalParam*>& out) const {
  out.push_back(&kernel);
  out.push_back(&bias);
}

double TConv1dLayer::max_sigma() const {
  return std::max(max_sigma_of(kernel), max_sigma_of(bias));
}

// ---- GroupNorm -------------------------------------------------------------

GroupNormLayer::GroupNormLayer(int channels_, int groups_, double eps_)
    : channels(channels_), groups(groups_), eps(eps_) {
  if (groups < 1 || channels % groups != 0)
    throw ConfigError("group norm: channels " + std::to_string(channels) +
                      " not divisible by groups " + std::to_string(groups));
  gain.mu = Tensor::full({channels}, 1.0);
  bias.mu = Tensor::zeros({channels});
  ones_ = Tensor::full({channels}, 1.0);
  zeros_ = Tensor::zeros({channels});
}

Tensor GroupNormLayer::forward(const Tensor& x) const {
  return group_norm(x, groups, eps, gain.mu, bias.mu);
}

Moments GroupNormLayer::var_moments(const Tensor& x) const {
  if (!gain.has_rho() || !bias.has_rho())
    throw ConfigError("group norm: variational parameters not initialized");
  Tensor xh = group_norm(x, groups, eps, ones_, zeros_);
  Tensor mean = channel_affine(xh, gain.mu, bias.mu);
  Tensor var = channel_affine_sq(xh, square(effective_sigma(gain.rho)),
                                 square(effective_sigma(bias.rho)));
  return {mean, var};
}

Tensor GroupNormLayer::forward_var(const Tensor& x, Rng& rng) const {
  return apply_output_noise(var_moments(x), rng);
}

void GroupNormLayer::init_variational(double rho0) {
  gain.init_rho(rho0);
  bias.init_rho(rho0);
}

void GroupNormLayer::collect_mu(const std::string& p,
                                std::vector<ParamRef>& out) const {
  push(p + ".gain", gain.mu, out);
  push(p + ".bias", bias.mu, out);
}

void GroupNormLayer::collect_rho(const std::string& p,
                                 std::vector<ParamRef>& out) const {
  if (gain.has_rho()) push(p + ".gain", gain.rho, out);
  if (bias.has_rho()) push(p + ".bias", bias.rho, out);
}

void GroupNormLayer::collect_vps(
    std::vector<const VariationalParam*>& out) const {
  out.push_back(&gain);
  out.push_back(&bias);
}

double GroupNormLayer::max_sigma() const {
  return std::max(max_sigma_of(gain), max_sigma_of(bias));
}

// ---- GRU -------------------------------------------------------------------

GruLayer::GruLayer(int in_features_, int hidden_, Rng& rng)
    : in_features(in_features_), hidden(hidden_) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  wi.mu = uniform_tensor(rng, {in_features, 3 * hidden}, bound);
  wh.mu = uniform_tensor(rng, {hidden, 3 * hidden}, bound);
  bi.mu = uniform_tensor(rng, {3 * hidden}, bound);
  bh.mu = uniform_tensor(rng, {3 * hidden}, bound);
  tw.mu = Tensor::zeros({in_features, hidden});
  tb.mu = Tensor::zeros({hidden});
}

Tensor GruLayer::forward(const Tensor& x) const {
  return gru(x, wi.mu, wh.mu, bi.mu, bh.mu);
}

Moments GruLayer::var_moments(const Tensor& x) const {
  if (!tw.has_rho() || !tb.has_rho())
    throw ConfigError("gru: surrogate variational parameters not initialized");
  Tensor f = forward(x);
  const int B = x.dim(0), T = x.dim(1), F = x.dim(2);
  Tensor x2 = reshape(x, {B * T, F});
  Tensor var2 = add_bias_cols(matmul(square(x2), square(effective_sigma(tw.rho))),
                              square(effective_sigma(tb.rho)));
  return {f, reshape(var2, {B, T, hidden})};
}

Tensor GruLayer::forward_var(const Tensor& x, Rng& rng) const {
  return apply_output_noise(var_moments(x), rng);
}

void GruLayer::init_variational(double rho0) {
  tw.init_rho(rho0);
  tb.init_rho(rho0);
}

void GruLayer::collect_mu(const std::string& p,
                          std::vector<ParamRef>& out) const {
  push(p + ".wi", wi.mu, out);
  push(p + ".wh", wh.mu, out);
  push(p + ".bi", bi.mu, out);
  push(p + ".bh", bh.mu, out);
  push(p + ".tw", tw.mu, out);
  push(p + ".tb", tb.mu, out);
}

void GruLayer::collect_rho(const std::string& p,
                           std::vector<ParamRef>& out) const {
  if (tw.has_rho()) push(p + ".tw", tw.rho, out);
  if (tb.has_rho()) push(p + ".tb", tb.rho, out);
}

void GruLayer::collect_vps(std::vector<const VariationalParam*>& out) const {
  out.push_back(&tw);
  out.push_back(&tb);
}

double GruLayer::max_sigma() const {
  return std::max(max_sigma_of(tw), max_sigma_of(tb));
}

}  // namespace sb
