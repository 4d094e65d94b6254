#include "variational.hpp"

#include "fastmath.hpp"

#include <cmath>

namespace sb {

void validate_prior(const PriorConfig& prior) {
  if (!(prior.sigma0_sq > 0.0))
    throw ConfigError("prior variance sigma0_sq must be positive, got " +
                      std::to_string(prior.sigma0_sq));
}

void VariationalParam::init_rho(double rho0) {
  rho = Tensor::param(mu.shape(),
                      std::vector<double>(mu.numel(), rho0));
}

Tensor sigma_from_rho(const Tensor& rho) { return softplus_op(rho); }

Tensor kl_to_prior(const VariationalParam& vp, const PriorConfig& prior) {
  validate_prior(prior);
  if (!vp.has_rho()) throw ConfigError("kl_to_prior: rho not initialized");
  Tensor sig = sigma_from_rho(vp.rho);
  Tensor term = sub(scale(square(sig), 0.5 / prior.sigma0_sq), log_op(sig));
  return sum(term);
}

double kl_full(const VariationalParam& vp, const PriorConfig& prior) {
  validate_prior(prior);
  if (!vp.has_rho()) throw ConfigError("kl_full: rho not initialized");
  const double s0sq = prior.sigma0_sq;
  double total = 0.0;
  for (std::size_t i = 0; i < vp.rho.numel(); ++i) {
    const double r = vp.rho.value(i);
    const double sig =
        r > 0.0 ? r + std::log1p(std::exp(-r)) : std::log1p(std::exp(r));
    const double mu = vp.mu.value(i);
    total += 0.5 * std::log(s0sq) - std::log(sig) +
             (sig * sig + mu * mu) / (2.0 * s0sq) - 0.5;
  }
  return total;
}

Moments linear_reparam_moments(const Tensor& x, const VariationalParam& w,
                               const VariationalParam& b) {
  if (!w.has_rho() || !b.has_rho())
    throw ConfigError("linear_reparam_moments: rho not initialized");
  Tensor mean = add_bias_cols(matmul(x, w.mu), b.mu);
  Tensor sig_w = flush_below(sigma_from_rho(w.rho), kSigmaFloor);
  Tensor sig_b = flush_below(sigma_from_rho(b.rho), kSigmaFloor);
  Tensor var = add_bias_cols(matmul(square(x), square(sig_w)), square(sig_b));
  return {mean, var};
}

Tensor sample_standard_normal(const Shape& shape, Rng& rng) {
  const std::size_t n = shape_numel(shape);
  std::vector<double> out(n);
  fill_standard_normal(rng, out.data(), n);
  return Tensor::from(shape, std::move(out));
}

Tensor apply_output_noise(const Moments& m, Rng& rng) {
  return gaussian_perturb(m.mean, m.var, rng);
}

}  // namespace sb
