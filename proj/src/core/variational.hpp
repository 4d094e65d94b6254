#pragma once

#include <string>
#include <vector>

#include "ops.hpp"
#include "tensor.hpp"

namespace sb {

// Sigma below this is flushed to exactly zero in the sampling paths, so a
// collapsed posterior reproduces the deterministic forward bit for bit.
inline constexpr double kSigmaFloor = 1e-12;

struct PriorConfig {
  double sigma0_sq = 1e-6;
};

void validate_prior(const PriorConfig& prior);

// Gaussian posterior factor per weight: mean mu (fixed by pre-training) and
// sigma = softplus(rho). rho is undefined until variational mode is set up.
struct VariationalParam {
  Tensor mu;
  Tensor rho;

  bool has_rho() const { return rho.defined(); }
  void init_rho(double rho0);
};

Tensor sigma_from_rho(const Tensor& rho);

// rho-dependent part of KL[q || N(0, sigma0^2)]: sum of
// -1/2 (log sigma^2 - sigma^2/sigma0^2). Constant terms are dropped; they
// carry no rho gradient. Tape-tracked.
Tensor kl_to_prior(const VariationalParam& vp, const PriorConfig& prior);

// Full closed-form KL with all constants restored; reporting only.
double kl_full(const VariationalParam& vp, const PriorConfig& prior);

// Local reparameterization for Y = XW + b:
// mean[m,j] = sum_i x[m,i] mu_w[i,j] + mu_b[j]
// var[m,j]  = sum_i x[m,i]^2 sigma_w[i,j]^2 + sigma_b[j]^2
struct Moments {
  Tensor mean;
  Tensor var;
};

Moments linear_reparam_moments(const Tensor& x, const VariationalParam& w,
                               const VariationalParam& b);

// Standard-normal tensor of the given shape, no gradient tracking.
Tensor sample_standard_normal(const Shape& shape, Rng& rng);

// mean + sqrt(var) * eps with a fresh eps per output element.
Tensor apply_output_noise(const Moments& m, Rng& rng);

}  // namespace sb
