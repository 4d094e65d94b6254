#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "core/layers.hpp"
#include "core/variational.hpp"
#include "testutil.hpp"

using namespace sb;

namespace {

double inv_softplus(double s) { return std::log(std::expm1(s)); }

Tensor rho_for_sigma(const Shape& shape, const std::vector<double>& sigmas) {
  std::vector<double> v(sigmas.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = inv_softplus(sigmas[i]);
  return Tensor::param(shape, std::move(v));
}

struct RunningMoments {
  std::vector<double> mean;
  std::vector<double> m2;
  long n = 0;
  void init(std::size_t k) {
    mean.assign(k, 0.0);
    m2.assign(k, 0.0);
  }
  void add(const std::vector<double>& x) {
    ++n;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = x[i] - mean[i];
      mean[i] += d / n;
      m2[i] += d * (x[i] - mean[i]);
    }
  }
  double var(std::size_t i) const { return m2[i] / n; }
};

}  // namespace

TEST_CASE("sigma_from_rho values and monotonicity") {
  Tensor rho = Tensor::from({3}, {0.0, 3.0, 3.5});
  Tensor sig = sigma_from_rho(rho);
  CHECK(sig.value(0) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(sig.value(1) == doctest::Approx(3.0485873515737421).epsilon(1e-12));
  CHECK(sig.value(2) > sig.value(1));
}

TEST_CASE("kl_to_prior closed-form substitutions") {
  PriorConfig prior{1.0};
  VariationalParam vp;
  vp.mu = Tensor::from({1}, {0.3});
  vp.rho = rho_for_sigma({1}, {1.0});
  CHECK(kl_to_prior(vp, prior).item() == doctest::Approx(0.5).epsilon(1e-10));

  vp.rho = rho_for_sigma({1}, {0.5});
  CHECK(kl_to_prior(vp, prior).item() ==
        doctest::Approx(0.8181471805599453).epsilon(1e-10));

  CHECK_THROWS_AS(kl_to_prior(vp, PriorConfig{0.0}), ConfigError);
  CHECK_THROWS_AS(kl_to_prior(vp, PriorConfig{-1.0}), ConfigError);
}

TEST_CASE("full KL matches Monte Carlo estimate within 2 percent") {
  Rng rng(101);
  PriorConfig prior{0.49};
  VariationalParam vp;
  vp.mu = Tensor::from({4}, {0.8, -0.3, 0.1, 1.2});
  vp.rho = rho_for_sigma({4}, {0.4, 0.9, 0.25, 0.6});

  const double closed = kl_full(vp, prior);
  const int n = 100000;
  double acc = 0.0;
  for (int s = 0; s < n; ++s) {
    for (int j = 0; j < 4; ++j) {
      const double sig = std::log1p(std::exp(vp.rho.value(j)));
      const double mu = vp.mu.value(j);
      const double w = mu + sig * rng.normal();
      const double logq = -0.5 * std::log(2.0 * M_PI * sig * sig) -
                          (w - mu) * (w - mu) / (2.0 * sig * sig);
      const double logp = -0.5 * std::log(2.0 * M_PI * prior.sigma0_sq) -
                          w * w / (2.0 * prior.sigma0_sq);
      acc += logq - logp;
    }
  }
  const double mc = acc / n;
  CHECK(std::fabs(mc - closed) / std::fabs(closed) < 0.02);
}

TEST_CASE("kl gradient flows to rho only, and matches finite differences") {
  Rng rng(103);
  PriorConfig prior{0.8};
  VariationalParam vp;
  vp.mu = sbtest::random_param(rng, {3, 2});
  vp.rho = sbtest::random_param(rng, {3, 2}, -2.0, 1.0);

  vp.mu.zero_grad();
  {
    Tape tape;
    tape.backward(kl_to_prior(vp, prior));
  }
  for (double g : vp.mu.grad()) CHECK(g == 0.0);

  auto loss = [&] { return kl_to_prior(vp, prior); };
  auto res = sbtest::check_gradients(loss, {vp.rho}, rng);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("linear local reparameterization one-hot substitution") {
  VariationalParam w, b;
  w.mu = Tensor::from({2, 1}, {2.0, 3.0});
  w.rho = rho_for_sigma({2, 1}, {0.1, 0.2});
  b.mu = Tensor::from({1}, {1.0});
  b.rho = rho_for_sigma({1}, {0.05});
  Tensor x = Tensor::from({1, 2}, {1.0, 0.0});
  Moments m = linear_reparam_moments(x, w, b);
  CHECK(m.mean.item() == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(m.var.item() == doctest::Approx(0.0125).epsilon(1e-12));
}

TEST_CASE("zero variance collapses every layer kind to the deterministic pass") {
  Rng rng(107);
  const double rho0 = -40.0;  // sigma ~ 4e-18, under the flush floor

  Dense dense(3, 2, rng);
  dense.init_variational(rho0);
  Tensor xd = Tensor::from({4, 3}, sbtest::random_values(rng, 12));
  Rng r1(1);
  CHECK(sbtest::max_abs_diff(dense.forward_var(xd, r1).values(),
                             dense.forward(xd).values()) < 1e-9);

  Conv1dLayer c1(2, 3, 5, 1, 2, rng);
  c1.init_variational(rho0);
  Tensor xc = Tensor::from({2, 2, 7}, sbtest::random_values(rng, 28));
  Rng r2(2);
  CHECK(sbtest::max_abs_diff(c1.forward_var(xc, r2).values(),
                             c1.forward(xc).values()) < 1e-9);

  Conv2dLayer c2(1, 2, 3, 3, 1, 1, rng);
  c2.init_variational(rho0);
  Tensor x2 = Tensor::from({1, 1, 6, 5}, sbtest::random_values(rng, 30));
  Rng r3(3);
  CHECK(sbtest::max_abs_diff(c2.forward_var(x2, r3).values(),
                             c2.forward(x2).values()) < 1e-9);

  TConv1dLayer tc(2, 2, 5, rng);
  tc.init_variational(rho0);
  Tensor xt = Tensor::from({1, 2, 6}, sbtest::random_values(rng, 12));
  Rng r4(4);
  CHECK(sbtest::max_abs_diff(tc.forward_var(xt, r4).values(),
                             tc.forward(xt).values()) < 1e-9);

  GroupNormLayer gn(4, 2, 1e-5);
  gn.init_variational(rho0);
  Tensor xg = Tensor::from({2, 4, 6}, sbtest::random_values(rng, 48));
  Rng r5(5);
  CHECK(sbtest::max_abs_diff(gn.forward_var(xg, r5).values(),
                             gn.forward(xg).values()) < 1e-9);

  GruLayer g(3, 4, rng);
  g.init_variational(rho0);
  Tensor xr = Tensor::from({2, 5, 3}, sbtest::random_values(rng, 30));
  Rng r6(6);
  CHECK(sbtest::max_abs_diff(g.forward_var(xr, r6).values(),
                             g.forward(xr).values()) < 1e-9);
}

TEST_CASE("linear layer moments match naive weight sampling") {
  Rng rng(109);
  Dense dense(3, 2, rng);
  dense.init_variational(0.0);
  // spread the sigmas a bit
  for (auto& r : dense.w.rho.mutable_values()) r = rng.uniform(-1.5, 0.5);
  for (auto& r : dense.b.rho.mutable_values()) r = rng.uniform(-1.5, 0.5);

  Tensor x = Tensor::from({5, 3}, sbtest::random_values(rng, 15, -2.0, 2.0));
  Moments m = dense.var_moments(x);

  const int n = 10000;
  RunningMoments rm;
  rm.init(m.mean.numel());
  Rng wrng(211);
  for (int s = 0; s < n; ++s) {
    std::vector<double> wv(dense.w.mu.numel()), bv(dense.b.mu.numel());
    for (std::size_t i = 0; i < wv.size(); ++i) {
      const double sig = std::log1p(std::exp(dense.w.rho.value(i)));
      wv[i] = dense.w.mu.value(i) + sig * wrng.normal();
    }
    for (std::size_t i = 0; i < bv.size(); ++i) {
      const double sig = std::log1p(std::exp(dense.b.rho.value(i)));
      bv[i] = dense.b.mu.value(i) + sig * wrng.normal();
    }
    Tensor y = add_bias_cols(matmul(x, Tensor::from({3, 2}, wv)),
                             Tensor::from({2}, bv));
    rm.add(y.values());
  }
  for (std::size_t i = 0; i < m.mean.numel(); ++i) {
    const double sd = std::sqrt(m.var.value(i));
    CHECK(std::fabs(rm.mean[i] - m.mean.value(i)) < 4.0 * sd / std::sqrt(n));
    const double se_var = m.var.value(i) * std::sqrt(2.0 / (n - 1));
    CHECK(std::fabs(rm.var(i) - m.var.value(i)) < 4.0 * se_var);
  }
}

TEST_CASE("conv layer moments match naive weight sampling") {
  Rng rng(113);
  Conv1dLayer conv(2, 2, 3, 1, 1, rng);
  conv.init_variational(0.0);
  for (auto& r : conv.kernel.rho.mutable_values()) r = rng.uniform(-1.5, 0.5);
  for (auto& r : conv.bias.rho.mutable_values()) r = rng.uniform(-1.5, 0.5);

  Tensor x = Tensor::from({1, 2, 6}, sbtest::random_values(rng, 12, -2.0, 2.0));
  Moments m = conv.var_moments(x);

  const int n = 10000;
  RunningMoments rm;
  rm.init(m.mean.numel());
  Rng wrng(223);
  for (int s = 0; s < n; ++s) {
    std::vector<double> kv(conv.kernel.mu.numel()), bv(conv.bias.mu.numel());
    for (std::size_t i = 0; i < kv.size(); ++i) {
      const double sig = std::log1p(std::exp(conv.kernel.rho.value(i)));
      kv[i] = conv.kernel.mu.value(i) + sig * wrng.normal();
    }
    for (std::size_t i = 0; i < bv.size(); ++i) {
      const double sig = std::log1p(std::exp(conv.bias.rho.value(i)));
      bv[i] = conv.bias.mu.value(i) + sig * wrng.normal();
    }
    Tensor y = conv1d(x, Tensor::from({2, 2, 3}, kv), Tensor::from({2}, bv));
    rm.add(y.values());
  }
  for (std::size_t i = 0; i < m.mean.numel(); ++i) {
    const double sd = std::sqrt(m.var.value(i));
    CHECK(std::fabs(rm.mean[i] - m.mean.value(i)) < 4.0 * sd / std::sqrt(n));
    const double se_var = m.var.value(i) * std::sqrt(2.0 / (n - 1));
    CHECK(std::fabs(rm.var(i) - m.var.value(i)) < 4.0 * se_var);
  }
}

TEST_CASE("conv variance path on constant input") {
  Rng rng(127);
  Conv1dLayer conv(2, 3, 3, 1, 1, rng);
  conv.init_variational(-1.0);
  const double c = 1.7;
  Tensor x = Tensor::full({1, 2, 9}, c);
  Moments m = conv.var_moments(x);
  const double sig = std::log1p(std::exp(-1.0));
  for (int o = 0; o < 3; ++o) {
    const double expected = 6 * sig * sig * c * c + sig * sig;  // Ci*K terms
    for (int t = 1; t < 8; ++t)
      CHECK(m.var.at({0, o, t}) == doctest::Approx(expected).epsilon(1e-10));
  }
}

TEST_CASE("gru surrogate: zero input leaves only bias variance") {
  Rng rng(131);
  GruLayer g(3, 4, rng);
  g.init_variational(-1.5);
  Tensor x = Tensor::zeros({2, 5, 3});
  Moments m = g.var_moments(x);
  const double sig = std::log1p(std::exp(-1.5));
  for (std::size_t i = 0; i < m.var.numel(); ++i)
    CHECK(m.var.value(i) == doctest::Approx(sig * sig).epsilon(1e-12));
}

TEST_CASE("gru local reparameterization empirical variance matches delta^2") {
  Rng rng(137);
  GruLayer g(2, 3, rng);
  g.init_variational(0.0);
  for (auto& r : g.tw.rho.mutable_values()) r = rng.uniform(-1.0, 0.5);
  for (auto& r : g.tb.rho.mutable_values()) r = rng.uniform(-1.0, 0.5);
  Tensor x = Tensor::from({1, 4, 2}, sbtest::random_values(rng, 8, -1.5, 1.5));
  Moments m = g.var_moments(x);

  const int n = 10000;
  RunningMoments rm;
  rm.init(m.mean.numel());
  Rng srng(229);
  for (int s = 0; s < n; ++s) {
    Rng draw = srng.fork(s);
    rm.add(g.forward_var(x, draw).values());
  }
  for (std::size_t i = 0; i < m.mean.numel(); ++i) {
    const double sd = std::sqrt(m.var.value(i));
    CHECK(std::fabs(rm.mean[i] - m.mean.value(i)) < 4.0 * sd / std::sqrt(n));
    const double se_var = m.var.value(i) * std::sqrt(2.0 / (n - 1));
    CHECK(std::fabs(rm.var(i) - m.var.value(i)) < 4.0 * se_var);
  }
}

TEST_CASE("variational forward gradients reach rho through the noise path") {
  Rng rng(139);
  Dense dense(3, 2, rng);
  dense.init_variational(-1.0);
  dense.w.mu.set_requires_grad(false);
  dense.b.mu.set_requires_grad(false);
  Tensor x = Tensor::from({4, 3}, sbtest::random_values(rng, 12));
  Tensor eps = Tensor::from({4, 2}, sbtest::random_values(rng, 8));
  auto loss = [&] {
    Moments m = dense.var_moments(x);
    Tensor y = add(m.mean, mul(sqrt_op(m.var), eps));
    return sum(mul(y, y));
  };
  auto res = sbtest::check_gradients(loss, {dense.w.rho, dense.b.rho}, rng);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("variational param shape invariants") {
  VariationalParam vp;
  vp.mu = Tensor::from({2, 3}, std::vector<double>(6, 0.1));
  vp.init_rho(-6.0);
  CHECK(vp.rho.shape() == vp.mu.shape());
  Tensor sig = sigma_from_rho(vp.rho);
  for (std::size_t i = 0; i < sig.numel(); ++i) CHECK(sig.value(i) > 0.0);
}
