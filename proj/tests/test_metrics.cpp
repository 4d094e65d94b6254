#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "core/metrics.hpp"
#include "testutil.hpp"

using namespace sb;

namespace {

Grid2D random_grid(int n, int t, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Grid2D g = make_grid(n, t, GridKind::Impedance);
  for (auto& v : g.values) v = rng.uniform(lo, hi);
  return g;
}

}  // namespace

TEST_CASE("perfect prediction metrics") {
  Rng rng(3);
  Grid2D t = random_grid(15, 20, rng);
  CHECK(mse(t, t) == 0.0);
  CHECK(pcc(t, t) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r2(t, t) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::isinf(psnr(t, t)));
  CHECK(ssim(t, t) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("anti-correlated prediction has pcc -1") {
  Rng rng(5);
  Grid2D t = random_grid(10, 12, rng);
  // zero-mean the truth so pred = -truth is exactly anti-correlated
  const NormStats s = compute_stats(t);
  t = apply_stats(t, s);
  Grid2D p = t;
  for (auto& v : p.values) v = -v;
  CHECK(pcc(p, t) == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("pcc and r2 reject constant grids") {
  Grid2D flat = make_grid(4, 4, GridKind::Impedance);
  Grid2D var = flat;
  for (std::size_t i = 0; i < var.values.size(); ++i)
    var.values[i] = static_cast<double>(i);
  CHECK_THROWS_AS(pcc(var, flat), ConfigError);
  CHECK_THROWS_AS(r2(var, flat), ConfigError);
  CHECK_THROWS_AS(pcc(flat, var), ConfigError);
  CHECK(r2(flat, var) <= 1.0);  // constant prediction is legal for r2
}

TEST_CASE("pcc is invariant under positive affine maps of the prediction") {
  Rng rng(7);
  Grid2D t = random_grid(9, 11, rng);
  Grid2D p = random_grid(9, 11, rng);
  const double base = pcc(p, t);
  Grid2D q = p;
  for (auto& v : q.values) v = 3.7 * v + 11.0;
  CHECK(pcc(q, t) == doctest::Approx(base).epsilon(1e-10));
}

TEST_CASE("r2 equals pcc^2 for the least-squares affine prediction") {
  Rng rng(9);
  Grid2D t = random_grid(12, 14, rng);
  Grid2D x = random_grid(12, 14, rng);
  // least-squares fit of truth from x: pred = a*x + b
  const std::size_t n = t.values.size();
  double mx = 0, mt = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x.values[i];
    mt += t.values[i];
  }
  mx /= n;
  mt /= n;
  double sxx = 0, sxt = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x.values[i] - mx) * (x.values[i] - mx);
    sxt += (x.values[i] - mx) * (t.values[i] - mt);
  }
  const double a = sxt / sxx, b = mt - a * mx;
  Grid2D pred = x;
  for (auto& v : pred.values) v = a * v + b;
  const double c = pcc(pred, t);
  CHECK(r2(pred, t) == doctest::Approx(c * c).epsilon(1e-10));
}

TEST_CASE("r2 never exceeds one") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Grid2D t = random_grid(6, 8, rng);
    Grid2D p = random_grid(6, 8, rng, -3.0, 3.0);
    CHECK(r2(p, t) <= 1.0);
  }
}

TEST_CASE("psnr reference cases") {
  Grid2D t = make_grid(2, 2, GridKind::Impedance);
  t.values = {0.0, 1.0, 0.25, 0.75};  // range 1
  Grid2D p = t;
  p.values = {0.1, 1.1, 0.35, 0.85};  // mse 0.01
  CHECK(psnr(p, t) == doctest::Approx(20.0).epsilon(1e-9));

  // mse == R^2 -> 0 dB
  Grid2D q = t;
  for (auto& v : q.values) v += 1.0;
  CHECK(psnr(q, t) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("ssim penalizes a large constant offset") {
  Rng rng(13);
  Grid2D t = random_grid(16, 16, rng);
  Grid2D p = t;
  const double r = 2.0;  // approximate range of the data
  for (auto& v : p.values) v += 5.0;
  const double s = ssim(p, t);
  CHECK(s < 1.0);
  // luminance term with mu_y = mu_x + 5: (2 mu_x mu_y + c1)/(mu_x^2+mu_y^2+c1)
  (void)r;
  CHECK(s < 0.5);
}

TEST_CASE("ssim of independent noise is near zero and symmetric") {
  Rng rng(17);
  Grid2D a = random_grid(32, 32, rng);
  Grid2D b = random_grid(32, 32, rng);
  const double s1 = ssim(a, b);
  const double s2 = ssim(b, a);
  CHECK(std::fabs(s1) < 0.1);
  CHECK(s1 == doctest::Approx(s2).epsilon(1e-12));
}

TEST_CASE("ssim needs grids at least as large as the window") {
  Grid2D small = make_grid(8, 8, GridKind::Impedance);
  Grid2D small2 = small;
  CHECK_THROWS_AS(ssim(small, small2), ConfigError);
}

TEST_CASE("abs_difference basics") {
  Rng rng(19);
  Grid2D t = random_grid(5, 6, rng);
  Grid2D z = abs_difference(t, t);
  CHECK(z.kind == GridKind::Difference);
  for (double v : z.values) CHECK(v == 0.0);

  Grid2D p = t;
  for (auto& v : p.values) v += 1.0;
  Grid2D one = abs_difference(p, t);
  for (double v : one.values) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));

  Grid2D ab = abs_difference(p, t), ba = abs_difference(t, p);
  CHECK(ab.values == ba.values);
}

TEST_CASE("mismatched shapes raise dimension errors") {
  Grid2D a = make_grid(3, 4, GridKind::Impedance);
  Grid2D b = make_grid(4, 3, GridKind::Impedance);
  CHECK_THROWS_AS(mse(a, b), DimError);
  CHECK_THROWS_AS(abs_difference(a, b), DimError);
}

TEST_CASE("evaluate_metrics row shape and serialization") {
  Rng rng(23);
  Grid2D t = random_grid(20, 20, rng, 1000.0, 2000.0);
  Grid2D p = t;
  for (auto& v : p.values) v += rng.uniform(-20.0, 20.0);
  MetricsReport r = evaluate_metrics(p, t, true, "synthetic", "bayes");
  CHECK(r.space == "standardized");
  CHECK(r.mse >= 0.0);
  CHECK(r.pcc >= -1.0);
  CHECK(r.pcc <= 1.0);
  CHECK(r.ssim >= -1.0);
  CHECK(r.ssim <= 1.0);
  CHECK(r.r2 <= 1.0);

  const std::string js = report_to_json(r);
  CHECK(js.find("\"mse\"") != std::string::npos);
  CHECK(js.find("\"psnr_db\"") != std::string::npos);
  const std::string csv = report_to_csv(r);
  CHECK(csv.find("mse,pcc,r2,psnr_db,ssim") != std::string::npos);

  // identical grids serialize psnr as the string "inf"
  MetricsReport perfect = evaluate_metrics(t, t, true, "synthetic", "exact");
  const std::string pj = report_to_json(perfect);
  CHECK(pj.find("\"inf\"") != std::string::npos);
}

TEST_CASE("physical-unit evaluation differs from standardized") {
  Rng rng(29);
  Grid2D t = random_grid(16, 16, rng, 1000.0, 3000.0);
  Grid2D p = t;
  for (auto& v : p.values) v += 40.0 * rng.normal();
  MetricsReport std_r = evaluate_metrics(p, t, true, "d", "m");
  MetricsReport phy_r = evaluate_metrics(p, t, false, "d", "m");
  CHECK(std_r.mse != phy_r.mse);
  // pcc is affine invariant, so both spaces agree
  CHECK(std_r.pcc == doctest::Approx(phy_r.pcc).epsilon(1e-9));
}
