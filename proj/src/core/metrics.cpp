#include "metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <json.hpp>

namespace sb {

using nlohmann::json;

namespace {

void require_match(const Grid2D& a, const Grid2D& b, const char* op) {
  validate_grid(a, op);
  validate_grid(b, op);
  if (a.n_traces != b.n_traces || a.n_samples != b.n_samples)
    throw DimError(std::string(op) + ": grid shapes differ (" +
                   std::to_string(a.n_traces) + "x" +
                   std::to_string(a.n_samples) + " vs " +
                   std::to_string(b.n_traces) + "x" +
                   std::to_string(b.n_samples) + ")");
}

double mean_of(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  return m / static_cast<double>(v.size());
}

double range_of(const Grid2D& g) {
  double lo = g.values[0], hi = g.values[0];
  for (double v : g.values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  return hi - lo;
}

}  // namespace

double mse(const Grid2D& pred, const Grid2D& truth) {
  require_match(pred, truth, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const double d = pred.values[i] - truth.values[i];
    s += d * d;
  }
  return s / static_cast<double>(pred.values.size());
}

double pcc(const Grid2D& pred, const Grid2D& truth) {
  require_match(pred, truth, "pcc");
  const double mp = mean_of(pred.values), mt = mean_of(truth.values);
  double spt = 0.0, spp = 0.0, stt = 0.0;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const double dp = pred.values[i] - mp, dt = truth.values[i] - mt;
    spt += dp * dt;
    spp += dp * dp;
    stt += dt * dt;
  }
  if (!(stt > 0.0)) throw ConfigError("pcc: truth grid is constant");
  if (!(spp > 0.0)) throw ConfigError("pcc: prediction grid is constant");
  return spt / std::sqrt(spp * stt);
}

double r2(const Grid2D& pred, const Grid2D& truth) {
  require_match(pred, truth, "r2");
  const double mt = mean_of(truth.values);
  double sse = 0.0, sst = 0.0;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const double e = pred.values[i] - truth.values[i];
    const double d = truth.values[i] - mt;
    sse += e * e;
    sst += d * d;
  }
  if (!(sst > 0.0)) throw ConfigError("r2: truth grid is constant");
  return 1.0 - sse / sst;
}

double psnr(const Grid2D& pred, const Grid2D& truth) {
  const double m = mse(pred, truth);
  const double r = range_of(truth);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(r * r / m);
}

double ssim(const Grid2D& pred, const Grid2D& truth, int window, double k1,
            double k2, double sigma) {
  require_match(pred, truth, "ssim");
  if (window < 3 || window % 2 == 0)
    throw ConfigError("ssim: window must be odd and >= 3");
  if (pred.n_traces < window || pred.n_samples < window)
    throw ConfigError("ssim: grid smaller than the " + std::to_string(window) +
                      "x" + std::to_string(window) + " window");
  const int half = window / 2;
  std::vector<double> w(static_cast<std::size_t>(window) * window);
  double wsum = 0.0;
  for (int i = -half; i <= half; ++i)
    for (int j = -half; j <= half; ++j) {
      const double v = std::exp(-(i * i + j * j) / (2.0 * sigma * sigma));
      w[(i + half) * window + (j + half)] = v;
      wsum += v;
    }
  for (auto& v : w) v /= wsum;

  // min-max span as in psnr, taken over both grids so ssim stays symmetric
  const double r = std::max(range_of(truth), range_of(pred));
  const double c1 = (k1 * r) * (k1 * r);
  const double c2 = (k2 * r) * (k2 * r);

  double acc = 0.0;
  long count = 0;
  for (int i = half; i < pred.n_traces - half; ++i) {
    for (int j = half; j < pred.n_samples - half; ++j) {
      double mx = 0.0, my = 0.0;
      for (int a = -half; a <= half; ++a)
        for (int b = -half; b <= half; ++b) {
          const double ww = w[(a + half) * window + (b + half)];
          mx += ww * pred.at(i + a, j + b);
          my += ww * truth.at(i + a, j + b);
        }
      double vx = 0.0, vy = 0.0, cxy = 0.0;
      for (int a = -half; a <= half; ++a)
        for (int b = -half; b <= half; ++b) {
          const double ww = w[(a + half) * window + (b + half)];
          const double dx = pred.at(i + a, j + b) - mx;
          const double dy = truth.at(i + a, j + b) - my;
          vx += ww * dx * dx;
          vy += ww * dy * dy;
          cxy += ww * dx * dy;
        }
      const double num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
      const double den = (mx * mx + my * my + c1) * (vx + vy + c2);
      acc += num / den;
      ++count;
    }
  }
  return acc / static_cast<double>(count);
}

Grid2D abs_difference(const Grid2D& pred, const Grid2D& truth) {
  require_match(pred, truth, "abs_difference");
  Grid2D out = make_grid(pred.n_traces, pred.n_samples, GridKind::Difference);
  for (std::size_t i = 0; i < out.values.size(); ++i)
    out.values[i] = std::fabs(pred.values[i] - truth.values[i]);
  return out;
}

MetricsReport evaluate_metrics(const Grid2D& pred, const Grid2D& truth,
                               bool standardized, const std::string& dataset_id,
                               const std::string& method_id) {
  require_match(pred, truth, "evaluate_metrics");
  Grid2D p = pred, t = truth;
  if (standardized) {
    const NormStats s = compute_stats(truth);
    p = apply_stats(pred, s);
    t = apply_stats(truth, s);
  }
  MetricsReport r;
  r.mse = mse(p, t);
  r.pcc = pcc(p, t);
  r.r2 = r2(p, t);
  r.psnr_db = psnr(p, t);
  r.ssim = ssim(p, t);
  r.dataset_id = dataset_id;
  r.method_id = method_id;
  r.space = standardized ? "standardized" : "physical";
  r.psnr_range = range_of(t);
  return r;
}

std::string report_to_json(const MetricsReport& r) {
  json j{{"mse", r.mse},
         {"pcc", r.pcc},
         {"r2", r.r2},
         {"ssim", r.ssim},
         {"dataset_id", r.dataset_id},
         {"method_id", r.method_id},
         {"space", r.space},
         {"psnr_range", r.psnr_range}};
  if (std::isinf(r.psnr_db))
    j["psnr_db"] = "inf";
  else
    j["psnr_db"] = r.psnr_db;
  return j.dump(2);
}

std::string report_to_csv(const MetricsReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%.6g,%.6g,%.6g,%.6g,%.6g,%s,%s,%s\n",
                r.mse, r.pcc, r.r2, r.psnr_db, r.ssim, r.dataset_id.c_str(),
                r.method_id.c_str(), r.space.c_str());
  return "mse,pcc,r2,psnr_db,ssim,dataset_id,method_id,space\n" +
         std::string(buf);
}

}  // namespace sb
