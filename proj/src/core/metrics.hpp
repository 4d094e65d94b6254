#pragma once

#include <string>

#include "dataset.hpp"

namespace sb {

struct MetricsReport {
  double mse = 0.0;
  double pcc = 0.0;
  double r2 = 0.0;
  double psnr_db = 0.0;  // +inf when pred == truth
  double ssim = 0.0;
  std::string dataset_id;
  std::string method_id;
  std::string space = "standardized";  // or "physical"
  double psnr_range = 0.0;             // dynamic range R used by psnr/ssim
};

double mse(const Grid2D& pred, const Grid2D& truth);
double pcc(const Grid2D& pred, const Grid2D& truth);
double r2(const Grid2D& pred, const Grid2D& truth);

// 10 log10(R^2 / MSE) with R = max(truth) - min(truth).
double psnr(const Grid2D& pred, const Grid2D& truth);

// Mean local SSIM, 11x11 Gaussian window (sigma 1.5), k1 0.01 / k2 0.03,
// dynamic range as in psnr. Needs both grid extents >= window.
double ssim(const Grid2D& pred, const Grid2D& truth, int window = 11,
            double k1 = 0.01, double k2 = 0.03, double sigma = 1.5);

Grid2D abs_difference(const Grid2D& pred, const Grid2D& truth);

// All five metrics at once. With standardized=true both grids are moved to
// the truth's z-score space first (the training space).
MetricsReport evaluate_metrics(const Grid2D& pred, const Grid2D& truth,
                               bool standardized, const std::string& dataset_id,
                               const std::string& method_id);

std::string report_to_json(const MetricsReport& r);
std::string report_to_csv(const MetricsReport& r);

}  // namespace sb
