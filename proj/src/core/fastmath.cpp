#include "fastmath.hpp"

#include <cmath>

namespace sb::fm {

void vexp(const double* in, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    double x = in[i];
    if (x > 700.0) x = 700.0;
    if (x < -700.0) x = -700.0;
    out[i] = std::exp(x);
  }
}

void vsigmoid(const double* in, double* out, std::size_t n) {
  // sigmoid saturates well inside the clamp; exp stays finite
  for (std::size_t i = 0; i < n; ++i) {
    double x = in[i];
    if (x > 40.0) x = 40.0;
    if (x < -40.0) x = -40.0;
    out[i] = 1.0 / (1.0 + std::exp(-x));
  }
}

void vtanh(const double* in, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    double x = in[i];
    if (x > 20.0) x = 20.0;
    if (x < -20.0) x = -20.0;
    const double e = std::exp(2.0 * x);
    out[i] = (e - 1.0) / (e + 1.0);
  }
}

void box_muller(const double* u1, const double* u2, double* out,
                std::size_t pairs) {
  constexpr double two_pi = 6.283185307179586476925286766559;
  for (std::size_t i = 0; i < pairs; ++i) {
    const double r = std::sqrt(-2.0 * std::log(1.0 - u1[i]));
    const double a = two_pi * u2[i];
    out[2 * i] = r * std::cos(a);
    out[2 * i + 1] = r * std::sin(a);
  }
}

}  // namespace sb::fm
