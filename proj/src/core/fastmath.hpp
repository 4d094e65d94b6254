#pragma once

#include <cstddef>

// Vectorizable elementwise transcendentals for the hot loops. The
// implementation file is built with -ffast-math so the compiler can emit
// libmvec calls; inputs are clamped to the saturation range first, so the
// relaxed NaN/Inf assumptions never see non-finite intermediates.
namespace sb::fm {

void vexp(const double* in, double* out, std::size_t n);
void vsigmoid(const double* in, double* out, std::size_t n);
void vtanh(const double* in, double* out, std::size_t n);

// Box-Muller: consumes uniform pairs (u1, u2) in [0,1), writes 2*pairs
// normals to out.
void box_muller(const double* u1, const double* u2, double* out,
                std::size_t pairs);

}  // namespace sb::fm
