#include "ops.hpp"

#include "fastmath.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace sb {

namespace {

std::vector<double>& gbuf(TensorImpl* t) {
  if (t->grad.empty()) t->grad.assign(t->values.size(), 0.0);
  return t->grad;
}

Tensor finish(const char* name, const Shape& shape, std::vector<double> vals,
              bool rg) {
  check_finite(vals, name);
  return make_op_output(shape, std::move(vals), rg);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimError(std::string(op) + ": shape mismatch " +
                   shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// c[m,n] = a[m,k] * b[k,n]
void gemm_set(const double* a, const double* b, double* c, int m, int k,
              int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    double* ci = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) ci[j] = 0.0;
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m,n] += a[m,k] * b[k,n]
void gemm_acc(const double* a, const double* b, double* c, int m, int k,
              int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    double* ci = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// da[m,k] += g[m,n] * b[k,n]^T
void gemm_nt_acc(const double* g, const double* b, double* da, int m, int n,
                 int k) {
  for (int i = 0; i < m; ++i) {
    const double* gi = g + static_cast<std::size_t>(i) * n;
    double* di = da + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double* bp = b + static_cast<std::size_t>(p) * n;
      double s = 0.0;
#pragma omp simd reduction(+ : s)
      for (int j = 0; j < n; ++j) s += gi[j] * bp[j];
      di[p] += s;
    }
  }
}

// db[k,n] += a[m,k]^T * g[m,n]
void gemm_tn_acc(const double* a, const double* g, double* db, int m, int k,
                 int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    const double* gi = g + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      double* dp = db + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) dp[j] += av * gi[j];
    }
  }
}

std::size_t outer_of(const Shape& s, int axis) {
  std::size_t n = 1;
  for (int i = 0; i < axis; ++i) n *= static_cast<std::size_t>(s[i]);
  return n;
}

std::size_t inner_of(const Shape& s, int axis) {
  std::size_t n = 1;
  for (int i = axis + 1; i < static_cast<int>(s.size()); ++i)
    n *= static_cast<std::size_t>(s[i]);
  return n;
}

}  // namespace

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value(i) + b.value(i);
  Tensor out =
      finish("add", a.shape(), std::move(v), a.requires_grad() || b.requires_grad());
  if (out.requires_grad()) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    Tape::current()->record([ai, bi, oi] {
      if (oi->grad.empty()) return;
      if (ai->requires_grad) {
        auto& g = gbuf(ai.get());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
      }
      if (bi->requires_grad) {
        auto& g = gbuf(bi.get());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value(i) - b.value(i);
  Tensor out =
      finish("sub", a.shape(), std::move(v), a.requires_grad() || b.requires_grad());
  if (out.requires_grad()) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    Tape::current()->record([ai, bi, oi] {
      if (oi->grad.empty()) return;
      if (ai->requires_grad) {
        auto& g = gbuf(ai.get());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
      }
      if (bi->requires_grad) {
        auto& g = gbuf(bi.get());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= oi->grad[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value(i) * b.value(i);
  Tensor out =
      finish("mul", a.shape(), std::move(v), a.requires_grad() || b.requires_grad());
  if (out.requires_grad()) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    Tape::current()->record([ai, bi, oi] {
      if (oi->grad.empty()) return;
      if (ai->requires_grad) {
        auto& g = gbuf(ai.get());
        for (std::size_t i = 0; i < g.size(); ++i)
          g[i] += oi->grad[i] * bi->values[i];
      }
      if (bi->requires_grad) {
        auto& g = gbuf(bi.get());
        for (std::size_t i = 0; i < g.size(); ++i)
          g[i] += oi->grad[i] * ai->values[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value(i) * s;
  Tensor out = finish("scale", a.shape(), std::move(v), a.requires_grad());
  if (out.requires_grad()) {
    auto ai = a.impl_ptr();
    auto oi = out.impl_ptr();
    Tape::current()->record([ai, oi, s] {
      if (oi->grad.empty() || !ai->requires_grad) return;
      auto& g = gbuf(ai.get());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * s;
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value(i) + s;
  Tensor out = finish("add_scalar", a.shape(), std::move(v), a.requires_grad());
  if (out.requires_grad()) {
    auto ai = a.impl_ptr();
    auto oi = out.impl_ptr();
    Tape::current()->record([ai, oi] {
      if (oi->grad.empty() || !ai->requires_grad) return;
      auto& g = gbuf(ai.get());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
    });
  }
  return out;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(const char* name, const Tensor& x, Fwd fwd, Bwd dydx_from) {
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = fwd(x.value(i));
  Tensor out = finish(name, x.shape(), std::move(v), x.requires_grad());
  if (out.requires_grad()) {
    auto xi = x.impl_ptr();
    auto oi = out.impl_ptr();
    Tape::current()->record([xi, oi, dydx_from] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      auto& g = gbuf(xi.get());
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += oi->grad[i] * dydx_from(xi->values[i], oi->values[i]);
    });
  }
  return out;
}

}  // namespace

Tensor square(const Tensor& x) {
  return unary_op(
      "square", x, [](double a) { return a * a; },
      [](double a, double) { return 2.0 * a; });
}

Tensor sqrt_op(const Tensor& x) {
  return unary_op(
      "sqrt", x, [](double a) { return std::sqrt(a); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor log_op(const Tensor& x) {
  return unary_op(
      "log", x, [](double a) { return std::log(a); },
      [](double a, double) { return 1.0 / a; });
}

Tensor tanh_op(const Tensor& x) {
  return unary_op(
      "tanh", x, [](double a) { return std::tanh(a); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid_op(const Tensor& x) {
  return unary_op(
      "sigmoid", x,
      [](double a) {
        if (a >= 0.0) return 1.0 / (1.0 + std::exp(-a));
        const double e = std::exp(a);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu_op(const Tensor& x) {
  return unary_op(
      "relu", x, [](double a) { return a > 0.0 ? a : 0.0; },
      [](double a, double) { return a > 0.0 ? 1.0 : 0.0; });
}

Tensor softplus_op(const Tensor& x) {
  return unary_op(
      "softplus", x,
      [](double a) {
        return a > 0.0 ? a + std::log1p(std::exp(-a)) : std::log1p(std::exp(a));
      },
      [](double a, double) {
        if (a >= 0.0) return 1.0 / (1.0 + std::exp(-a));
        const double e = std::exp(a);
        return e / (1.0 + e);
      });
}

Tensor flush_below(const Tensor& x, double cutoff) {
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = x.value(i) < cutoff ? 0.0 : x.value(i);
  Tensor out = finish("flush_below", x.shape(), std::move(v), x.requires_grad());
  if (out.requires_grad()) {
    auto xi = x.impl_ptr();
    auto oi = out.impl_ptr();
    Tape::current()->record([xi, oi, cutoff] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      auto& g = gbuf(xi.get());
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xi->values[i] >= cutoff) g[i] += oi->grad[i];
    });
  }
  return out;
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) s += x.value(i);
  Tensor out = finish("sum", {1}, {s}, x.requires_grad());
  if (out.requires_grad()) {
    auto xi = x.impl_ptr();
    auto oi = out.impl_ptr();
    Tape::current()->record([xi, oi] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      const double g0 = oi->grad[0];
      auto& g = gbuf(xi.get());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0;
    });
  }
  return out;
}

Tensor mean_axis(const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.ndim()) throw DimError("mean_axis: bad axis");
  const int L = x.dim(axis);
  if (L == 0) throw DimError("mean_axis: empty axis");
  const std::size_t outer = outer_of(x.shape(), axis);
  const std::size_t inner = inner_of(x.shape(), axis);
  Shape os;
  for (int i = 0; i < x.ndim(); ++i)
    if (i != axis) os.push_back(x.dim(i));
  if (os.empty()) os = {1};
  std::vector<double> v(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    const double* src = x.values().data() + o * L * inner;
    double* dst = v.data() + o * inner;
    for (int j = 0; j < L; ++j) {
      const double* row = src + static_cast<std::size_t>(j) * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += row[i];
    }
    for (std::size_t i = 0; i < inner; ++i) dst[i] /= L;
  }
  Tensor out = finish("mean_axis", os, std::move(v), x.requires_grad());
  if (out.requires_grad()) {
    auto xi = x.impl_ptr();
    auto oi = out.impl_ptr();
    Tape::current()->record([xi, oi, L, outer, inner] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      auto& g = gbuf(xi.get());
      for (std::size_t o = 0; o < outer; ++o) {
        const double* go = oi->grad.data() + o * inner;
        double* gx = g.data() + o * L * inner;
        for (int j = 0; j < L; ++j) {
          double* row = gx + static_cast<std::size_t>(j) * inner;
          for (std::size_t i = 0; i < inner; ++i) row[i] += go[i] / L;
        }
      }
    });
  }
  return out;
}

Tensor mean_last_axis(const Tensor& x) {
  if (x.ndim() < 1) throw DimError("mean_last_axis: rank-0 input");
  return mean_axis(x, x.ndim() - 1);
}

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2) {
    throw DimError("matmul: expects rank-2 operands, got " +
                   shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) {
    throw DimError("matmul: inner extents disagree " + shape_str(a.shape()) +
                   " vs " + shape_str(b.shape()));
  }
  std::vector<double> v(static_cast<std::size_t>(m) * n, 0.0);
  gemm_acc(a.values().data(), b.values().data(), v.data(), m, k, n);
  Tensor out = finish("matmul", {m, n}, std::move(v),
                      a.requires_grad() || b.requires_grad());
  if (out.requires_grad()) {
    auto ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    Tape::current()->record([ai, bi, oi, m, k, n] {
      if (oi->grad.empty()) return;
      if (ai->requires_grad)
        gemm_nt_acc(oi->grad.data(), bi->values.data(), gbuf(ai.get()).data(),
                    m, n, k);
      if (bi->requires_grad)
        gemm_tn_acc(ai->values.data(), oi->grad.data(), gbuf(bi.get()).data(),
                    m, k, n);
    });
  }
  return out;
}

Tensor add_bias_cols(const Tensor& x, const Tensor& b) {
  if (x.ndim() != 2 || b.ndim() != 1 || b.dim(0) != x.dim(1)) {
    throw DimError("add_bias_cols: got " + shape_str(x.shape()) + " and " +
                   shape_str(b.shape()));
  }
  const int m = x.dim(0), n = x.dim(1);
  std::vector<double> v(x.values());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) v[static_cast<std::size_t>(i) * n + j] += b.value(j);
  Tensor out = finish("add_bias_cols", x.shape(), std::move(v),
                      x.requires_grad() || b.requires_grad());
  if (out.requires_grad()) {
    auto xi = x.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    Tape::current()->record([xi, bi, oi, m, n] {
      if (oi->grad.empty()) return;
      if (xi->requires_grad) {
        auto& g = gbuf(xi.get());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
      }
      if (bi->requires_grad) {
        auto& g = gbuf(bi.get());
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j)
            g[j] += oi->grad[static_cast<std::size_t>(i) * n + j];
      }
    });
  }
  return out;
}

namespace {

void require_channel_vec(const Tensor& x, const Tensor& v, const char* op) {
  if (x.ndim() < 2 || v.ndim() != 1 || v.dim(0) != x.dim(1))
    throw DimError(std::string(op) + ": expects x[B,C,...] and v[C], got " +
                   shape_str(x.shape()) + " and " + shape_str(v.shape()));
}

}  // namespace

Tensor mul_channel(const Tensor& x, const Tensor& v) {
  require_channel_vec(x, v, "mul_channel");
  const int B = x.dim(0), C = x.dim(1);
  const std::size_t S = x.numel() / (static_cast<std::size_t>(B) * C);
  std::vector<double> out(x.numel());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double vc = v.value(c);
      const std::size_t base = (static_cast<std::size_t>(b) * C + c) * S;
      for (std::size_t i = 0; i < S; ++i)
        out[base + i] = x.value(base + i) * vc;
    }
  Tensor res = finish("mul_channel", x.shape(), std::move(out),
                      x.requires_grad() || v.requires_grad());
  if (res.requires_grad()) {
    auto xi = x.impl_ptr(), vi = v.impl_ptr(), oi = res.impl_ptr();
    Tape::current()->record([xi, vi, oi, B, C, S] {
      if (oi->grad.empty()) return;
      double* gx = xi->requires_grad ? gbuf(xi.get()).data() : nullptr;
      double* gv = vi->requires_grad ? gbuf(vi.get()).data() : nullptr;
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const std::size_t base = (static_cast<std::size_t>(b) * C + c) * S;
          const double vc = vi->values[c];
          double s = 0.0;
          for (std::size_t i = 0; i < S; ++i) {
            const double g = oi->grad[base + i];
            if (gx) gx[base + i] += g * vc;
            s += g * xi->values[base + i];
          }
          if (gv) gv[c] += s;
        }
    });
  }
  return res;
}

Tensor add_channel(const Tensor& x, const Tensor& v) {
  require_channel_vec(x, v, "add_channel");
  const int B = x.dim(0), C = x.dim(1);
  const std::size_t S = x.numel() / (static_cast<std::size_t>(B) * C);
  std::vector<double> out(x.numel());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double vc = v.value(c);
      const std::size_t base = (static_cast<std::size_t>(b) * C + c) * S;
      for (std::size_t i = 0; i < S; ++i)
        out[base + i] = x.value(base + i) + vc;
    }
  Tensor res = finish("add_channel", x.shape(), std::move(out),
                      x.requires_grad() || v.requires_grad());
  if (res.requires_grad()) {
    auto xi = x.impl_ptr(), vi = v.impl_ptr(), oi = res.impl_ptr();
    Tape::current()->record([xi, vi, oi, B, C, S] {
      if (oi->grad.empty()) return;
      double* gx = xi->requires_grad ? gbuf(xi.get()).data() : nullptr;
      double* gv = vi->requires_grad ? gbuf(vi.get()).data() : nullptr;
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const std::size_t base = (static_cast<std::size_t>(b) * C + c) * S;
          double s = 0.0;
          for (std::size_t i = 0; i < S; ++i) {
            const double g = oi->grad[base + i];
            if (gx) gx[base + i] += g;
            s += g;
          }
          if (gv) gv[c] += s;
        }
    });
  }
  return res;
}

Tensor channel_affine(const Tensor& x, const Tensor& s, const Tensor& b) {
  require_channel_vec(x, s, "channel_affine");
  require_channel_vec(x, b, "channel_affine");
  const int B = x.dim(0), C = x.dim(1);
  const std::size_t S = x.numel() / (static_cast<std::size_t>(B) * C);
  std::vector<double> out(x.numel());
  for (int bb = 0; bb < B; ++bb)
    for (int c = 0; c < C; ++c) {
      const double sc = s.value(c), bc = b.value(c);
      const std::size_t base = (static_cast<std::size_t>(bb) * C + c) * S;
      const double* xi = x.values().data() + base;
      double* oi = out.data() + base;
      for (std::size_t i = 0; i < S; ++i) oi[i] = xi[i] * sc + bc;
    }
  Tensor res = finish("channel_affine", x.shape(), std::move(out),
                      x.requires_grad() || s.requires_grad() || b.requires_grad());
  if (res.requires_grad()) {
    auto xi = x.impl_ptr(), si = s.impl_ptr(), bi = b.impl_ptr(),
         oi = res.impl_ptr();
    Tape::current()->record([xi, si, bi, oi, B, C, S] {
      if (oi->grad.empty()) return;
      double* gx = xi->requires_grad ? gbuf(xi.get()).data() : nullptr;
      double* gs = si->requires_grad ? gbuf(si.get()).data() : nullptr;
      double* gb = bi->requires_grad ? gbuf(bi.get()).data() : nullptr;
      for (int bb = 0; bb < B; ++bb)
        for (int c = 0; c < C; ++c) {
          const std::size_t base = (static_cast<std::size_t>(bb) * C + c) * S;
          const double sc = si->values[c];
          const double* go = oi->grad.data() + base;
          const double* xv = xi->values.data() + base;
          double ss = 0.0, sb = 0.0;
          if (gx) {
            double* g = gx + base;
#pragma omp simd reduction(+ : ss, sb)
            for (std::size_t i = 0; i < S; ++i) {
              g[i] += go[i] * sc;
              ss += go[i] * xv[i];
              sb += go[i];
            }
          } else {
#pragma omp simd reduction(+ : ss, sb)
            for (std::size_t i = 0; i < S; ++i) {
              ss += go[i] * xv[i];
              sb += go[i];
            }
          }
          if (gs) gs[c] += ss;
          if (gb) gb[c] += sb;
        }
    });
  }
  return res;
}

Tensor channel_affine_sq(const Tensor& x, const Tensor& s, const Tensor& b) {
  require_channel_vec(x, s, "channel_affine_sq");
  require_channel_vec(x, b, "channel_affine_sq");
  const int B = x.dim(0), C = x.dim(1);
  const std::size_t S = x.numel() / (static_cast<std::size_t>(B) * C);
  std::vector<double> out(x.numel());
  for (int bb = 0; bb < B; ++bb)
    for (int c = 0; c < C; ++c) {
      const double sc = s.value(c), bc = b.value(c);
      const std::size_t base = (static_cast<std::size_t>(bb) * C + c) * S;
      const double* xi = x.values().data() + base;
      double* oi = out.data() + base;
      for (std::size_t i = 0; i < S; ++i) oi[i] = xi[i] * xi[i] * sc + bc;
    }
  Tensor res = finish("channel_affine_sq", x.shape(), std::move(out),
                      x.requires_grad() || s.requires_grad() || b.requires_grad());
  if (res.requires_grad()) {
    auto xi = x.impl_ptr(), si = s.impl_ptr(), bi = b.impl_ptr(),
         oi = res.impl_ptr();
    Tape::current()->record([xi, si, bi, oi, B, C, S] {
      if (oi->grad.empty()) return;
      double* gx = xi->requires_grad ? gbuf(xi.get()).data() : nullptr;
      double* gs = si->requires_grad ? gbuf(si.get()).data() : nullptr;
      double* gb = bi->requires_grad ? gbuf(bi.get()).data() : nullptr;
      for (int bb = 0; bb < B; ++bb)
        for (int c = 0; c < C; ++c) {
          const std::size_t base = (static_cast<std::size_t>(bb) * C + c) * S;
          const double sc = si->values[c];
          const double* go = oi->grad.data() + base;
          const double* xv = xi->values.data() + base;
          double ss = 0.0, sb = 0.0;
          if (gx) {
            double* g = gx + base;
#pragma omp simd reduction(+ : ss, sb)
            for (std::size_t i = 0; i < S; ++i) {
              g[i] += go[i] * 2.0 * xv[i] * sc;
              ss += go[i] * xv[i] * xv[i];
              sb += go[i];
            }
          } else {
#pragma omp simd reduction(+ : ss, sb)
            for (std::size_t i = 0; i < S; ++i) {
              ss += go[i] * xv[i] * xv[i];
              sb += go[i];
            }
          }
          if (gs) gs[c] += ss;
          if (gb) gb[c] += sb;
        }
    });
  }
  return res;
}

void fill_standard_normal(Rng& rng, double* out, std::size_t n) {
  constexpr std::size_t kBlock = 4096;  // pairs per chunk, cache resident
  double u1[kBlock], u2[kBlock], tmp[2 * kBlock];
  std::size_t done = 0;
  while (done < n) {
    const std::size_t want = std::min(n - done, 2 * kBlock);
    const std::size_t pairs = (want + 1) / 2;
    for (std::size_t i = 0; i < pairs; ++i) {
      u1[i] = rng.uniform();
      u2[i] = rng.uniform();
    }
    fm::box_muller(u1, u2, tmp, pairs);
    std::memcpy(out + done, tmp, sizeof(double) * want);
    done += want;
  }
}

Tensor gaussian_perturb(const Tensor& mean, const Tensor& var, Rng& rng) {
  require_same_shape(mean, var, "gaussian_perturb");
  const std::size_t n = mean.numel();
  std::vector<double> eps(n);
  fill_standard_normal(rng, eps.data(), n);
  std::vector<double> out(n);
  const double* mv = mean.values().data();
  const double* vv = var.values().data();
  for (std::size_t i = 0; i < n; ++i)
    out[i] = mv[i] + std::sqrt(vv[i]) * eps[i];
  Tensor res = finish("gaussian_perturb", mean.shape(), std::move(out),
                      mean.requires_grad() || var.requires_grad());
  if (res.requires_grad()) {
    auto mi = mean.impl_ptr(), vi = var.impl_ptr(), oi = res.impl_ptr();
    Tape::current()->record([mi, vi, oi, eps = std::move(eps), n] {
      if (oi->grad.empty()) return;
      if (mi->requires_grad) {
        auto& g = gbuf(mi.get());
        for (std::size_t i = 0; i < n; ++i) g[i] += oi->grad[i];
      }
      if (vi->requires_grad) {
        auto& g = gbuf(vi.get());
        for (std::size_t i = 0; i < n; ++i) {
          const double sd = std::sqrt(vi->values[i]);
          if (sd > 0.0) g[i] += oi->grad[i] * eps[i] / (2.0 * sd);
        }
      }
    });
  }
  return res;
}

// ---- shape -----------------------------------------------------------------

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimError("reshape: " + shape_str(x.shape()) + " to " +
                   shape_str(shape) + " changes element count");
  }
  Tensor out = make_op_output(shape, x.values(), x.requires_grad());
  if (out.requires_grad()) {
    auto xi = x.impl_ptr();
    auto oi = out.impl_ptr();
    Tape::current()->record([xi, oi] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      auto& g = gbuf(xi.get());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
    });
  }
  return out;
}

Tensor transpose_last2(const Tensor& x) {
  if (x.ndim() < 2) throw DimError("transpose_last2: rank < 2");
  Shape os = x.shape();
  const int a = os[os.size() - 2], b = os[os.size() - 1];
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  const std::size_t batch = x.numel() / (static_cast<std::size_t>(a) * b);
  std::vector<double> v(x.numel());
  for (std::size_t q = 0; q < batch; ++q) {
    const double* src = x.values().data() + q * a * b;
    double* dst = v.data() + q * a * b;
    for (int i = 0; i < a; ++i)
      for (int j = 0; j < b; ++j)
        dst[static_cast<std::size_t>(j) * a + i] =
            src[static_cast<std::size_t>(i) * b + j];
  }
  Tensor out = finish("transpose_last2", os, std::move(v), x.requires_grad());
  if (out.requires_grad()) {
    auto xi = x.impl_ptr();
    auto oi = out.impl_ptr();
    Tape::current()->record([xi, oi, a, b, batch] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      auto& g = gbuf(xi.get());
      for (std::size_t q = 0; q < batch; ++q) {
        const double* go = oi->grad.data() + q * a * b;
        double* gx = g.data() + q * a * b;
        for (int i = 0; i < a; ++i)
          for (int j = 0; j < b; ++j)
            gx[static_cast<std::size_t>(i) * b + j] +=
                go[static_cast<std::size_t>(j) * a + i];
      }
    });
  }
  return out;
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
  if (axis < 0 || axis >= x.ndim()) throw DimError("slice: bad axis");
  if (start < 0 || len < 0 || start + len > x.dim(axis)) {
    throw DimError("slice: range out of bounds for " + shape_str(x.shape()));
  }
  Shape os = x.shape();
  os[axis] = len;
  const std::size_t outer = outer_of(x.shape(), axis);
  const std::size_t inner = inner_of(x.shape(), axis);
  const int A = x.dim(axis);
  std::vector<double> v(shape_numel(os));
  for (std::size_t o = 0; o < outer; ++o) {
    const double* src = x.values().data() + (o * A + start) * inner;
    double* dst = v.data() + o * len * inner;
    std::memcpy(dst, src, sizeof(double) * len * inner);
  }
  Tensor out = finish("slice", os, std::move(v), x.requires_grad());
  if (out.requires_grad()) {
    auto xi = x.impl_ptr();
    auto oi = out.impl_ptr();
    Tape::current()->record([xi, oi, outer, inner, A, start, len] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      auto& g = gbuf(xi.get());
      for (std::size_t o = 0; o < outer; ++o) {
        const double* go = oi->grad.data() + o * len * inner;
        double* gx = g.data() + (o * A + start) * inner;
        for (std::size_t i = 0; i < static_cast<std::size_t>(len) * inner; ++i)
          gx[i] += go[i];
      }
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw DimError("concat: no inputs");
  const Shape& s0 = xs[0].shape();
  if (axis < 0 || axis >= static_cast<int>(s0.size()))
    throw DimError("concat: bad axis");
  int total = 0;
  bool rg = false;
  for (const auto& t : xs) {
    if (t.ndim() != static_cast<int>(s0.size()))
      throw DimError("concat: rank mismatch");
    for (int i = 0; i < t.ndim(); ++i)
      if (i != axis && t.dim(i) != s0[i])
        throw DimError("concat: extent mismatch at axis " + std::to_string(i));
    total += t.dim(axis);
    rg = rg || t.requires_grad();
  }
  Shape os = s0;
  os[axis] = total;
  const std::size_t outer = outer_of(os, axis);
  const std::size_t inner = inner_of(os, axis);
  std::vector<double> v(shape_numel(os));
  std::size_t off = 0;
  for (const auto& t : xs) {
    const int A = t.dim(axis);
    for (std::size_t o = 0; o < outer; ++o) {
      std::memcpy(v.data() + (o * total + off) * inner,
                  t.values().data() + o * A * inner, sizeof(double) * A * inner);
    }
    off += A;
  }
  Tensor out = finish("concat", os, std::move(v), rg);
  if (out.requires_grad()) {
    std::vector<std::shared_ptr<TensorImpl>> impls;
    impls.reserve(xs.size());
    for (const auto& t : xs) impls.push_back(t.impl_ptr());
    auto oi = out.impl_ptr();
    Tape::current()->record([impls, oi, outer, inner, total, axis] {
      if (oi->grad.empty()) return;
      std::size_t off2 = 0;
      for (const auto& xi : impls) {
        const int A = xi->shape[axis];
        if (xi->requires_grad) {
          auto& g = gbuf(xi.get());
          for (std::size_t o = 0; o < outer; ++o) {
            const double* go = oi->grad.data() + (o * total + off2) * inner;
            double* gx = g.data() + o * A * inner;
            for (std::size_t i = 0; i < static_cast<std::size_t>(A) * inner; ++i)
              gx[i] += go[i];
          }
        }
        off2 += A;
      }
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& indices) {
  if (x.ndim() < 1) throw DimError("gather_rows: rank-0 input");
  const int rows = x.dim(0);
  const std::size_t inner = x.numel() / static_cast<std::size_t>(rows);
  for (int i : indices)
    if (i < 0 || i >= rows)
      throw DimError("gather_rows: index " + std::to_string(i) +
                     " out of range [0," + std::to_string(rows) + ")");
  Shape os = x.shape();
  os[0] = static_cast<int>(indices.size());
  std::vector<double> v(indices.size() * inner);
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::memcpy(v.data() + i * inner,
                x.values().data() + static_cast<std::size_t>(indices[i]) * inner,
                sizeof(double) * inner);
  Tensor out = finish("gather_rows", os, std::move(v), x.requires_grad());
  if (out.requires_grad()) {
    auto xi = x.impl_ptr();
    auto oi = out.impl_ptr();
    Tape::current()->record([xi, oi, indices, inner] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      auto& g = gbuf(xi.get());
      for (std::size_t i = 0; i < indices.size(); ++i) {
        const double* go = oi->grad.data() + i * inner;
        double* gx = g.data() + static_cast<std::size_t>(indices[i]) * inner;
        for (std::size_t j = 0; j < inner; ++j) gx[j] += go[j];
      }
    });
  }
  return out;
}

// ---- conv / pool / norm ----------------------------------------------------

Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              int stride, int dilation) {
  if (x.ndim() != 3 || kernel.ndim() != 3)
    throw DimError("conv1d: expects x[B,C,T], kernel[Co,Ci,K]");
  const int B = x.dim(0), Ci = x.dim(1), T = x.dim(2);
  const int Co = kernel.dim(0), K = kernel.dim(2);
  if (kernel.dim(1) != Ci)
    throw DimError("conv1d: kernel channels " + std::to_string(kernel.dim(1)) +
                   " do not match input channels " + std::to_string(Ci));
  if (K % 2 == 0) throw ConfigError("conv1d: kernel width must be odd");
  if (dilation < 1) throw ConfigError("conv1d: dilation must be >= 1");
  if (stride < 1) throw ConfigError("conv1d: stride must be >= 1");
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != Co))
    throw DimError("conv1d: bias shape mismatch");
  const int keff = (K - 1) * dilation + 1;
  const int pad = (keff - 1) / 2;
  const int To = (T + 2 * pad - keff) / stride + 1;
  if (To < 1) throw DimError("conv1d: empty output");

  std::vector<double> v(static_cast<std::size_t>(B) * Co * To, 0.0);
  for (int b = 0; b < B; ++b) {
    for (int o = 0; o < Co; ++o) {
      double* yb = v.data() + (static_cast<std::size_t>(b) * Co + o) * To;
      if (bias.defined()) {
        const double bo = bias.value(o);
        for (int t = 0; t < To; ++t) yb[t] = bo;
      }
      for (int c = 0; c < Ci; ++c) {
        const double* xb =
            x.values().data() + (static_cast<std::size_t>(b) * Ci + c) * T;
        const double* kr =
            kernel.values().data() + (static_cast<std::size_t>(o) * Ci + c) * K;
        for (int j = 0; j < K; ++j) {
          const double w = kr[j];
          const int shift = j * dilation - pad;
          // valid t range: 0 <= t*stride + shift < T
          int t0 = 0;
          if (shift < 0) t0 = (-shift + stride - 1) / stride;
          int t1 = To;  // exclusive
          if (shift >= 0) {
            const int hi = (T - 1 - shift) / stride + 1;
            t1 = std::min(To, hi);
          } else {
            const int hi = (T - 1 - shift) / stride + 1;
            t1 = std::min(To, hi);
          }
          const double* xs = xb + static_cast<std::size_t>(t0) * stride + shift;
          for (int t = t0; t < t1; ++t)
            yb[t] += w * xs[static_cast<std::size_t>(t - t0) * stride];
        }
      }
    }
  }
  const bool rg =
      x.requires_grad() || kernel.requires_grad() || (bias.defined() && bias.requires_grad());
  Tensor out = finish("conv1d", {B, Co, To}, std::move(v), rg);
  if (out.requires_grad()) {
    auto xi = x.impl_ptr(), ki = kernel.impl_ptr(), oi = out.impl_ptr();
    auto bi = bias.defined() ? bias.impl_ptr() : nullptr;
    Tape::current()->record([xi, ki, bi, oi, B, Ci, Co, T, To, K, stride,
                             dilation, pad] {
      if (oi->grad.empty()) return;
      double* gx = xi->requires_grad ? gbuf(xi.get()).data() : nullptr;
      double* gk = ki->requires_grad ? gbuf(ki.get()).data() : nullptr;
      double* gb = (bi && bi->requires_grad) ? gbuf(bi.get()).data() : nullptr;
      for (int b = 0; b < B; ++b) {
        for (int o = 0; o < Co; ++o) {
          const double* go =
              oi->grad.data() + (static_cast<std::size_t>(b) * Co + o) * To;
          if (gb) {
            double s = 0.0;
            for (int t = 0; t < To; ++t) s += go[t];
            gb[o] += s;
          }
          for (int c = 0; c < Ci; ++c) {
            const double* xb =
                xi->values.data() + (static_cast<std::size_t>(b) * Ci + c) * T;
            const double* kr =
                ki->values.data() + (static_cast<std::size_t>(o) * Ci + c) * K;
            double* gxc =
                gx ? gx + (static_cast<std::size_t>(b) * Ci + c) * T : nullptr;
            double* gkc =
                gk ? gk + (static_cast<std::size_t>(o) * Ci + c) * K : nullptr;
            for (int j = 0; j < K; ++j) {
              const int shift = j * dilation - pad;
              int t0 = 0;
              if (shift < 0) t0 = (-shift + stride - 1) / stride;
              const int hi = (T - 1 - shift) / stride + 1;
              const int t1 = std::min(To, hi);
              if (t1 <= t0) continue;
              if (gkc) {
                double s = 0.0;
                const double* xs =
                    xb + static_cast<std::size_t>(t0) * stride + shift;
#pragma omp simd reduction(+ : s)
                for (int t = t0; t < t1; ++t)
                  s += go[t] * xs[static_cast<std::size_t>(t - t0) * stride];
                gkc[j] += s;
              }
              if (gxc) {
                const double w = kr[j];
                double* xs =
                    gxc + static_cast<std::size_t>(t0) * stride + shift;
                for (int t = t0; t < t1; ++t)
                  xs[static_cast<std::size_t>(t - t0) * stride] += w * go[t];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              int dilation_t, int dilation_w) {
  if (x.ndim() != 4 || kernel.ndim() != 4)
    throw DimError("conv2d: expects x[B,C,T,W], kernel[Co,Ci,Kt,Kw]");
  const int B = x.dim(0), Ci = x.dim(1), T = x.dim(2), W = x.dim(3);
  const int Co = kernel.dim(0), Kt = kernel.dim(2), Kw = kernel.dim(3);
  if (kernel.dim(1) != Ci) throw DimError("conv2d: channel mismatch");
  if (Kt % 2 == 0 || Kw % 2 == 0)
    throw ConfigError("conv2d: kernel extents must be odd");
  if (dilation_t < 1 || dilation_w < 1)
    throw ConfigError("conv2d: dilation must be >= 1");
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != Co))
    throw DimError("conv2d: bias shape mismatch");
  const int pt = ((Kt - 1) * dilation_t) / 2;
  const int pw = ((Kw - 1) * dilation_w) / 2;

  std::vector<double> v(static_cast<std::size_t>(B) * Co * T * W, 0.0);
  const std::size_t plane = static_cast<std::size_t>(T) * W;
  for (int b = 0; b < B; ++b) {
    for (int o = 0; o < Co; ++o) {
      double* yb = v.data() + (static_cast<std::size_t>(b) * Co + o) * plane;
      if (bias.defined()) {
        const double bo = bias.value(o);
        for (std::size_t i = 0; i < plane; ++i) yb[i] = bo;
      }
      for (int c = 0; c < Ci; ++c) {
        const double* xb =
            x.values().data() + (static_cast<std::size_t>(b) * Ci + c) * plane;
        const double* kr = kernel.values().data() +
                           (static_cast<std::size_t>(o) * Ci + c) * Kt * Kw;
        for (int jt = 0; jt < Kt; ++jt) {
          const int st = jt * dilation_t - pt;
          for (int jw = 0; jw < Kw; ++jw) {
            const int sw = jw * dilation_w - pw;
            const double w = kr[jt * Kw + jw];
            const int tlo = std::max(0, -st), thi = std::min(T, T - st);
            const int wlo = std::max(0, -sw), whi = std::min(W, W - sw);
            for (int t = tlo; t < thi; ++t) {
              double* yrow = yb + static_cast<std::size_t>(t) * W;
              const double* xrow =
                  xb + static_cast<std::size_t>(t + st) * W + sw;
              for (int wv = wlo; wv < whi; ++wv) yrow[wv] += w * xrow[wv];
            }
          }
        }
      }
    }
  }
  const bool rg =
      x.requires_grad() || kernel.requires_grad() || (bias.defined() && bias.requires_grad());
  Tensor out = finish("conv2d", {B, Co, T, W}, std::move(v), rg);
  if (out.requires_grad()) {
    auto xi = x.impl_ptr(), ki = kernel.impl_ptr(), oi = out.impl_ptr();
    auto bi = bias.defined() ? bias.impl_ptr() : nullptr;
    Tape::current()->record([xi, ki, bi, oi, B, Ci, Co, T, W, Kt, Kw,
                             dilation_t, dilation_w, pt, pw, plane] {
      if (oi->grad.empty()) return;
      double* gx = xi->requires_grad ? gbuf(xi.get()).data() : nullptr;
      double* gk = ki->requires_grad ? gbuf(ki.get()).data() : nullptr;
      double* gb = (bi && bi->requires_grad) ? gbuf(bi.get()).data() : nullptr;
      for (int b = 0; b < B; ++b) {
        for (int o = 0; o < Co; ++o) {
          const double* go =
              oi->grad.data() + (static_cast<std::size_t>(b) * Co + o) * plane;
          if (gb) {
            double s = 0.0;
            for (std::size_t i = 0; i < plane; ++i) s += go[i];
            gb[o] += s;
          }
          for (int c = 0; c < Ci; ++c) {
            const double* xb = xi->values.data() +
                               (static_cast<std::size_t>(b) * Ci + c) * plane;
            const double* kr = ki->values.data() +
                               (static_cast<std::size_t>(o) * Ci + c) * Kt * Kw;
            double* gxc =
                gx ? gx + (static_cast<std::size_t>(b) * Ci + c) * plane
                   : nullptr;
            double* gkc =
                gk ? gk + (static_cast<std::size_t>(o) * Ci + c) * Kt * Kw
                   : nullptr;
            for (int jt = 0; jt < Kt; ++jt) {
              const int st = jt * dilation_t - pt;
              for (int jw = 0; jw < Kw; ++jw) {
                const int sw = jw * dilation_w - pw;
                const int tlo = std::max(0, -st), thi = std::min(T, T - st);
                const int wlo = std::max(0, -sw), whi = std::min(W, W - sw);
                if (gkc) {
                  double s = 0.0;
                  for (int t = tlo; t < thi; ++t) {
                    const double* grow = go + static_cast<std::size_t>(t) * W;
                    const double* xrow =
                        xb + static_cast<std::size_t>(t + st) * W + sw;
#pragma omp simd reduction(+ : s)
                    for (int wv = wlo; wv < whi; ++wv) s += grow[wv] * xrow[wv];
                  }
                  gkc[jt * Kw + jw] += s;
                }
                if (gxc) {
                  const double w = kr[jt * Kw + jw];
                  for (int t = tlo; t < thi; ++t) {
                    const double* grow = go + static_cast<std::size_t>(t) * W;
                    double* xrow =
                        gxc + static_cast<std::size_t>(t + st) * W + sw;
                    for (int wv = wlo; wv < whi; ++wv) xrow[wv] += w * grow[wv];
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor transposed_conv1d(const Tensor& x, const Tensor& kernel,
                         const Tensor& bias, int stride, int pad,
                         int output_pad) {
  if (x.ndim() != 3 || kernel.ndim() != 3)
    throw DimError("transposed_conv1d: expects x[B,Ci,T], kernel[Ci,Co,K]");
  const int B = x.dim(0), Ci = x.dim(1), T = x.dim(2);
  const int Co = kernel.dim(1), K = kernel.dim(2);
  if (kernel.dim(0) != Ci) throw DimError("transposed_conv1d: channel mismatch");
  if (stride < 1) throw ConfigError("transposed_conv1d: stride must be >= 1");
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != Co))
    throw DimError("transposed_conv1d: bias shape mismatch");
  const int To = (T - 1) * stride - 2 * pad + K + output_pad;
  if (To < 1) throw DimError("transposed_conv1d: empty output");

  std::vector<double> v(static_cast<std::size_t>(B) * Co * To, 0.0);
  for (int b = 0; b < B; ++b) {
    for (int o = 0; o < Co; ++o) {
      double* yb = v.data() + (static_cast<std::size_t>(b) * Co + o) * To;
      if (bias.defined()) {
        const double bo = bias.value(o);
        for (int t = 0; t < To; ++t) yb[t] = bo;
      }
      for (int c = 0; c < Ci; ++c) {
        const double* xb =
            x.values().data() + (static_cast<std::size_t>(b) * Ci + c) * T;
        const double* kr =
            kernel.values().data() + (static_cast<std::size_t>(c) * Co + o) * K;
        for (int j = 0; j < K; ++j) {
          const double w = kr[j];
          for (int t = 0; t < T; ++t) {
            const int tau = t * stride + j - pad;
            if (tau >= 0 && tau < To) yb[tau] += w * xb[t];
          }
        }
      }
    }
  }
  const bool rg =
      x.requires_grad() || kernel.requires_grad() || (bias.defined() && bias.requires_grad());
  Tensor out = finish("transposed_conv1d", {B, Co, To}, std::move(v), rg);
  if (out.requires_grad()) {
    auto xi = x.impl_ptr(), ki = kernel.impl_ptr(), oi = out.impl_ptr();
    auto bi = bias.defined() ? bias.impl_ptr() : nullptr;
    Tape::current()->record([xi, ki, bi, oi, B, Ci, Co, T, To, K, stride, pad] {
      if (oi->grad.empty()) return;
      double* gx = xi->requires_grad ? gbuf(xi.get()).data() : nullptr;
      double* gk = ki->requires_grad ? gbuf(ki.get()).data() : nullptr;
      double* gb = (bi && bi->requires_grad) ? gbuf(bi.get()).data() : nullptr;
      for (int b = 0; b < B; ++b) {
        for (int o = 0; o < Co; ++o) {
          const double* go =
              oi->grad.data() + (static_cast<std::size_t>(b) * Co + o) * To;
          if (gb) {
            double s = 0.0;
            for (int t = 0; t < To; ++t) s += go[t];
            gb[o] += s;
          }
          for (int c = 0; c < Ci; ++c) {
            const double* xb =
                xi->values.data() + (static_cast<std::size_t>(b) * Ci + c) * T;
            const double* kr =
                ki->values.data() + (static_cast<std::size_t>(c) * Co + o) * K;
            double* gxc =
                gx ? gx + (static_cast<std::size_t>(b) * Ci + c) * T : nullptr;
            double* gkc =
                gk ? gk + (static_cast<std::size_t>(c) * Co + o) * K : nullptr;
            for (int j = 0; j < K; ++j) {
              const double w = kr[j];
              for (int t = 0; t < T; ++t) {
                const int tau = t * stride + j - pad;
                if (tau < 0 || tau >= To) continue;
                if (gxc) gxc[t] += w * go[tau];
                if (gkc) gkc[j] += xb[t] * go[tau];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor maxpool2d(const Tensor& x, int win_t, int win_w, int stride_t,
                 int stride_w) {
  if (x.ndim() != 4) throw DimError("maxpool2d: expects x[B,C,T,W]");
  const int B = x.dim(0), C = x.dim(1), T = x.dim(2), W = x.dim(3);
  if (win_t < 1 || win_w < 1 || stride_t < 1 || stride_w < 1)
    throw ConfigError("maxpool2d: window and stride must be >= 1");
  if (win_t > T || win_w > W)
    throw DimError("maxpool2d: window " + std::to_string(win_t) + "x" +
                   std::to_string(win_w) + " larger than input " +
                   std::to_string(T) + "x" + std::to_string(W));
  const int To = (T - win_t) / stride_t + 1;
  const int Wo = (W - win_w) / stride_w + 1;
  const std::size_t plane_in = static_cast<std::size_t>(T) * W;
  const std::size_t plane_out = static_cast<std::size_t>(To) * Wo;

  std::vector<double> v(static_cast<std::size_t>(B) * C * plane_out);
  std::vector<int> argmax(v.size());
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const double* xb =
          x.values().data() + (static_cast<std::size_t>(b) * C + c) * plane_in;
      double* yb = v.data() + (static_cast<std::size_t>(b) * C + c) * plane_out;
      int* ab =
          argmax.data() + (static_cast<std::size_t>(b) * C + c) * plane_out;
      for (int to = 0; to < To; ++to) {
        for (int wo = 0; wo < Wo; ++wo) {
          double best = -1.0;
          int besti = -1;
          for (int dt = 0; dt < win_t; ++dt) {
            for (int dw = 0; dw < win_w; ++dw) {
              const int t = to * stride_t + dt, wv = wo * stride_w + dw;
              const int idx = t * W + wv;
              const double val = xb[idx];
              if (besti < 0 || val > best) {  // ties keep first in scan order
                best = val;
                besti = idx;
              }
            }
          }
          yb[to * Wo + wo] = best;
          ab[to * Wo + wo] = besti;
        }
      }
    }
  }
  Tensor out =
      finish("maxpool2d", {B, C, To, Wo}, std::move(v), x.requires_grad());
  if (out.requires_grad()) {
    auto xi = x.impl_ptr();
    auto oi = out.impl_ptr();
    Tape::current()->record(
        [xi, oi, argmax = std::move(argmax), B, C, plane_in, plane_out] {
          if (oi->grad.empty() || !xi->requires_grad) return;
          auto& g = gbuf(xi.get());
          for (int b = 0; b < B; ++b) {
            for (int c = 0; c < C; ++c) {
              const std::size_t bo = (static_cast<std::size_t>(b) * C + c);
              const double* go = oi->grad.data() + bo * plane_out;
              const int* ab = argmax.data() + bo * plane_out;
              double* gx = g.data() + bo * plane_in;
              for (std::size_t i = 0; i < plane_out; ++i) gx[ab[i]] += go[i];
            }
          }
        });
  }
  return out;
}

Tensor group_norm(const Tensor& x, int groups, double eps, const Tensor& gain,
                  const Tensor& bias) {
  if (x.ndim() < 2) throw DimError("group_norm: expects x[B,C,...]");
  const int B = x.dim(0), C = x.dim(1);
  if (groups < 1 || C % groups != 0)
    throw ConfigError("group_norm: channels " + std::to_string(C) +
                      " not divisible by groups " + std::to_string(groups));
  if (gain.ndim() != 1 || gain.dim(0) != C || bias.ndim() != 1 ||
      bias.dim(0) != C)
    throw DimError("group_norm: affine parameters must have shape [C]");
  const std::size_t S = x.numel() / (static_cast<std::size_t>(B) * C);
  const int Cg = C / groups;
  const std::size_t block = static_cast<std::size_t>(Cg) * S;

  std::vector<double> v(x.numel());
  std::vector<double> mean_inv(static_cast<std::size_t>(B) * groups * 2);
  for (int b = 0; b < B; ++b) {
    for (int g = 0; g < groups; ++g) {
      const double* xb = x.values().data() +
                         (static_cast<std::size_t>(b) * C + g * Cg) * S;
      double s = 0.0;
      for (std::size_t i = 0; i < block; ++i) s += xb[i];
      const double m = s / static_cast<double>(block);
      double var = 0.0;
      for (std::size_t i = 0; i < block; ++i) {
        const double d = xb[i] - m;
        var += d * d;
      }
      var /= static_cast<double>(block);
      const double inv = 1.0 / std::sqrt(var + eps);
      mean_inv[(static_cast<std::size_t>(b) * groups + g) * 2] = m;
      mean_inv[(static_cast<std::size_t>(b) * groups + g) * 2 + 1] = inv;
      double* yb =
          v.data() + (static_cast<std::size_t>(b) * C + g * Cg) * S;
      for (int cc = 0; cc < Cg; ++cc) {
        const int c = g * Cg + cc;
        const double a = gain.value(c) * inv;
        const double off = bias.value(c) - gain.value(c) * m * inv;
        const double* xc = xb + static_cast<std::size_t>(cc) * S;
        double* yc = yb + static_cast<std::size_t>(cc) * S;
        for (std::size_t i = 0; i < S; ++i) yc[i] = a * xc[i] + off;
      }
    }
  }
  const bool rg =
      x.requires_grad() || gain.requires_grad() || bias.requires_grad();
  Tensor out = finish("group_norm", x.shape(), std::move(v), rg);
  if (out.requires_grad()) {
    auto xi = x.impl_ptr(), gi = gain.impl_ptr(), bi = bias.impl_ptr(),
         oi = out.impl_ptr();
    Tape::current()->record([xi, gi, bi, oi, mean_inv = std::move(mean_inv), B,
                             C, groups, Cg, S, block] {
      if (oi->grad.empty()) return;
      double* gx = xi->requires_grad ? gbuf(xi.get()).data() : nullptr;
      double* gg = gi->requires_grad ? gbuf(gi.get()).data() : nullptr;
      double* gb = bi->requires_grad ? gbuf(bi.get()).data() : nullptr;
      for (int b = 0; b < B; ++b) {
        for (int g = 0; g < groups; ++g) {
          const double m =
              mean_inv[(static_cast<std::size_t>(b) * groups + g) * 2];
          const double inv =
              mean_inv[(static_cast<std::size_t>(b) * groups + g) * 2 + 1];
          const std::size_t base = (static_cast<std::size_t>(b) * C + g * Cg) * S;
          const double* xb = xi->values.data() + base;
          const double* go = oi->grad.data() + base;
          // dxhat = go * gain[c]; need block sums of dxhat and dxhat*xhat
          double sum_dxh = 0.0, sum_dxh_xh = 0.0;
          for (int cc = 0; cc < Cg; ++cc) {
            const double gainc = gi->values[g * Cg + cc];
            const double* xc = xb + static_cast<std::size_t>(cc) * S;
            const double* gc = go + static_cast<std::size_t>(cc) * S;
            for (std::size_t i = 0; i < S; ++i) {
              const double xh = (xc[i] - m) * inv;
              const double dxh = gc[i] * gainc;
              sum_dxh += dxh;
              sum_dxh_xh += dxh * xh;
            }
          }
          const double nb = static_cast<double>(block);
          for (int cc = 0; cc < Cg; ++cc) {
            const int c = g * Cg + cc;
            const double gainc = gi->values[c];
            const double* xc = xb + static_cast<std::size_t>(cc) * S;
            const double* gc = go + static_cast<std::size_t>(cc) * S;
            double dgain = 0.0, dbias = 0.0;
            double* gxc = gx ? gx + base + static_cast<std::size_t>(cc) * S
                             : nullptr;
            for (std::size_t i = 0; i < S; ++i) {
              const double xh = (xc[i] - m) * inv;
              dgain += gc[i] * xh;
              dbias += gc[i];
              if (gxc) {
                const double dxh = gc[i] * gainc;
                gxc[i] +=
                    inv * (dxh - sum_dxh / nb - xh * (sum_dxh_xh / nb));
              }
            }
            if (gg) gg[c] += dgain;
            if (gb) gb[c] += dbias;
          }
        }
      }
    });
  }
  return out;
}

// ---- GRU -------------------------------------------------------------------

namespace {

// [B,T,F] <-> [T,B,F]
void transpose_bt(const double* in, double* out, int B, int T, int F) {
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < T; ++t)
      std::memcpy(out + (static_cast<std::size_t>(t) * B + b) * F,
                  in + (static_cast<std::size_t>(b) * T + t) * F,
                  sizeof(double) * F);
}

void transpose_tb(const double* in, double* out, int B, int T, int F) {
  for (int t = 0; t < T; ++t)
    for (int b = 0; b < B; ++b)
      std::memcpy(out + (static_cast<std::size_t>(b) * T + t) * F,
                  in + (static_cast<std::size_t>(t) * B + b) * F,
                  sizeof(double) * F);
}

}  // namespace

Tensor gru(const Tensor& x, const Tensor& w_input, const Tensor& w_hidden,
           const Tensor& b_input, const Tensor& b_hidden) {
  if (x.ndim() != 3) throw DimError("gru: expects x[B,T,F]");
  const int B = x.dim(0), T = x.dim(1), F = x.dim(2);
  if (w_input.ndim() != 2 || w_input.dim(0) != F)
    throw DimError("gru: w_input must be [F,3H]");
  const int H3 = w_input.dim(1);
  if (H3 % 3 != 0) throw DimError("gru: gate dimension must be 3H");
  const int H = H3 / 3;
  if (w_hidden.ndim() != 2 || w_hidden.dim(0) != H || w_hidden.dim(1) != H3)
    throw DimError("gru: w_hidden must be [H,3H]");
  if (b_input.numel() != static_cast<std::size_t>(H3) ||
      b_hidden.numel() != static_cast<std::size_t>(H3))
    throw DimError("gru: biases must be [3H]");

  const std::size_t BT = static_cast<std::size_t>(B) * T;
  const std::size_t BH = static_cast<std::size_t>(B) * H;
  // everything runs time-major so each step is one contiguous block
  std::vector<double> x_tm(BT * F);
  transpose_bt(x.values().data(), x_tm.data(), B, T, F);
  std::vector<double> gates_x(BT * H3);  // [T,B,3H], biases folded in later
  gemm_set(x_tm.data(), w_input.values().data(), gates_x.data(),
           static_cast<int>(BT), F, H3);

  std::vector<double> h_tm(BT * H);  // [T,B,H]
  std::vector<double> r_all(BT * H), z_all(BT * H), n_all(BT * H),
      c_all(BT * H);
  std::vector<double> rec(static_cast<std::size_t>(B) * H3);
  const double* bi = b_input.values().data();
  const double* bh = b_hidden.values().data();

  for (int t = 0; t < T; ++t) {
    const double* hp =
        t > 0 ? h_tm.data() + static_cast<std::size_t>(t - 1) * BH : nullptr;
    if (hp)
      gemm_set(hp, w_hidden.values().data(), rec.data(), B, H, H3);
    else
      std::fill(rec.begin(), rec.end(), 0.0);
    const std::size_t o = static_cast<std::size_t>(t) * BH;
    double* rt = r_all.data() + o;
    double* zt = z_all.data() + o;
    double* nt = n_all.data() + o;
    double* ct = c_all.data() + o;
    const double* gx = gates_x.data() + static_cast<std::size_t>(t) * B * H3;
    for (int b = 0; b < B; ++b) {
      const double* g = gx + static_cast<std::size_t>(b) * H3;
      const double* rb = rec.data() + static_cast<std::size_t>(b) * H3;
      double* r = rt + static_cast<std::size_t>(b) * H;
      double* z = zt + static_cast<std::size_t>(b) * H;
      double* c = ct + static_cast<std::size_t>(b) * H;
      for (int j = 0; j < H; ++j) {
        r[j] = g[j] + bi[j] + rb[j] + bh[j];
        z[j] = g[H + j] + bi[H + j] + rb[H + j] + bh[H + j];
        c[j] = rb[2 * H + j] + bh[2 * H + j];
      }
    }
    fm::vsigmoid(rt, rt, BH);
    fm::vsigmoid(zt, zt, BH);
    for (int b = 0; b < B; ++b) {
      const double* g = gx + static_cast<std::size_t>(b) * H3;
      const double* r = rt + static_cast<std::size_t>(b) * H;
      const double* c = ct + static_cast<std::size_t>(b) * H;
      double* n = nt + static_cast<std::size_t>(b) * H;
      for (int j = 0; j < H; ++j)
        n[j] = g[2 * H + j] + bi[2 * H + j] + r[j] * c[j];
    }
    fm::vtanh(nt, nt, BH);
    double* ht = h_tm.data() + o;
    if (hp) {
      for (std::size_t i = 0; i < BH; ++i)
        ht[i] = (1.0 - zt[i]) * nt[i] + zt[i] * hp[i];
    } else {
      for (std::size_t i = 0; i < BH; ++i) ht[i] = (1.0 - zt[i]) * nt[i];
    }
  }
  std::vector<double> h_out(BT * H);
  transpose_tb(h_tm.data(), h_out.data(), B, T, H);

  const bool rg = x.requires_grad() || w_input.requires_grad() ||
                  w_hidden.requires_grad() || b_input.requires_grad() ||
                  b_hidden.requires_grad();
  Tensor out = finish("gru", {B, T, H}, std::move(h_out), rg);
  if (out.requires_grad()) {
    auto xi = x.impl_ptr(), wii = w_input.impl_ptr(), whi = w_hidden.impl_ptr(),
         bii = b_input.impl_ptr(), bhi = b_hidden.impl_ptr(),
         oi = out.impl_ptr();
    Tape::current()->record([xi, wii, whi, bii, bhi, oi,
                             h_tm = std::move(h_tm), x_tm = std::move(x_tm),
                             r_all = std::move(r_all), z_all = std::move(z_all),
                             n_all = std::move(n_all), c_all = std::move(c_all),
                             B, T, F, H, H3] {
      if (oi->grad.empty()) return;
      const std::size_t BT = static_cast<std::size_t>(B) * T;
      const std::size_t BH = static_cast<std::size_t>(B) * H;
      std::vector<double> go_tm(BT * H);
      transpose_bt(oi->grad.data(), go_tm.data(), B, T, H);
      std::vector<double> d_gates(BT * H3);  // [T,B,3H]
      std::vector<double> dh(BH, 0.0);
      std::vector<double> dbh_acc(H3, 0.0);
      double* gwh = whi->requires_grad ? gbuf(whi.get()).data() : nullptr;
      for (int t = T - 1; t >= 0; --t) {
        const std::size_t o = static_cast<std::size_t>(t) * BH;
        const double* rt = r_all.data() + o;
        const double* zt = z_all.data() + o;
        const double* nt = n_all.data() + o;
        const double* ct = c_all.data() + o;
        const double* hp = t > 0 ? h_tm.data() + o - BH : nullptr;
        const double* go = go_tm.data() + o;
        double* dgx = d_gates.data() + static_cast<std::size_t>(t) * B * H3;
        for (int b = 0; b < B; ++b) {
          const std::size_t bo = static_cast<std::size_t>(b) * H;
          double* dg = dgx + static_cast<std::size_t>(b) * H3;
          for (int j = 0; j < H; ++j) {
            const double hpv = hp ? hp[bo + j] : 0.0;
            const double r = rt[bo + j], z = zt[bo + j], n = nt[bo + j],
                         c = ct[bo + j];
            const double dht = dh[bo + j] + go[bo + j];
            const double dn = dht * (1.0 - z);
            const double dz = dht * (hpv - n);
            const double dan = dn * (1.0 - n * n);
            const double dr_ = dan * c;
            const double dc = dan * r;
            dg[j] = dr_ * r * (1.0 - r);
            dg[H + j] = dz * z * (1.0 - z);
            dg[2 * H + j] = dan;
            dh[bo + j] = dht * z;  // recurrent parts added below
          }
        }
        // dh += drec * Wh^T where drec = [dar, daz, dan*r]
        for (int b = 0; b < B; ++b) {
          double* dg = dgx + static_cast<std::size_t>(b) * H3;
          const double* r = rt + static_cast<std::size_t>(b) * H;
          double* dhb = dh.data() + static_cast<std::size_t>(b) * H;
          for (int p = 0; p < H; ++p) {
            const double* wrow =
                whi->values.data() + static_cast<std::size_t>(p) * H3;
            double s = 0.0;
#pragma omp simd reduction(+ : s)
            for (int j = 0; j < H; ++j) {
              s += dg[j] * wrow[j] + dg[H + j] * wrow[H + j] +
                   (dg[2 * H + j] * r[j]) * wrow[2 * H + j];
            }
            dhb[p] += s;
          }
        }
        if (gwh || bhi->requires_grad) {
          for (int b = 0; b < B; ++b) {
            double* dg = dgx + static_cast<std::size_t>(b) * H3;
            const double* r = rt + static_cast<std::size_t>(b) * H;
            if (gwh && hp) {
              const double* hb = hp + static_cast<std::size_t>(b) * H;
              for (int p = 0; p < H; ++p) {
                const double hv = hb[p];
                double* wp = gwh + static_cast<std::size_t>(p) * H3;
                for (int j = 0; j < H; ++j) {
                  wp[j] += hv * dg[j];
                  wp[H + j] += hv * dg[H + j];
                  wp[2 * H + j] += hv * dg[2 * H + j] * r[j];
                }
              }
            }
            if (bhi->requires_grad) {
              for (int j = 0; j < H; ++j) {
                dbh_acc[j] += dg[j];
                dbh_acc[H + j] += dg[H + j];
                dbh_acc[2 * H + j] += dg[2 * H + j] * r[j];
              }
            }
          }
        }
      }
      if (bhi->requires_grad) {
        auto& g = gbuf(bhi.get());
        for (int j = 0; j < H3; ++j) g[j] += dbh_acc[j];
      }
      if (bii->requires_grad) {
        auto& g = gbuf(bii.get());
        for (std::size_t i = 0; i < BT; ++i)
          for (int j = 0; j < H3; ++j) g[j] += d_gates[i * H3 + j];
      }
      if (wii->requires_grad)
        gemm_tn_acc(x_tm.data(), d_gates.data(), gbuf(wii.get()).data(),
                    static_cast<int>(BT), F, H3);
      if (xi->requires_grad) {
        std::vector<double> dx_tm(BT * F, 0.0);
        gemm_nt_acc(d_gates.data(), wii->values.data(), dx_tm.data(),
                    static_cast<int>(BT), H3, F);
        auto& g = gbuf(xi.get());
        for (int t = 0; t < T; ++t)
          for (int b = 0; b < B; ++b) {
            const double* srow =
                dx_tm.data() + (static_cast<std::size_t>(t) * B + b) * F;
            double* drow =
                g.data() + (static_cast<std::size_t>(b) * T + t) * F;
            for (int f = 0; f < F; ++f) drow[f] += srow[f];
          }
      }
    });
  }
  return out;
}

// ---- Adam ------------------------------------------------------------------

void adam_step(std::vector<Tensor>& params, AdamState& state,
               const AdamConfig& cfg) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].numel(), 0.0);
      state.v[i].assign(params[i].numel(), 0.0);
    }
  }
  if (state.m.size() != params.size())
    throw ConfigError("adam_step: state does not match parameter list");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& g = params[i].grad();
    auto& w = params[i].mutable_values();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (g.size() != w.size())
      throw ConfigError("adam_step: gradient size mismatch");
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
    check_finite(w, "adam_step");
  }
}

}  // namespace sb
