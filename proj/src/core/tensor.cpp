#include "tensor.hpp"

#include <cmath>
#include <sstream>

namespace sb {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d < 0) throw DimError("negative extent in shape " + shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

void check_finite(const std::vector<double>& v, const char* where) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("non-finite value in ") + where);
    }
  }
}

static std::shared_ptr<TensorImpl> make_impl(const Shape& shape,
                                             std::vector<double> values) {
  if (shape_numel(shape) != values.size()) {
    throw DimError("shape " + shape_str(shape) + " does not match " +
                   std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->values = std::move(values);
  return impl;
}

Tensor Tensor::zeros(const Shape& shape) {
  return Tensor(make_impl(shape, std::vector<double>(shape_numel(shape), 0.0)));
}

Tensor Tensor::full(const Shape& shape, double v) {
  if (!std::isfinite(v)) throw NumericError("non-finite value in tensor fill");
  return Tensor(make_impl(shape, std::vector<double>(shape_numel(shape), v)));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values) {
  check_finite(values, "tensor literal");
  return Tensor(make_impl(shape, std::move(values)));
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

Tensor Tensor::param(const Shape& shape, std::vector<double> values) {
  Tensor t = from(shape, std::move(values));
  t.set_requires_grad(true);
  return t;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw DimError("item() on non-scalar tensor " + shape_str(shape()));
  }
  return impl_->values[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  if (static_cast<int>(idx.size()) != ndim()) {
    throw DimError("index rank mismatch for " + shape_str(shape()));
  }
  std::size_t off = 0;
  int k = 0;
  for (int i : idx) {
    if (i < 0 || i >= impl_->shape[k]) {
      throw DimError("index out of range for " + shape_str(shape()));
    }
    off = off * static_cast<std::size_t>(impl_->shape[k]) +
          static_cast<std::size_t>(i);
    ++k;
  }
  return impl_->values[off];
}

const std::vector<double>& Tensor::grad() const {
  static const std::vector<double> kEmpty;
  if (impl_->grad.empty()) {
    impl_->grad.assign(impl_->values.size(), 0.0);
  }
  (void)kEmpty;
  return impl_->grad;
}

std::vector<double>& Tensor::grad_buffer() {
  if (impl_->grad.empty()) {
    impl_->grad.assign(impl_->values.size(), 0.0);
  }
  return impl_->grad;
}

namespace {
thread_local Tape* g_current_tape = nullptr;
}

Tape::Tape() {
  prev_ = g_current_tape;
  g_current_tape = this;
}

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

int Tape::record(std::function<void()> backward) {
  records_.push_back(std::move(backward));
  return static_cast<int>(records_.size()) - 1;
}

void Tape::backward(const Tensor& root) {
  if (root.numel() != 1) {
    throw DimError("backward root must be scalar, got " +
                   shape_str(root.shape()));
  }
  if (!root.requires_grad()) {
    throw ConfigError("backward root does not require grad");
  }
  root.impl()->grad.assign(1, 1.0);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    (*it)();
  }
}

Tensor make_op_output(const Shape& shape, std::vector<double> values,
                      bool requires_grad) {
  auto impl = make_impl(shape, std::move(values));
  impl->requires_grad = requires_grad && Tape::active();
  return Tensor(std::move(impl));
}

double Rng::normal() {
  if (has_cached_) {
    has_cached_ = false;
    return cached_;
  }
  // Box-Muller; u1 in (0,1] so log is finite.
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * 3.14159265358979323846 * u2;
  cached_ = r * std::sin(a);
  has_cached_ = true;
  return r * std::cos(a);
}

}  // namespace sb
