#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

#include "common.hpp"

namespace sb {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

struct TensorImpl {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;
  int node_id = -1;  // position in the tape that produced this tensor
};

// Dense row-major f64 tensor. Copying a Tensor copies the handle, not the
// buffer; forward outputs are treated as immutable once produced.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double v);
  static Tensor from(const Shape& shape, std::vector<double> values);
  static Tensor scalar(double v);
  // Leaf with gradient tracking (a trainable parameter).
  static Tensor param(const Shape& shape, std::vector<double> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int dim(int i) const { return impl_->shape[i]; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  std::size_t numel() const { return impl_->values.size(); }

  const std::vector<double>& values() const { return impl_->values; }
  std::vector<double>& mutable_values() { return impl_->values; }
  double value(std::size_t i) const { return impl_->values[i]; }
  double item() const;
  double at(std::initializer_list<int> idx) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool b) { impl_->requires_grad = b; }

  // Gradient buffer; zeros if nothing has been accumulated.
  const std::vector<double>& grad() const;
  std::vector<double>& grad_buffer();  // allocates
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad() { impl_->grad.clear(); }

  TensorImpl* impl() const { return impl_.get(); }
  std::shared_ptr<TensorImpl> impl_ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;

  friend Tensor make_op_output(const Shape& shape, std::vector<double> values,
                               bool requires_grad);
};

// Throws NumericError naming `where` if any value is NaN/Inf.
void check_finite(const std::vector<double>& v, const char* where);

// Recording scope for reverse-mode autodiff. Ops append a backward record
// while a tape is active on the current thread; Tape::backward replays them
// in strict reverse order. One tape per model instance / thread.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();
  static bool active() { return current() != nullptr; }

  int record(std::function<void()> backward);
  std::size_t size() const { return records_.size(); }

  // root must be scalar; seeds grad 1 and replays records in reverse.
  void backward(const Tensor& root);

 private:
  std::vector<std::function<void()>> records_;
  Tape* prev_ = nullptr;
};

// Shared by op implementations: builds the output tensor and flags it for
// recording when a tape is active and any input requires grad.
Tensor make_op_output(const Shape& shape, std::vector<double> values,
                      bool requires_grad);

}  // namespace sb
