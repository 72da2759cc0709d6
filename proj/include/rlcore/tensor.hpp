#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rlcore/errors.hpp"
#include "rlcore/rng.hpp"

namespace rlcore {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense float32 n-d array. Copying a Tensor copies the handle, not the data;
// use detach()/clone() for an independent buffer.
struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  bool requires_grad = false;
  std::vector<float> grad;  // allocated lazily, same length as data

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> data, bool requires_grad = false);
  static Tensor scalar(float value);
  // i.i.d. draws from the given stream.
  static Tensor uniform(Shape shape, RngStream& rng, float lo, float hi);
  static Tensor normal(Shape shape, RngStream& rng);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
  int64_t dim(int i) const { return impl_->shape.at(i); }
  int rank() const { return static_cast<int>(impl_->shape.size()); }

  std::span<const float> data() const { return impl_->data; }
  std::span<float> mutable_data() { return impl_->data; }
  std::span<const float> grad() const { return impl_->grad; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    impl_->requires_grad = flag;
    return *this;
  }
  void zero_grad() {
    if (!impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
  }
  // Value + grad of a one-element tensor.
  float item() const;

  // Buffer-owning copy that does not require grad and is outside any graph.
  Tensor detach() const;

  std::shared_ptr<TensorImpl> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Reverse-mode tape. Constructing a Tape makes it the active recorder for the
// current thread; ops whose inputs require grad append their backward rule.
// A tape is consumed by exactly one backward() call.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Accumulates d(loss)/d(leaf) into the .grad of every recorded tensor that
  // requires grad. loss must hold exactly one element.
  void backward(const Tensor& loss);

  static Tape* active();
  void record(std::function<void()> rule);
  size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
  Tape* prev_ = nullptr;
};

// ---- operations ------------------------------------------------------------
// All ops participate in reverse-mode differentiation when a Tape is active
// and at least one input requires grad.

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n] -> [m,n]

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);  // requires strictly positive inputs
Tensor square(const Tensor& x);
Tensor neg(const Tensor& x);
Tensor softplus(const Tensor& x);

// Reduce over the given axes (all axes when empty). Reduced axes are removed
// from the shape; reducing everything yields a rank-0 scalar.
Tensor sum(const Tensor& x, const std::vector<int>& axes = {});
Tensor mean(const Tensor& x, const std::vector<int>& axes = {});

// Elementwise clamp. Gradient is 1 inside [lo, hi] (boundary inclusive).
Tensor clamp(const Tensor& x, float lo, float hi);

Tensor reshape(const Tensor& x, Shape shape);

// Concatenate along axis 0; all inputs must agree on trailing dims.
Tensor concat_rows(const std::vector<Tensor>& parts);

// Data-level row gather, out[i] = x[indices[i]]; never recorded on a tape.
Tensor gather_rows(const Tensor& x, const std::vector<int>& indices);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, float b) { return add(a, Tensor::scalar(b)); }
inline Tensor operator-(const Tensor& a, float b) { return sub(a, Tensor::scalar(b)); }
inline Tensor operator*(const Tensor& a, float b) { return mul(a, Tensor::scalar(b)); }
inline Tensor operator/(const Tensor& a, float b) { return div(a, Tensor::scalar(b)); }
inline Tensor operator+(float a, const Tensor& b) { return add(Tensor::scalar(a), b); }
inline Tensor operator-(float a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
inline Tensor operator*(float a, const Tensor& b) { return mul(Tensor::scalar(a), b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

}  // namespace rlcore
