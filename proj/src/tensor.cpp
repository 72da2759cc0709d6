#include "rlcore/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

namespace rlcore {

namespace {

using RowMajorMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajorMatrix>;
using MutMap = Eigen::Map<RowMajorMatrix>;

thread_local Tape* g_active_tape = nullptr;

std::shared_ptr<TensorImpl> make_impl(Shape shape, std::vector<float> data) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}

bool grad_enabled(const Tensor& a) { return g_active_tape != nullptr && a.requires_grad(); }

// Right-aligned broadcast of two shapes, numpy rules: a size-1 axis stretches.
Shape broadcast_shape(const Shape& a, const Shape& b) {
  const int ra = static_cast<int>(a.size());
  const int rb = static_cast<int>(b.size());
  const int r = std::max(ra, rb);
  Shape out(r);
  for (int i = 0; i < r; ++i) {
    const int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
    const int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("incompatible shapes for elementwise op: " + shape_str(a) + " vs " +
                       shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Per-axis element strides of `in` viewed at broadcast shape `out`
// (0 on broadcast axes).
std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  const int r = static_cast<int>(out.size());
  const int ri = static_cast<int>(in.size());
  std::vector<int64_t> strides(r, 0);
  int64_t stride = 1;
  for (int i = ri - 1; i >= 0; --i) {
    const int oi = i + (r - ri);
    strides[oi] = (in[i] == 1 && out[oi] != 1) ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

// Odometer walk over `shape`, calling fn(out_linear, offset_a, offset_b).
template <class Fn>
void for_each_broadcast(const Shape& shape, const std::vector<int64_t>& sa,
                        const std::vector<int64_t>& sb, Fn&& fn) {
  const int64_t n = shape_numel(shape);
  const int r = static_cast<int>(shape.size());
  std::vector<int64_t> coord(r, 0);
  int64_t ia = 0;
  int64_t ib = 0;
  for (int64_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (int ax = r - 1; ax >= 0; --ax) {
      ++coord[ax];
      ia += sa[ax];
      ib += sb[ax];
      if (coord[ax] < shape[ax]) break;
      coord[ax] = 0;
      ia -= sa[ax] * shape[ax];
      ib -= sb[ax] * shape[ax];
    }
  }
}

enum class BinaryOp { kAdd, kSub, kMul, kDiv, kMin, kMax };

float binary_eval(BinaryOp op, float a, float b) {
  switch (op) {
    case BinaryOp::kAdd: return a + b;
    case BinaryOp::kSub: return a - b;
    case BinaryOp::kMul: return a * b;
    case BinaryOp::kDiv: return a / b;
    case BinaryOp::kMin: return std::min(a, b);
    case BinaryOp::kMax: return std::max(a, b);
  }
  return 0.0f;
}

Tensor binary_op(BinaryOp op, const Tensor& a, const Tensor& b) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);

  if (op == BinaryOp::kDiv) {
    for (float v : b.data()) {
      if (v == 0.0f) throw DomainError("division by zero");
    }
  }

  auto out = make_impl(out_shape, std::vector<float>(shape_numel(out_shape)));
  {
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    float* po = out->data.data();
    for_each_broadcast(out_shape, sa, sb,
                       [&](int64_t i, int64_t ia, int64_t ib) { po[i] = binary_eval(op, pa[ia], pb[ib]); });
  }

  Tensor result(out);
  if (grad_enabled(a) || grad_enabled(b)) {
    result.set_requires_grad(true);
    auto ai = a.impl();
    auto bi = b.impl();
    auto oi = out;
    g_active_tape->record([op, ai, bi, oi, out_shape, sa, sb]() {
      if (oi->grad.empty()) return;
      const float* g = oi->grad.data();
      const float* pa = ai->data.data();
      const float* pb = bi->data.data();
      float* ga = nullptr;
      float* gb = nullptr;
      if (ai->requires_grad) {
        ai->ensure_grad();
        ga = ai->grad.data();
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        gb = bi->grad.data();
      }
      for_each_broadcast(out_shape, sa, sb, [&](int64_t i, int64_t ia, int64_t ib) {
        const float go = g[i];
        switch (op) {
          case BinaryOp::kAdd:
            if (ga) ga[ia] += go;
            if (gb) gb[ib] += go;
            break;
          case BinaryOp::kSub:
            if (ga) ga[ia] += go;
            if (gb) gb[ib] -= go;
            break;
          case BinaryOp::kMul:
            if (ga) ga[ia] += go * pb[ib];
            if (gb) gb[ib] += go * pa[ia];
            break;
          case BinaryOp::kDiv:
            if (ga) ga[ia] += go / pb[ib];
            if (gb) gb[ib] -= go * pa[ia] / (pb[ib] * pb[ib]);
            break;
          case BinaryOp::kMin:
            // ties route to the first operand
            if (pa[ia] <= pb[ib]) {
              if (ga) ga[ia] += go;
            } else if (gb) {
              gb[ib] += go;
            }
            break;
          case BinaryOp::kMax:
            if (pa[ia] >= pb[ib]) {
              if (ga) ga[ia] += go;
            } else if (gb) {
              gb[ib] += go;
            }
            break;
        }
      });
    });
  }
  return result;
}

enum class UnaryOp { kTanh, kSigmoid, kExp, kLog, kSquare, kNeg, kSoftplus };

float stable_sigmoid(float x) {
  if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
  const float e = std::exp(x);
  return e / (1.0f + e);
}

float stable_softplus(float x) {
  return x > 0.0f ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

Tensor unary_op(UnaryOp op, const Tensor& x) {
  const int64_t n = x.numel();
  auto out = make_impl(x.shape(), std::vector<float>(n));
  const float* px = x.data().data();
  float* po = out->data.data();
  for (int64_t i = 0; i < n; ++i) {
    const float v = px[i];
    switch (op) {
      case UnaryOp::kTanh: po[i] = std::tanh(v); break;
      case UnaryOp::kSigmoid: po[i] = stable_sigmoid(v); break;
      case UnaryOp::kExp: {
        const double e = std::exp(static_cast<double>(v));
        if (e > std::numeric_limits<float>::max()) throw DomainError("exp overflow");
        po[i] = static_cast<float>(e);
        break;
      }
      case UnaryOp::kLog:
        if (v <= 0.0f) throw DomainError("log of non-positive value");
        po[i] = std::log(v);
        break;
      case UnaryOp::kSquare: po[i] = v * v; break;
      case UnaryOp::kNeg: po[i] = -v; break;
      case UnaryOp::kSoftplus: po[i] = stable_softplus(v); break;
    }
  }

  Tensor result(out);
  if (grad_enabled(x)) {
    result.set_requires_grad(true);
    auto xi = x.impl();
    auto oi = out;
    g_active_tape->record([op, xi, oi, n]() {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      const float* g = oi->grad.data();
      const float* px = xi->data.data();
      const float* po = oi->data.data();
      float* gx = xi->grad.data();
      for (int64_t i = 0; i < n; ++i) {
        switch (op) {
          case UnaryOp::kTanh: gx[i] += g[i] * (1.0f - po[i] * po[i]); break;
          case UnaryOp::kSigmoid: gx[i] += g[i] * po[i] * (1.0f - po[i]); break;
          case UnaryOp::kExp: gx[i] += g[i] * po[i]; break;
          case UnaryOp::kLog: gx[i] += g[i] / px[i]; break;
          case UnaryOp::kSquare: gx[i] += g[i] * 2.0f * px[i]; break;
          case UnaryOp::kNeg: gx[i] -= g[i]; break;
          case UnaryOp::kSoftplus: gx[i] += g[i] * stable_sigmoid(px[i]); break;
        }
      }
    });
  }
  return result;
}

// Normalized, validated copy of reduce axes; empty input means all axes.
std::vector<int> resolve_axes(const Tensor& x, const std::vector<int>& axes) {
  std::vector<int> out;
  if (axes.empty()) {
    out.resize(x.rank());
    for (int i = 0; i < x.rank(); ++i) out[i] = i;
    return out;
  }
  out = axes;
  std::sort(out.begin(), out.end());
  for (size_t i = 0; i < out.size(); ++i) {
    if (out[i] < 0 || out[i] >= x.rank()) {
      throw ShapeError("reduce axis " + std::to_string(out[i]) + " invalid for shape " +
                       shape_str(x.shape()));
    }
    if (i > 0 && out[i] == out[i - 1]) throw ShapeError("duplicate reduce axis");
  }
  return out;
}

Tensor reduce_op(const Tensor& x, const std::vector<int>& axes_in, bool is_mean) {
  const std::vector<int> axes = resolve_axes(x, axes_in);
  std::vector<bool> reduced(x.rank(), false);
  for (int ax : axes) reduced[ax] = true;

  Shape out_shape;
  int64_t count = 1;
  for (int i = 0; i < x.rank(); ++i) {
    if (reduced[i]) {
      count *= x.shape()[i];
    } else {
      out_shape.push_back(x.shape()[i]);
    }
  }

  // Map each input element to its output slot via an odometer over x.shape.
  const int r = x.rank();
  std::vector<int64_t> out_strides(r, 0);
  {
    int64_t stride = 1;
    for (int i = r - 1; i >= 0; --i) {
      if (!reduced[i]) {
        out_strides[i] = stride;
        stride *= x.shape()[i];
      }
    }
  }

  const int64_t out_n = shape_numel(out_shape);
  std::vector<double> acc(out_n, 0.0);
  {
    const float* px = x.data().data();
    std::vector<int64_t> coord(r, 0);
    int64_t io = 0;
    for (int64_t i = 0; i < x.numel(); ++i) {
      acc[io] += px[i];
      for (int ax = r - 1; ax >= 0; --ax) {
        ++coord[ax];
        io += out_strides[ax];
        if (coord[ax] < x.shape()[ax]) break;
        coord[ax] = 0;
        io -= out_strides[ax] * x.shape()[ax];
      }
    }
  }

  auto out = make_impl(out_shape, std::vector<float>(out_n));
  const double scale = is_mean ? 1.0 / static_cast<double>(count) : 1.0;
  for (int64_t i = 0; i < out_n; ++i) out->data[i] = static_cast<float>(acc[i] * scale);

  Tensor result(out);
  if (grad_enabled(x)) {
    result.set_requires_grad(true);
    auto xi = x.impl();
    auto oi = out;
    const float gscale = is_mean ? 1.0f / static_cast<float>(count) : 1.0f;
    Shape x_shape = x.shape();
    g_active_tape->record([xi, oi, out_strides, x_shape, gscale, r]() {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      const float* g = oi->grad.data();
      float* gx = xi->grad.data();
      std::vector<int64_t> coord(r, 0);
      int64_t io = 0;
      const int64_t n = static_cast<int64_t>(xi->data.size());
      for (int64_t i = 0; i < n; ++i) {
        gx[i] += g[io] * gscale;
        for (int ax = r - 1; ax >= 0; --ax) {
          ++coord[ax];
          io += out_strides[ax];
          if (coord[ax] < x_shape[ax]) break;
          coord[ax] = 0;
          io -= out_strides[ax] * x_shape[ax];
        }
      }
    });
  }
  return result;
}

}  // namespace

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const int64_t n = shape_numel(shape);
  auto impl = make_impl(std::move(shape), std::vector<float>(n, 0.0f));
  impl->requires_grad = requires_grad;
  return Tensor(impl);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  const int64_t n = shape_numel(shape);
  auto impl = make_impl(std::move(shape), std::vector<float>(n, value));
  impl->requires_grad = requires_grad;
  return Tensor(impl);
}

Tensor Tensor::from(Shape shape, std::vector<float> data, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  auto impl = make_impl(std::move(shape), std::move(data));
  impl->requires_grad = requires_grad;
  return Tensor(impl);
}

Tensor Tensor::scalar(float value) { return from({}, {value}); }

Tensor Tensor::uniform(Shape shape, RngStream& rng, float lo, float hi) {
  const int64_t n = shape_numel(shape);
  std::vector<float> data(n);
  for (int64_t i = 0; i < n; ++i) data[i] = static_cast<float>(rng.uniform(lo, hi));
  return from(std::move(shape), std::move(data));
}

Tensor Tensor::normal(Shape shape, RngStream& rng) {
  const int64_t n = shape_numel(shape);
  std::vector<float> data(n);
  for (int64_t i = 0; i < n; ++i) data[i] = static_cast<float>(rng.normal());
  return from(std::move(shape), std::move(data));
}

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

Tensor Tensor::detach() const {
  auto impl = make_impl(impl_->shape, impl_->data);
  return Tensor(impl);
}

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = prev_;
}

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::function<void()> rule) { nodes_.push_back(std::move(rule)); }

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw StateError("tape already consumed by a backward pass");
  if (loss.numel() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  consumed_ = true;
  if (g_active_tape == this) g_active_tape = prev_;  // stop recording during backward
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] += 1.0f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  nodes_.clear();
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const int64_t m = a.dim(0);
  const int64_t k = a.dim(1);
  const int64_t n = b.dim(1);
  auto out = make_impl({m, n}, std::vector<float>(m * n));
  {
    ConstMap ma(a.data().data(), m, k);
    ConstMap mb(b.data().data(), k, n);
    MutMap mo(out->data.data(), m, n);
    mo.noalias() = ma * mb;
  }

  Tensor result(out);
  if (grad_enabled(a) || grad_enabled(b)) {
    result.set_requires_grad(true);
    auto ai = a.impl();
    auto bi = b.impl();
    auto oi = out;
    g_active_tape->record([ai, bi, oi, m, k, n]() {
      if (oi->grad.empty()) return;
      ConstMap g(oi->grad.data(), m, n);
      if (ai->requires_grad) {
        ai->ensure_grad();
        ConstMap mb(bi->data.data(), k, n);
        MutMap ga(ai->grad.data(), m, k);
        ga.noalias() += g * mb.transpose();
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        ConstMap ma(ai->data.data(), m, k);
        MutMap gb(bi->grad.data(), k, n);
        gb.noalias() += ma.transpose() * g;
      }
    });
  }
  return result;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(BinaryOp::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(BinaryOp::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(BinaryOp::kMul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(BinaryOp::kDiv, a, b); }
Tensor minimum(const Tensor& a, const Tensor& b) { return binary_op(BinaryOp::kMin, a, b); }
Tensor maximum(const Tensor& a, const Tensor& b) { return binary_op(BinaryOp::kMax, a, b); }

Tensor tanh(const Tensor& x) { return unary_op(UnaryOp::kTanh, x); }
Tensor sigmoid(const Tensor& x) { return unary_op(UnaryOp::kSigmoid, x); }
Tensor exp(const Tensor& x) { return unary_op(UnaryOp::kExp, x); }
Tensor log(const Tensor& x) { return unary_op(UnaryOp::kLog, x); }
Tensor square(const Tensor& x) { return unary_op(UnaryOp::kSquare, x); }
Tensor neg(const Tensor& x) { return unary_op(UnaryOp::kNeg, x); }
Tensor softplus(const Tensor& x) { return unary_op(UnaryOp::kSoftplus, x); }

Tensor sum(const Tensor& x, const std::vector<int>& axes) { return reduce_op(x, axes, false); }
Tensor mean(const Tensor& x, const std::vector<int>& axes) { return reduce_op(x, axes, true); }

Tensor clamp(const Tensor& x, float lo, float hi) {
  if (lo > hi) throw ArgumentError("clamp lo > hi");
  const int64_t n = x.numel();
  auto out = make_impl(x.shape(), std::vector<float>(n));
  const float* px = x.data().data();
  for (int64_t i = 0; i < n; ++i) out->data[i] = std::min(std::max(px[i], lo), hi);

  Tensor result(out);
  if (grad_enabled(x)) {
    result.set_requires_grad(true);
    auto xi = x.impl();
    auto oi = out;
    g_active_tape->record([xi, oi, lo, hi, n]() {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      const float* g = oi->grad.data();
      const float* px = xi->data.data();
      float* gx = xi->grad.data();
      for (int64_t i = 0; i < n; ++i) {
        if (px[i] >= lo && px[i] <= hi) gx[i] += g[i];
      }
    });
  }
  return result;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                     " changes element count");
  }
  auto out = make_impl(std::move(shape), std::vector<float>(x.data().begin(), x.data().end()));
  Tensor result(out);
  if (grad_enabled(x)) {
    result.set_requires_grad(true);
    auto xi = x.impl();
    auto oi = out;
    g_active_tape->record([xi, oi]() {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      for (size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
    });
  }
  return result;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of zero tensors");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  int64_t rows = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != parts[0].rank() ||
        !std::equal(tail.begin(), tail.end(), p.shape().begin() + 1)) {
      throw ShapeError("concat_rows shape mismatch: " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    rows += p.dim(0);
  }
  Shape out_shape;
  out_shape.push_back(rows);
  out_shape.insert(out_shape.end(), tail.begin(), tail.end());
  auto out = make_impl(out_shape, std::vector<float>(shape_numel(out_shape)));
  int64_t offset = 0;
  for (const Tensor& p : parts) {
    std::memcpy(out->data.data() + offset, p.data().data(), p.numel() * sizeof(float));
    offset += p.numel();
  }

  Tensor result(out);
  bool any_grad = false;
  for (const Tensor& p : parts) any_grad = any_grad || grad_enabled(p);
  if (any_grad) {
    result.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorImpl>> impls;
    for (const Tensor& p : parts) impls.push_back(p.impl());
    auto oi = out;
    g_active_tape->record([impls, oi]() {
      if (oi->grad.empty()) return;
      int64_t offset = 0;
      for (auto& pi : impls) {
        const int64_t n = static_cast<int64_t>(pi->data.size());
        if (pi->requires_grad) {
          pi->ensure_grad();
          for (int64_t i = 0; i < n; ++i) pi->grad[i] += oi->grad[offset + i];
        }
        offset += n;
      }
    });
  }
  return result;
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& indices) {
  if (x.rank() < 1) throw ShapeError("gather_rows on a scalar");
  const int64_t rows = x.dim(0);
  const int64_t width = x.numel() / std::max<int64_t>(rows, 1);
  Shape out_shape = x.shape();
  out_shape[0] = static_cast<int64_t>(indices.size());
  std::vector<float> data(indices.size() * width);
  for (size_t i = 0; i < indices.size(); ++i) {
    const int r = indices[i];
    if (r < 0 || r >= rows) throw ShapeError("gather_rows index out of range");
    std::memcpy(data.data() + i * width, x.data().data() + static_cast<int64_t>(r) * width,
                width * sizeof(float));
  }
  return Tensor::from(std::move(out_shape), std::move(data));
}

}  // namespace rlcore
