#include "stormlatent/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace stormlatent {

namespace {

thread_local bool t_grad_enabled = true;
thread_local bool t_mac_active = false;
thread_local std::uint64_t t_mac_total = 0;

using NodePtr = std::shared_ptr<detail::Node>;
using ConstRowMap = Eigen::Map<const RowMatrix>;
using RowMap = Eigen::Map<RowMatrix>;

void require(bool cond, const std::string& what) {
  if (!cond) throw std::invalid_argument(what);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                                " vs " + shape_string(b.shape()));
  }
}

// Builds an op output. The backward closure is attached only when some input
// requires a gradient and recording is on.
Tensor make_op(Shape shape, Array value, std::initializer_list<Tensor> inputs,
               std::function<void(detail::Node&)> backward) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& in : inputs) {
      if (in.defined() && in.requires_grad()) needs = true;
    }
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

Tensor make_op_list(Shape shape, Array value, const std::vector<Tensor>& inputs,
                    std::function<void(detail::Node&)> backward) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

bool wants(const NodePtr& n) { return n && n->requires_grad; }

template <typename UnaryValue, typename UnaryDeriv>
Tensor unary(const Tensor& x, UnaryValue f, UnaryDeriv df) {
  Array out = x.value().unaryExpr(f);
  return make_op(x.shape(), out, {x}, [df](detail::Node& self) {
    auto& in = self.inputs[0];
    if (!wants(in)) return;
    Array d = in->value.binaryExpr(self.value, df);
    in->accumulate_expr(self.grad * d);
  });
}

}  // namespace

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void detail::Node::accumulate(const Array& g) { accumulate_expr(g); }

void detail::count_macs(std::uint64_t n) {
  if (t_mac_active) t_mac_total += n;
}

// ---- Tensor ------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  for (Index e : shape) require(e > 0, "tensor extents must be positive: " + shape_string(shape));
  Index n = stormlatent::numel(shape);
  return from(std::move(shape), Array::Constant(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, Array values, bool requires_grad) {
  for (Index e : shape) require(e > 0, "tensor extents must be positive: " + shape_string(shape));
  require(stormlatent::numel(shape) == values.size(),
          "value count " + std::to_string(values.size()) + " does not match shape " + shape_string(shape));
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values, bool requires_grad) {
  Array a(static_cast<Index>(values.size()));
  Index i = 0;
  for (double v : values) a[i++] = v;
  return from(std::move(shape), std::move(a), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from(Shape{}, Array::Constant(1, value), requires_grad); }

const Shape& Tensor::shape() const { return node_->shape; }
Index Tensor::dim(std::size_t axis) const { return node_->shape.at(axis); }
Index Tensor::numel() const { return node_->value.size(); }
const Array& Tensor::value() const { return node_->value; }

Array& Tensor::mutable_value() {
  if (node_->backward) throw std::logic_error("mutable_value on a non-leaf tensor");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

double Tensor::at(std::initializer_list<Index> idx) const {
  require(idx.size() == rank(), "at(): index rank mismatch");
  Index flat = 0;
  std::size_t a = 0;
  for (Index i : idx) {
    require(i >= 0 && i < shape()[a], "at(): index out of range");
    flat = flat * shape()[a] + i;
    ++a;
  }
  return node_->value[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (node_->backward) throw std::logic_error("set_requires_grad on a non-leaf tensor");
  node_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return node_->grad.size() != 0; }

Array Tensor::grad() const {
  if (node_->grad.size() == 0) return Array::Zero(node_->value.size());
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.resize(0); }

Tensor Tensor::detach() const { return from(shape(), value(), false); }

void Tensor::backward() const {
  if (numel() != 1) throw std::invalid_argument("backward() requires a scalar, got " + shape_string(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS: each node is emitted once, after its inputs.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      detail::Node* child = n->inputs[next++].get();
      if (child && child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->accumulate(Array::Ones(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

MacCounter::MacCounter() : start_(t_mac_total), previous_active_(t_mac_active) { t_mac_active = true; }
MacCounter::~MacCounter() { t_mac_active = previous_active_; }
std::uint64_t MacCounter::count() const { return t_mac_total - start_; }

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  return make_op(a.shape(), a.value() + b.value(), {a, b}, [](detail::Node& self) {
    for (auto& in : self.inputs)
      if (wants(in)) in->accumulate(self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  return make_op(a.shape(), a.value() - b.value(), {a, b}, [](detail::Node& self) {
    if (wants(self.inputs[0])) self.inputs[0]->accumulate(self.grad);
    if (wants(self.inputs[1])) self.inputs[1]->accumulate_expr(-self.grad);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  return make_op(a.shape(), a.value() * b.value(), {a, b}, [](detail::Node& self) {
    auto& x = self.inputs[0];
    auto& y = self.inputs[1];
    if (wants(x)) x->accumulate_expr(self.grad * y->value);
    if (wants(y)) y->accumulate_expr(self.grad * x->value);
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  return make_op(a.shape(), a.value() + s, {a}, [](detail::Node& self) {
    if (wants(self.inputs[0])) self.inputs[0]->accumulate(self.grad);
  });
}

Tensor scale(const Tensor& a, double s) {
  return make_op(a.shape(), a.value() * s, {a}, [s](detail::Node& self) {
    if (wants(self.inputs[0])) self.inputs[0]->accumulate_expr(self.grad * s);
  });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

namespace {

// Views a tensor as [outer, extent, inner] around `axis`.
struct AxisView {
  Index outer = 1, extent = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

void check_broadcast(const Tensor& a, const Tensor& b, std::size_t axis, const char* op) {
  require(axis < a.rank(), std::string(op) + ": axis out of range");
  require(b.rank() == 1 && b.dim(0) == a.dim(axis),
          std::string(op) + ": operand " + shape_string(b.shape()) + " does not match axis " +
              std::to_string(axis) + " of " + shape_string(a.shape()));
}

}  // namespace

Tensor broadcast_add(const Tensor& a, const Tensor& b, std::size_t axis) {
  check_broadcast(a, b, axis, "broadcast_add");
  const AxisView v = axis_view(a.shape(), axis);
  Array out = a.value();
  const Array& bv = b.value();
  for (Index o = 0; o < v.outer; ++o)
    for (Index e = 0; e < v.extent; ++e) out.segment((o * v.extent + e) * v.inner, v.inner) += bv[e];
  return make_op(a.shape(), std::move(out), {a, b}, [v](detail::Node& self) {
    if (wants(self.inputs[0])) self.inputs[0]->accumulate(self.grad);
    if (wants(self.inputs[1])) {
      Array gb = Array::Zero(v.extent);
      for (Index o = 0; o < v.outer; ++o)
        for (Index e = 0; e < v.extent; ++e) gb[e] += self.grad.segment((o * v.extent + e) * v.inner, v.inner).sum();
      self.inputs[1]->accumulate(gb);
    }
  });
}

Tensor broadcast_mul(const Tensor& a, const Tensor& b, std::size_t axis) {
  check_broadcast(a, b, axis, "broadcast_mul");
  const AxisView v = axis_view(a.shape(), axis);
  Array out = a.value();
  const Array& bv = b.value();
  for (Index o = 0; o < v.outer; ++o)
    for (Index e = 0; e < v.extent; ++e) out.segment((o * v.extent + e) * v.inner, v.inner) *= bv[e];
  return make_op(a.shape(), std::move(out), {a, b}, [v](detail::Node& self) {
    auto& x = self.inputs[0];
    auto& s = self.inputs[1];
    if (wants(x)) {
      Array gx = self.grad;
      for (Index o = 0; o < v.outer; ++o)
        for (Index e = 0; e < v.extent; ++e) gx.segment((o * v.extent + e) * v.inner, v.inner) *= s->value[e];
      x->accumulate(gx);
    }
    if (wants(s)) {
      Array gs = Array::Zero(v.extent);
      for (Index o = 0; o < v.outer; ++o)
        for (Index e = 0; e < v.extent; ++e) {
          const Index off = (o * v.extent + e) * v.inner;
          gs[e] += (self.grad.segment(off, v.inner) * x->value.segment(off, v.inner)).sum();
        }
      s->accumulate(gs);
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log_sigmoid(const Tensor& x) {
  // log sigma(v) = -softplus(-v), evaluated without overflow for any v.
  return unary(
      x, [](double v) { return v >= 0 ? -std::log1p(std::exp(-v)) : v - std::log1p(std::exp(v)); },
      [](double v, double) { return v >= 0 ? std::exp(-v) / (1.0 + std::exp(-v)) : 1.0 / (1.0 + std::exp(v)); });
}

Tensor log(const Tensor& x) {
  return unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, [](double v) { return std::abs(v); }, [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor silu(const Tensor& x) {
  Array sig = (1.0 + (-x.value()).exp()).inverse();
  Array out = x.value() * sig;
  return make_op(x.shape(), std::move(out), {x}, [sig = std::move(sig)](detail::Node& self) {
    auto& in = self.inputs[0];
    if (!wants(in)) return;
    in->accumulate_expr(self.grad * sig * (1.0 + in->value * (1.0 - sig)));
  });
}

Tensor gelu(const Tensor& x) {
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + v * pdf;
      });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  return unary(
      x, [slope](double v) { return v > 0 ? v : slope * v; }, [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}

// ---- reductions --------------------------------------------------------------

Tensor sum(const Tensor& x) {
  return make_op(Shape{}, Array::Constant(1, x.value().sum()), {x}, [](detail::Node& self) {
    auto& in = self.inputs[0];
    if (wants(in)) in->accumulate_expr(Array::Constant(in->value.size(), self.grad[0]));
  });
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  return make_op(Shape{}, Array::Constant(1, x.value().sum() / n), {x}, [n](detail::Node& self) {
    auto& in = self.inputs[0];
    if (wants(in)) in->accumulate_expr(Array::Constant(in->value.size(), self.grad[0] / n));
  });
}

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: incompatible shapes " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  detail::count_macs(static_cast<std::uint64_t>(m * k * n));
  Array out(m * n);
  RowMap(out.data(), m, n).noalias() = ConstRowMap(a.value().data(), m, k) * ConstRowMap(b.value().data(), k, n);
  return make_op(Shape{m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto& A = self.inputs[0];
    auto& B = self.inputs[1];
    ConstRowMap g(self.grad.data(), m, n);
    if (wants(A)) {
      Array ga(m * k);
      RowMap(ga.data(), m, k).noalias() = g * ConstRowMap(B->value.data(), k, n).transpose();
      A->accumulate(ga);
    }
    if (wants(B)) {
      Array gb(k * n);
      RowMap(gb.data(), k, n).noalias() = ConstRowMap(A->value.data(), m, k).transpose() * g;
      B->accumulate(gb);
    }
  });
}

Tensor transpose(const Tensor& a) {
  require(a.rank() == 2, "transpose: expected rank 2, got " + shape_string(a.shape()));
  const Index m = a.dim(0), n = a.dim(1);
  Array out(m * n);
  RowMap(out.data(), n, m) = ConstRowMap(a.value().data(), m, n).transpose();
  return make_op(Shape{n, m}, std::move(out), {a}, [m, n](detail::Node& self) {
    auto& in = self.inputs[0];
    if (!wants(in)) return;
    Array g(m * n);
    RowMap(g.data(), m, n) = ConstRowMap(self.grad.data(), n, m).transpose();
    in->accumulate(g);
  });
}

namespace {

struct ConvGeometry {
  Index channels, height, width, out_channels, kernel, stride, pad, out_h, out_w;
  Index rows() const { return channels * kernel * kernel; }
  Index cols() const { return out_h * out_w; }
};

// Output columns [lo, hi) whose input column ox*stride + kx - pad is in range.
std::pair<Index, Index> valid_columns(const ConvGeometry& g, Index kx) {
  const Index shift = kx - g.pad;
  Index lo = shift >= 0 ? 0 : (-shift + g.stride - 1) / g.stride;
  Index hi = (g.width - 1 - shift) >= 0 ? (g.width - 1 - shift) / g.stride + 1 : 0;
  hi = std::min(hi, g.out_w);
  return {std::min(lo, hi), hi};
}

void im2col(const double* x, const ConvGeometry& g, RowMatrix& col) {
  col.resize(g.rows(), g.cols());
  for (Index c = 0; c < g.channels; ++c) {
    const double* plane = x + c * g.height * g.width;
    for (Index ky = 0; ky < g.kernel; ++ky) {
      for (Index kx = 0; kx < g.kernel; ++kx) {
        double* dst = col.data() + ((c * g.kernel + ky) * g.kernel + kx) * g.cols();
        const auto [lo, hi] = valid_columns(g, kx);
        const Index shift = kx - g.pad;
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index iy = oy * g.stride + ky - g.pad;
          double* row = dst + oy * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill(row, row + g.out_w, 0.0);
            continue;
          }
          const double* src = plane + iy * g.width + shift;
          std::fill(row, row + lo, 0.0);
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, row + lo);
          } else {
            for (Index ox = lo; ox < hi; ++ox) row[ox] = src[ox * g.stride];
          }
          std::fill(row + hi, row + g.out_w, 0.0);
        }
      }
    }
  }
}

void col2im(const RowMatrix& col, const ConvGeometry& g, double* dx) {
  for (Index c = 0; c < g.channels; ++c) {
    double* plane = dx + c * g.height * g.width;
    for (Index ky = 0; ky < g.kernel; ++ky) {
      for (Index kx = 0; kx < g.kernel; ++kx) {
        const double* src = col.data() + ((c * g.kernel + ky) * g.kernel + kx) * g.cols();
        const auto [lo, hi] = valid_columns(g, kx);
        const Index shift = kx - g.pad;
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.height) continue;
          double* row = plane + iy * g.width + shift;
          const double* s = src + oy * g.out_w;
          for (Index ox = lo; ox < hi; ++ox) row[ox * g.stride] += s[ox];
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Index stride) {
  require(x.rank() == 3, "conv2d: input must be [C,H,W], got " + shape_string(x.shape()));
  require(weight.rank() == 4 && weight.dim(2) == weight.dim(3) && weight.dim(2) % 2 == 1,
          "conv2d: weight must be [O,C,k,k] with odd k, got " + shape_string(weight.shape()));
  require(weight.dim(1) == x.dim(0), "conv2d: channel mismatch, input " + shape_string(x.shape()) + " weight " +
                                         shape_string(weight.shape()));
  require(stride >= 1, "conv2d: stride must be positive");
  ConvGeometry g{};
  g.channels = x.dim(0);
  g.height = x.dim(1);
  g.width = x.dim(2);
  g.out_channels = weight.dim(0);
  g.kernel = weight.dim(2);
  g.stride = stride;
  g.pad = g.kernel / 2;
  g.out_h = (g.height + 2 * g.pad - g.kernel) / stride + 1;
  g.out_w = (g.width + 2 * g.pad - g.kernel) / stride + 1;
  if (bias.defined()) {
    require(bias.rank() == 1 && bias.dim(0) == g.out_channels, "conv2d: bias must be [O]");
  }
  detail::count_macs(static_cast<std::uint64_t>(g.out_channels * g.rows() * g.cols()));

  RowMatrix col;
  im2col(x.value().data(), g, col);
  Array out(g.out_channels * g.cols());
  RowMap out_map(out.data(), g.out_channels, g.cols());
  out_map.noalias() = ConstRowMap(weight.value().data(), g.out_channels, g.rows()) * col;
  if (bias.defined()) out_map.colwise() += bias.value().matrix();

  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_op_list(Shape{g.out_channels, g.out_h, g.out_w}, std::move(out), inputs, [g](detail::Node& self) {
    auto& X = self.inputs[0];
    auto& W = self.inputs[1];
    ConstRowMap gy(self.grad.data(), g.out_channels, g.cols());
    if (wants(W)) {
      RowMatrix col;
      im2col(X->value.data(), g, col);
      Array gw(g.out_channels * g.rows());
      RowMap(gw.data(), g.out_channels, g.rows()).noalias() = gy * col.transpose();
      W->accumulate(gw);
    }
    if (wants(X)) {
      RowMatrix dcol(g.rows(), g.cols());
      dcol.noalias() = ConstRowMap(W->value.data(), g.out_channels, g.rows()).transpose() * gy;
      Array gx = Array::Zero(X->value.size());
      col2im(dcol, g, gx.data());
      X->accumulate(gx);
    }
    if (self.inputs.size() > 2 && wants(self.inputs[2])) {
      Array gb = gy.rowwise().sum().array();
      self.inputs[2]->accumulate(gb);
    }
  });
}

Tensor resample(const Tensor& x, const RowMatrix& rows, const RowMatrix& cols) {
  require(x.rank() == 3, "resample: input must be [C,H,W]");
  require(rows.cols() == x.dim(1) && cols.cols() == x.dim(2), "resample: matrix/input extent mismatch");
  const Index C = x.dim(0), H = x.dim(1), W = x.dim(2), Ho = rows.rows(), Wo = cols.rows();
  detail::count_macs(static_cast<std::uint64_t>(C * (Ho * H * W + Ho * W * Wo)));
  Array out(C * Ho * Wo);
  for (Index c = 0; c < C; ++c) {
    RowMap(out.data() + c * Ho * Wo, Ho, Wo).noalias() =
        rows * ConstRowMap(x.value().data() + c * H * W, H, W) * cols.transpose();
  }
  return make_op(Shape{C, Ho, Wo}, std::move(out), {x}, [rows, cols, C, H, W, Ho, Wo](detail::Node& self) {
    auto& in = self.inputs[0];
    if (!wants(in)) return;
    Array g(C * H * W);
    for (Index c = 0; c < C; ++c) {
      RowMap(g.data() + c * H * W, H, W).noalias() =
          rows.transpose() * ConstRowMap(self.grad.data() + c * Ho * Wo, Ho, Wo) * cols;
    }
    in->accumulate(g);
  });
}

RowMatrix nearest_matrix(Index out_size, Index in_size) {
  RowMatrix m = RowMatrix::Zero(out_size, in_size);
  for (Index o = 0; o < out_size; ++o) {
    Index src = static_cast<Index>(std::floor((o + 0.5) * static_cast<double>(in_size) / out_size));
    m(o, std::clamp<Index>(src, 0, in_size - 1)) = 1.0;
  }
  return m;
}

RowMatrix bilinear_matrix(Index out_size, Index in_size) {
  // Half-pixel centers, edge-clamped.
  RowMatrix m = RowMatrix::Zero(out_size, in_size);
  const double ratio = static_cast<double>(in_size) / out_size;
  for (Index o = 0; o < out_size; ++o) {
    double pos = std::max(0.0, (o + 0.5) * ratio - 0.5);
    Index i0 = std::min<Index>(static_cast<Index>(std::floor(pos)), in_size - 1);
    Index i1 = std::min<Index>(i0 + 1, in_size - 1);
    double t = pos - i0;
    m(o, i0) += 1.0 - t;
    m(o, i1) += t;
  }
  return m;
}

Tensor upsample_nearest(const Tensor& x, Index factor) {
  require(x.rank() == 3 && factor >= 1, "upsample_nearest: expected [C,H,W] and factor >= 1");
  return resample(x, nearest_matrix(x.dim(1) * factor, x.dim(1)), nearest_matrix(x.dim(2) * factor, x.dim(2)));
}

Tensor resize_bilinear(const Tensor& x, Index out_h, Index out_w) {
  require(x.rank() == 3, "resize_bilinear: expected [C,H,W]");
  if (out_h == x.dim(1) && out_w == x.dim(2)) return x;
  return resample(x, bilinear_matrix(out_h, x.dim(1)), bilinear_matrix(out_w, x.dim(2)));
}

// ---- shape -------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  require(numel(shape) == x.numel(), "reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  return make_op(std::move(shape), x.value(), {x}, [](detail::Node& self) {
    if (wants(self.inputs[0])) self.inputs[0]->accumulate(self.grad);
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  Shape shape = parts[0].shape();
  require(axis < shape.size(), "concat: axis out of range");
  Index total = 0;
  for (const auto& p : parts) {
    require(p.rank() == shape.size(), "concat: rank mismatch");
    for (std::size_t i = 0; i < shape.size(); ++i)
      if (i != axis) require(p.dim(i) == shape[i], "concat: extent mismatch on axis " + std::to_string(i));
    total += p.dim(axis);
  }
  shape[axis] = total;
  const AxisView out_view = axis_view(shape, axis);
  Array out(numel(shape));
  std::vector<Index> offsets;
  Index off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const Index block = p.dim(axis) * out_view.inner;
    for (Index o = 0; o < out_view.outer; ++o)
      out.segment(o * total * out_view.inner + off * out_view.inner, block) = p.value().segment(o * block, block);
    off += p.dim(axis);
  }
  std::vector<Index> extents;
  for (const auto& p : parts) extents.push_back(p.dim(axis));
  return make_op_list(shape, std::move(out), parts, [out_view, total, offsets, extents](detail::Node& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      auto& in = self.inputs[k];
      if (!wants(in)) continue;
      const Index block = extents[k] * out_view.inner;
      Array g(out_view.outer * block);
      for (Index o = 0; o < out_view.outer; ++o)
        g.segment(o * block, block) = self.grad.segment(o * total * out_view.inner + offsets[k] * out_view.inner, block);
      in->accumulate(g);
    }
  });
}

Tensor slice(const Tensor& x, std::size_t axis, Index begin, Index end) {
  require(axis < x.rank(), "slice: axis out of range");
  require(0 <= begin && begin < end && end <= x.dim(axis), "slice: bad range");
  const AxisView v = axis_view(x.shape(), axis);
  const Index len = end - begin;
  Shape shape = x.shape();
  shape[axis] = len;
  Array out(v.outer * len * v.inner);
  for (Index o = 0; o < v.outer; ++o)
    out.segment(o * len * v.inner, len * v.inner) = x.value().segment((o * v.extent + begin) * v.inner, len * v.inner);
  return make_op(std::move(shape), std::move(out), {x}, [v, begin, len](detail::Node& self) {
    auto& in = self.inputs[0];
    if (!wants(in)) return;
    Array g = Array::Zero(in->value.size());
    for (Index o = 0; o < v.outer; ++o)
      g.segment((o * v.extent + begin) * v.inner, len * v.inner) = self.grad.segment(o * len * v.inner, len * v.inner);
    in->accumulate(g);
  });
}

Tensor gather(const Tensor& x, std::vector<Index> indices, Shape out_shape) {
  require(numel(out_shape) == static_cast<Index>(indices.size()), "gather: index count does not match output shape");
  const Index n = x.numel();
  Array out(static_cast<Index>(indices.size()));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] >= 0 && indices[i] < n, "gather: index out of range");
    out[static_cast<Index>(i)] = x.value()[indices[i]];
  }
  auto idx = std::make_shared<const std::vector<Index>>(std::move(indices));
  return make_op(std::move(out_shape), std::move(out), {x}, [idx](detail::Node& self) {
    auto& in = self.inputs[0];
    if (!wants(in)) return;
    Array g = Array::Zero(in->value.size());
    for (std::size_t i = 0; i < idx->size(); ++i) g[(*idx)[i]] += self.grad[static_cast<Index>(i)];
    in->accumulate(g);
  });
}

namespace {

std::vector<Index> patch_indices(Index C, Index H, Index W, Index P) {
  const Index gh = H / P, gw = W / P, dim = P * P * C;
  std::vector<Index> idx(static_cast<std::size_t>(gh * gw * dim));
  for (Index ty = 0; ty < gh; ++ty)
    for (Index tx = 0; tx < gw; ++tx)
      for (Index py = 0; py < P; ++py)
        for (Index px = 0; px < P; ++px)
          for (Index c = 0; c < C; ++c) {
            const Index token = ty * gw + tx;
            const Index feat = (py * P + px) * C + c;
            idx[static_cast<std::size_t>(token * dim + feat)] = (c * H + ty * P + py) * W + tx * P + px;
          }
  return idx;
}

}  // namespace

Tensor patchify(const Tensor& x, Index patch) {
  require(x.rank() == 3, "patchify: expected [C,H,W]");
  const Index C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (patch < 1 || H % patch != 0 || W % patch != 0) {
    throw std::invalid_argument("patchify: spatial extent " + shape_string(x.shape()) + " not divisible by patch " +
                                std::to_string(patch));
  }
  return gather(x, patch_indices(C, H, W, patch), Shape{(H / patch) * (W / patch), patch * patch * C});
}

Tensor unpatchify(const Tensor& tokens, Index channels, Index height, Index width, Index patch) {
  require(height % patch == 0 && width % patch == 0, "unpatchify: extent not divisible by patch");
  require(tokens.rank() == 2 && tokens.dim(0) == (height / patch) * (width / patch) &&
              tokens.dim(1) == patch * patch * channels,
          "unpatchify: token shape " + shape_string(tokens.shape()) + " does not match target");
  auto forward = patch_indices(channels, height, width, patch);
  std::vector<Index> inverse(forward.size());
  for (std::size_t i = 0; i < forward.size(); ++i) inverse[static_cast<std::size_t>(forward[i])] = static_cast<Index>(i);
  return gather(tokens, std::move(inverse), Shape{channels, height, width});
}

Tensor masked_select(const Tensor& x, const std::vector<bool>& mask) {
  require(static_cast<Index>(mask.size()) == x.numel(), "masked_select: mask size mismatch");
  std::vector<Index> idx;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) idx.push_back(static_cast<Index>(i));
  if (idx.empty()) throw std::invalid_argument("masked_select: empty selection");
  const Index n = static_cast<Index>(idx.size());
  return gather(x, std::move(idx), Shape{n});
}

// ---- normalization -----------------------------------------------------------

Tensor softmax(const Tensor& x) {
  require(x.rank() >= 1, "softmax: scalar input");
  const Index cols = x.shape().back();
  const Index rows = x.numel() / cols;
  Array out(x.numel());
  ConstRowMap in(x.value().data(), rows, cols);
  RowMap o(out.data(), rows, cols);
  for (Index r = 0; r < rows; ++r) {
    const double mx = in.row(r).maxCoeff();
    o.row(r) = (in.row(r).array() - mx).exp().matrix();
    o.row(r) /= o.row(r).sum();
  }
  return make_op(x.shape(), std::move(out), {x}, [rows, cols](detail::Node& self) {
    auto& in = self.inputs[0];
    if (!wants(in)) return;
    ConstRowMap y(self.value.data(), rows, cols);
    ConstRowMap gy(self.grad.data(), rows, cols);
    Array g(rows * cols);
    RowMap gm(g.data(), rows, cols);
    for (Index r = 0; r < rows; ++r) {
      const double dot = y.row(r).dot(gy.row(r));
      gm.row(r) = (y.row(r).array() * (gy.row(r).array() - dot)).matrix();
    }
    in->accumulate(g);
  });
}

namespace {

// Flat index i uses gamma/beta slot (i / run) % period.
struct AffineLayout {
  Index period;
  Index run;

  template <typename F>
  void for_each_run(Index n, F f) const {
    for (Index start = 0, slot = 0; start < n; start += run, slot = (slot + 1) % period) f(slot, start);
  }
};

// Shared normalize-over-contiguous-groups kernel. Each group is `group_len`
// contiguous values.
Tensor normalize_groups(const Tensor& x, Index groups, Index group_len, const Tensor& gamma, const Tensor& beta,
                        double eps, AffineLayout layout) {
  const Array& v = x.value();
  const Index n = v.size();
  const Index run = layout.run;
  Array xhat(n);
  Array inv_std(groups);
  for (Index g = 0; g < groups; ++g) {
    auto seg = v.segment(g * group_len, group_len);
    const double mu = seg.mean();
    const double var = (seg - mu).square().mean();
    inv_std[g] = 1.0 / std::sqrt(var + eps);
    xhat.segment(g * group_len, group_len) = (seg - mu) * inv_std[g];
  }
  Array out = xhat;
  const bool has_gamma = gamma.defined();
  const bool has_beta = beta.defined();
  if (has_gamma || has_beta) {
    layout.for_each_run(n, [&](Index slot, Index start) {
      auto o = out.segment(start, run);
      if (has_gamma) o *= gamma.value()[slot];
      if (has_beta) o += beta.value()[slot];
    });
  }
  std::vector<Tensor> inputs{x};
  if (has_gamma) inputs.push_back(gamma);
  if (has_beta) inputs.push_back(beta);
  return make_op_list(
      x.shape(), std::move(out), inputs,
      [xhat = std::move(xhat), inv_std, groups, group_len, has_gamma, has_beta, layout](detail::Node& self) {
        auto& X = self.inputs[0];
        std::size_t next = 1;
        std::shared_ptr<detail::Node> G = has_gamma ? self.inputs[next++] : nullptr;
        std::shared_ptr<detail::Node> B = has_beta ? self.inputs[next++] : nullptr;
        const Array& gy = self.grad;
        const Index n = gy.size();
        const Index run = layout.run;
        if (wants(G)) {
          Array gg = Array::Zero(G->value.size());
          layout.for_each_run(
              n, [&](Index slot, Index start) { gg[slot] += (gy.segment(start, run) * xhat.segment(start, run)).sum(); });
          G->accumulate(gg);
        }
        if (wants(B)) {
          Array gb = Array::Zero(B->value.size());
          layout.for_each_run(n, [&](Index slot, Index start) { gb[slot] += gy.segment(start, run).sum(); });
          B->accumulate(gb);
        }
        if (wants(X)) {
          Array dxhat = gy;
          if (G) layout.for_each_run(n, [&](Index slot, Index start) { dxhat.segment(start, run) *= G->value[slot]; });
          Array gx(n);
          for (Index g = 0; g < groups; ++g) {
            auto d = dxhat.segment(g * group_len, group_len);
            auto h = xhat.segment(g * group_len, group_len);
            const double md = d.mean();
            const double mdh = (d * h).mean();
            gx.segment(g * group_len, group_len) = inv_std[g] * (d - md - h * mdh);
          }
          X->accumulate(gx);
        }
      });
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require(x.rank() >= 1, "layer_norm: scalar input");
  const Index d = x.shape().back();
  if (gamma.defined()) require(gamma.rank() == 1 && gamma.dim(0) == d, "layer_norm: gamma extent mismatch");
  if (beta.defined()) require(beta.rank() == 1 && beta.dim(0) == d, "layer_norm: beta extent mismatch");
  return normalize_groups(x, x.numel() / d, d, gamma, beta, eps, AffineLayout{d, 1});
}

Tensor group_norm(const Tensor& x, Index groups, const Tensor& gamma, const Tensor& beta, double eps) {
  require(x.rank() >= 2, "group_norm: expected [C,...]");
  const Index C = x.dim(0);
  if (groups < 1 || C % groups != 0) {
    throw std::invalid_argument("group_norm: " + std::to_string(C) + " channels not divisible into " +
                                std::to_string(groups) + " groups");
  }
  if (gamma.defined()) require(gamma.rank() == 1 && gamma.dim(0) == C, "group_norm: gamma extent mismatch");
  if (beta.defined()) require(beta.rank() == 1 && beta.dim(0) == C, "group_norm: beta extent mismatch");
  const Index spatial = x.numel() / C;
  return normalize_groups(x, groups, (C / groups) * spatial, gamma, beta, eps, AffineLayout{C, spatial});
}

Tensor dropout(const Tensor& x, double p, bool train, std::uint64_t seed) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0,1)");
  if (!train || p == 0.0) return x;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double keep_scale = 1.0 / (1.0 - p);
  Array mask(x.numel());
  for (Index i = 0; i < mask.size(); ++i) mask[i] = u(rng) >= p ? keep_scale : 0.0;
  Array out = x.value() * mask;
  return make_op(x.shape(), std::move(out), {x}, [mask = std::move(mask)](detail::Node& self) {
    if (wants(self.inputs[0])) self.inputs[0]->accumulate_expr(self.grad * mask);
  });
}

}  // namespace stormlatent
