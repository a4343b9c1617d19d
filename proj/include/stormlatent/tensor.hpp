#pragma once

// Dense 64-bit tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a graph node. Operations are free functions
// that record their inputs and a backward closure whenever gradient recording
// is enabled and at least one input requires a gradient. Calling backward() on
// a scalar walks the recorded graph once, in reverse topological order.

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace stormlatent {

using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;
using Array = Eigen::ArrayXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Index numel(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tensor;

namespace detail {

struct Node {
  Shape shape;
  Array value;
  Array grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void accumulate(const Array& g);
  template <typename Expr>
  void accumulate_expr(const Expr& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, Array values, bool requires_grad = false);
  static Tensor from(Shape shape, std::initializer_list<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  Index dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  Index numel() const;

  const Array& value() const;
  // Direct write access; only valid on leaves (optimizer updates, loading).
  Array& mutable_value();
  double item() const;
  double at(std::initializer_list<Index> idx) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  // Gradient, or zeros when nothing has been accumulated.
  Array grad() const;
  void zero_grad();

  // A new leaf sharing no history, holding a copy of the values.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  // Reverse-mode pass from a scalar. Gradients accumulate across calls.
  void backward() const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Multiply-add accounting for matmul/convolution/resampling. Thread-local.
class MacCounter {
 public:
  MacCounter();
  ~MacCounter();
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;
  std::uint64_t count() const;

 private:
  std::uint64_t start_;
  bool previous_active_;
};

namespace detail {
void count_macs(std::uint64_t n);
}

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor scale(const Tensor& a, double s);
Tensor neg(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// b is 1-D with length a.shape[axis]; broadcast along every other axis.
Tensor broadcast_add(const Tensor& a, const Tensor& b, std::size_t axis);
Tensor broadcast_mul(const Tensor& a, const Tensor& b, std::size_t axis);

Tensor sigmoid(const Tensor& x);
Tensor log_sigmoid(const Tensor& x);
Tensor log(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope = 0.01);

// ---- reductions --------------------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// ---- linear algebra ----------------------------------------------------------

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// x: [C,H,W], weight: [O,C,k,k], bias: [O] or undefined. Zero padding k/2.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Index stride = 1);

// Separable linear resampling per channel: out_c = rows * x_c * cols^T.
// x: [C,H,W], rows: [H',H], cols: [W',W] (constant matrices).
Tensor resample(const Tensor& x, const RowMatrix& rows, const RowMatrix& cols);
RowMatrix nearest_matrix(Index out_size, Index in_size);
RowMatrix bilinear_matrix(Index out_size, Index in_size);
Tensor upsample_nearest(const Tensor& x, Index factor);
Tensor resize_bilinear(const Tensor& x, Index out_h, Index out_w);

// ---- shape -------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, Index begin, Index end);
// out[i] = x[indices[i]]; backward scatter-adds.
Tensor gather(const Tensor& x, std::vector<Index> indices, Shape out_shape);
// [C,H,W] -> [(H/P)*(W/P), P*P*C], token-major, channel-fastest within a patch.
Tensor patchify(const Tensor& x, Index patch);
Tensor unpatchify(const Tensor& tokens, Index channels, Index height, Index width, Index patch);
// 1-D tensor of the elements where mask is true.
Tensor masked_select(const Tensor& x, const std::vector<bool>& mask);

// ---- normalization / activation over axes -----------------------------------

// Softmax over the last axis.
Tensor softmax(const Tensor& x);
// Normalizes over the last axis; gamma/beta (length = last extent) may be undefined.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// x: [C,...]; channels split into `groups` contiguous groups.
Tensor group_norm(const Tensor& x, Index groups, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// Inverted dropout: identity when !train or p == 0.
Tensor dropout(const Tensor& x, double p, bool train, std::uint64_t seed);

}  // namespace stormlatent
