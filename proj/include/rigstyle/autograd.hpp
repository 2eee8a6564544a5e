#pragma once

// Reverse-mode automatic differentiation over dense 2-D matrices.
//
// Every backward rule is written with the same differentiable ops, so a
// gradient computed with `create_graph = true` is itself a graph node and can
// be differentiated again. The critic's gradient penalty relies on this.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "rigstyle/matrix.hpp"

namespace rigstyle::ag {

class Tensor;

using BackwardFn = std::function<std::vector<Tensor>(const Tensor& self, const Tensor& grad)>;

struct Node {
  Matrix value;
  bool requires_grad = false;
  std::vector<Tensor> inputs;
  BackwardFn backward;
  // Set for sub-block views of inputs[0]: the gradient is added into that
  // block of the input's gradient instead of being padded to full size.
  bool is_block = false;
  Index block_row = 0;
  Index block_col = 0;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Tensor& input(std::size_t i) const { return node_->inputs[i]; }
  Node* node() const { return node_.get(); }
  /// Value of a 1x1 tensor.
  double item() const;
  /// Same value, cut from the graph.
  Tensor detach() const { return Tensor(value()); }

  static Tensor make(Matrix value, std::vector<Tensor> inputs, BackwardFn backward);

 private:
  std::shared_ptr<Node> node_;
};

/// Graph recording on/off for the current thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// d(root)/d(wrt[i]) for a scalar `root` (or a seeded non-scalar one). Inputs that
/// `root` does not depend on receive zero matrices. With `create_graph` the
/// returned tensors stay differentiable.
std::vector<Tensor> grad(const Tensor& root, std::span<const Tensor> wrt,
                         const Tensor& seed = Tensor(), bool create_graph = false);

Tensor constant(Matrix value);
Tensor zeros(Index rows, Index cols);
Tensor scalar(double v);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double k);
Tensor add_scalar(const Tensor& a, double k);
/// Elementwise product with a fixed matrix (masks, slopes).
Tensor mul_const(const Tensor& a, const Matrix& m);

Tensor matmul(const Tensor& a, const Tensor& b);     // a b
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a b^T
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // a^T b

/// a (R x C) + row vector r (1 x C) broadcast over rows.
Tensor add_row(const Tensor& a, const Tensor& r);
/// a (R x C) + column vector c (R x 1) broadcast over columns.
Tensor add_col(const Tensor& a, const Tensor& c);
Tensor sum_rows(const Tensor& a);  // R x C -> 1 x C
Tensor sum_cols(const Tensor& a);  // R x C -> R x 1
Tensor sum(const Tensor& a);       // -> 1 x 1
Tensor mean(const Tensor& a);
Tensor broadcast_rows(const Tensor& r, Index rows);  // 1 x C -> R x C
Tensor broadcast_cols(const Tensor& c, Index cols);  // R x 1 -> R x C

Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
/// Square root whose derivative is taken as zero at the origin.
Tensor sqrt(const Tensor& a);
/// 1 / a, zero where a == 0.
Tensor reciprocal(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor square(const Tensor& a);
Tensor div(const Tensor& a, const Tensor& b);
/// max(a, floor) elementwise; gradient passes only where a > floor.
Tensor clamp_min(const Tensor& a, double floor);

/// Sub-block view; its adjoint is `accumulate` with a single part.
Tensor block(const Tensor& a, Index row, Index col, Index rows, Index cols);
/// rows x cols zero matrix with every part added at its (row, col) offset.
Tensor accumulate(std::span<const Tensor> parts, std::span<const Index> row_offsets,
                  std::span<const Index> col_offsets, Index rows, Index cols);
Tensor slice_rows(const Tensor& a, Index start, Index count);
Tensor slice_cols(const Tensor& a, Index start, Index count);
Tensor pad_rows(const Tensor& a, Index start, Index total);
Tensor pad_cols(const Tensor& a, Index start, Index total);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
/// Gather the listed columns; the adjoint scatters them back.
Tensor select_cols(const Tensor& a, std::span<const Index> columns);
Tensor scatter_cols(const Tensor& a, std::span<const Index> columns, Index total);

/// Row-wise log-softmax.
Tensor log_softmax_rows(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double k) { return scale(a, k); }
inline Tensor operator*(double k, const Tensor& a) { return scale(a, k); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

}  // namespace rigstyle::ag
