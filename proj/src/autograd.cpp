#include "rigstyle/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

#include "rigstyle/error.hpp"

namespace rigstyle::ag {

namespace {

thread_local bool g_grad_enabled = true;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ValidationError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                          std::to_string(b.cols()));
}

class GradModeScope {
 public:
  explicit GradModeScope(bool enabled) : previous_(g_grad_enabled) { g_grad_enabled = enabled; }
  ~GradModeScope() { g_grad_enabled = previous_; }

 private:
  bool previous_;
};

}  // namespace

Tensor::Tensor(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

double Tensor::item() const {
  if (rows() != 1 || cols() != 1) throw ValidationError("item() needs a 1x1 tensor");
  return value()(0, 0);
}

Tensor Tensor::make(Matrix value, std::vector<Tensor> inputs, BackwardFn backward) {
  Tensor out(std::move(value));
  if (!g_grad_enabled) return out;
  bool needs = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.requires_grad(); });
  if (!needs) return out;
  out.node_->requires_grad = true;
  out.node_->inputs = std::move(inputs);
  out.node_->backward = std::move(backward);
  return out;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace {

struct Contribution {
  Tensor grad;
  Index row = 0;
  Index col = 0;
};

// Sum of all gradient contributions to one node, as a single tensor.
Tensor materialize(std::vector<Contribution>& parts, Index rows, Index cols, bool create_graph) {
  if (parts.size() == 1 && parts[0].row == 0 && parts[0].col == 0 &&
      parts[0].grad.rows() == rows && parts[0].grad.cols() == cols)
    return parts[0].grad;
  if (create_graph) {
    std::vector<Tensor> grads;
    std::vector<Index> row_offsets, col_offsets;
    for (auto& p : parts) {
      grads.push_back(p.grad);
      row_offsets.push_back(p.row);
      col_offsets.push_back(p.col);
    }
    return accumulate(grads, row_offsets, col_offsets, rows, cols);
  }
  Matrix total = Matrix::Zero(rows, cols);
  for (auto& p : parts)
    total.block(p.row, p.col, p.grad.rows(), p.grad.cols()) += p.grad.value();
  return Tensor(std::move(total));
}

}  // namespace

std::vector<Tensor> grad(const Tensor& root, std::span<const Tensor> wrt, const Tensor& seed,
                         bool create_graph) {
  if (!root.defined()) throw ValidationError("grad: undefined root");

  // Post-order over the nodes that carry gradient: inputs precede outputs.
  std::vector<Tensor> order;
  if (root.requires_grad()) {
    struct Frame {
      Tensor tensor;
      std::size_t next = 0;
    };
    std::unordered_set<Node*> visited{root.node()};
    std::vector<Frame> stack{{root, 0}};
    while (!stack.empty()) {
      Node* n = stack.back().tensor.node();
      if (stack.back().next < n->inputs.size()) {
        Tensor in = n->inputs[stack.back().next++];
        if (in.requires_grad() && visited.insert(in.node()).second) stack.push_back({in, 0});
      } else {
        order.push_back(std::move(stack.back().tensor));
        stack.pop_back();
      }
    }
  }

  std::unordered_map<Node*, Tensor> found;
  for (const auto& t : wrt)
    if (t.defined()) found.emplace(t.node(), Tensor());

  std::unordered_map<Node*, std::vector<Contribution>> pending;
  {
    GradModeScope scope(create_graph);
    if (root.requires_grad()) {
      Tensor s = seed.defined() ? seed : constant(Matrix::Ones(root.rows(), root.cols()));
      require_same_shape(root, s, "grad seed");
      pending[root.node()].push_back({s, 0, 0});
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = it->node();
      auto slot = pending.find(n);
      if (slot == pending.end()) continue;
      Tensor g = materialize(slot->second, it->rows(), it->cols(), create_graph);
      pending.erase(slot);
      if (auto target = found.find(n); target != found.end()) target->second = g;
      if (n->is_block) {
        pending[n->inputs[0].node()].push_back({g, n->block_row, n->block_col});
        continue;
      }
      if (!n->backward) continue;
      std::vector<Tensor> input_grads = n->backward(*it, g);
      for (std::size_t i = 0; i < n->inputs.size() && i < input_grads.size(); ++i) {
        const Tensor& in = n->inputs[i];
        if (in.requires_grad() && input_grads[i].defined())
          pending[in.node()].push_back({input_grads[i], 0, 0});
      }
    }
  }

  std::vector<Tensor> results;
  results.reserve(wrt.size());
  for (const auto& t : wrt) {
    if (!t.defined()) {
      results.emplace_back();
      continue;
    }
    const Tensor& g = found[t.node()];
    results.push_back(g.defined() ? g : zeros(t.rows(), t.cols()));
  }
  return results;
}

Tensor constant(Matrix value) { return Tensor(std::move(value)); }
Tensor zeros(Index rows, Index cols) { return Tensor(Matrix::Zero(rows, cols)); }
Tensor scalar(double v) { return Tensor(Matrix::Constant(1, 1, v)); }

// ---------------------------------------------------------------------------
// elementwise arithmetic

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  return Tensor::make(a.value() + b.value(), {a, b},
                      [](const Tensor&, const Tensor& g) { return std::vector<Tensor>{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  return Tensor::make(a.value() - b.value(), {a, b}, [](const Tensor&, const Tensor& g) {
    return std::vector<Tensor>{g, neg(g)};
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  return Tensor::make(a.value().cwiseProduct(b.value()), {a, b},
                      [](const Tensor& self, const Tensor& g) {
                        return std::vector<Tensor>{mul(g, self.input(1)), mul(g, self.input(0))};
                      });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double k) {
  return Tensor::make(a.value() * k, {a}, [k](const Tensor&, const Tensor& g) {
    return std::vector<Tensor>{scale(g, k)};
  });
}

Tensor add_scalar(const Tensor& a, double k) {
  return Tensor::make((a.value().array() + k).matrix(), {a},
                      [](const Tensor&, const Tensor& g) { return std::vector<Tensor>{g}; });
}

Tensor mul_const(const Tensor& a, const Matrix& m) {
  if (a.rows() != m.rows() || a.cols() != m.cols())
    throw ValidationError("mul_const: shape mismatch");
  return Tensor::make(a.value().cwiseProduct(m), {a}, [m](const Tensor&, const Tensor& g) {
    return std::vector<Tensor>{mul_const(g, m)};
  });
}

// ---------------------------------------------------------------------------
// products

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw ValidationError("matmul: inner dimensions differ");
  Matrix v(a.rows(), b.cols());
  v.noalias() = a.value() * b.value();
  return Tensor::make(std::move(v), {a, b}, [](const Tensor& self, const Tensor& g) {
    return std::vector<Tensor>{matmul_nt(g, self.input(1)), matmul_tn(self.input(0), g)};
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw ValidationError("matmul_nt: inner dimensions differ");
  Matrix v(a.rows(), b.rows());
  v.noalias() = a.value() * b.value().transpose();
  return Tensor::make(std::move(v), {a, b}, [](const Tensor& self, const Tensor& g) {
    return std::vector<Tensor>{matmul(g, self.input(1)), matmul_tn(g, self.input(0))};
  });
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) throw ValidationError("matmul_tn: inner dimensions differ");
  Matrix v(a.cols(), b.cols());
  v.noalias() = a.value().transpose() * b.value();
  return Tensor::make(std::move(v), {a, b}, [](const Tensor& self, const Tensor& g) {
    return std::vector<Tensor>{matmul_nt(self.input(1), g), matmul(self.input(0), g)};
  });
}

// ---------------------------------------------------------------------------
// broadcasting and reductions

Tensor add_row(const Tensor& a, const Tensor& r) {
  if (r.rows() != 1 || r.cols() != a.cols()) throw ValidationError("add_row: bad row vector");
  Matrix v = a.value();
  v.rowwise() += r.value().row(0);
  return Tensor::make(std::move(v), {a, r}, [](const Tensor&, const Tensor& g) {
    return std::vector<Tensor>{g, sum_rows(g)};
  });
}

Tensor add_col(const Tensor& a, const Tensor& c) {
  if (c.cols() != 1 || c.rows() != a.rows()) throw ValidationError("add_col: bad column vector");
  Matrix v = a.value();
  v.colwise() += c.value().col(0);
  return Tensor::make(std::move(v), {a, c}, [](const Tensor&, const Tensor& g) {
    return std::vector<Tensor>{g, sum_cols(g)};
  });
}

Tensor sum_rows(const Tensor& a) {
  Index rows = a.rows();
  return Tensor::make(a.value().colwise().sum(), {a}, [rows](const Tensor&, const Tensor& g) {
    return std::vector<Tensor>{broadcast_rows(g, rows)};
  });
}

Tensor sum_cols(const Tensor& a) {
  Index cols = a.cols();
  return Tensor::make(a.value().rowwise().sum(), {a}, [cols](const Tensor&, const Tensor& g) {
    return std::vector<Tensor>{broadcast_cols(g, cols)};
  });
}

Tensor sum(const Tensor& a) {
  Index rows = a.rows(), cols = a.cols();
  return Tensor::make(Matrix::Constant(1, 1, a.value().sum()), {a},
                      [rows, cols](const Tensor&, const Tensor& g) {
                        return std::vector<Tensor>{broadcast_rows(broadcast_cols(g, cols), rows)};
                      });
}

Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.rows() * a.cols()));
}

Tensor broadcast_rows(const Tensor& r, Index rows) {
  if (r.rows() != 1) throw ValidationError("broadcast_rows: expected a row vector");
  return Tensor::make(r.value().replicate(rows, 1), {r}, [](const Tensor&, const Tensor& g) {
    return std::vector<Tensor>{sum_rows(g)};
  });
}

Tensor broadcast_cols(const Tensor& c, Index cols) {
  if (c.cols() != 1) throw ValidationError("broadcast_cols: expected a column vector");
  return Tensor::make(c.value().replicate(1, cols), {c}, [](const Tensor&, const Tensor& g) {
    return std::vector<Tensor>{sum_cols(g)};
  });
}

// ---------------------------------------------------------------------------
// pointwise nonlinearities

Tensor sigmoid(const Tensor& a) {
  Matrix v = a.value().unaryExpr([](double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
  });
  return Tensor::make(std::move(v), {a}, [](const Tensor& self, const Tensor& g) {
    // y (1 - y)
    return std::vector<Tensor>{mul(g, mul(self, add_scalar(neg(self), 1.0)))};
  });
}

Tensor tanh(const Tensor& a) {
  Matrix v = a.value().array().tanh().matrix();
  return Tensor::make(std::move(v), {a}, [](const Tensor& self, const Tensor& g) {
    return std::vector<Tensor>{mul(g, add_scalar(neg(square(self)), 1.0))};
  });
}

Tensor exp(const Tensor& a) {
  return Tensor::make(a.value().array().exp().matrix(), {a},
                      [](const Tensor& self, const Tensor& g) {
                        return std::vector<Tensor>{mul(g, self)};
                      });
}

Tensor log(const Tensor& a) {
  return Tensor::make(a.value().array().log().matrix(), {a},
                      [](const Tensor& self, const Tensor& g) {
                        return std::vector<Tensor>{mul(g, reciprocal(self.input(0)))};
                      });
}

Tensor sqrt(const Tensor& a) {
  return Tensor::make(a.value().array().sqrt().matrix(), {a},
                      [](const Tensor& self, const Tensor& g) {
                        return std::vector<Tensor>{scale(mul(g, reciprocal(self)), 0.5)};
                      });
}

Tensor reciprocal(const Tensor& a) {
  Matrix v = a.value().unaryExpr([](double x) { return x == 0.0 ? 0.0 : 1.0 / x; });
  return Tensor::make(std::move(v), {a}, [](const Tensor& self, const Tensor& g) {
    return std::vector<Tensor>{neg(mul(g, square(self)))};
  });
}

Tensor softplus(const Tensor& a) {
  Matrix v = a.value().unaryExpr(
      [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); });
  return Tensor::make(std::move(v), {a}, [](const Tensor& self, const Tensor& g) {
    return std::vector<Tensor>{mul(g, sigmoid(self.input(0)))};
  });
}

Tensor leaky_relu(const Tensor& a, double slope) {
  Matrix mask = a.value().unaryExpr([slope](double x) { return x > 0.0 ? 1.0 : slope; });
  return mul_const(a, mask);
}

Tensor square(const Tensor& a) { return mul(a, a); }

Tensor div(const Tensor& a, const Tensor& b) { return mul(a, reciprocal(b)); }

Tensor clamp_min(const Tensor& a, double floor) {
  Matrix mask = a.value().unaryExpr([floor](double x) { return x > floor ? 1.0 : 0.0; });
  Matrix v = a.value().cwiseMax(floor);
  return Tensor::make(std::move(v), {a}, [mask](const Tensor&, const Tensor& g) {
    return std::vector<Tensor>{mul_const(g, mask)};
  });
}

// ---------------------------------------------------------------------------
// structural ops

Tensor block(const Tensor& a, Index row, Index col, Index rows, Index cols) {
  if (row < 0 || col < 0 || rows < 0 || cols < 0 || row + rows > a.rows() ||
      col + cols > a.cols())
    throw ValidationError("block: out of range");
  const Index total_rows = a.rows(), total_cols = a.cols();
  Tensor out = Tensor::make(a.value().block(row, col, rows, cols), {a},
                            [row, col, total_rows, total_cols](const Tensor&, const Tensor& g) {
                              Index r[1] = {row}, c[1] = {col};
                              Tensor parts[1] = {g};
                              return std::vector<Tensor>{
                                  accumulate(parts, r, c, total_rows, total_cols)};
                            });
  if (out.requires_grad()) {
    out.node()->is_block = true;
    out.node()->block_row = row;
    out.node()->block_col = col;
  }
  return out;
}

Tensor accumulate(std::span<const Tensor> parts, std::span<const Index> row_offsets,
                  std::span<const Index> col_offsets, Index rows, Index cols) {
  if (parts.size() != row_offsets.size() || parts.size() != col_offsets.size())
    throw ValidationError("accumulate: offsets do not match parts");
  Matrix v = Matrix::Zero(rows, cols);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& p = parts[i];
    if (row_offsets[i] < 0 || col_offsets[i] < 0 || row_offsets[i] + p.rows() > rows ||
        col_offsets[i] + p.cols() > cols)
      throw ValidationError("accumulate: part out of range");
    v.block(row_offsets[i], col_offsets[i], p.rows(), p.cols()) += p.value();
  }
  std::vector<Index> r(row_offsets.begin(), row_offsets.end());
  std::vector<Index> c(col_offsets.begin(), col_offsets.end());
  return Tensor::make(std::move(v), std::vector<Tensor>(parts.begin(), parts.end()),
                      [r, c](const Tensor& self, const Tensor& g) {
                        std::vector<Tensor> out;
                        out.reserve(r.size());
                        for (std::size_t i = 0; i < r.size(); ++i) {
                          const Tensor& in = self.input(i);
                          out.push_back(in.requires_grad()
                                            ? block(g, r[i], c[i], in.rows(), in.cols())
                                            : Tensor());
                        }
                        return out;
                      });
}

Tensor slice_rows(const Tensor& a, Index start, Index count) {
  return block(a, start, 0, count, a.cols());
}

Tensor slice_cols(const Tensor& a, Index start, Index count) {
  return block(a, 0, start, a.rows(), count);
}

Tensor pad_rows(const Tensor& a, Index start, Index total) {
  Tensor parts[1] = {a};
  Index r[1] = {start}, c[1] = {0};
  return accumulate(parts, r, c, total, a.cols());
}

Tensor pad_cols(const Tensor& a, Index start, Index total) {
  Tensor parts[1] = {a};
  Index r[1] = {0}, c[1] = {start};
  return accumulate(parts, r, c, a.rows(), total);
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ValidationError("concat_rows: no parts");
  Index rows = 0;
  const Index cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ValidationError("concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix v(rows, cols);
  std::vector<Index> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    v.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return Tensor::make(std::move(v), std::vector<Tensor>(parts.begin(), parts.end()),
                      [offsets](const Tensor& self, const Tensor& g) {
                        std::vector<Tensor> out;
                        out.reserve(offsets.size());
                        for (std::size_t i = 0; i < offsets.size(); ++i)
                          out.push_back(self.input(i).requires_grad()
                                            ? slice_rows(g, offsets[i], self.input(i).rows())
                                            : Tensor());
                        return out;
                      });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ValidationError("concat_cols: no parts");
  Index cols = 0;
  const Index rows = parts.front().rows();
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ValidationError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix v(rows, cols);
  std::vector<Index> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    v.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return Tensor::make(std::move(v), std::vector<Tensor>(parts.begin(), parts.end()),
                      [offsets](const Tensor& self, const Tensor& g) {
                        std::vector<Tensor> out;
                        out.reserve(offsets.size());
                        for (std::size_t i = 0; i < offsets.size(); ++i)
                          out.push_back(self.input(i).requires_grad()
                                            ? slice_cols(g, offsets[i], self.input(i).cols())
                                            : Tensor());
                        return out;
                      });
}

Tensor select_cols(const Tensor& a, std::span<const Index> columns) {
  std::vector<Index> idx(columns.begin(), columns.end());
  Matrix v(a.rows(), static_cast<Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] < 0 || idx[j] >= a.cols()) throw ValidationError("select_cols: out of range");
    v.col(static_cast<Index>(j)) = a.value().col(idx[j]);
  }
  Index total = a.cols();
  return Tensor::make(std::move(v), {a}, [idx, total](const Tensor&, const Tensor& g) {
    return std::vector<Tensor>{scatter_cols(g, idx, total)};
  });
}

Tensor scatter_cols(const Tensor& a, std::span<const Index> columns, Index total) {
  std::vector<Index> idx(columns.begin(), columns.end());
  if (static_cast<Index>(idx.size()) != a.cols())
    throw ValidationError("scatter_cols: index count mismatch");
  Matrix v = Matrix::Zero(a.rows(), total);
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] < 0 || idx[j] >= total) throw ValidationError("scatter_cols: out of range");
    v.col(idx[j]) += a.value().col(static_cast<Index>(j));
  }
  return Tensor::make(std::move(v), {a}, [idx](const Tensor&, const Tensor& g) {
    return std::vector<Tensor>{select_cols(g, idx)};
  });
}

Tensor log_softmax_rows(const Tensor& a) {
  // The row max is a constant shift; the result does not depend on it.
  Matrix shift = -a.value().rowwise().maxCoeff();
  Tensor z = add_col(a, constant(std::move(shift)));
  Tensor lse = log(sum_cols(exp(z)));
  return sub(z, broadcast_cols(lse, a.cols()));
}

}  // namespace rigstyle::ag
