#include <gtest/gtest.h>

#include "rigstyle/autograd.hpp"
#include "test_util.hpp"

using namespace rigstyle;
using rigstyle::testing::check_gradients;
using rigstyle::testing::describe;
using rigstyle::testing::random_matrix;
using Fn = std::function<ag::Tensor(const std::vector<ag::Tensor>&)>;

namespace {

void expect_grad_ok(const Fn& f, std::vector<Matrix> inputs) {
  auto bad = check_gradients(f, std::move(inputs));
  EXPECT_TRUE(bad.empty()) << describe(bad);
}

// Weighted sum so every output entry gets a distinct adjoint.
ag::Tensor probe(const ag::Tensor& t, std::uint64_t seed = 99) {
  return ag::sum(ag::mul_const(t, random_matrix(t.rows(), t.cols(), seed)));
}

}  // namespace

TEST(Autograd, ElementwiseOps) {
  Matrix a = random_matrix(3, 4, 1), b = random_matrix(3, 4, 2);
  Matrix pos = random_matrix(3, 4, 3, 0.5, 2.0);
  expect_grad_ok([](auto& v) { return probe(v[0] + v[1]); }, {a, b});
  expect_grad_ok([](auto& v) { return probe(v[0] - v[1]); }, {a, b});
  expect_grad_ok([](auto& v) { return probe(v[0] * v[1]); }, {a, b});
  expect_grad_ok([](auto& v) { return probe(ag::div(v[0], v[1])); }, {a, pos});
  expect_grad_ok([](auto& v) { return probe(ag::sigmoid(v[0])); }, {a});
  expect_grad_ok([](auto& v) { return probe(ag::tanh(v[0])); }, {a});
  expect_grad_ok([](auto& v) { return probe(ag::exp(v[0])); }, {a});
  expect_grad_ok([](auto& v) { return probe(ag::log(v[0])); }, {pos});
  expect_grad_ok([](auto& v) { return probe(ag::sqrt(v[0])); }, {pos});
  expect_grad_ok([](auto& v) { return probe(ag::reciprocal(v[0])); }, {pos});
  expect_grad_ok([](auto& v) { return probe(ag::softplus(v[0])); }, {a});
  expect_grad_ok([](auto& v) { return probe(ag::leaky_relu(v[0], 0.2)); }, {a});
  expect_grad_ok([](auto& v) { return probe(ag::square(v[0])); }, {a});
  expect_grad_ok([](auto& v) { return probe(ag::clamp_min(v[0], 0.1)); }, {a});
  expect_grad_ok([](auto& v) { return probe(ag::add_scalar(ag::scale(v[0], -3.0), 2.0)); }, {a});
}

TEST(Autograd, MatrixAndReductionOps) {
  Matrix a = random_matrix(3, 4, 4), b = random_matrix(4, 2, 5), c = random_matrix(5, 4, 6);
  Matrix row = random_matrix(1, 4, 7), col = random_matrix(3, 1, 8);
  expect_grad_ok([](auto& v) { return probe(ag::matmul(v[0], v[1])); }, {a, b});
  expect_grad_ok([](auto& v) { return probe(ag::matmul_nt(v[0], v[1])); }, {a, c});
  expect_grad_ok([](auto& v) { return probe(ag::matmul_tn(v[0], v[1])); }, {a, random_matrix(3, 2, 9)});
  expect_grad_ok([](auto& v) { return probe(ag::add_row(v[0], v[1])); }, {a, row});
  expect_grad_ok([](auto& v) { return probe(ag::add_col(v[0], v[1])); }, {a, col});
  expect_grad_ok([](auto& v) { return probe(ag::sum_rows(v[0])); }, {a});
  expect_grad_ok([](auto& v) { return probe(ag::sum_cols(v[0])); }, {a});
  expect_grad_ok([](auto& v) { return ag::mean(ag::square(v[0])); }, {a});
  expect_grad_ok([](auto& v) { return probe(ag::broadcast_rows(v[0], 3)); }, {row});
  expect_grad_ok([](auto& v) { return probe(ag::broadcast_cols(v[0], 5)); }, {col});
  expect_grad_ok([](auto& v) { return probe(ag::log_softmax_rows(v[0])); }, {a});
}

TEST(Autograd, StructuralOps) {
  Matrix a = random_matrix(6, 5, 10), b = random_matrix(2, 5, 11), c = random_matrix(6, 2, 12);
  expect_grad_ok([](auto& v) { return probe(ag::slice_rows(v[0], 2, 3)); }, {a});
  expect_grad_ok([](auto& v) { return probe(ag::slice_cols(v[0], 1, 3)); }, {a});
  expect_grad_ok([](auto& v) { return probe(ag::block(v[0], 1, 2, 4, 2)); }, {a});
  expect_grad_ok([](auto& v) { return probe(ag::pad_rows(v[0], 3, 9)); }, {a});
  expect_grad_ok([](auto& v) { return probe(ag::pad_cols(v[0], 1, 8)); }, {a});
  expect_grad_ok([](auto& v) {
    ag::Tensor parts[2] = {v[0], v[1]};
    return probe(ag::concat_rows(parts));
  }, {a, b});
  expect_grad_ok([](auto& v) {
    ag::Tensor parts[2] = {v[0], v[1]};
    return probe(ag::concat_cols(parts));
  }, {a, c});
  expect_grad_ok([](auto& v) {
    const Index cols[3] = {4, 0, 2};
    return probe(ag::select_cols(v[0], cols));
  }, {a});
  expect_grad_ok([](auto& v) {
    const Index cols[2] = {3, 1};
    return probe(ag::scatter_cols(v[0], cols, 5));
  }, {c});
  expect_grad_ok([](auto& v) {
    ag::Tensor parts[2] = {v[0], v[1]};
    const Index rows[2] = {0, 3};
    const Index cols[2] = {1, 0};
    return probe(ag::accumulate(parts, rows, cols, 6, 6));
  }, {random_matrix(3, 4, 13), random_matrix(2, 5, 14)});
  // the same input sliced many times, as a recurrent loop does
  expect_grad_ok([](auto& v) {
    ag::Tensor h = ag::slice_rows(v[0], 0, 1);
    for (Index t = 1; t < v[0].rows(); ++t) h = ag::tanh(h + ag::slice_rows(v[0], t, 1));
    return ag::sum(h);
  }, {a});
}

TEST(Autograd, UnreachedInputsGetZeros) {
  ag::Tensor a(random_matrix(2, 2, 1), true), b(random_matrix(3, 1, 2), true);
  ag::Tensor wrt[2] = {a, b};
  auto g = ag::grad(ag::sum(a), wrt);
  EXPECT_EQ(g[0].value(), Matrix::Ones(2, 2));
  EXPECT_EQ(g[1].value(), Matrix::Zero(3, 1));
}

TEST(Autograd, NoGradGuardStopsRecording) {
  ag::Tensor a(random_matrix(2, 2, 1), true);
  {
    ag::NoGradGuard guard;
    EXPECT_FALSE(ag::grad_enabled());
    EXPECT_FALSE(ag::square(a).requires_grad());
  }
  EXPECT_TRUE(ag::grad_enabled());
  EXPECT_TRUE(ag::square(a).requires_grad());
}

TEST(Autograd, DoubleBackward) {
  // d/dw of |d/dx f(x, w)|^2 with f = sum(tanh(x w)) checked numerically.
  Matrix x = random_matrix(3, 4, 20), w = random_matrix(4, 2, 21);
  expect_grad_ok([&](auto& v) {
    ag::Tensor xt(x, true);
    ag::Tensor f = ag::sum(ag::tanh(ag::matmul(xt, v[0])));
    ag::Tensor wrt[1] = {xt};
    ag::Tensor g = ag::grad(f, wrt, ag::Tensor(), true)[0];
    return ag::sum(ag::square(g));
  }, {w});
}
