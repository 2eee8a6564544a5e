#include <gtest/gtest.h>

#include <cmath>

#include "rigstyle/error.hpp"
#include "rigstyle/losses.hpp"
#include "rigstyle/nn.hpp"
#include "test_util.hpp"

using namespace rigstyle;
using namespace rigstyle::testing;

namespace {

ag::Tensor c(const Matrix& m) { return ag::constant(m); }

// Row-major literal helper.
Matrix mat(Index rows, Index cols, std::initializer_list<double> v) {
  Matrix m(rows, cols);
  Index i = 0;
  for (double x : v) m.data()[i++] = x;
  return m;
}

}  // namespace

TEST(CycleLoss, Examples) {
  Matrix x = random_matrix(6, 2, 1);
  EXPECT_EQ(loss::cycle(c(x), c(x), 2).item(), 0.0);

  Matrix d = Matrix::Zero(3, 2);
  d(1, 1) = 2.0;
  EXPECT_DOUBLE_EQ(loss::cycle(c(d), c(Matrix::Zero(3, 2)), 1).item(), 2.0);

  // two windows (T=2, N=1), time-major; window 0 has norm 1, window 1 norm 3
  Matrix two = mat(4, 1, {1.0, 3.0, 0.0, 0.0});
  EXPECT_DOUBLE_EQ(loss::cycle(c(two), c(Matrix::Zero(4, 1)), 2).item(), 2.0);
  EXPECT_DOUBLE_EQ(loss::cycle(c(-two), c(Matrix::Zero(4, 1)), 2).item(), 2.0);
  EXPECT_THROW(loss::cycle(c(two), c(Matrix::Zero(3, 1)), 1), ValidationError);
}

TEST(ClassificationLoss, Examples) {
  // one group of 2, uniform logits -> ln 2
  EXPECT_NEAR(loss::cls_real(c(Matrix::Zero(3, 2)), mat(1, 2, {1, 0}), {2}, 1).item(), std::log(2.0), 1e-12);
  // two groups: ln 2 and (almost) 0 -> mean
  Matrix logits(1, 4);
  logits << 0, 0, 50, -50;
  EXPECT_NEAR(loss::cls_fake(c(logits), mat(1, 4, {0, 1, 1, 0}), {2, 2}, 1).item(), std::log(2.0) / 2, 1e-12);
  EXPECT_NEAR(loss::cls_fake(c(logits), mat(1, 4, {0, 1, 1, 0}), {2, 2}, 1).item(), 0.3466, 1e-4);
  // forcing probability one on the true class
  Matrix sure(2, 4);
  sure << 1e3, -1e3, -1e3, 1e3, 1e3, -1e3, -1e3, 1e3;
  EXPECT_NEAR(loss::cls_real(c(sure), mat(1, 4, {1, 0, 0, 1}), {2, 2}, 1).item(), 0.0, 1e-12);
  EXPECT_THROW(loss::cls_real(c(sure), mat(1, 4, {1, 0, 0, 1}), {3, 2}, 1), ValidationError);
}

TEST(ClassificationLoss, MonotoneInTrueLogit) {
  double prev = 1e9;
  for (double z = -3; z <= 3; z += 0.5) {
    Matrix l(1, 3);
    l << z, 0.2, -0.4;
    double v = loss::cls_real(c(l), mat(1, 3, {1, 0, 0}), {3}, 1).item();
    EXPECT_LT(v, prev);
    EXPECT_GE(v, 0.0);
    prev = v;
  }
}

TEST(ClassificationLoss, SigmoidMode) {
  // all-zero logits -> ln 2 for every bit
  EXPECT_NEAR(loss::classification(c(Matrix::Zero(2, 4)), mat(1, 4, {1, 0, 0, 1}), {2, 2}, 1,
                                   loss::ClassMode::independent_sigmoid).item(),
              std::log(2.0), 1e-12);
}

TEST(GradientPenalty, LinearCritics) {
  Rng rng(3);
  Matrix real = random_matrix(2, 2, 1), fake = random_matrix(2, 2, 2);
  // critic = sum of entries; the time mean halves it, so scale by T to get an all-ones gradient
  auto sum_critic = [](const ag::Tensor& x) { return ag::scale(ag::sum_cols(x), 2.0); };
  EXPECT_NEAR(loss::gradient_penalty(sum_critic, real, fake, 1, rng).item(), 1.0, 1e-12);
  auto constant = [](const ag::Tensor& x) { return ag::add_scalar(ag::scale(ag::sum_cols(x), 0.0), 5.0); };
  EXPECT_NEAR(loss::gradient_penalty(constant, real, fake, 1, rng).item(), 1.0, 1e-12);
  auto corner = [](const ag::Tensor& x) {
    Matrix mask = Matrix::Zero(2, 2);
    mask(0, 0) = 2.0;
    return ag::sum_cols(ag::mul_const(x, mask));
  };
  EXPECT_NEAR(loss::gradient_penalty(corner, real, fake, 1, rng).item(), 0.0, 1e-12);
}

TEST(GradientPenalty, MatchesNumericInputGradient) {
  // Nonlinear per-frame critic; the penalty recomputed from a numeric input gradient.
  Matrix w = random_matrix(3, 1, 5);
  auto critic = [&](const ag::Tensor& x) { return ag::tanh(ag::matmul(x, ag::constant(w))); };
  Matrix real = random_matrix(4 * 2, 3, 6), fake = random_matrix(4 * 2, 3, 7);
  Rng a(9), b(9);
  double gp = loss::gradient_penalty(critic, real, fake, 2, a).item();

  std::uniform_real_distribution<double> u(0.0, 1.0);
  double e[2] = {u(b), u(b)};
  Matrix xhat(8, 3);
  for (Index r = 0; r < 8; ++r) xhat.row(r) = e[r % 2] * real.row(r) + (1 - e[r % 2]) * fake.row(r);
  auto objective = [&](const Matrix& m) {
    return ag::sum(critic(ag::constant(m))).item() / 4.0;
  };
  Matrix g(8, 3);
  for (Index i = 0; i < g.size(); ++i) {
    Matrix up = xhat, down = xhat;
    up.data()[i] += 1e-6;
    down.data()[i] -= 1e-6;
    g.data()[i] = (objective(up) - objective(down)) / 2e-6;
  }
  double expected = 0.0;
  for (Index s = 0; s < 2; ++s) {
    double sq = 0.0;
    for (Index t = 0; t < 4; ++t) sq += g.row(t * 2 + s).squaredNorm();
    expected += (std::sqrt(sq) - 1.0) * (std::sqrt(sq) - 1.0) / 2.0;
  }
  EXPECT_LT(std::abs(gp - expected), 1e-3 * std::abs(expected) + 1e-9);
}

TEST(AdversarialLoss, Examples) {
  EXPECT_DOUBLE_EQ(loss::adversarial(c(Matrix::Constant(4, 1, 3.0)), c(Matrix::Constant(4, 1, 1.0)), ag::Tensor(), 10).item(), -2.0);
  Matrix s = random_matrix(6, 1, 2);
  EXPECT_DOUBLE_EQ(loss::adversarial(c(s), c(s), ag::Tensor(), 10).item(), 0.0);
  EXPECT_DOUBLE_EQ(loss::adversarial(c(s), c(s), ag::scalar(1.0), 10).item(), 10.0);
}

TEST(VisemeLoss, Examples) {
  EXPECT_NEAR(loss::viseme(c(Matrix::Zero(3, 4)), c(Matrix::Zero(3, 4))).item(), std::log(4.0), 1e-12);
  Matrix onehot = Matrix::Constant(1, 4, -1e4);
  onehot(0, 2) = 1e4;
  EXPECT_NEAR(loss::viseme(c(onehot), c(Matrix::Zero(1, 4))).item(), std::log(4.0), 1e-12);
  EXPECT_NEAR(loss::viseme(c(onehot), c(onehot)).item(), 0.0, 1e-12);
  EXPECT_NEAR(loss::viseme(c(onehot), c(Matrix::Zero(1, 4)), loss::VisemeTarget::hard).item(), std::log(4.0), 1e-12);
  EXPECT_THROW(loss::viseme(c(onehot), c(Matrix::Zero(1, 3))), ValidationError);
}

TEST(VisemeLoss, IdenticalLogitsGiveEntropy) {
  Matrix l = random_matrix(5, 6, 4, -3, 3);
  Matrix p = (l.array().colwise() - l.rowwise().maxCoeff().array()).exp().matrix();
  for (Index r = 0; r < 5; ++r) p.row(r) /= p.row(r).sum();
  double entropy = -(p.array() * p.array().log()).sum() / 5.0;
  EXPECT_NEAR(loss::viseme(c(l), c(l)).item(), entropy, 1e-9);
}

TEST(VisemeLoss, TargetSideGetsNoGradient) {
  ag::Tensor src(random_matrix(3, 4, 1), true), gen(random_matrix(3, 4, 2), true);
  ag::Tensor wrt[2] = {src, gen};
  auto g = ag::grad(loss::viseme(src, gen), wrt);
  EXPECT_EQ(g[0].value(), Matrix::Zero(3, 4));
  EXPECT_GT(g[1].value().cwiseAbs().maxCoeff(), 0.0);
}

TEST(VisemePretrainLoss, ExamplesAndValidation) {
  EXPECT_NEAR(loss::viseme_pretrain(c(Matrix::Zero(2, 4)), Matrix::Constant(2, 4, 0.25)).item(), std::log(4.0), 1e-12);
  Matrix t = Matrix::Zero(1, 4);
  t(0, 1) = 1.0;
  EXPECT_NEAR(loss::viseme_pretrain(c(Matrix::Zero(1, 4)), t).item(), std::log(4.0), 1e-12);
  t(0, 2) = 0.5;
  EXPECT_THROW(loss::viseme_pretrain(c(Matrix::Zero(1, 4)), t), ValidationError);
}

TEST(CosineMouthLoss, Examples) {
  const Index mouth[2] = {1, 2};
  Matrix x = random_matrix(5, 4, 1, 0.1, 1);
  EXPECT_NEAR(loss::cosine_mouth(c(x), c(x), mouth).item(), 0.0, 1e-12);
  Matrix a = mat(2, 4, {9, 1, 0, 9, 9, 0, 2, 9});
  Matrix b = mat(2, 4, {9, 0, 3, 9, 9, 5, 0, 9});
  EXPECT_NEAR(loss::cosine_mouth(c(a), c(b), mouth).item(), 1.0, 1e-12);
  Matrix y = x;
  y.col(1) *= 2.0;
  y.col(2) *= 2.0;
  EXPECT_NEAR(loss::cosine_mouth(c(x), c(y), mouth).item(), 0.0, 1e-12);
  EXPECT_THROW(loss::cosine_mouth(c(x), c(x), std::span<const Index>()), ValidationError);
}

TEST(CosineMouthLoss, ScaleBlind) {
  const Index mouth[3] = {0, 2, 3};
  Matrix x = random_matrix(7, 5, 3, 0, 1), y = random_matrix(7, 5, 4, 0, 1);
  double base = loss::cosine_mouth(c(x), c(y), mouth).item();
  for (double k : {1e-3, 0.5, 3.0, 1e4}) {
    Matrix z = y;
    for (Index m : mouth) z.col(m) *= k;
    EXPECT_NEAR(loss::cosine_mouth(c(x), c(z), mouth).item(), base, 1e-9);
  }
}

TEST(TotalLosses, Examples) {
  loss::LossWeights w;
  EXPECT_EQ(loss::total_generator_loss({}, w), 0.0);
  loss::LossWeights ones{1, 1, 1, 1, 10, 0};
  EXPECT_DOUBLE_EQ(loss::total_generator_loss({2, 1, 1, 0, 3}, ones), 1.0);
  loss::LossWeights no_cls{10, 0, 1, 2, 10, 0};
  EXPECT_DOUBLE_EQ(loss::total_discriminator_loss({5.0, 1.5}, no_cls), 3.0);
  EXPECT_THROW(loss::total_generator_loss({std::nan(""), 0, 0, 0, 0}, w), ValidationError);
  loss::LossWeights neg;
  neg.cls = -1;
  EXPECT_THROW(neg.validate(), ValidationError);
}

// Every loss as a function of network parameters, against central differences.
class TinyLossGradients : public ::testing::Test {
 protected:
  ModelDims dims = tiny_dims();
  NetShape shape = tiny_shape();
  Index B = 2;
  Matrix x = random_matrix(4 * 2, 3, 41, 0, 1);
  Matrix src = (Matrix(2, 2) << 1, 0, 0, 1).finished();
  Matrix tgt = (Matrix(2, 2) << 0, 1, 1, 0).finished();
  Generator g{dims, shape};
  Discriminator d{dims, shape};
  FrameClassifier v{dims.channels, dims.visemes, shape};
  ParamSet gp = g.init_params(1), dp = d.init_params(2), vp = v.init_params(3);

  void expect_ok(const std::function<ag::Tensor(const std::vector<ag::Tensor>&)>& f, const ParamSet& p) {
    auto bad = check_gradients(f, matrices(p));
    EXPECT_TRUE(bad.empty()) << describe(bad);
  }
};

TEST_F(TinyLossGradients, Cycle) {
  expect_ok([&](const std::vector<ag::Tensor>& p) {
    ag::Tensor fake = g.forward(p, c(x), tgt, B, Mode::eval, nullptr);
    return loss::cycle(c(x), g.forward(p, fake, src, B, Mode::eval, nullptr), B);
  }, gp);
}

TEST_F(TinyLossGradients, ClsReal) {
  expect_ok([&](const std::vector<ag::Tensor>& p) {
    return loss::cls_real(d.forward(p, c(x), B, Mode::eval, nullptr).logits, src, dims.style_groups, B);
  }, dp);
}

TEST_F(TinyLossGradients, ClsFake) {
  auto dt = dp.tensors(false);
  expect_ok([&](const std::vector<ag::Tensor>& p) {
    ag::Tensor fake = g.forward(p, c(x), tgt, B, Mode::eval, nullptr);
    return loss::cls_fake(d.forward(dt, fake, B, Mode::eval, nullptr).logits, tgt, dims.style_groups, B);
  }, gp);
}

TEST_F(TinyLossGradients, AdversarialWithPenalty) {
  Matrix fake = generator_forward(g, gp, x, B, tgt, Mode::eval);
  expect_ok([&](const std::vector<ag::Tensor>& p) {
    Rng rng(17);  // same interpolation weights on every evaluation
    loss::Critic critic = [&](const ag::Tensor& in) { return d.forward(p, in, B, Mode::eval, nullptr).critic; };
    ag::Tensor pen = loss::gradient_penalty(critic, x, fake, B, rng);
    return loss::adversarial(critic(c(x)), critic(c(fake)), pen, 10.0);
  }, dp);
}

TEST_F(TinyLossGradients, GeneratorAdversarial) {
  auto dt = dp.tensors(false);
  expect_ok([&](const std::vector<ag::Tensor>& p) {
    ag::Tensor fake = g.forward(p, c(x), tgt, B, Mode::eval, nullptr);
    ag::Tensor real = d.forward(dt, c(x), B, Mode::eval, nullptr).critic;
    return ag::neg(loss::adversarial(real, d.forward(dt, fake, B, Mode::eval, nullptr).critic, ag::Tensor(), 0.0));
  }, gp);
}

TEST_F(TinyLossGradients, Viseme) {
  auto vt = vp.tensors(false);
  expect_ok([&](const std::vector<ag::Tensor>& p) {
    ag::Tensor fake = g.forward(p, c(x), tgt, B, Mode::eval, nullptr);
    return loss::viseme(v.forward(vt, c(x), B, Mode::eval, nullptr), v.forward(vt, fake, B, Mode::eval, nullptr));
  }, gp);
}

TEST_F(TinyLossGradients, VisemePretrain) {
  Matrix labels = Matrix::Zero(8, 3);
  for (Index r = 0; r < 8; ++r) labels(r, r % 3) = 1.0;
  expect_ok([&](const std::vector<ag::Tensor>& p) {
    return loss::viseme_pretrain(v.forward(p, c(x), B, Mode::eval, nullptr), labels);
  }, vp);
}

TEST_F(TinyLossGradients, CosineMouth) {
  const Index mouth[2] = {0, 2};
  expect_ok([&](const std::vector<ag::Tensor>& p) {
    return loss::cosine_mouth(c(x), g.forward(p, c(x), tgt, B, Mode::eval, nullptr), mouth);
  }, gp);
}
