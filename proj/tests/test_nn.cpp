#include <gtest/gtest.h>

#include "rigstyle/error.hpp"
#include "rigstyle/nn.hpp"
#include "test_util.hpp"

using namespace rigstyle;
using namespace rigstyle::testing;

namespace {

NetShape small_shape() {
  NetShape s;
  s.hidden = 16;
  s.residual_layers = 2;
  s.gru_layers = 2;
  s.dropout = 0.4;
  return s;
}

Matrix styles_for(Index batch, const ModelDims& dims, int which = 0) {
  Matrix s = Matrix::Zero(batch, dims.style_width());
  int offset = 0;
  for (int g : dims.style_groups) {
    for (Index b = 0; b < batch; ++b) s(b, offset + (which + b) % g) = 1.0;
    offset += g;
  }
  return s;
}

}  // namespace

TEST(BlockConfig, Validates) {
  BlockConfig c = small_shape().block(4, 2);
  EXPECT_NO_THROW(c.validate());
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = small_shape().block(0, 2);
  EXPECT_THROW(c.validate(), ValidationError);
  c = small_shape().block(4, 2);
  c.hidden = 0;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(Models, ShapeContracts) {
  ModelDims dims;  // N=16, C=4, V=16
  Generator g(dims, small_shape());
  Discriminator d(dims, small_shape());
  FrameClassifier v(dims.channels, dims.visemes, small_shape());
  auto gp = g.init_params(1), dp = d.init_params(2), vp = v.init_params(3);

  Matrix x = random_matrix(30 * 2, 16, 4, 0, 1);
  EXPECT_EQ(generator_forward(g, gp, x, 2, styles_for(2, dims), Mode::eval).rows(), 60);
  Matrix x4 = random_matrix(30 * 4, 16, 5, 0, 1);
  auto [critic, logits] = discriminator_forward(d, dp, x4, 4, Mode::eval);
  EXPECT_EQ(critic.rows(), 120);
  EXPECT_EQ(critic.cols(), 1);
  EXPECT_EQ(logits.cols(), 4);
  Matrix vl = classifier_forward(v, vp, x, 2, Mode::eval);
  EXPECT_EQ(vl.cols(), 16);
  Matrix probs = (vl.array().colwise() - vl.rowwise().maxCoeff().array()).exp().matrix();
  for (Index r = 0; r < probs.rows(); ++r) EXPECT_NEAR((probs.row(r) / probs.row(r).sum()).sum(), 1.0, 1e-6);
}

TEST(Models, LengthPreservation) {
  ModelDims dims;
  Generator g(dims, small_shape());
  Discriminator d(dims, small_shape());
  FrameClassifier v(dims.channels, dims.visemes, small_shape());
  auto gp = g.init_params(1), dp = d.init_params(2), vp = v.init_params(3);
  for (Index T : {Index(1), Index(7), Index(30), Index(301)}) {
    Matrix x = random_matrix(T, 16, static_cast<std::uint64_t>(T), 0, 1);
    EXPECT_EQ(generator_forward(g, gp, x, 1, styles_for(1, dims), Mode::eval).rows(), T);
    EXPECT_EQ(discriminator_forward(d, dp, x, 1, Mode::eval).first.rows(), T);
    EXPECT_EQ(classifier_forward(v, vp, x, 1, Mode::eval).rows(), T);
  }
}

TEST(Models, EvalIsDeterministicTrainIsNot) {
  ModelDims dims;
  Generator g(dims, small_shape());
  auto p = g.init_params(7);
  Matrix x = random_matrix(60, 16, 8, 0, 1);
  Matrix s = styles_for(2, dims);
  EXPECT_EQ(generator_forward(g, p, x, 2, s, Mode::eval), generator_forward(g, p, x, 2, s, Mode::eval));
  Rng a(1), b(2);
  EXPECT_NE(generator_forward(g, p, x, 2, s, Mode::train, &a), generator_forward(g, p, x, 2, s, Mode::train, &b));
  Rng c(1), d(1);
  EXPECT_EQ(generator_forward(g, p, x, 2, s, Mode::train, &c), generator_forward(g, p, x, 2, s, Mode::train, &d));
  EXPECT_THROW(generator_forward(g, p, x, 2, s, Mode::train, nullptr), ValidationError);
}

TEST(Models, InitIsSeeded) {
  Generator g(ModelDims{}, small_shape());
  EXPECT_EQ(g.init_params(3), g.init_params(3));
  EXPECT_FALSE(g.init_params(3) == g.init_params(4));
  ParamSet p = g.init_params(3);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_TRUE(p[i].allFinite()) << p.name(i);
}

TEST(Models, RecurrentMatricesAreOrthogonalBlocks) {
  NetShape s = small_shape();
  FrameClassifier v(4, 3, s);
  ParamSet p = v.init_params(5);
  const Matrix& w = p.at("gru.0.fwd.w_hh");
  ASSERT_EQ(w.rows(), 3 * s.hidden);
  for (Index k = 0; k < 3; ++k) {
    Matrix q = w.middleRows(k * s.hidden, s.hidden);
    EXPECT_LE((q * q.transpose() - Matrix::Identity(s.hidden, s.hidden)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Models, FreshOutputsAreModest) {
  ModelDims dims;
  Generator g(dims, NetShape{});
  Discriminator d(dims, NetShape{});
  FrameClassifier v(dims.channels, dims.visemes, NetShape{});
  Matrix ones = Matrix::Ones(30, 16);
  for (std::uint64_t seed : {1, 2, 3}) {
    EXPECT_LT(generator_forward(g, g.init_params(seed), ones, 1, styles_for(1, dims), Mode::eval).cwiseAbs().maxCoeff(), 100.0);
    auto [c, l] = discriminator_forward(d, d.init_params(seed), ones, 1, Mode::eval);
    EXPECT_LT(c.cwiseAbs().maxCoeff(), 100.0);
    EXPECT_LT(l.cwiseAbs().maxCoeff(), 100.0);
    EXPECT_LT(classifier_forward(v, v.init_params(seed), ones, 1, Mode::eval).cwiseAbs().maxCoeff(), 100.0);
  }
}

TEST(Models, ZeroHeadGivesZeroCritic) {
  Discriminator d(ModelDims{}, small_shape());
  ParamSet p = d.init_params(1);
  p.at("out_proj.weight").setZero();
  p.at("out_proj.bias").setZero();
  EXPECT_EQ(discriminator_forward(d, p, random_matrix(30, 16, 2, 0, 1), 1, Mode::eval).first, Matrix::Zero(30, 1));
}

TEST(Models, IdentityGeneratorStub) {
  Generator g(ModelDims{}, small_shape());
  Matrix x = random_matrix(40, 16, 3, 0, 1);
  EXPECT_EQ(generator_forward(g, g.identity_params(), x, 2, styles_for(2, ModelDims{}), Mode::eval), x);
}

TEST(Models, BidirectionalInfluence) {
  ModelDims dims;
  Generator g(dims, small_shape());
  Discriminator d(dims, small_shape());
  FrameClassifier v(dims.channels, dims.visemes, small_shape());
  Matrix x = random_matrix(12, 16, 9, 0, 1);
  Matrix y = x;
  y.row(11).array() += 0.3;
  auto s = styles_for(1, dims);
  auto gp = g.init_params(1), dp = d.init_params(1), vp = v.init_params(1);
  EXPECT_GT((generator_forward(g, gp, x, 1, s, Mode::eval).row(0) - generator_forward(g, gp, y, 1, s, Mode::eval).row(0))
                .cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_GT((discriminator_forward(d, dp, x, 1, Mode::eval).second.row(0) -
             discriminator_forward(d, dp, y, 1, Mode::eval).second.row(0)).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_GT((classifier_forward(v, vp, x, 1, Mode::eval).row(0) - classifier_forward(v, vp, y, 1, Mode::eval).row(0))
                .cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Models, StyleSensitivity) {
  ModelDims dims;
  Generator g(dims, small_shape());
  auto p = g.init_params(11);
  Matrix x = random_matrix(30, 16, 12, 0, 1);
  Matrix a = generator_forward(g, p, x, 1, styles_for(1, dims, 0), Mode::eval);
  Matrix b = generator_forward(g, p, x, 1, styles_for(1, dims, 1), Mode::eval);
  EXPECT_GT((a - b).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Models, InputValidation) {
  ModelDims dims;
  Generator g(dims, small_shape());
  auto p = g.init_params(1);
  Matrix x = random_matrix(30, 16, 1, 0, 1);
  x(3, 3) = std::nan("");
  EXPECT_THROW(generator_forward(g, p, x, 1, styles_for(1, dims), Mode::eval), ValidationError);
  EXPECT_THROW(generator_forward(g, p, random_matrix(30, 16, 1), 1, Matrix::Zero(1, 3), Mode::eval), ValidationError);
  EXPECT_THROW(generator_forward(g, p, random_matrix(30, 15, 1), 1, styles_for(1, dims), Mode::eval), ValidationError);
}

// Finite-difference checks on the small configuration: H=8, T=4, N=3, C=2, V=3.
class TinyGradients : public ::testing::Test {
 protected:
  ModelDims dims = tiny_dims();
  NetShape shape = tiny_shape();
  Index batch = 2, time = 4;
  Matrix x = random_matrix(4 * 2, 3, 31, 0, 1);
  Matrix styles = (Matrix(2, 2) << 1, 0, 0, 1).finished();
};

TEST_F(TinyGradients, Generator) {
  Generator g(dims, shape);
  auto values = matrices(g.init_params(1));
  values.push_back(x);
  auto bad = check_gradients([&](const std::vector<ag::Tensor>& v) {
    std::span<const ag::Tensor> p(v.data(), v.size() - 1);
    return ag::sum(g.forward(p, v.back(), styles, batch, Mode::eval, nullptr));
  }, values);
  EXPECT_TRUE(bad.empty()) << describe(bad);
}

TEST_F(TinyGradients, Discriminator) {
  Discriminator d(dims, shape);
  auto values = matrices(d.init_params(2));
  values.push_back(x);
  auto bad = check_gradients([&](const std::vector<ag::Tensor>& v) {
    std::span<const ag::Tensor> p(v.data(), v.size() - 1);
    auto out = d.forward(p, v.back(), batch, Mode::eval, nullptr);
    return ag::sum(out.critic) + ag::sum(out.logits);
  }, values);
  EXPECT_TRUE(bad.empty()) << describe(bad);
}

TEST_F(TinyGradients, VisemeClassifier) {
  FrameClassifier v(dims.channels, dims.visemes, shape);
  auto values = matrices(v.init_params(3));
  values.push_back(x);
  auto bad = check_gradients([&](const std::vector<ag::Tensor>& t) {
    std::span<const ag::Tensor> p(t.data(), t.size() - 1);
    return ag::sum(v.forward(p, t.back(), batch, Mode::eval, nullptr));
  }, values);
  EXPECT_TRUE(bad.empty()) << describe(bad);
}
