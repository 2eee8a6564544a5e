#include "rigstyle/losses.hpp"

#include <cmath>
#include <numeric>

#include "rigstyle/error.hpp"
#include "rigstyle/nn.hpp"

namespace rigstyle::loss {

namespace {

void require_same_shape(const ag::Tensor& a, const ag::Tensor& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ValidationError(std::string(what) + ": shape mismatch");
}

Index frames_per_sequence(const ag::Tensor& t, Index batch) {
  if (batch < 1 || t.rows() % batch != 0 || t.rows() == 0)
    throw ValidationError("rows must be a positive multiple of the batch size");
  return t.rows() / batch;
}

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw ValidationError(std::string(what) + " is not finite");
}

}  // namespace

void LossWeights::validate() const {
  for (double w : {cycle, cls, viseme, adv, gp, mouth})
    if (!std::isfinite(w) || w < 0.0)
      throw ValidationError("loss weights must be finite and non-negative");
}

ag::Tensor cycle(const ag::Tensor& x, const ag::Tensor& cycled, Index batch) {
  require_same_shape(x, cycled, "cycle loss");
  const Index time = frames_per_sequence(x, batch);
  ag::Tensor per_frame = ag::sum_cols(ag::square(ag::sub(x, cycled)));
  ag::Tensor per_seq = ag::matmul(ag::constant(sequence_sum_matrix(batch, time)), per_frame);
  return ag::mean(ag::sqrt(per_seq));
}

ag::Tensor classification(const ag::Tensor& logits, const Matrix& targets,
                          const std::vector<int>& group_sizes, Index batch, ClassMode mode) {
  const int width = std::accumulate(group_sizes.begin(), group_sizes.end(), 0);
  if (group_sizes.empty() || width != logits.cols() || targets.cols() != width)
    throw ValidationError("style group sizes do not match the logit width");
  if (targets.rows() != batch) throw ValidationError("one target row per sequence expected");
  const Index time = frames_per_sequence(logits, batch);
  const Matrix frame_targets = repeat_per_frame(targets, time);
  const double frames = static_cast<double>(logits.rows());

  if (mode == ClassMode::independent_sigmoid) {
    // softplus(z) - t z is the binary cross-entropy of sigmoid(z) against t.
    ag::Tensor bce = ag::sub(ag::softplus(logits), ag::mul_const(logits, frame_targets));
    return ag::scale(ag::sum(bce), 1.0 / (frames * width));
  }

  ag::Tensor total;
  int offset = 0;
  for (int size : group_sizes) {
    ag::Tensor lp = ag::log_softmax_rows(ag::slice_cols(logits, offset, size));
    Matrix t = frame_targets.middleCols(offset, size);
    ag::Tensor ce = ag::scale(ag::sum(ag::mul_const(lp, t)), -1.0 / frames);
    total = total.defined() ? ag::add(total, ce) : ce;
    offset += size;
  }
  return ag::scale(total, 1.0 / static_cast<double>(group_sizes.size()));
}

ag::Tensor gradient_penalty(const Critic& critic, const Matrix& real, const Matrix& fake,
                            Index batch, Rng& rng) {
  if (real.rows() != fake.rows() || real.cols() != fake.cols())
    throw ValidationError("gradient penalty: real and fake shapes differ");
  if (batch < 1 || real.rows() % batch != 0 || real.rows() == 0)
    throw ValidationError("gradient penalty: rows must be a multiple of the batch size");
  const Index time = real.rows() / batch;

  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  Matrix mix(batch, 1);
  for (Index b = 0; b < batch; ++b) mix(b, 0) = uniform(rng);
  Matrix frame_mix = repeat_per_frame(mix, time);
  Matrix blended(real.rows(), real.cols());
  for (Index r = 0; r < real.rows(); ++r)
    blended.row(r) = frame_mix(r, 0) * real.row(r) + (1.0 - frame_mix(r, 0)) * fake.row(r);

  ag::Tensor xhat(std::move(blended), true);
  ag::Tensor scores = critic(xhat);
  if (scores.rows() != xhat.rows() || scores.cols() != 1)
    throw ValidationError("critic must return one score per frame");
  // Sum over sequences of the per-sequence time mean: its gradient block for
  // sequence b is the gradient of that sequence's own mean score.
  ag::Tensor objective = ag::scale(ag::sum(scores), 1.0 / static_cast<double>(time));
  ag::Tensor inputs[1] = {xhat};
  ag::Tensor g = ag::grad(objective, inputs, ag::Tensor(), true)[0];
  if (!g.value().allFinite()) throw NumericalError("gradient penalty: non-finite input gradient");

  ag::Tensor per_frame = ag::sum_cols(ag::square(g));
  ag::Tensor norms =
      ag::sqrt(ag::matmul(ag::constant(sequence_sum_matrix(batch, time)), per_frame));
  return ag::mean(ag::square(ag::add_scalar(norms, -1.0)));
}

ag::Tensor adversarial(const ag::Tensor& real_scores, const ag::Tensor& fake_scores,
                       const ag::Tensor& gp, double lambda_gp) {
  ag::Tensor out = ag::sub(ag::mean(fake_scores), ag::mean(real_scores));
  if (gp.defined()) out = ag::add(out, ag::scale(gp, lambda_gp));
  return out;
}

ag::Tensor viseme(const ag::Tensor& source_logits, const ag::Tensor& generated_logits,
                  VisemeTarget target) {
  require_same_shape(source_logits, generated_logits, "viseme loss");
  Matrix t;
  {
    ag::NoGradGuard guard;
    ag::Tensor lp = ag::log_softmax_rows(source_logits.detach());
    t = lp.value().array().exp().matrix();
  }
  if (target == VisemeTarget::hard) {
    Matrix hard = Matrix::Zero(t.rows(), t.cols());
    for (Index r = 0; r < t.rows(); ++r) {
      Index best = 0;
      t.row(r).maxCoeff(&best);
      hard(r, best) = 1.0;
    }
    t = std::move(hard);
  }
  ag::Tensor lp = ag::log_softmax_rows(generated_logits);
  return ag::scale(ag::sum(ag::mul_const(lp, t)), -1.0 / static_cast<double>(t.rows()));
}

ag::Tensor viseme_pretrain(const ag::Tensor& logits, const Matrix& targets) {
  if (targets.rows() != logits.rows() || targets.cols() != logits.cols())
    throw ValidationError("viseme targets do not match the logits");
  for (Index r = 0; r < targets.rows(); ++r) {
    if ((targets.row(r).array() < 0.0).any() ||
        std::abs(targets.row(r).sum() - 1.0) > 1e-6)
      throw ValidationError("viseme target row " + std::to_string(r) + " is not a distribution");
  }
  ag::Tensor lp = ag::log_softmax_rows(logits);
  return ag::scale(ag::sum(ag::mul_const(lp, targets)),
                   -1.0 / static_cast<double>(targets.rows()));
}

ag::Tensor cosine_mouth(const ag::Tensor& x, const ag::Tensor& y, std::span<const Index> mouth) {
  if (mouth.empty()) throw ValidationError("cosine mouth loss needs mouth channels");
  require_same_shape(x, y, "cosine mouth loss");
  constexpr double kEps = 1e-8;
  ag::Tensor mx = ag::select_cols(x, mouth);
  ag::Tensor my = ag::select_cols(y, mouth);
  ag::Tensor dot = ag::sum_cols(ag::mul(mx, my));
  ag::Tensor nx = ag::sqrt(ag::sum_cols(ag::square(mx)));
  ag::Tensor ny = ag::sqrt(ag::sum_cols(ag::square(my)));
  ag::Tensor cosine = ag::div(dot, ag::clamp_min(ag::mul(nx, ny), kEps));
  return ag::add_scalar(ag::neg(ag::mean(cosine)), 1.0);
}

double total_generator_loss(const GeneratorTerms& t, const LossWeights& w) {
  w.validate();
  for (double v : {t.cycle, t.cls, t.viseme, t.mouth, t.adv}) require_finite(v, "generator loss term");
  return w.cycle * t.cycle + w.cls * t.cls + w.viseme * t.viseme + w.mouth * t.mouth -
         w.adv * t.adv;
}

double total_discriminator_loss(const DiscriminatorTerms& t, const LossWeights& w) {
  w.validate();
  require_finite(t.cls, "discriminator loss term");
  require_finite(t.adv, "discriminator loss term");
  return w.cls * t.cls + w.adv * t.adv;
}

}  // namespace rigstyle::loss
