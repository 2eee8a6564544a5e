#pragma once

#include <functional>
#include <span>
#include <vector>

#include "rigstyle/anim.hpp"
#include "rigstyle/autograd.hpp"
#include "rigstyle/matrix.hpp"

// Training objectives. Sequences are time-major (T*B) x F tensors; `batch` is B.
namespace rigstyle::loss {

struct LossWeights {
  double cycle = 10.0;
  double cls = 1.0;
  double viseme = 1.0;
  double adv = 1.0;
  double gp = 10.0;
  /// Cosine mouth term; only the ablation baseline turns it on.
  double mouth = 0.0;

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

enum class ClassMode {
  /// One softmax per style group.
  grouped_softmax,
  /// Independent sigmoid per style bit.
  independent_sigmoid,
};

enum class VisemeTarget { soft, hard };

/// Mean over sequences of the Frobenius norm of (x - cycled).
ag::Tensor cycle(const ag::Tensor& x, const ag::Tensor& cycled, Index batch);

/// Cross-entropy of per-frame style logits against per-sequence targets (B x C),
/// averaged over frames, groups and sequences.
ag::Tensor classification(const ag::Tensor& logits, const Matrix& targets,
                          const std::vector<int>& group_sizes, Index batch,
                          ClassMode mode = ClassMode::grouped_softmax);

/// Discriminator-side term; call on real sequences only.
inline ag::Tensor cls_real(const ag::Tensor& logits, const Matrix& targets,
                           const std::vector<int>& group_sizes, Index batch,
                           ClassMode mode = ClassMode::grouped_softmax) {
  return classification(logits, targets, group_sizes, batch, mode);
}

/// Generator-side term on D(G(x, s')) with targets s'.
inline ag::Tensor cls_fake(const ag::Tensor& logits, const Matrix& targets,
                           const std::vector<int>& group_sizes, Index batch,
                           ClassMode mode = ClassMode::grouped_softmax) {
  return classification(logits, targets, group_sizes, batch, mode);
}

/// Maps a (T*B) x N window batch to (T*B) x 1 per-frame critic scores.
using Critic = std::function<ag::Tensor(const ag::Tensor&)>;

/// Mean over sequences of (|grad_xhat mean_t critic(xhat)| - 1)^2 at random
/// interpolates xhat = e*real + (1-e)*fake, one e per sequence. The result
/// stays differentiable with respect to the critic's parameters.
ag::Tensor gradient_penalty(const Critic& critic, const Matrix& real, const Matrix& fake,
                            Index batch, Rng& rng);

/// mean(fake) - mean(real) + lambda_gp * gp.
ag::Tensor adversarial(const ag::Tensor& real_scores, const ag::Tensor& fake_scores,
                       const ag::Tensor& gp, double lambda_gp);

/// Cross-entropy between classifier outputs on the source (held constant) and
/// on the generated sequence.
ag::Tensor viseme(const ag::Tensor& source_logits, const ag::Tensor& generated_logits,
                  VisemeTarget target = VisemeTarget::soft);

/// Soft-target cross-entropy for classifier pretraining; target rows must sum to one.
ag::Tensor viseme_pretrain(const ag::Tensor& logits, const Matrix& targets);

/// Mean over frames of 1 - cos(mouth(x), mouth(y)).
ag::Tensor cosine_mouth(const ag::Tensor& x, const ag::Tensor& y, std::span<const Index> mouth);

struct GeneratorTerms {
  double cycle = 0.0;
  double cls = 0.0;
  double viseme = 0.0;
  double mouth = 0.0;
  /// L_adv evaluated without the penalty.
  double adv = 0.0;
};

struct DiscriminatorTerms {
  double cls = 0.0;
  /// L_adv including lambda_gp * gp.
  double adv = 0.0;
};

double total_generator_loss(const GeneratorTerms& terms, const LossWeights& w);
double total_discriminator_loss(const DiscriminatorTerms& terms, const LossWeights& w);

}  // namespace rigstyle::loss
