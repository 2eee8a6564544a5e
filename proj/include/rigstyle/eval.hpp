#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "rigstyle/anim.hpp"
#include "rigstyle/nn.hpp"
#include "rigstyle/synth.hpp"
#include "rigstyle/training.hpp"

namespace rigstyle {

/// Generator inference on one whole clip (no windowing), clamped to [0,1].
RigClip transfer_style(const Generator& g, const ParamSet& params, const RigClip& clip, const StyleCode& target);

/// G(G(x, via), source) and its distance to x, ||x - c||_F / sqrt(L).
std::pair<RigClip, double> cycle_reconstruct(const Generator& g, const ParamSet& params, const RigClip& clip,
                                             const StyleCode& via);

/// Fraction of rows whose argmax (lowest index on ties) agrees.
double argmax_agreement(const Matrix& a, const Matrix& b);

/// Fraction of frames on which V's argmax agrees between x and y.
double viseme_agreement(const FrameClassifier& v, const ParamSet& params, const Matrix& x, const Matrix& y);

struct StyleOracle {
  FrameClassifier net;
  ParamSet params;
  std::vector<int> style_groups;

  static StyleOracle from(const ClassifierCheckpoint& checkpoint);
  StyleCode predict(const Matrix& frames) const { return predict_style(net, params, frames, style_groups); }
};

/// Fraction of clips whose predicted style equals the matching target in every group.
double style_accuracy(const StyleOracle& oracle, const std::vector<RigClip>& clips,
                      const std::vector<StyleCode>& targets);

/// One transfer of one held-out clip to one target style.
struct EvalRow {
  std::string clip_id;
  std::string target;
  double viseme_agreement = 0.0;
  double style_hit = 0.0;  // 1 if the oracle recovers the target
  double content_mse = 0.0;
  double baseline_mse = 0.0;  // source vs. the paired target-style clip, unmodified
  double cycle_norm = 0.0;
};

struct EvalReport {
  std::string model;
  std::vector<EvalRow> rows;
  double viseme_agreement = 0.0;
  double style_accuracy = 0.0;
  double content_mse = 0.0;
  double baseline_mse = 0.0;
  double cycle_norm = 0.0;
  std::uint64_t fingerprint = 0;

  /// Aggregates as arithmetic means of the rows; throws if any value is out of range.
  void aggregate();
  std::string to_text() const;
};

struct EvalInputs {
  const Generator* generator = nullptr;
  const ParamSet* generator_params = nullptr;
  const FrameClassifier* viseme = nullptr;
  const ParamSet* viseme_params = nullptr;
  const StyleOracle* oracle = nullptr;
  const OracleRecord* record = nullptr;
};

/// Every clip in `clips` transferred to every other style. Rows are in clip-id,
/// then target order.
EvalReport evaluate(const EvalInputs& inputs, const std::vector<RigClip>& clips, const std::string& model,
                    std::uint64_t fingerprint);

struct AblationVariant {
  std::string name;
  TrainingConfig config;
};

/// (a) no viseme term, (b) no viseme term but the cosine mouth term at the
/// viseme weight, (c) everything.
std::vector<AblationVariant> ablation_variants(const TrainingConfig& base);

struct AblationResult {
  std::vector<EvalReport> reports;  // a, b, c
  std::vector<std::filesystem::path> checkpoints;

  std::string to_text() const;
};

/// Trains all three variants from the same seed on `train` and evaluates them
/// on `heldout`. Checkpoints go to out_dir/<variant>.bin.
AblationResult run_ablation(const std::vector<RigClip>& train, const std::vector<RigClip>& heldout,
                            const OracleRecord& record, const ClassifierCheckpoint& viseme,
                            const StyleOracle& oracle, const TrainingConfig& base,
                            const std::filesystem::path& out_dir);

/// Trains one model from scratch (G and D fresh, V given).
TrainState train_model(const std::vector<RigClip>& train, const ClassifierCheckpoint& viseme,
                       const TrainingConfig& config, const FitOptions& options = {});

}  // namespace rigstyle
