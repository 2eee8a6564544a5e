#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rigstyle/anim.hpp"
#include "rigstyle/losses.hpp"
#include "rigstyle/nn.hpp"

namespace rigstyle {

struct TrainingConfig {
  loss::LossWeights weights;
  loss::ClassMode class_mode = loss::ClassMode::grouped_softmax;
  loss::VisemeTarget viseme_target = loss::VisemeTarget::soft;

  double learning_rate = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  Index batch_size = 32;
  Index window = 30;
  Index stride = 15;
  int epochs = 100;
  int n_critic = 5;
  std::uint64_t seed = 0;

  // On-the-fly augmentation: time stretch by a factor drawn from
  // [stretch_min, stretch_max] (then centre-cropped back to `window`), plus noise.
  double stretch_min = 1.0;
  double stretch_max = 1.0;
  double noise_sigma = 0.0;

  /// Write a checkpoint every this many epochs (0: only at the end).
  int checkpoint_every = 0;

  NetShape shape;
  /// Channels compared by the cosine mouth term.
  std::vector<Index> mouth_channels{4, 5, 6, 7, 8, 9};

  // Viseme classifier pretraining (also used for the style oracle).
  NetShape classifier_shape;
  int classifier_epochs = 20;
  double classifier_learning_rate = 1e-3;

  void validate() const;

  /// key = value lines; unknown keys are rejected.
  std::string to_text() const;
  static TrainingConfig from_text(const std::string& text);
  static TrainingConfig load(const std::filesystem::path& path);
  /// FNV-1a of to_text().
  std::uint64_t hash() const;
};

struct AdamState {
  ParamSet m;
  ParamSet v;
  std::int64_t t = 0;

  static AdamState zeros_like(const ParamSet& params) {
    return {params.zeros_like(), params.zeros_like(), 0};
  }
  bool operator==(const AdamState&) const = default;
};

void adam_step(ParamSet& params, const std::vector<Matrix>& grads, AdamState& state,
               double learning_rate, double beta1, double beta2, double eps);

/// One recorded optimization step. `total` is the weighted recombination of the
/// components under the run's loss weights.
struct HistoryRow {
  std::int64_t step = 0;
  char phase = 'D';  // 'D' or 'G'
  int epoch = 0;
  double cycle = 0.0;
  double cls = 0.0;
  double viseme = 0.0;
  double mouth = 0.0;
  double adv = 0.0;
  double gp = 0.0;
  double total = 0.0;

  bool operator==(const HistoryRow&) const = default;
};

/// Everything needed to continue a run. The random stream for every batch is a
/// pure function of (seed, epoch, batch), so the position below is the whole
/// random state.
struct TrainState {
  ModelDims dims;
  NetShape shape;
  NetShape classifier_shape;
  ParamSet generator;
  ParamSet discriminator;
  ParamSet viseme;
  AdamState generator_opt;
  AdamState discriminator_opt;
  int epoch = 0;             // epochs completed
  Index batch_in_epoch = 0;  // batches completed within `epoch`
  std::int64_t step = 0;     // discriminator steps completed
  std::uint64_t seed = 0;
  std::string config_text;
  std::vector<HistoryRow> history;
};

/// Fresh state: G and D initialised from `config.seed`, V taken as given.
TrainState init_state(const ModelDims& dims, const TrainingConfig& config, ParamSet viseme);

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);
void write_history_csv(const std::vector<HistoryRow>& history, const std::filesystem::path& path);

/// Networks for a given state's dimensions.
struct Networks {
  Generator generator;
  Discriminator discriminator;
  FrameClassifier viseme;

  explicit Networks(const TrainState& state);
  Networks(const ModelDims& dims, const NetShape& shape, const NetShape& classifier_shape);
};

struct DiscriminatorStepResult {
  loss::DiscriminatorTerms terms;
  double gp = 0.0;
  double total = 0.0;
};

struct GeneratorStepResult {
  loss::GeneratorTerms terms;
  double total = 0.0;
};

/// Uniform over the valid codes other than `source`.
StyleCode sample_target_style(const StyleCode& source, Rng& rng);

/// One Adam step on D. Fakes are G(x, s') for sampled targets, held constant.
DiscriminatorStepResult discriminator_step(const Networks& nets, TrainState& state,
                                           const TrainingConfig& config, const Batch& batch,
                                           Rng& rng);
/// One Adam step on G: cycle, style classification on fakes, viseme and
/// (optionally) cosine mouth terms and the critic score of the fakes.
GeneratorStepResult generator_step(const Networks& nets, TrainState& state,
                                   const TrainingConfig& config, const Batch& batch, Rng& rng);

struct FitOptions {
  /// Checkpoints go to dir/checkpoint_epoch<N>.bin and dir/final.bin; empty: none.
  std::filesystem::path checkpoint_dir;
  /// Stop (and return) after this many batches in this call; used to test resume.
  std::optional<std::int64_t> max_batches;
  /// Called after every epoch with the state.
  std::function<void(const TrainState&)> on_epoch;
};

/// Windows of every clip, stride `config.stride`; all clips must carry visemes
/// only when the caller needs them.
std::vector<Window> training_windows(const std::vector<RigClip>& clips, const TrainingConfig& config);

/// Runs (or continues) adversarial training until `config.epochs` epochs are done.
/// Throws NumericalError on a non-finite loss; the last written checkpoint stays.
void fit(const std::vector<Window>& windows, const TrainingConfig& config, TrainState& state,
         const FitOptions& options = {});

/// Per-batch random stream.
Rng batch_rng(std::uint64_t seed, int epoch, Index batch, std::uint64_t purpose);

struct ClassifierResult {
  ParamSet params;
  double validation_accuracy = 0.0;
  std::vector<std::string> validation_clips;
  std::vector<double> epoch_losses;
};

/// Trains V on the clips' viseme tracks; 90/10 split by clip.
ClassifierResult pretrain_viseme_classifier(const std::vector<RigClip>& clips,
                                            const TrainingConfig& config);

/// Per-frame style classifier used only for evaluation; 90/10 split by clip.
/// Validation accuracy is the clip-level rate of exact style recovery.
ClassifierResult train_style_oracle(const std::vector<RigClip>& clips, const TrainingConfig& config);

/// Per-group argmax on every frame, then a majority vote over frames per group
/// (ties go to the lowest option).
StyleCode predict_style(const FrameClassifier& oracle, const ParamSet& params, const Matrix& frames,
                        const std::vector<int>& style_groups);

/// Index of the largest entry of each row, lowest index on ties.
std::vector<Index> argmax_rows(const Matrix& m);

/// A standalone classifier (viseme classifier or style oracle).
struct ClassifierCheckpoint {
  std::string kind;  // "viseme" or "style_oracle"
  Index channels = 0;
  Index classes = 0;
  std::vector<int> style_groups;  // style oracle only
  NetShape shape;
  ParamSet params;
  double validation_accuracy = 0.0;

  FrameClassifier network() const { return FrameClassifier(channels, classes, shape); }
};

void save_classifier(const ClassifierCheckpoint& checkpoint, const std::filesystem::path& path);
ClassifierCheckpoint load_classifier(const std::filesystem::path& path);

}  // namespace rigstyle
