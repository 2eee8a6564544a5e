#include "rigstyle/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "rigstyle/error.hpp"

namespace rigstyle {

namespace {

void check_clip(const Generator& g, const RigClip& clip, const StyleCode& style) {
  clip.validate();
  if (clip.channels() != g.dims().channels)
    throw ValidationError("clip " + clip.clip_id + " has " + std::to_string(clip.channels()) +
                          " channels, the model expects " + std::to_string(g.dims().channels));
  if (style.group_sizes() != g.dims().style_groups)
    throw ValidationError("style " + style.to_string() + " does not fit the model's style groups");
  if (clip.style.group_sizes() != g.dims().style_groups)
    throw ValidationError("clip " + clip.clip_id + " style does not fit the model's style groups");
}

Matrix style_row(const StyleCode& s) {
  auto bits = s.bits();
  Matrix m(1, static_cast<Index>(bits.size()));
  for (std::size_t i = 0; i < bits.size(); ++i) m(0, static_cast<Index>(i)) = bits[i];
  return m;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void check_rate(double v, const char* what) {
  if (!std::isfinite(v) || v < 0.0 || v > 1.0)
    throw NumericalError(std::string(what) + " is outside [0,1]");
}

void check_nonneg(double v, const char* what) {
  if (!std::isfinite(v) || v < 0.0) throw NumericalError(std::string(what) + " is not a finite non-negative value");
}

}  // namespace

RigClip transfer_style(const Generator& g, const ParamSet& params, const RigClip& clip, const StyleCode& target) {
  check_clip(g, clip, target);
  RigClip out = clip;
  out.clip_id = clip.clip_id + "_to_" + target.to_string();
  out.style = StyleCode(target.group_sizes(), target.values(), clip.style.group_names());
  out.frames = generator_forward(g, params, clip.frames, 1, style_row(target), Mode::eval)
                   .cwiseMax(0.0)
                   .cwiseMin(1.0);
  return out;
}

std::pair<RigClip, double> cycle_reconstruct(const Generator& g, const ParamSet& params, const RigClip& clip,
                                             const StyleCode& via) {
  RigClip there = transfer_style(g, params, clip, via);
  RigClip back = transfer_style(g, params, there, clip.style);
  back.clip_id = clip.clip_id + "_cycle_" + via.to_string();
  const double norm = (clip.frames - back.frames).norm() / std::sqrt(static_cast<double>(clip.length()));
  return {std::move(back), norm};
}

double argmax_agreement(const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows() || x.cols() != y.cols()) throw ValidationError("agreement: shapes differ");
  if (x.rows() == 0) throw ValidationError("agreement: no frames");
  auto a = argmax_rows(x);
  auto b = argmax_rows(y);
  Index same = 0;
  for (std::size_t t = 0; t < a.size(); ++t) same += a[t] == b[t];
  return static_cast<double>(same) / static_cast<double>(a.size());
}

double viseme_agreement(const FrameClassifier& v, const ParamSet& params, const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows() || x.cols() != y.cols()) throw ValidationError("viseme agreement: shapes differ");
  if (x.rows() == 0) throw ValidationError("viseme agreement: empty clip");
  return argmax_agreement(classifier_forward(v, params, x, 1, Mode::eval),
                          classifier_forward(v, params, y, 1, Mode::eval));
}

StyleOracle StyleOracle::from(const ClassifierCheckpoint& c) {
  if (c.kind != "style_oracle") throw ValidationError("checkpoint is not a style oracle");
  return {c.network(), c.params, c.style_groups};
}

double style_accuracy(const StyleOracle& oracle, const std::vector<RigClip>& clips,
                      const std::vector<StyleCode>& targets) {
  if (clips.empty()) throw ValidationError("style accuracy needs at least one clip");
  if (clips.size() != targets.size()) throw ValidationError("one target per clip expected");
  if (oracle.params.size() == 0) throw ValidationError("style oracle is untrained");
  Index hits = 0;
  for (std::size_t i = 0; i < clips.size(); ++i) hits += oracle.predict(clips[i].frames) == targets[i];
  return static_cast<double>(hits) / static_cast<double>(clips.size());
}

void EvalReport::aggregate() {
  if (rows.empty()) throw ValidationError("report has no rows");
  double n = static_cast<double>(rows.size());
  viseme_agreement = style_accuracy = content_mse = baseline_mse = cycle_norm = 0.0;
  for (const auto& r : rows) {
    check_rate(r.viseme_agreement, "viseme agreement");
    check_rate(r.style_hit, "style accuracy");
    check_nonneg(r.content_mse, "content MSE");
    check_nonneg(r.baseline_mse, "baseline MSE");
    check_nonneg(r.cycle_norm, "cycle norm");
    viseme_agreement += r.viseme_agreement;
    style_accuracy += r.style_hit;
    content_mse += r.content_mse;
    baseline_mse += r.baseline_mse;
    cycle_norm += r.cycle_norm;
  }
  viseme_agreement /= n;
  style_accuracy /= n;
  content_mse /= n;
  baseline_mse /= n;
  cycle_norm /= n;
}

std::string EvalReport::to_text() const {
  std::ostringstream os;
  char fp[24];
  std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(fingerprint));
  os << "[model " << model << "]\n";
  os << "clip,target,viseme_agreement,style_hit,content_mse,baseline_mse,cycle_norm\n";
  for (const auto& r : rows)
    os << r.clip_id << ',' << r.target << ',' << fmt(r.viseme_agreement) << ',' << fmt(r.style_hit) << ','
       << fmt(r.content_mse) << ',' << fmt(r.baseline_mse) << ',' << fmt(r.cycle_norm) << '\n';
  os << "\n";
  // Lip sync is measured as agreement of the frozen viseme classifier, not with a video-based sync model.
  os << "model = " << model << '\n';
  os << "fingerprint = " << fp << '\n';
  os << "rows = " << rows.size() << '\n';
  os << "viseme_agreement = " << fmt(viseme_agreement) << '\n';
  os << "style_accuracy = " << fmt(style_accuracy) << '\n';
  os << "content_mse = " << fmt(content_mse) << '\n';
  os << "baseline_content_mse = " << fmt(baseline_mse) << '\n';
  os << "cycle_norm = " << fmt(cycle_norm) << '\n';
  return os.str();
}

EvalReport evaluate(const EvalInputs& in, const std::vector<RigClip>& clips, const std::string& model,
                    std::uint64_t fingerprint) {
  if (!in.generator || !in.generator_params || !in.viseme || !in.viseme_params || !in.oracle || !in.record)
    throw ValidationError("evaluation inputs are incomplete");
  if (clips.empty()) throw ValidationError("nothing to evaluate");
  std::vector<const RigClip*> sorted;
  for (const auto& c : clips) sorted.push_back(&c);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->clip_id < b->clip_id; });

  EvalReport report;
  report.model = model;
  report.fingerprint = fingerprint;
  const auto& content = in.record->content_channels;
  for (const RigClip* clip : sorted) {
    for (const auto& target : StyleCode::enumerate(clip->style.group_sizes())) {
      if (target == clip->style) continue;
      EvalRow row;
      row.clip_id = clip->clip_id;
      row.target = target.to_string();
      RigClip moved = transfer_style(*in.generator, *in.generator_params, *clip, target);
      row.viseme_agreement = viseme_agreement(*in.viseme, *in.viseme_params, clip->frames, moved.frames);
      row.style_hit = in.oracle->predict(moved.frames) == target ? 1.0 : 0.0;
      auto paired_id = in.record->paired_clip(clip->clip_id, target);
      if (!paired_id) throw ValidationError("no paired clip for " + clip->clip_id + " in " + row.target);
      auto paired = std::find_if(clips.begin(), clips.end(), [&](const RigClip& c) { return c.clip_id == *paired_id; });
      if (paired == clips.end()) throw ValidationError("paired clip " + *paired_id + " is not among the evaluated clips");
      row.content_mse = oracle_content_error(moved.frames, paired->frames, content);
      row.baseline_mse = oracle_content_error(clip->frames, paired->frames, content);
      row.cycle_norm = cycle_reconstruct(*in.generator, *in.generator_params, *clip, target).second;
      report.rows.push_back(std::move(row));
    }
  }
  report.aggregate();
  return report;
}

std::vector<AblationVariant> ablation_variants(const TrainingConfig& base) {
  AblationVariant a{"no_viseme", base}, b{"cosine_mouth", base}, c{"full", base};
  const double viseme_weight = base.weights.viseme > 0.0 ? base.weights.viseme : loss::LossWeights{}.viseme;
  a.config.weights.viseme = 0.0;
  a.config.weights.mouth = 0.0;
  b.config.weights.viseme = 0.0;
  b.config.weights.mouth = viseme_weight;
  c.config.weights.viseme = viseme_weight;
  c.config.weights.mouth = 0.0;
  return {a, b, c};
}

std::string AblationResult::to_text() const {
  std::ostringstream os;
  os << "variant,viseme_agreement,style_accuracy,content_mse,baseline_content_mse,cycle_norm\n";
  for (const auto& r : reports)
    os << r.model << ',' << fmt(r.viseme_agreement) << ',' << fmt(r.style_accuracy) << ',' << fmt(r.content_mse)
       << ',' << fmt(r.baseline_mse) << ',' << fmt(r.cycle_norm) << '\n';
  os << '\n';
  for (const auto& r : reports) os << r.to_text() << '\n';
  return os.str();
}

TrainState train_model(const std::vector<RigClip>& train, const ClassifierCheckpoint& viseme,
                       const TrainingConfig& config, const FitOptions& options) {
  if (train.empty()) throw ValidationError("no training clips");
  if (viseme.kind != "viseme") throw ValidationError("checkpoint is not a viseme classifier");
  if (!(viseme.shape == config.classifier_shape))
    throw ValidationError("viseme classifier shape differs from the configured classifier shape");
  ModelDims dims;
  dims.channels = train.front().channels();
  dims.style_groups = train.front().style.group_sizes();
  dims.visemes = viseme.classes;
  if (viseme.channels != dims.channels) throw ValidationError("viseme classifier channel count differs from the clips");
  TrainState state = init_state(dims, config, viseme.params);
  fit(training_windows(train, config), config, state, options);
  return state;
}

AblationResult run_ablation(const std::vector<RigClip>& train, const std::vector<RigClip>& heldout,
                            const OracleRecord& record, const ClassifierCheckpoint& viseme,
                            const StyleOracle& oracle, const TrainingConfig& base,
                            const std::filesystem::path& out_dir) {
  AblationResult result;
  std::filesystem::create_directories(out_dir);
  const FrameClassifier vnet = viseme.network();
  for (const auto& variant : ablation_variants(base)) {
    TrainState state = train_model(train, viseme, variant.config);
    auto path = out_dir / (variant.name + ".bin");
    save_checkpoint(state, path);
    result.checkpoints.push_back(path);
    Networks nets(state);
    EvalInputs in{&nets.generator, &state.generator, &vnet, &viseme.params, &oracle, &record};
    result.reports.push_back(evaluate(in, heldout, variant.name, variant.config.hash()));
  }
  return result;
}

}  // namespace rigstyle
