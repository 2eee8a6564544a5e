#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "rigstyle/error.hpp"
#include "rigstyle/eval.hpp"
#include "rigstyle/synth.hpp"
#include "rigstyle/training.hpp"
#include "rigstyle/viseme.hpp"

namespace fs = std::filesystem;
using namespace rigstyle;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string checkpoint;

  TrainingConfig training() const {
    TrainingConfig c = config.empty() ? TrainingConfig{} : TrainingConfig::load(config);
    if (seed) c.seed = *seed;
    c.validate();
    return c;
  }
  const std::string& need_checkpoint() const {
    if (checkpoint.empty()) throw ValidationError("--checkpoint is required");
    return checkpoint;
  }
};

// "1-0" -> StyleCode({2,2}, {1,0}) for a model with groups {2,2}
StyleCode parse_style(const std::string& text, const std::vector<int>& groups,
                      const std::vector<std::string>& names = {}) {
  std::vector<int> values;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, '-')) {
    try {
      std::size_t used = 0;
      values.push_back(std::stoi(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw ValidationError("style '" + text + "' is not a dash-separated list of option indices");
    }
  }
  if (values.size() != groups.size())
    throw ValidationError("style '" + text + "' has " + std::to_string(values.size()) + " groups, the model has " +
                          std::to_string(groups.size()));
  return StyleCode(groups, values, names.size() == groups.size() ? names : std::vector<std::string>{});
}

struct Corpus {
  std::vector<RigClip> clips;
  std::optional<OracleRecord> record;
};

Corpus load_corpus(const std::string& dir) {
  Corpus c{load_clips(dir), load_oracle_record(dir)};
  if (c.clips.empty()) throw ValidationError("no clips found in " + dir);
  return c;
}

// Training clips: the non-held-out contents when the corpus carries an oracle record.
std::vector<RigClip> training_clips(const Corpus& c, int heldout) {
  if (!c.record || heldout == 0) return c.clips;
  return split_by_content(c.clips, *c.record, heldout).train;
}

CorpusSplit evaluation_split(const Corpus& c, int heldout) {
  if (!c.record) throw ValidationError("evaluation needs a synthetic corpus with an oracle record");
  if (heldout < 1) throw ValidationError("evaluation needs at least one held-out content");
  return split_by_content(c.clips, *c.record, heldout);
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream os(path);
  if (!os) throw ValidationError("cannot write " + path);
  os << text;
}

void print(const char* fmt, double v) { std::printf(fmt, v); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rig-control style transfer"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand
  Globals g;
  std::uint64_t seed_value = 0;
  app.add_option("--config", g.config, "Training configuration (key = value lines)")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed_value, "Seed; overrides the configuration's seed");
  app.add_option("--checkpoint", g.checkpoint, "Model checkpoint to read or write");
  int heldout = 2;
  app.add_option("--heldout-contents", heldout, "Contents held out of training for evaluation")
      ->check(CLI::NonNegativeNumber);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate the synthetic corpus");
  std::string synth_out;
  int clips_per_style = 10;
  Index length = 600;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--clips-per-style", clips_per_style)->check(CLI::PositiveNumber);
  synth->add_option("--length", length)->check(CLI::PositiveNumber);

  // classifiers
  std::string data_dir, classifier_out;
  auto* pretrain = app.add_subcommand("pretrain-visemes", "Train the frame-wise viseme classifier");
  pretrain->add_option("--data", data_dir, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  pretrain->add_option("--out", classifier_out, "Classifier output file")->required();
  auto* oracle_cmd = app.add_subcommand("train-oracle", "Train the evaluation-only style oracle");
  oracle_cmd->add_option("--data", data_dir, "Corpus directory (use a corpus disjoint from training)")
      ->required()
      ->check(CLI::ExistingDirectory);
  oracle_cmd->add_option("--out", classifier_out, "Oracle output file")->required();

  // train
  auto* train = app.add_subcommand("train", "Adversarial training; writes --checkpoint");
  std::string visemes_path, checkpoint_dir, history_path;
  bool resume = false;
  train->add_option("--data", data_dir, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--visemes", visemes_path, "Pretrained viseme classifier")->required()->check(CLI::ExistingFile);
  train->add_option("--checkpoint-dir", checkpoint_dir, "Directory for periodic checkpoints");
  train->add_option("--history", history_path, "Loss history CSV");
  train->add_flag("--resume", resume, "Continue from --checkpoint if it exists");

  // transfer / cycle
  std::string in_path, out_path, style_text;
  auto* transfer = app.add_subcommand("transfer", "Transfer one clip to a target style");
  transfer->add_option("--in", in_path, "Input curve file")->required()->check(CLI::ExistingFile);
  transfer->add_option("--style", style_text, "Target style, option per group, e.g. 1-0")->required();
  transfer->add_option("--out", out_path, "Output curve file")->required();
  auto* cycle = app.add_subcommand("cycle", "Round trip through a style and back; prints the cycle norm");
  cycle->add_option("--in", in_path, "Input curve file")->required()->check(CLI::ExistingFile);
  cycle->add_option("--via", style_text, "Intermediate style")->required();
  cycle->add_option("--out", out_path, "Reconstructed curve file");

  // eval / ablate
  std::string oracle_path, report_path, out_dir;
  auto* eval = app.add_subcommand("eval", "Evaluate --checkpoint on the held-out clips");
  eval->add_option("--data", data_dir, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--visemes", visemes_path)->required()->check(CLI::ExistingFile);
  eval->add_option("--oracle", oracle_path)->required()->check(CLI::ExistingFile);
  eval->add_option("--out", report_path, "Report file (default: stdout)");
  auto* ablate = app.add_subcommand("ablate", "Train and evaluate the three loss variants");
  ablate->add_option("--data", data_dir, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  ablate->add_option("--visemes", visemes_path)->required()->check(CLI::ExistingFile);
  ablate->add_option("--oracle", oracle_path)->required()->check(CLI::ExistingFile);
  ablate->add_option("--out-dir", out_dir, "Checkpoints and report.txt")->required();

  // phonemes
  double fps = 60.0;
  std::string domain = "log_prob";
  auto* resample = app.add_subcommand("resample-phonemes", "Resample a phoneme posterior track to the animation rate");
  resample->add_option("--in", in_path)->required()->check(CLI::ExistingFile);
  resample->add_option("--out", out_path)->required();
  resample->add_option("--fps", fps)->check(CLI::PositiveNumber);
  resample->add_option("--domain", domain)->check(CLI::IsMember({"log_prob", "probability"}));
  auto* map_cmd = app.add_subcommand("map-visemes", "Phoneme posteriors to a per-frame viseme track");
  std::string map_path, clip_in, clip_out;
  int classes = 16;
  map_cmd->add_option("--in", in_path, "Phoneme track (already at the animation rate)")
      ->required()
      ->check(CLI::ExistingFile);
  map_cmd->add_option("--map", map_path, "token,class lines")->required()->check(CLI::ExistingFile);
  map_cmd->add_option("--out", out_path, "Viseme file")->required();
  map_cmd->add_option("--fps", fps)->check(CLI::PositiveNumber);
  map_cmd->add_option("--classes", classes)->check(CLI::PositiveNumber);
  map_cmd->add_option("--clip", clip_in, "Attach the track to this clip")->check(CLI::ExistingFile);
  map_cmd->add_option("--clip-out", clip_out, "Where to write the clip with the track attached");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  if (*seed_opt) g.seed = seed_value;

  try {
    if (synth->parsed()) {
      auto cfg = SyntheticCorpusConfig::defaults(g.seed.value_or(g.training().seed));
      cfg.clips_per_style = clips_per_style;
      cfg.length = length;
      auto corpus = generate_corpus(cfg);
      save_corpus(corpus, synth_out);
      std::printf("wrote %zu clips to %s\n", corpus.clips.size(), synth_out.c_str());
    } else if (pretrain->parsed() || oracle_cmd->parsed()) {
      const TrainingConfig config = g.training();
      Corpus corpus = load_corpus(data_dir);
      ClassifierCheckpoint c;
      c.channels = corpus.clips.front().channels();
      c.shape = config.classifier_shape;
      ClassifierResult r;
      if (pretrain->parsed()) {
        if (!corpus.clips.front().visemes) throw ValidationError("clips carry no viseme tracks");
        c.kind = "viseme";
        c.classes = corpus.clips.front().visemes->classes();
        r = pretrain_viseme_classifier(training_clips(corpus, heldout), config);
      } else {
        c.kind = "style_oracle";
        c.style_groups = corpus.clips.front().style.group_sizes();
        c.classes = corpus.clips.front().style.width();
        r = train_style_oracle(corpus.clips, config);
      }
      c.params = std::move(r.params);
      c.validation_accuracy = r.validation_accuracy;
      save_classifier(c, classifier_out);
      print("validation_accuracy = %.6f\n", r.validation_accuracy);
    } else if (train->parsed()) {
      const TrainingConfig config = g.training();
      const std::string& out = g.need_checkpoint();
      Corpus corpus = load_corpus(data_dir);
      auto clips = training_clips(corpus, heldout);
      ClassifierCheckpoint v = load_classifier(visemes_path);
      FitOptions options;
      if (!checkpoint_dir.empty()) {
        fs::create_directories(checkpoint_dir);
        options.checkpoint_dir = checkpoint_dir;
      }
      options.on_epoch = [&](const TrainState& s) {
        std::fprintf(stderr, "epoch %d/%d\n", s.epoch, config.epochs);
      };
      TrainState state;
      if (resume && fs::exists(out)) {
        state = load_checkpoint(out);
        fit(training_windows(clips, config), config, state, options);
      } else {
        state = train_model(clips, v, config, options);
      }
      save_checkpoint(state, out);
      if (!history_path.empty()) write_history_csv(state.history, history_path);
      std::printf("epochs = %d\nsteps = %lld\n", state.epoch, static_cast<long long>(state.step));
    } else if (transfer->parsed() || cycle->parsed()) {
      TrainState state = load_checkpoint(g.need_checkpoint());
      Networks nets(state);
      RigClip clip = load_clip(in_path);
      StyleCode style = parse_style(style_text, state.dims.style_groups, clip.style.group_names());
      if (transfer->parsed()) {
        save_clip(transfer_style(nets.generator, state.generator, clip, style), out_path);
      } else {
        auto [back, norm] = cycle_reconstruct(nets.generator, state.generator, clip, style);
        if (!out_path.empty()) save_clip(back, out_path);
        print("cycle_norm = %.10g\n", norm);
      }
    } else if (eval->parsed()) {
      TrainState state = load_checkpoint(g.need_checkpoint());
      Networks nets(state);
      Corpus corpus = load_corpus(data_dir);
      auto split = evaluation_split(corpus, heldout);
      ClassifierCheckpoint v = load_classifier(visemes_path);
      StyleOracle oracle = StyleOracle::from(load_classifier(oracle_path));
      FrameClassifier vnet = v.network();
      EvalInputs in{&nets.generator, &state.generator, &vnet, &v.params, &oracle, &*corpus.record};
      TrainingConfig config = TrainingConfig::from_text(state.config_text);
      auto report = evaluate(in, split.heldout, fs::path(g.checkpoint).stem().string(), config.hash());
      write_text(report_path, report.to_text());
    } else if (ablate->parsed()) {
      const TrainingConfig config = g.training();
      Corpus corpus = load_corpus(data_dir);
      auto split = evaluation_split(corpus, heldout);
      ClassifierCheckpoint v = load_classifier(visemes_path);
      StyleOracle oracle = StyleOracle::from(load_classifier(oracle_path));
      auto result = run_ablation(split.train, split.heldout, *corpus.record, v, oracle, config, out_dir);
      write_text((fs::path(out_dir) / "report.txt").string(), result.to_text());
      for (const auto& r : result.reports)
        std::printf("%s viseme_agreement = %.6f\n", r.model.c_str(), r.viseme_agreement);
    } else if (resample->parsed()) {
      auto d = domain == "probability" ? ResampleDomain::probability : ResampleDomain::log_prob;
      save_phoneme_track(resample_track(load_phoneme_track(in_path), fps, d), out_path);
    } else if (map_cmd->parsed()) {
      VisemeTrack track = phonemes_to_visemes(load_phoneme_track(in_path), load_viseme_map(map_path, classes), fps);
      save_viseme_file(track.values, out_path);
      if (!clip_in.empty()) {
        if (clip_out.empty()) throw ValidationError("--clip needs --clip-out");
        save_clip(attach_viseme_track(load_clip(clip_in), track), clip_out);
      }
    }
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return 2;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
