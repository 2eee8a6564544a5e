#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "rigstyle/error.hpp"
#include "rigstyle/eval.hpp"
#include "rigstyle/synth.hpp"
#include "rigstyle/training.hpp"
#include "rigstyle/viseme.hpp"

namespace py = pybind11;
using namespace rigstyle;

namespace {

// A trained generator loaded from a checkpoint, ready for inference.
class Model {
 public:
  explicit Model(const std::filesystem::path& path) : state_(load_checkpoint(path)), nets_(state_) {}

  RigClip transfer(const RigClip& clip, const StyleCode& target) const {
    return transfer_style(nets_.generator, state_.generator, clip, target);
  }
  std::pair<RigClip, double> cycle(const RigClip& clip, const StyleCode& via) const {
    return cycle_reconstruct(nets_.generator, state_.generator, clip, via);
  }
  std::vector<int> style_groups() const { return state_.dims.style_groups; }
  Index channels() const { return state_.dims.channels; }
  int epoch() const { return state_.epoch; }
  std::string config_text() const { return state_.config_text; }

 private:
  TrainState state_;
  Networks nets_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Rig-control style transfer with a viseme-preserving loss";

  auto base = py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);
  py::register_exception<LoadError>(m, "LoadError", base.ptr());

  py::class_<StyleCode>(m, "StyleCode")
      .def(py::init<std::vector<int>, std::vector<int>, std::vector<std::string>>(), py::arg("group_sizes"),
           py::arg("values"), py::arg("group_names") = std::vector<std::string>{})
      .def_static("enumerate", &StyleCode::enumerate)
      .def_property_readonly("group_sizes", &StyleCode::group_sizes)
      .def_property_readonly("values", &StyleCode::values)
      .def_property_readonly("group_names", &StyleCode::group_names)
      .def("bits", &StyleCode::bits)
      .def("__eq__", &StyleCode::operator==)
      .def("__str__", &StyleCode::to_string)
      .def("__repr__", [](const StyleCode& s) { return "StyleCode(" + s.to_string() + ")"; });

  py::class_<VisemeTrack>(m, "VisemeTrack")
      .def(py::init<>())
      .def_readwrite("values", &VisemeTrack::values)
      .def_readwrite("fps", &VisemeTrack::fps);

  py::class_<RigClip>(m, "RigClip")
      .def(py::init<>())
      .def_readwrite("clip_id", &RigClip::clip_id)
      .def_readwrite("control_names", &RigClip::control_names)
      .def_readwrite("frames", &RigClip::frames)
      .def_readwrite("fps", &RigClip::fps)
      .def_readwrite("style", &RigClip::style)
      .def_readwrite("visemes", &RigClip::visemes)
      .def_property_readonly("length", &RigClip::length)
      .def_property_readonly("channels", &RigClip::channels)
      .def("validate", &RigClip::validate);

  m.def("load_clip", &load_clip, py::arg("path"));
  m.def("save_clip", &save_clip, py::arg("clip"), py::arg("path"));
  m.def("time_stretch", [](const Matrix& x, double factor) { return time_stretch(x, factor); }, py::arg("data"),
        py::arg("factor"));
  m.def(
      "window_starts",
      [](const RigClip& clip, Index window, Index stride) {
        std::vector<Index> starts;
        for (const auto& w : extract_windows(clip, window, stride)) starts.push_back(w.start_frame);
        return starts;
      },
      py::arg("clip"), py::arg("window") = 30, py::arg("stride") = 15);

  py::class_<PhonemeTrack>(m, "PhonemeTrack")
      .def(py::init<>())
      .def_readwrite("hop", &PhonemeTrack::hop)
      .def_readwrite("values", &PhonemeTrack::values)
      .def_readwrite("tokens", &PhonemeTrack::tokens);
  py::class_<VisemeMap>(m, "VisemeMap")
      .def(py::init<std::vector<std::string>, std::vector<int>, int>(), py::arg("tokens"), py::arg("classes"),
           py::arg("class_count") = 16)
      .def("class_of", &VisemeMap::class_of)
      .def_property_readonly("class_count", &VisemeMap::class_count);
  py::enum_<ResampleDomain>(m, "ResampleDomain")
      .value("log_prob", ResampleDomain::log_prob)
      .value("probability", ResampleDomain::probability);
  m.def("resample_track", &resample_track, py::arg("track"), py::arg("target_fps") = 60.0,
        py::arg("domain") = ResampleDomain::log_prob);
  m.def("phonemes_to_visemes", &phonemes_to_visemes, py::arg("track"), py::arg("map"), py::arg("fps") = 60.0);
  m.def("load_phoneme_track", &load_phoneme_track);
  m.def("load_viseme_map", &load_viseme_map, py::arg("path"), py::arg("class_count") = 16);

  m.def(
      "generate_corpus",
      [](std::uint64_t seed, int clips_per_style, Index length) {
        auto cfg = SyntheticCorpusConfig::defaults(seed);
        cfg.clips_per_style = clips_per_style;
        cfg.length = length;
        return generate_corpus(cfg).clips;
      },
      py::arg("seed") = 7, py::arg("clips_per_style") = 10, py::arg("length") = 600,
      "Clips of the default synthetic corpus.");
  m.def(
      "save_corpus",
      [](const std::filesystem::path& dir, std::uint64_t seed, int clips_per_style, Index length) {
        auto cfg = SyntheticCorpusConfig::defaults(seed);
        cfg.clips_per_style = clips_per_style;
        cfg.length = length;
        save_corpus(generate_corpus(cfg), dir);
      },
      py::arg("dir"), py::arg("seed") = 7, py::arg("clips_per_style") = 10, py::arg("length") = 600);
  m.def("load_clips", &load_clips, py::arg("dir"));

  m.def(
      "config_from_text", [](const std::string& text) { return TrainingConfig::from_text(text).to_text(); },
      py::arg("text"), "Validates a configuration and returns it with every key filled in.");

  m.def(
      "pretrain_visemes",
      [](const std::vector<RigClip>& clips, const std::string& config_text, const std::filesystem::path& out) {
        if (clips.empty() || !clips.front().visemes) throw ValidationError("clips carry no viseme tracks");
        TrainingConfig config = TrainingConfig::from_text(config_text);
        ClassifierResult r = pretrain_viseme_classifier(clips, config);
        ClassifierCheckpoint c{"viseme", clips.front().channels(), clips.front().visemes->classes(), {},
                               config.classifier_shape, std::move(r.params), r.validation_accuracy};
        save_classifier(c, out);
        return r.validation_accuracy;
      },
      py::arg("clips"), py::arg("config_text"), py::arg("out"),
      "Trains the viseme classifier, writes it to `out` and returns its validation accuracy.",
      py::call_guard<py::gil_scoped_release>());
  m.def(
      "train",
      [](const std::vector<RigClip>& clips, const std::filesystem::path& visemes, const std::string& config_text,
         const std::filesystem::path& out) {
        TrainState s = train_model(clips, load_classifier(visemes), TrainingConfig::from_text(config_text));
        save_checkpoint(s, out);
      },
      py::arg("clips"), py::arg("visemes"), py::arg("config_text"), py::arg("out"),
      py::call_guard<py::gil_scoped_release>());

  py::class_<Model>(m, "Model")
      .def(py::init<const std::filesystem::path&>(), py::arg("checkpoint"))
      .def("transfer", &Model::transfer, py::arg("clip"), py::arg("target"))
      .def("cycle", &Model::cycle, py::arg("clip"), py::arg("via"))
      .def_property_readonly("style_groups", &Model::style_groups)
      .def_property_readonly("channels", &Model::channels)
      .def_property_readonly("epoch", &Model::epoch)
      .def_property_readonly("config_text", &Model::config_text);
}
