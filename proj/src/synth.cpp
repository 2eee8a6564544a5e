#include "rigstyle/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "rigstyle/error.hpp"

namespace rigstyle {

namespace fs = std::filesystem;

namespace {

constexpr int kMinDwell = 5;
constexpr int kMaxDwell = 15;
constexpr double kMinPoseDistance = 0.3;

// Centred moving average with edge clamping.
Matrix moving_average(const Matrix& x, int radius) {
  if (radius <= 0) return x;
  const Index frames = x.rows();
  Matrix out(frames, x.cols());
  for (Index t = 0; t < frames; ++t) {
    out.row(t).setZero();
    for (int k = -radius; k <= radius; ++k) {
      Index s = std::clamp<Index>(t + k, 0, frames - 1);
      out.row(t) += x.row(s);
    }
    out.row(t) /= static_cast<double>(2 * radius + 1);
  }
  return out;
}

Rng stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  return Rng(seq);
}

std::string clip_name(int content, const StyleCode& style) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "c%03d_s%s", content, style.to_string().c_str());
  return buf;
}

void check_indices(const std::vector<Index>& idx, Index channels, const char* what) {
  for (Index i : idx)
    if (i < 0 || i >= channels)
      throw ValidationError(std::string(what) + " channel " + std::to_string(i) + " out of range");
}

}  // namespace

Matrix SyntheticStyleSpec::apply(const Matrix& content) const {
  if (scale.size() != content.cols() || offset.size() != content.cols())
    throw ValidationError("style transform width does not match the content");
  Matrix out = moving_average(content, smoothing);
  for (Index c = 0; c < out.cols(); ++c)
    out.col(c) = ((out.col(c).array() - 0.5) * scale(c) + 0.5 + offset(c)).matrix();
  return out;
}

bool SyntheticStyleSpec::is_identity() const {
  return smoothing == 0 && (scale.array() == 1.0).all() && (offset.array() == 0.0).all();
}

void SyntheticCorpusConfig::validate() const {
  if (styles.empty()) throw ValidationError("corpus needs at least one style");
  if (clips_per_style < 1 || length < 2 || channels < 1 || visemes < 1)
    throw ValidationError("corpus sizes must be positive");
  if (!(fps > 0.0)) throw ValidationError("corpus fps must be positive");
  check_indices(content_channels, channels, "content");
  check_indices(mouth_channels, channels, "mouth");
  if (content_channels.empty() || mouth_channels.empty())
    throw ValidationError("content and mouth channel sets must be non-empty");
  std::set<Index> content(content_channels.begin(), content_channels.end());
  for (Index m : mouth_channels)
    if (content.count(m)) throw ValidationError("content and mouth channels must be disjoint");
  const auto& groups = styles.front().style.group_sizes();
  std::set<int> seen;
  for (const auto& s : styles) {
    if (s.style.group_sizes() != groups)
      throw ValidationError("all styles must share one grouping");
    if (s.scale.size() != channels || s.offset.size() != channels)
      throw ValidationError("style transforms must cover every channel");
    if (s.smoothing < 0) throw ValidationError("smoothing radius must be non-negative");
    if (!seen.insert(s.style.index()).second)
      throw ValidationError("style " + s.style.to_string() + " listed twice");
  }
  if (seen.size() != StyleCode::enumerate(groups).size())
    throw ValidationError("every style combination must appear exactly once");
}

SyntheticCorpusConfig SyntheticCorpusConfig::defaults(std::uint64_t seed) {
  SyntheticCorpusConfig cfg;
  cfg.seed = seed;
  const Index n = cfg.channels;
  const std::vector<int> groups{2, 2};
  const std::vector<std::string> names{"actor", "emotion"};
  for (const auto& code : StyleCode::enumerate(groups)) {
    const int actor = code.values()[0];
    const int emotion = code.values()[1];
    SyntheticStyleSpec spec;
    spec.style = StyleCode(groups, code.values(), names);
    spec.scale = Vector::Ones(n);
    spec.offset = Vector::Zero(n);
    // Idiosyncratic style: the second actor moves less and lazier, with a
    // different resting pose on the style-only channels.
    if (actor == 1) {
      spec.smoothing = 2;
      for (Index c : cfg.content_channels) spec.scale(c) = 0.7;
      for (Index c : cfg.mouth_channels) spec.scale(c) = 0.85;
    }
    for (Index c = 10; c < 16; ++c) {
      const double sign = (c % 2 == 0 ? 1.0 : -1.0) * (actor == 0 ? 1.0 : -1.0);
      spec.offset(c) += 0.10 * sign;
      if (actor == 1) spec.scale(c) = 1.5;
    }
    // Emotional style: shifts content, the mouth corners and the style-only channels.
    const double mood = emotion == 0 ? 1.0 : -1.0;
    for (Index c : cfg.content_channels) spec.offset(c) += 0.06 * mood;
    spec.offset(cfg.mouth_channels[0]) += 0.08 * mood;
    spec.offset(cfg.mouth_channels[1]) += 0.08 * mood;
    for (Index c = 10; c < 16; ++c) spec.offset(c) += 0.08 * mood;
    cfg.styles.push_back(std::move(spec));
  }
  return cfg;
}

// ---------------------------------------------------------------------------

const OracleRecord::Entry& OracleRecord::entry(const std::string& clip_id) const {
  for (const auto& e : entries)
    if (e.clip_id == clip_id) return e;
  throw ValidationError("clip " + clip_id + " is not in the oracle record");
}

int OracleRecord::style_index(const StyleCode& style) const {
  for (std::size_t i = 0; i < styles.size(); ++i)
    if (styles[i].style == style) return static_cast<int>(i);
  throw ValidationError("style " + style.to_string() + " is not in the oracle record");
}

std::optional<std::string> OracleRecord::paired_clip(const std::string& clip_id,
                                                     const StyleCode& target) const {
  const Entry& src = entry(clip_id);
  const int target_index = style_index(target);
  for (const auto& e : entries)
    if (e.content_id == src.content_id && e.style_index == target_index) return e.clip_id;
  return std::nullopt;
}

void OracleRecord::save(const fs::path& path) const {
  std::ofstream os(path);
  if (!os) throw ValidationError("cannot write " + path.string());
  os << "rigstyle-oracle 1\n";
  os << "content_channels";
  for (Index c : content_channels) os << ' ' << c;
  os << "\nmouth_channels";
  for (Index c : mouth_channels) os << ' ' << c;
  os << '\n';
  for (std::size_t i = 0; i < styles.size(); ++i) {
    const auto& s = styles[i];
    os << "style " << i << " groups";
    for (int g : s.style.group_sizes()) os << ' ' << g;
    os << " values";
    for (int v : s.style.values()) os << ' ' << v;
    os << " smoothing " << s.smoothing << " scale";
    for (Index c = 0; c < s.scale.size(); ++c) os << ' ' << format_value(s.scale(c));
    os << " offset";
    for (Index c = 0; c < s.offset.size(); ++c) os << ' ' << format_value(s.offset(c));
    os << '\n';
  }
  for (const auto& e : entries)
    os << "clip " << e.clip_id << ' ' << e.content_id << ' ' << e.style_index << '\n';
}

OracleRecord OracleRecord::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError(LoadErrorKind::io, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("rigstyle-oracle", 0) != 0)
    throw LoadError(LoadErrorKind::malformed_header, path.string() + " is not an oracle record");
  OracleRecord rec;
  auto fail = [&](const std::string& why) {
    throw LoadError(LoadErrorKind::malformed_header, path.string() + ": " + why);
  };
  while (std::getline(in, line)) {
    std::istringstream is(line);
    std::string key;
    if (!(is >> key)) continue;
    if (key == "content_channels" || key == "mouth_channels") {
      auto& dst = key == "content_channels" ? rec.content_channels : rec.mouth_channels;
      Index c;
      while (is >> c) dst.push_back(c);
    } else if (key == "style") {
      int index;
      std::string word;
      is >> index >> word;
      if (word != "groups" || index != static_cast<int>(rec.styles.size())) fail("bad style line");
      std::vector<int> groups, values;
      while (is >> word && word != "values") groups.push_back(std::stoi(word));
      while (is >> word && word != "smoothing") values.push_back(std::stoi(word));
      SyntheticStyleSpec spec;
      spec.style = StyleCode(groups, values);
      is >> spec.smoothing >> word;
      if (word != "scale") fail("bad style line");
      std::vector<double> scale, offset;
      while (is >> word && word != "offset") scale.push_back(std::stod(word));
      double v;
      while (is >> v) offset.push_back(v);
      if (scale.size() != offset.size()) fail("scale and offset widths differ");
      spec.scale = Eigen::Map<Vector>(scale.data(), static_cast<Index>(scale.size()));
      spec.offset = Eigen::Map<Vector>(offset.data(), static_cast<Index>(offset.size()));
      rec.styles.push_back(std::move(spec));
    } else if (key == "clip") {
      Entry e;
      if (!(is >> e.clip_id >> e.content_id >> e.style_index)) fail("bad clip line");
      rec.entries.push_back(std::move(e));
    } else {
      fail("unknown key " + key);
    }
  }
  return rec;
}

const RigClip& SyntheticCorpus::clip(const std::string& id) const {
  for (const auto& c : clips)
    if (c.clip_id == id) return c;
  throw ValidationError("no clip " + id + " in corpus");
}

// ---------------------------------------------------------------------------

SyntheticCorpus generate_corpus(const SyntheticCorpusConfig& config) {
  config.validate();
  const Index n = config.channels;
  const Index length = config.length;
  const Index mouth = static_cast<Index>(config.mouth_channels.size());
  const Index classes = config.visemes;

  SyntheticCorpus corpus;
  corpus.oracle.content_channels = config.content_channels;
  corpus.oracle.mouth_channels = config.mouth_channels;
  corpus.oracle.styles = config.styles;

  // Well-separated mouth poses, one per viseme.
  {
    Rng rng = stream(config.seed, 0);
    std::uniform_real_distribution<double> coord(0.25, 0.75);
    corpus.viseme_poses.resize(classes, mouth);
    for (Index v = 0; v < classes; ++v) {
      for (int attempt = 0;; ++attempt) {
        if (attempt > 100000) throw ValidationError("cannot place separated viseme poses");
        Vector pose(mouth);
        for (Index m = 0; m < mouth; ++m) pose(m) = coord(rng);
        bool ok = true;
        for (Index u = 0; u < v && ok; ++u)
          ok = (corpus.viseme_poses.row(u).transpose() - pose).norm() >= kMinPoseDistance;
        if (ok) {
          corpus.viseme_poses.row(v) = pose.transpose();
          break;
        }
      }
    }
  }

  std::set<Index> assigned(config.content_channels.begin(), config.content_channels.end());
  assigned.insert(config.mouth_channels.begin(), config.mouth_channels.end());

  std::vector<std::string> names;
  for (Index c = 0; c < n; ++c) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ctrl_%02d", static_cast<int>(c));
    names.emplace_back(buf);
  }

  for (int content = 0; content < config.clips_per_style; ++content) {
    Rng rng = stream(config.seed, static_cast<std::uint64_t>(content) + 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<int> dwell(kMinDwell, kMaxDwell);
    std::uniform_int_distribution<Index> pick(0, classes - 1);

    Matrix base = Matrix::Constant(length, n, 0.5);
    Matrix labels = Matrix::Zero(length, classes);
    Matrix raw_mouth(length, mouth);
    for (Index t = 0; t < length;) {
      Index v = pick(rng);
      Index end = std::min(length, t + dwell(rng));
      for (; t < end; ++t) {
        labels(t, v) = 1.0;
        raw_mouth.row(t) = corpus.viseme_poses.row(v);
      }
    }
    Matrix smooth_mouth = moving_average(raw_mouth, 1);
    for (Index m = 0; m < mouth; ++m) base.col(config.mouth_channels[m]) = smooth_mouth.col(m);

    const double two_pi = 2.0 * std::numbers::pi;
    for (Index c : config.content_channels) {
      // Band-limited motion: three sinusoids between 0.2 and 1.5 Hz.
      for (int k = 0; k < 3; ++k) {
        double freq = 0.2 + 1.3 * unit(rng);
        double amp = 0.03 + 0.04 * unit(rng);
        double phase = two_pi * unit(rng);
        for (Index t = 0; t < length; ++t)
          base(t, c) += amp * std::sin(two_pi * freq * static_cast<double>(t) / config.fps + phase);
      }
    }
    for (Index c = 0; c < n; ++c) {
      if (assigned.count(c)) continue;
      double freq = 0.1 + 0.3 * unit(rng);
      double phase = two_pi * unit(rng);
      for (Index t = 0; t < length; ++t)
        base(t, c) += 0.04 * std::sin(two_pi * freq * static_cast<double>(t) / config.fps + phase);
    }

    for (std::size_t s = 0; s < config.styles.size(); ++s) {
      const auto& spec = config.styles[s];
      RigClip clip;
      clip.clip_id = clip_name(content, spec.style);
      clip.control_names = names;
      clip.frames = spec.apply(base);
      clip.fps = config.fps;
      clip.style = spec.style;
      clip.visemes = VisemeTrack{labels, config.fps};
      for (Index c = 0; c < n; ++c) {
        double lo = clip.frames.col(c).minCoeff(), hi = clip.frames.col(c).maxCoeff();
        if (lo < 0.0 || hi > 1.0)
          throw ValidationError("style " + spec.style.to_string() + " drives channel " +
                                std::to_string(c) + " outside [0,1]");
      }
      corpus.oracle.entries.push_back({clip.clip_id, content, static_cast<int>(s)});
      corpus.clips.push_back(std::move(clip));
    }
  }
  return corpus;
}

double oracle_content_error(const Matrix& x, const Matrix& y, std::span<const Index> content) {
  if (x.rows() != y.rows() || x.cols() != y.cols())
    throw ValidationError("content error: shapes differ");
  if (content.empty()) throw ValidationError("content error: no content channels");
  double total = 0.0;
  for (Index c : content) {
    if (c < 0 || c >= x.cols()) throw ValidationError("content error: channel out of range");
    total += (x.col(c) - y.col(c)).squaredNorm();
  }
  return total / static_cast<double>(x.rows() * static_cast<Index>(content.size()));
}

void save_corpus(const SyntheticCorpus& corpus, const fs::path& dir) {
  fs::create_directories(dir);
  for (const auto& clip : corpus.clips) save_clip(clip, dir / (clip.clip_id + ".csv"));
  corpus.oracle.save(dir / "oracle_record.txt");
}

std::vector<RigClip> load_clips(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw LoadError(LoadErrorKind::io, dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".csv") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  std::vector<RigClip> clips;
  for (const auto& f : files) clips.push_back(load_clip(f));
  std::sort(clips.begin(), clips.end(),
            [](const RigClip& a, const RigClip& b) { return a.clip_id < b.clip_id; });
  return clips;
}

std::optional<OracleRecord> load_oracle_record(const fs::path& dir) {
  fs::path p = dir / "oracle_record.txt";
  if (!fs::exists(p)) return std::nullopt;
  return OracleRecord::load(p);
}

CorpusSplit split_by_content(const std::vector<RigClip>& clips, const OracleRecord& oracle,
                             int heldout_contents) {
  int max_content = -1;
  for (const auto& e : oracle.entries) max_content = std::max(max_content, e.content_id);
  const int first_heldout = max_content + 1 - heldout_contents;
  CorpusSplit split;
  for (const auto& clip : clips) {
    if (oracle.entry(clip.clip_id).content_id >= first_heldout)
      split.heldout.push_back(clip);
    else
      split.train.push_back(clip);
  }
  return split;
}

}  // namespace rigstyle
