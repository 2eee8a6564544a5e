#include "rigstyle/viseme.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "rigstyle/error.hpp"

namespace rigstyle {

namespace fs = std::filesystem;

void PhonemeTrack::validate() const {
  if (!(hop > 0.0) || !std::isfinite(hop)) throw ValidationError("phoneme hop must be positive");
  if (values.rows() < 1) throw ValidationError("phoneme track has no samples");
  if (static_cast<Index>(tokens.size()) != values.cols())
    throw ValidationError("phoneme track token count does not match its columns");
  if (!values.allFinite()) throw ValidationError("phoneme track contains non-finite values");
}

VisemeMap::VisemeMap(std::vector<std::string> tokens, std::vector<int> classes, int class_count,
                     std::vector<std::string> class_names)
    : tokens_(std::move(tokens)),
      classes_(std::move(classes)),
      class_count_(class_count),
      class_names_(std::move(class_names)) {
  if (class_count_ < 1) throw ValidationError("viseme map needs at least one class");
  if (tokens_.size() != classes_.size())
    throw ValidationError("viseme map token and class lists differ in length");
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!seen.insert(tokens_[i]).second)
      throw ValidationError("viseme map lists token '" + tokens_[i] + "' twice");
    if (classes_[i] < 0 || classes_[i] >= class_count_)
      throw ValidationError("viseme class " + std::to_string(classes_[i]) + " out of range");
  }
  if (class_names_.empty())
    for (int v = 0; v < class_count_; ++v) class_names_.push_back("viseme_" + std::to_string(v));
  if (static_cast<int>(class_names_.size()) != class_count_)
    throw ValidationError("viseme class names do not match class count");
}

int VisemeMap::class_of(const std::string& token) const {
  auto it = std::find(tokens_.begin(), tokens_.end(), token);
  if (it == tokens_.end()) throw ValidationError("token '" + token + "' is not in the viseme map");
  return classes_[it - tokens_.begin()];
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Index r = 0; r < logits.rows(); ++r) {
    double m = logits.row(r).maxCoeff();
    auto e = (logits.row(r).array() - m).exp();
    out.row(r) = e / e.sum();
  }
  return out;
}

PhonemeTrack resample_track(const PhonemeTrack& track, double target_fps, ResampleDomain domain) {
  track.validate();
  if (!(target_fps > 0.0) || !std::isfinite(target_fps))
    throw ValidationError("target fps must be positive");
  const Index samples = track.samples();
  const Matrix source =
      domain == ResampleDomain::probability ? softmax_rows(track.values) : track.values;

  // Output spans the same duration (K-1)*hop.
  const double duration = static_cast<double>(samples - 1) * track.hop;
  const Index out_samples = static_cast<Index>(std::floor(duration * target_fps + 1e-9)) + 1;
  const double step = 1.0 / (target_fps * track.hop);  // input samples per output sample

  Matrix out(out_samples, track.token_count());
  for (Index k = 0; k < out_samples; ++k) {
    double pos = static_cast<double>(k) * step;
    double nearest = std::round(pos);
    if (std::abs(pos - nearest) < 1e-9) pos = nearest;
    if (pos >= static_cast<double>(samples - 1)) {
      out.row(k) = source.row(samples - 1);
      continue;
    }
    Index j = static_cast<Index>(std::floor(pos));
    double frac = pos - static_cast<double>(j);
    if (frac == 0.0)
      out.row(k) = source.row(j);
    else
      out.row(k) = source.row(j) + frac * (source.row(j + 1) - source.row(j));
  }
  if (domain == ResampleDomain::probability)
    out = out.array().max(std::numeric_limits<double>::min()).log().matrix();

  PhonemeTrack result;
  result.hop = 1.0 / target_fps;
  result.values = std::move(out);
  result.tokens = track.tokens;
  return result;
}

VisemeTrack phonemes_to_visemes(const PhonemeTrack& track, const VisemeMap& map, double fps) {
  track.validate();
  if (track.tokens.size() != map.tokens().size())
    throw ValidationError("phoneme track has " + std::to_string(track.tokens.size()) +
                          " tokens, viseme map has " + std::to_string(map.tokens().size()));
  std::vector<int> classes;
  classes.reserve(track.tokens.size());
  for (const auto& token : track.tokens) classes.push_back(map.class_of(token));

  Matrix probs = softmax_rows(track.values);
  VisemeTrack out;
  out.fps = fps;
  out.values = Matrix::Zero(probs.rows(), map.class_count());
  for (Index r = 0; r < probs.rows(); ++r)
    for (Index p = 0; p < probs.cols(); ++p) out.values(r, classes[p]) += probs(r, p);
  return out;
}

RigClip attach_viseme_track(RigClip clip, const VisemeTrack& visemes) {
  if (std::abs(visemes.fps - clip.fps) > 1e-9)
    throw ValidationError("viseme track fps " + std::to_string(visemes.fps) +
                          " does not match clip fps " + std::to_string(clip.fps));
  const Index diff = visemes.frames() - clip.length();
  if (diff > 2 || diff < -2)
    throw ValidationError("viseme track has " + std::to_string(visemes.frames()) +
                          " frames for a clip of " + std::to_string(clip.length()));
  VisemeTrack aligned;
  aligned.fps = clip.fps;
  aligned.values.resize(clip.length(), visemes.classes());
  for (Index r = 0; r < clip.length(); ++r)
    aligned.values.row(r) = visemes.values.row(std::min(r, visemes.frames() - 1));
  aligned.validate();
  clip.visemes = std::move(aligned);
  return clip;
}

// ---------------------------------------------------------------------------
// files

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) {
    auto b = cell.find_first_not_of(" \t\r");
    auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string() : cell.substr(b, e - b + 1));
  }
  return out;
}

double to_double(const std::string& s, const fs::path& path) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw LoadError(LoadErrorKind::non_finite_value, path.string() + ": cannot parse '" + s + "'");
  return v;
}

}  // namespace

PhonemeTrack load_phoneme_track(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError(LoadErrorKind::io, "cannot open " + path.string());
  std::string line;
  PhonemeTrack track;
  if (!std::getline(in, line)) throw LoadError(LoadErrorKind::malformed_header, "missing hop");
  track.hop = to_double(split_csv(line).at(0), path);
  if (!std::getline(in, line)) throw LoadError(LoadErrorKind::malformed_header, "missing tokens");
  track.tokens = split_csv(line);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto cells = split_csv(line);
    if (cells.size() != track.tokens.size())
      throw LoadError(LoadErrorKind::row_length_mismatch,
                      path.string() + " row " + std::to_string(rows.size() + 1));
    std::vector<double> row;
    for (auto& c : cells) row.push_back(to_double(c, path));
    rows.push_back(std::move(row));
  }
  track.values.resize(static_cast<Index>(rows.size()), static_cast<Index>(track.tokens.size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) track.values(r, c) = rows[r][c];
  try {
    track.validate();
  } catch (const ValidationError& e) {
    throw LoadError(LoadErrorKind::non_finite_value, path.string() + ": " + e.what());
  }
  return track;
}

void save_phoneme_track(const PhonemeTrack& track, const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw ValidationError("cannot write " + path.string());
  os << format_value(track.hop) << '\n';
  for (std::size_t i = 0; i < track.tokens.size(); ++i) os << (i ? "," : "") << track.tokens[i];
  os << '\n';
  for (Index r = 0; r < track.values.rows(); ++r) {
    for (Index c = 0; c < track.values.cols(); ++c)
      os << (c ? "," : "") << format_value(track.values(r, c));
    os << '\n';
  }
}

VisemeMap load_viseme_map(const fs::path& path, int class_count) {
  std::ifstream in(path);
  if (!in) throw LoadError(LoadErrorKind::io, "cannot open " + path.string());
  std::vector<std::string> tokens;
  std::vector<int> classes;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    auto cells = split_csv(line);
    if (cells.size() != 2)
      throw LoadError(LoadErrorKind::row_length_mismatch,
                      path.string() + " line " + std::to_string(lineno));
    int cls = 0;
    auto [ptr, ec] = std::from_chars(cells[1].data(), cells[1].data() + cells[1].size(), cls);
    if (ec != std::errc() || ptr != cells[1].data() + cells[1].size())
      throw LoadError(LoadErrorKind::malformed_header,
                      path.string() + " line " + std::to_string(lineno) + ": bad class index");
    tokens.push_back(cells[0]);
    classes.push_back(cls);
  }
  return VisemeMap(std::move(tokens), std::move(classes), class_count);
}

}  // namespace rigstyle
