#include "rigstyle/anim.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "rigstyle/error.hpp"

namespace rigstyle {

namespace fs = std::filesystem;

const char* to_string(LoadErrorKind kind) {
  switch (kind) {
    case LoadErrorKind::io: return "io error";
    case LoadErrorKind::malformed_header: return "malformed header";
    case LoadErrorKind::row_length_mismatch: return "row length mismatch";
    case LoadErrorKind::non_finite_value: return "non-finite value";
    case LoadErrorKind::out_of_band_value: return "out-of-band value";
    case LoadErrorKind::invalid_fps: return "invalid fps";
    case LoadErrorKind::invalid_manifest: return "invalid manifest";
  }
  return "load error";
}

// ---------------------------------------------------------------------------
// StyleCode

StyleCode::StyleCode(std::vector<int> group_sizes, std::vector<int> values,
                     std::vector<std::string> group_names)
    : group_sizes_(std::move(group_sizes)),
      values_(std::move(values)),
      group_names_(std::move(group_names)) {
  if (group_sizes_.empty()) throw ValidationError("style code needs at least one group");
  if (values_.size() != group_sizes_.size())
    throw ValidationError("style code has " + std::to_string(values_.size()) + " values for " +
                          std::to_string(group_sizes_.size()) + " groups");
  for (std::size_t g = 0; g < group_sizes_.size(); ++g) {
    if (group_sizes_[g] < 1) throw ValidationError("style group sizes must be positive");
    if (values_[g] < 0 || values_[g] >= group_sizes_[g])
      throw ValidationError("style value " + std::to_string(values_[g]) + " outside group " +
                            std::to_string(g) + " of size " + std::to_string(group_sizes_[g]));
  }
  if (width() < 2) throw ValidationError("style code width must be at least 2");
  if (!group_names_.empty() && group_names_.size() != group_sizes_.size())
    throw ValidationError("style group names do not match group count");
}

StyleCode StyleCode::from_bits(std::vector<int> group_sizes, const std::vector<double>& bits) {
  int width = std::accumulate(group_sizes.begin(), group_sizes.end(), 0);
  if (static_cast<int>(bits.size()) != width)
    throw ValidationError("style bits have length " + std::to_string(bits.size()) +
                          ", expected " + std::to_string(width));
  std::vector<int> values;
  int offset = 0;
  for (int size : group_sizes) {
    int active = -1;
    for (int k = 0; k < size; ++k) {
      double bit = bits[offset + k];
      if (bit != 0.0 && bit != 1.0) throw ValidationError("style bits must be 0 or 1");
      if (bit == 1.0) {
        if (active >= 0) throw ValidationError("style group has more than one active bit");
        active = k;
      }
    }
    if (active < 0) throw ValidationError("style group has no active bit");
    values.push_back(active);
    offset += size;
  }
  return StyleCode(std::move(group_sizes), std::move(values));
}

std::vector<StyleCode> StyleCode::enumerate(const std::vector<int>& group_sizes) {
  std::vector<StyleCode> out;
  std::vector<int> values(group_sizes.size(), 0);
  while (true) {
    out.emplace_back(group_sizes, values);
    int g = static_cast<int>(group_sizes.size()) - 1;
    while (g >= 0 && ++values[g] == group_sizes[g]) values[g--] = 0;
    if (g < 0) break;
  }
  return out;
}

int StyleCode::width() const {
  return std::accumulate(group_sizes_.begin(), group_sizes_.end(), 0);
}

std::vector<double> StyleCode::bits() const {
  std::vector<double> out(width(), 0.0);
  int offset = 0;
  for (std::size_t g = 0; g < group_sizes_.size(); ++g) {
    out[offset + values_[g]] = 1.0;
    offset += group_sizes_[g];
  }
  return out;
}

int StyleCode::index() const {
  int idx = 0;
  for (std::size_t g = 0; g < group_sizes_.size(); ++g) idx = idx * group_sizes_[g] + values_[g];
  return idx;
}

std::string StyleCode::to_string() const {
  std::string out;
  for (std::size_t g = 0; g < values_.size(); ++g) {
    if (g) out += '-';
    out += std::to_string(values_[g]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// validation

void VisemeTrack::validate() const {
  if (values.rows() < 1 || values.cols() < 1) throw ValidationError("viseme track is empty");
  if (!(fps > 0.0)) throw ValidationError("viseme track fps must be positive");
  for (Index r = 0; r < values.rows(); ++r) {
    double sum = 0.0;
    for (Index c = 0; c < values.cols(); ++c) {
      double v = values(r, c);
      if (!std::isfinite(v) || v < 0.0)
        throw ValidationError("viseme probabilities must be finite and non-negative");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6)
      throw ValidationError("viseme row " + std::to_string(r) + " sums to " + std::to_string(sum));
  }
}

void RigClip::validate() const {
  if (frames.rows() < 1 || frames.cols() < 1) throw ValidationError("clip has no frames");
  if (static_cast<Index>(control_names.size()) != frames.cols())
    throw ValidationError("clip has " + std::to_string(control_names.size()) +
                          " control names for " + std::to_string(frames.cols()) + " channels");
  std::vector<std::string> sorted = control_names;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw ValidationError("control names are not unique");
  if (!(fps > 0.0) || !std::isfinite(fps)) throw ValidationError("clip fps must be positive");
  for (Index r = 0; r < frames.rows(); ++r)
    for (Index c = 0; c < frames.cols(); ++c) {
      double v = frames(r, c);
      if (!std::isfinite(v)) throw ValidationError("clip contains a non-finite value");
      if (v < -kControlBand || v > 1.0 + kControlBand)
        throw ValidationError("clip value " + std::to_string(v) + " outside the control band");
    }
  if (style.groups() == 0) throw ValidationError("clip has no style code");
  if (visemes) {
    visemes->validate();
    if (visemes->frames() != frames.rows())
      throw ValidationError("viseme track length does not match clip length");
  }
}

// ---------------------------------------------------------------------------
// text IO

std::string format_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

namespace {

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool parse_double(const std::string& text, double& out) {
  std::string t = trim(text);
  if (t.empty()) return false;
  const char* first = t.data();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, t.data() + t.size(), out);
  return ec == std::errc() && ptr == t.data() + t.size();
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError(LoadErrorKind::io, "cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
  return lines;
}

Matrix parse_rows(const std::vector<std::string>& lines, std::size_t first, Index width,
                  const fs::path& path, bool check_band) {
  Index rows = static_cast<Index>(lines.size() - first);
  Matrix out(rows, width);
  for (Index r = 0; r < rows; ++r) {
    auto cells = split(lines[first + r], ',');
    if (static_cast<Index>(cells.size()) != width)
      throw LoadError(LoadErrorKind::row_length_mismatch,
                      path.string() + " line " + std::to_string(first + r + 1) + " has " +
                          std::to_string(cells.size()) + " values, expected " +
                          std::to_string(width));
    for (Index c = 0; c < width; ++c) {
      double v = 0.0;
      if (!parse_double(cells[c], v))
        throw LoadError(LoadErrorKind::non_finite_value,
                        path.string() + " line " + std::to_string(first + r + 1) +
                            ": cannot parse '" + cells[c] + "'");
      if (!std::isfinite(v))
        throw LoadError(LoadErrorKind::non_finite_value,
                        path.string() + " line " + std::to_string(first + r + 1));
      if (check_band && (v < -kControlBand || v > 1.0 + kControlBand))
        throw LoadError(LoadErrorKind::out_of_band_value,
                        path.string() + " line " + std::to_string(first + r + 1) + ": " +
                            cells[c]);
      out(r, c) = v;
    }
  }
  return out;
}

void write_rows(std::ostream& os, const Matrix& m) {
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) {
      if (c) os << ',';
      os << format_value(m(r, c));
    }
    os << '\n';
  }
}

}  // namespace

fs::path manifest_path(const fs::path& curve_path) {
  fs::path p = curve_path;
  p.replace_extension(".manifest.json");
  return p;
}

Matrix load_viseme_file(const fs::path& path) {
  auto lines = read_lines(path);
  if (lines.empty()) throw LoadError(LoadErrorKind::malformed_header, path.string() + " is empty");
  Index width = static_cast<Index>(split(lines[0], ',').size());
  return parse_rows(lines, 0, width, path, false);
}

void save_viseme_file(const Matrix& values, const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw ValidationError("cannot write " + path.string());
  write_rows(os, values);
  if (!os) throw ValidationError("write failed for " + path.string());
}

RigClip load_clip(const fs::path& path) {
  using nlohmann::json;
  auto lines = read_lines(path);
  if (lines.empty()) throw LoadError(LoadErrorKind::malformed_header, path.string() + " is empty");

  RigClip clip;
  for (auto& name : split(lines[0], ',')) {
    std::string n = trim(name);
    if (n.empty())
      throw LoadError(LoadErrorKind::malformed_header, path.string() + " has an empty control name");
    clip.control_names.push_back(n);
  }
  {
    auto sorted = clip.control_names;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
      throw LoadError(LoadErrorKind::malformed_header, path.string() + " repeats a control name");
  }
  if (lines.size() < 2)
    throw LoadError(LoadErrorKind::malformed_header, path.string() + " has no frames");
  clip.frames =
      parse_rows(lines, 1, static_cast<Index>(clip.control_names.size()), path, true);

  fs::path mpath = manifest_path(path);
  std::ifstream min(mpath);
  if (!min) throw LoadError(LoadErrorKind::invalid_manifest, "missing manifest " + mpath.string());
  json manifest;
  try {
    min >> manifest;
  } catch (const json::exception& e) {
    throw LoadError(LoadErrorKind::invalid_manifest, mpath.string() + ": " + e.what());
  }
  try {
    clip.clip_id = manifest.at("clip_id").get<std::string>();
    double fps = manifest.at("fps").get<double>();
    if (!(fps > 0.0) || !std::isfinite(fps))
      throw LoadError(LoadErrorKind::invalid_fps, mpath.string() + ": fps " + std::to_string(fps));
    clip.fps = fps;
    const json& style = manifest.at("style");
    auto names = style.at("groups").get<std::vector<std::string>>();
    auto sizes = style.at("sizes").get<std::vector<int>>();
    auto values = style.at("values").get<std::vector<int>>();
    try {
      clip.style = StyleCode(sizes, values, names);
    } catch (const ValidationError& e) {
      throw LoadError(LoadErrorKind::invalid_manifest, mpath.string() + ": " + e.what());
    }
    if (manifest.contains("viseme_track") && !manifest["viseme_track"].is_null()) {
      fs::path vpath = path.parent_path() / manifest["viseme_track"].get<std::string>();
      VisemeTrack track{load_viseme_file(vpath), clip.fps};
      try {
        track.validate();
      } catch (const ValidationError& e) {
        throw LoadError(LoadErrorKind::invalid_manifest, vpath.string() + ": " + e.what());
      }
      if (track.frames() != clip.length())
        throw LoadError(LoadErrorKind::invalid_manifest,
                        vpath.string() + " length does not match the clip");
      clip.visemes = std::move(track);
    }
  } catch (const json::exception& e) {
    throw LoadError(LoadErrorKind::invalid_manifest, mpath.string() + ": " + e.what());
  }
  return clip;
}

void save_clip(const RigClip& clip, const fs::path& path) {
  using nlohmann::json;
  clip.validate();
  {
    std::ofstream os(path);
    if (!os) throw ValidationError("cannot write " + path.string());
    for (std::size_t i = 0; i < clip.control_names.size(); ++i) {
      if (i) os << ',';
      os << clip.control_names[i];
    }
    os << '\n';
    write_rows(os, clip.frames);
    if (!os) throw ValidationError("write failed for " + path.string());
  }
  json manifest;
  manifest["clip_id"] = clip.clip_id;
  manifest["fps"] = clip.fps;
  std::vector<std::string> names = clip.style.group_names();
  if (names.empty())
    for (int g = 0; g < clip.style.groups(); ++g) names.push_back("group" + std::to_string(g));
  manifest["style"] = {{"groups", names},
                       {"sizes", clip.style.group_sizes()},
                       {"values", clip.style.values()}};
  if (clip.visemes) {
    fs::path vpath = path;
    vpath.replace_extension(".visemes.txt");
    save_viseme_file(clip.visemes->values, vpath);
    manifest["viseme_track"] = vpath.filename().string();
  } else {
    manifest["viseme_track"] = nullptr;
  }
  std::ofstream ms(manifest_path(path));
  if (!ms) throw ValidationError("cannot write " + manifest_path(path).string());
  ms << manifest.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// windows and augmentation

std::vector<Window> extract_windows(const RigClip& clip, Index window, Index stride) {
  if (window < 1 || stride < 1) throw ValidationError("window length and stride must be >= 1");
  std::vector<Window> out;
  for (Index start = 0; start + window <= clip.length(); start += stride) {
    Window w;
    w.data = clip.frames.middleRows(start, window);
    w.style = clip.style;
    w.source_clip = clip.clip_id;
    w.start_frame = start;
    if (clip.visemes) w.viseme_labels = clip.visemes->values.middleRows(start, window);
    out.push_back(std::move(w));
  }
  return out;
}

Matrix time_stretch(const Matrix& data, double factor, StretchBounds bounds) {
  if (!(factor >= bounds.min && factor <= bounds.max))
    throw ValidationError("stretch factor " + std::to_string(factor) + " outside [" +
                          std::to_string(bounds.min) + ", " + std::to_string(bounds.max) + "]");
  const Index frames = data.rows();
  if (frames < 2) throw ValidationError("time_stretch needs at least two frames");
  const Index out_frames = std::max<Index>(2, std::lround(static_cast<double>(frames) * factor));
  Matrix out(out_frames, data.cols());
  const double scale = static_cast<double>(frames - 1) / static_cast<double>(out_frames - 1);
  for (Index j = 0; j < out_frames; ++j) {
    if (j == out_frames - 1) {
      out.row(j) = data.row(frames - 1);
      continue;
    }
    double pos = static_cast<double>(j) * scale;
    Index i0 = static_cast<Index>(std::floor(pos));
    double frac = pos - static_cast<double>(i0);
    if (i0 >= frames - 1) {
      out.row(j) = data.row(frames - 1);
    } else if (frac == 0.0) {
      out.row(j) = data.row(i0);
    } else {
      out.row(j) = data.row(i0) + frac * (data.row(i0 + 1) - data.row(i0));
    }
  }
  return out;
}

Matrix add_noise(const Matrix& data, double sigma, Rng& rng) {
  if (sigma < 0.0) throw ValidationError("noise sigma must be non-negative");
  if (sigma == 0.0) return data;
  std::normal_distribution<double> noise(0.0, sigma);
  Matrix out(data.rows(), data.cols());
  for (Index r = 0; r < data.rows(); ++r)
    for (Index c = 0; c < data.cols(); ++c)
      out(r, c) = std::clamp(data(r, c) + noise(rng), 0.0, 1.0);
  return out;
}

Batch assemble_batch(const std::vector<Window>& windows) {
  if (windows.empty()) throw ValidationError("cannot assemble an empty batch");
  const Index time = windows.front().data.rows();
  const Index channels = windows.front().data.cols();
  const int width = windows.front().style.width();
  const bool has_visemes = windows.front().viseme_labels.has_value();
  const Index classes = has_visemes ? windows.front().viseme_labels->cols() : 0;
  for (const auto& w : windows) {
    if (w.data.rows() != time || w.data.cols() != channels)
      throw ValidationError("batch windows have heterogeneous shapes");
    if (w.style.width() != width || w.style.group_sizes() != windows.front().style.group_sizes())
      throw ValidationError("batch windows have heterogeneous style codes");
    if (w.viseme_labels.has_value() != has_visemes ||
        (has_visemes && (w.viseme_labels->rows() != time || w.viseme_labels->cols() != classes)))
      throw ValidationError("batch windows have heterogeneous viseme labels");
  }
  Batch batch;
  batch.size = static_cast<Index>(windows.size());
  batch.time = time;
  batch.data.resize(time * batch.size, channels);
  batch.styles.resize(batch.size, width);
  if (has_visemes) batch.visemes = Matrix(time * batch.size, classes);
  for (Index b = 0; b < batch.size; ++b) {
    const Window& w = windows[b];
    auto bits = w.style.bits();
    for (int c = 0; c < width; ++c) batch.styles(b, c) = bits[c];
    batch.codes.push_back(w.style);
    for (Index t = 0; t < time; ++t) {
      batch.data.row(batch.row(b, t)) = w.data.row(t);
      if (has_visemes) batch.visemes->row(batch.row(b, t)) = w.viseme_labels->row(t);
    }
  }
  return batch;
}

}  // namespace rigstyle
