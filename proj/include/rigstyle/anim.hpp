#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rigstyle/matrix.hpp"

namespace rigstyle {

using Rng = std::mt19937_64;

/// Nominal control range is [0,1]; loaded values may sit this far outside it.
inline constexpr double kControlBand = 0.25;

/// Grouped one-hot style label (one active option per group, e.g. actor and emotion).
class StyleCode {
 public:
  StyleCode() = default;

  /// `values[g]` is the active option of group g. Throws ValidationError.
  StyleCode(std::vector<int> group_sizes, std::vector<int> values,
            std::vector<std::string> group_names = {});

  static StyleCode from_bits(std::vector<int> group_sizes, const std::vector<double>& bits);

  /// Every valid code for the given grouping, in mixed-radix order (last group fastest).
  static std::vector<StyleCode> enumerate(const std::vector<int>& group_sizes);

  const std::vector<int>& group_sizes() const { return group_sizes_; }
  const std::vector<int>& values() const { return values_; }
  const std::vector<std::string>& group_names() const { return group_names_; }
  int groups() const { return static_cast<int>(group_sizes_.size()); }
  int width() const;
  std::vector<double> bits() const;
  /// Position of this code in `enumerate(group_sizes())`.
  int index() const;
  std::string to_string() const;

  bool operator==(const StyleCode& other) const {
    return group_sizes_ == other.group_sizes_ && values_ == other.values_;
  }

 private:
  std::vector<int> group_sizes_;
  std::vector<int> values_;
  std::vector<std::string> group_names_;
};

/// Per-frame viseme probabilities, rows sum to one.
struct VisemeTrack {
  Matrix values;  // L x V
  double fps = 60.0;

  Index frames() const { return values.rows(); }
  Index classes() const { return values.cols(); }
  void validate() const;
};

struct RigClip {
  std::string clip_id;
  std::vector<std::string> control_names;
  Matrix frames;  // L x N
  double fps = 60.0;
  StyleCode style;
  std::optional<VisemeTrack> visemes;

  Index length() const { return frames.rows(); }
  Index channels() const { return frames.cols(); }
  /// Throws ValidationError if any clip invariant is broken.
  void validate() const;
};

struct Window {
  Matrix data;  // T x N
  StyleCode style;
  std::string source_clip;
  Index start_frame = 0;
  std::optional<Matrix> viseme_labels;  // T x V
};

/// B windows stacked time-major: row t*B + b holds frame t of window b.
struct Batch {
  Index size = 0;
  Index time = 0;
  Matrix data;                    // (T*B) x N
  Matrix styles;                  // B x C
  std::vector<StyleCode> codes;   // B
  std::optional<Matrix> visemes;  // (T*B) x V

  Index channels() const { return data.cols(); }
  double at(Index b, Index t, Index n) const { return data(t * size + b, n); }
  Index row(Index b, Index t) const { return t * size + b; }
};

/// Manifest path that accompanies a curve file (`foo.csv` -> `foo.manifest.json`).
std::filesystem::path manifest_path(const std::filesystem::path& curve_path);

RigClip load_clip(const std::filesystem::path& path);
void save_clip(const RigClip& clip, const std::filesystem::path& path);

Matrix load_viseme_file(const std::filesystem::path& path);
void save_viseme_file(const Matrix& values, const std::filesystem::path& path);

/// Windows at starts 0, stride, 2*stride, ... with start + T <= L.
std::vector<Window> extract_windows(const RigClip& clip, Index window, Index stride);

struct StretchBounds {
  double min = 0.5;
  double max = 2.0;
};

/// Linear-interpolation resample to max(2, round(T*factor)) frames, endpoints exact.
Matrix time_stretch(const Matrix& data, double factor, StretchBounds bounds = {});

/// Gaussian noise then clamp to [0,1]; sigma == 0 returns the input untouched.
Matrix add_noise(const Matrix& data, double sigma, Rng& rng);

Batch assemble_batch(const std::vector<Window>& windows);

/// Formats a value the way curve files store it (9 significant digits).
std::string format_value(double v);

}  // namespace rigstyle
