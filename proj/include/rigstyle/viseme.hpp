#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "rigstyle/anim.hpp"
#include "rigstyle/matrix.hpp"

namespace rigstyle {

/// Phoneme posteriors from an external recogniser: unnormalised log-probabilities,
/// one row per hop.
struct PhonemeTrack {
  double hop = 0.02;
  Matrix values;  // K x P
  std::vector<std::string> tokens;

  Index samples() const { return values.rows(); }
  Index token_count() const { return values.cols(); }
  void validate() const;
};

/// Partition of phoneme tokens into viseme classes.
class VisemeMap {
 public:
  VisemeMap(std::vector<std::string> tokens, std::vector<int> classes, int class_count = 16,
            std::vector<std::string> class_names = {});

  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::vector<std::string>& class_names() const { return class_names_; }
  int class_count() const { return class_count_; }
  /// Throws ValidationError for unknown tokens.
  int class_of(const std::string& token) const;

 private:
  std::vector<std::string> tokens_;
  std::vector<int> classes_;
  int class_count_;
  std::vector<std::string> class_names_;
};

enum class ResampleDomain {
  /// Interpolate the log-probabilities as delivered.
  log_prob,
  /// Softmax first, interpolate probabilities, store log of the result.
  probability,
};

PhonemeTrack resample_track(const PhonemeTrack& track, double target_fps,
                            ResampleDomain domain = ResampleDomain::log_prob);

VisemeTrack phonemes_to_visemes(const PhonemeTrack& track, const VisemeMap& map, double fps);

/// Tracks may differ from the clip by at most two frames: extra frames are
/// dropped, missing ones repeat the last row.
RigClip attach_viseme_track(RigClip clip, const VisemeTrack& visemes);

/// Row-wise numerically stable softmax.
Matrix softmax_rows(const Matrix& logits);

PhonemeTrack load_phoneme_track(const std::filesystem::path& path);
void save_phoneme_track(const PhonemeTrack& track, const std::filesystem::path& path);
/// Lines of `token,class_index`; blank lines and `#` comments are skipped.
VisemeMap load_viseme_map(const std::filesystem::path& path, int class_count = 16);

}  // namespace rigstyle
