#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rigstyle/anim.hpp"
#include "rigstyle/matrix.hpp"

namespace rigstyle {

/// A style as a per-channel transform of unstyled content:
/// y = 0.5 + scale * (smooth_r(x) - 0.5) + offset.
struct SyntheticStyleSpec {
  StyleCode style;
  Vector scale;
  Vector offset;
  int smoothing = 0;  // moving-average radius in frames

  Matrix apply(const Matrix& content) const;
  bool is_identity() const;
};

struct SyntheticCorpusConfig {
  std::vector<SyntheticStyleSpec> styles;
  int clips_per_style = 10;
  Index length = 600;
  double fps = 60.0;
  Index channels = 16;
  std::vector<Index> content_channels{0, 1, 2, 3};
  std::vector<Index> mouth_channels{4, 5, 6, 7, 8, 9};
  Index visemes = 16;
  std::uint64_t seed = 7;

  void validate() const;
  /// 16 channels (4 content, 6 mouth, 6 style-only), 2 actors x 2 emotions, L = 600.
  static SyntheticCorpusConfig defaults(std::uint64_t seed = 7);
};

/// Ground truth needed to score transfers: which clips share content, and how
/// every style was produced.
struct OracleRecord {
  struct Entry {
    std::string clip_id;
    int content_id = 0;
    int style_index = 0;
  };

  std::vector<Index> content_channels;
  std::vector<Index> mouth_channels;
  std::vector<SyntheticStyleSpec> styles;
  std::vector<Entry> entries;

  const Entry& entry(const std::string& clip_id) const;
  /// Clip with the same content rendered in `target`, if one exists.
  std::optional<std::string> paired_clip(const std::string& clip_id, const StyleCode& target) const;
  int style_index(const StyleCode& style) const;

  void save(const std::filesystem::path& path) const;
  static OracleRecord load(const std::filesystem::path& path);
};

struct SyntheticCorpus {
  std::vector<RigClip> clips;
  OracleRecord oracle;
  Matrix viseme_poses;  // V x |mouth channels|

  const RigClip& clip(const std::string& id) const;
};

SyntheticCorpus generate_corpus(const SyntheticCorpusConfig& config);

/// MSE over the content channels only.
double oracle_content_error(const Matrix& x, const Matrix& y, std::span<const Index> content);

/// Clips go to `dir/<clip_id>.csv` (+ manifest and viseme track); the oracle
/// record to `dir/oracle_record.txt`.
void save_corpus(const SyntheticCorpus& corpus, const std::filesystem::path& dir);
/// Every curve file in `dir` (sorted by clip id) and the oracle record if present.
std::vector<RigClip> load_clips(const std::filesystem::path& dir);
std::optional<OracleRecord> load_oracle_record(const std::filesystem::path& dir);

/// Partition by content id: the last `heldout_contents` ids form the held-out split.
struct CorpusSplit {
  std::vector<RigClip> train;
  std::vector<RigClip> heldout;
};
CorpusSplit split_by_content(const std::vector<RigClip>& clips, const OracleRecord& oracle,
                             int heldout_contents);

}  // namespace rigstyle
