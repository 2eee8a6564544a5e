#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rigstyle/anim.hpp"
#include "rigstyle/autograd.hpp"
#include "rigstyle/matrix.hpp"

namespace rigstyle {

struct BlockConfig {
  Index input_width = 0;
  Index hidden = 256;
  int residual_layers = 2;
  int gru_layers = 2;
  double dropout = 0.4;
  Index output_width = 0;

  void validate() const;
  bool operator==(const BlockConfig&) const = default;
};

/// Ordered, named parameter matrices of one network.
class ParamSet {
 public:
  void add(std::string name, Matrix value);

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const Matrix& operator[](std::size_t i) const { return values_[i]; }
  Matrix& operator[](std::size_t i) { return values_[i]; }
  /// Index of `name`, or size() if absent.
  std::size_t find(const std::string& name) const;
  Matrix& at(const std::string& name);
  const Matrix& at(const std::string& name) const;
  Index scalar_count() const;

  /// Leaf tensors holding copies of the parameters.
  std::vector<ag::Tensor> tensors(bool requires_grad) const;
  /// A set with the same names and shapes, all zeros.
  ParamSet zeros_like() const;
  bool same_layout(const ParamSet& other) const;
  bool operator==(const ParamSet& other) const;

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
};

enum class Mode { train, eval };

/// Encoder (projection + residual feed-forward layers), stacked bidirectional
/// GRU, decoder (projection + residual layers) and an output projection.
/// Inputs and outputs are time-major: row t*B + b is frame t of sequence b.
class SequenceNet {
 public:
  SequenceNet(BlockConfig config, bool skip_connection);

  const BlockConfig& config() const { return config_; }
  bool skip_connection() const { return skip_; }
  ParamSet init_params(std::uint64_t seed) const;

  /// `rng` is required in train mode when dropout > 0.
  ag::Tensor forward(std::span<const ag::Tensor> params, const ag::Tensor& x, Index batch,
                     Mode mode, Rng* rng) const;

 private:
  struct Linear {
    std::size_t weight, bias;
  };
  struct Residual {
    Linear fc1, fc2;
  };
  struct GruDirection {
    std::size_t w_ih, w_hh, b_ih, b_hh;
  };
  struct GruLayer {
    GruDirection forward, backward;
  };
  enum class Init { fan_in, orthogonal_blocks, recurrent_bias };
  struct Spec {
    std::string name;
    Index rows, cols;
    Init init;
    Index fan;
  };

  Linear add_linear(const std::string& name, Index in, Index out);
  ag::Tensor linear(std::span<const ag::Tensor> p, const Linear& l, const ag::Tensor& x) const;
  ag::Tensor dropout(const ag::Tensor& x, Mode mode, Rng* rng) const;
  ag::Tensor gru(std::span<const ag::Tensor> p, const GruDirection& d, const ag::Tensor& x,
                 Index batch, bool reverse) const;

  BlockConfig config_;
  bool skip_;
  std::vector<Spec> specs_;
  Linear in_proj_{};
  std::vector<Residual> encoder_;
  std::vector<GruLayer> gru_;
  Linear gru_proj_{};
  std::vector<Residual> decoder_;
  Linear out_proj_{};
};

/// Dimensions shared by all three networks.
struct ModelDims {
  Index channels = 16;
  std::vector<int> style_groups{2, 2};
  Index visemes = 16;

  int style_width() const;
  bool operator==(const ModelDims&) const = default;
};

/// Hidden width, depth and dropout shared by the networks; widths come from ModelDims.
struct NetShape {
  Index hidden = 256;
  int residual_layers = 2;
  int gru_layers = 2;
  double dropout = 0.4;

  BlockConfig block(Index input_width, Index output_width) const;
  bool operator==(const NetShape&) const = default;
};

class Generator {
 public:
  Generator(ModelDims dims, NetShape shape);

  const ModelDims& dims() const { return dims_; }
  const SequenceNet& net() const { return net_; }
  ParamSet init_params(std::uint64_t seed) const { return net_.init_params(seed); }
  /// Exact identity on inputs in [0,1] (test double); needs hidden >= channels.
  ParamSet identity_params() const;

  /// x: (T*B) x N, styles: B x C.
  ag::Tensor forward(std::span<const ag::Tensor> params, const ag::Tensor& x,
                     const Matrix& styles, Index batch, Mode mode, Rng* rng) const;

 private:
  ModelDims dims_;
  SequenceNet net_;
};

struct CriticOutput {
  ag::Tensor critic;  // (T*B) x 1, unbounded
  ag::Tensor logits;  // (T*B) x C
};

class Discriminator {
 public:
  Discriminator(ModelDims dims, NetShape shape);

  const ModelDims& dims() const { return dims_; }
  const SequenceNet& net() const { return net_; }
  ParamSet init_params(std::uint64_t seed) const { return net_.init_params(seed); }

  CriticOutput forward(std::span<const ag::Tensor> params, const ag::Tensor& x, Index batch,
                       Mode mode, Rng* rng) const;

 private:
  ModelDims dims_;
  SequenceNet net_;
};

/// Per-frame classifier over `classes` outputs (visemes, or style for the oracle).
class FrameClassifier {
 public:
  FrameClassifier(Index channels, Index classes, NetShape shape);

  const SequenceNet& net() const { return net_; }
  Index classes() const { return net_.config().output_width; }
  ParamSet init_params(std::uint64_t seed) const { return net_.init_params(seed); }

  ag::Tensor forward(std::span<const ag::Tensor> params, const ag::Tensor& x, Index batch,
                     Mode mode, Rng* rng) const;

 private:
  SequenceNet net_;
};

/// Frame-sequence wrappers without graph recording; they validate shapes and
/// finiteness. `x` is time-major (T*B) x N.
Matrix generator_forward(const Generator& g, const ParamSet& params, const Matrix& x,
                         Index batch, const Matrix& styles, Mode mode, Rng* rng = nullptr);
std::pair<Matrix, Matrix> discriminator_forward(const Discriminator& d, const ParamSet& params,
                                                const Matrix& x, Index batch, Mode mode,
                                                Rng* rng = nullptr);
Matrix classifier_forward(const FrameClassifier& v, const ParamSet& params, const Matrix& x,
                          Index batch, Mode mode, Rng* rng = nullptr);

/// (T*B) x C matrix whose row t*B + b is row b of `per_sequence`.
Matrix repeat_per_frame(const Matrix& per_sequence, Index time);
/// B x (T*B) selector summing each sequence's frames.
Matrix sequence_sum_matrix(Index batch, Index time);

}  // namespace rigstyle
