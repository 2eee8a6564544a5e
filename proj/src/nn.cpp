#include "rigstyle/nn.hpp"

#include <cmath>
#include <numeric>

#include "rigstyle/error.hpp"

namespace rigstyle {

namespace {

constexpr double kLeakySlope = 0.2;

ag::Tensor residual_body(const ag::Tensor& h, const ag::Tensor& hidden) { return ag::add(h, hidden); }

}  // namespace

void BlockConfig::validate() const {
  if (input_width < 1 || output_width < 1) throw ValidationError("layer widths must be >= 1");
  if (hidden < 1) throw ValidationError("hidden width must be >= 1");
  if (residual_layers < 0 || gru_layers < 1)
    throw ValidationError("need >= 0 residual layers and >= 1 GRU layer");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("dropout must lie in [0,1)");
}

// ---------------------------------------------------------------------------
// ParamSet

void ParamSet::add(std::string name, Matrix value) {
  if (find(name) != size()) throw ValidationError("duplicate parameter " + name);
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
}

std::size_t ParamSet::find(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return i;
  return names_.size();
}

Matrix& ParamSet::at(const std::string& name) {
  std::size_t i = find(name);
  if (i == size()) throw ValidationError("no parameter named " + name);
  return values_[i];
}

const Matrix& ParamSet::at(const std::string& name) const {
  return const_cast<ParamSet*>(this)->at(name);
}

Index ParamSet::scalar_count() const {
  Index n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

std::vector<ag::Tensor> ParamSet::tensors(bool requires_grad) const {
  std::vector<ag::Tensor> out;
  out.reserve(values_.size());
  for (const auto& v : values_) out.emplace_back(v, requires_grad);
  return out;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (std::size_t i = 0; i < size(); ++i)
    out.add(names_[i], Matrix::Zero(values_[i].rows(), values_[i].cols()));
  return out;
}

bool ParamSet::same_layout(const ParamSet& other) const {
  if (size() != other.size()) return false;
  for (std::size_t i = 0; i < size(); ++i)
    if (names_[i] != other.names_[i] || values_[i].rows() != other.values_[i].rows() ||
        values_[i].cols() != other.values_[i].cols())
      return false;
  return true;
}

bool ParamSet::operator==(const ParamSet& other) const {
  if (!same_layout(other)) return false;
  for (std::size_t i = 0; i < size(); ++i)
    if (values_[i] != other.values_[i]) return false;
  return true;
}

// ---------------------------------------------------------------------------
// SequenceNet

SequenceNet::SequenceNet(BlockConfig config, bool skip_connection)
    : config_(config), skip_(skip_connection) {
  config_.validate();
  const Index h = config_.hidden;
  in_proj_ = add_linear("in_proj", config_.input_width, h);
  for (int i = 0; i < config_.residual_layers; ++i) {
    std::string p = "encoder." + std::to_string(i);
    encoder_.push_back({add_linear(p + ".fc1", h, h), add_linear(p + ".fc2", h, h)});
  }
  for (int l = 0; l < config_.gru_layers; ++l) {
    const Index in = l == 0 ? h : 2 * h;
    GruLayer layer{};
    for (int dir = 0; dir < 2; ++dir) {
      std::string p = "gru." + std::to_string(l) + (dir == 0 ? ".fwd" : ".bwd");
      GruDirection d{};
      d.w_ih = specs_.size();
      specs_.push_back({p + ".w_ih", 3 * h, in, Init::recurrent_bias, h});
      d.w_hh = specs_.size();
      specs_.push_back({p + ".w_hh", 3 * h, h, Init::orthogonal_blocks, h});
      d.b_ih = specs_.size();
      specs_.push_back({p + ".b_ih", 1, 3 * h, Init::recurrent_bias, h});
      d.b_hh = specs_.size();
      specs_.push_back({p + ".b_hh", 1, 3 * h, Init::recurrent_bias, h});
      (dir == 0 ? layer.forward : layer.backward) = d;
    }
    gru_.push_back(layer);
  }
  gru_proj_ = add_linear("gru_proj", 2 * h, h);
  for (int i = 0; i < config_.residual_layers; ++i) {
    std::string p = "decoder." + std::to_string(i);
    decoder_.push_back({add_linear(p + ".fc1", h, h), add_linear(p + ".fc2", h, h)});
  }
  out_proj_ = add_linear("out_proj", h, config_.output_width);
}

SequenceNet::Linear SequenceNet::add_linear(const std::string& name, Index in, Index out) {
  Linear l{};
  l.weight = specs_.size();
  specs_.push_back({name + ".weight", out, in, Init::fan_in, in});
  l.bias = specs_.size();
  specs_.push_back({name + ".bias", 1, out, Init::fan_in, in});
  return l;
}

ParamSet SequenceNet::init_params(std::uint64_t seed) const {
  Rng rng(seed);
  ParamSet params;
  for (const auto& spec : specs_) {
    Matrix m(spec.rows, spec.cols);
    if (spec.init == Init::orthogonal_blocks) {
      // Each H x H gate block is an independent random orthogonal matrix.
      std::normal_distribution<double> normal(0.0, 1.0);
      const Index h = spec.cols;
      for (Index block = 0; block < spec.rows / h; ++block) {
        Eigen::MatrixXd g(h, h);
        for (Index i = 0; i < h; ++i)
          for (Index j = 0; j < h; ++j) g(i, j) = normal(rng);
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
        Eigen::MatrixXd q = qr.householderQ();
        // Sign fix makes the factorisation unique.
        Eigen::VectorXd d = qr.matrixQR().diagonal();
        for (Index j = 0; j < h; ++j)
          if (d(j) < 0) q.col(j) *= -1.0;
        m.middleRows(block * h, h) = q;
      }
    } else {
      const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan));
      std::uniform_real_distribution<double> uniform(-bound, bound);
      for (Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng);
    }
    params.add(spec.name, std::move(m));
  }
  return params;
}

ag::Tensor SequenceNet::linear(std::span<const ag::Tensor> p, const Linear& l,
                               const ag::Tensor& x) const {
  return ag::add_row(ag::matmul_nt(x, p[l.weight]), p[l.bias]);
}

ag::Tensor SequenceNet::dropout(const ag::Tensor& x, Mode mode, Rng* rng) const {
  if (mode == Mode::eval || config_.dropout == 0.0) return x;
  if (!rng) throw ValidationError("train-mode dropout needs a random generator");
  const double keep = 1.0 - config_.dropout;
  std::bernoulli_distribution draw(keep);
  Matrix mask(x.rows(), x.cols());
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = draw(*rng) ? 1.0 / keep : 0.0;
  return ag::mul_const(x, mask);
}

ag::Tensor SequenceNet::gru(std::span<const ag::Tensor> p, const GruDirection& d,
                            const ag::Tensor& x, Index batch, bool reverse) const {
  const Index h = config_.hidden;
  const Index time = x.rows() / batch;
  const ag::Tensor& w_hh = p[d.w_hh];
  const ag::Tensor& b_hh = p[d.b_hh];
  ag::Tensor gates_in = ag::add_row(ag::matmul_nt(x, p[d.w_ih]), p[d.b_ih]);
  ag::Tensor state = ag::zeros(batch, h);
  std::vector<ag::Tensor> outputs(static_cast<std::size_t>(time));
  for (Index step = 0; step < time; ++step) {
    const Index t = reverse ? time - 1 - step : step;
    ag::Tensor gx = ag::slice_rows(gates_in, t * batch, batch);
    ag::Tensor gh = ag::add_row(ag::matmul_nt(state, w_hh), b_hh);
    ag::Tensor reset = ag::sigmoid(ag::slice_cols(gx, 0, h) + ag::slice_cols(gh, 0, h));
    ag::Tensor update = ag::sigmoid(ag::slice_cols(gx, h, h) + ag::slice_cols(gh, h, h));
    ag::Tensor cand =
        ag::tanh(ag::slice_cols(gx, 2 * h, h) + reset * ag::slice_cols(gh, 2 * h, h));
    // (1 - z) * n + z * h_prev
    state = cand + update * (state - cand);
    outputs[static_cast<std::size_t>(t)] = state;
  }
  return ag::concat_rows(outputs);
}

ag::Tensor SequenceNet::forward(std::span<const ag::Tensor> p, const ag::Tensor& x, Index batch,
                                Mode mode, Rng* rng) const {
  if (p.size() != specs_.size())
    throw ValidationError("expected " + std::to_string(specs_.size()) + " parameters, got " +
                          std::to_string(p.size()));
  if (batch < 1 || x.rows() % batch != 0 || x.rows() == 0)
    throw ValidationError("input rows must be a positive multiple of the batch size");
  if (x.cols() != config_.input_width)
    throw ValidationError("input width " + std::to_string(x.cols()) + ", expected " +
                          std::to_string(config_.input_width));

  ag::Tensor first = dropout(ag::leaky_relu(linear(p, in_proj_, x), kLeakySlope), mode, rng);
  ag::Tensor h = first;
  for (const auto& block : encoder_) {
    ag::Tensor inner = linear(p, block.fc2, ag::leaky_relu(linear(p, block.fc1, h), kLeakySlope));
    h = dropout(residual_body(h, inner), mode, rng);
  }
  for (const auto& layer : gru_) {
    ag::Tensor parts[2] = {gru(p, layer.forward, h, batch, false),
                           gru(p, layer.backward, h, batch, true)};
    h = ag::concat_cols(parts);
  }
  h = dropout(ag::leaky_relu(linear(p, gru_proj_, h), kLeakySlope), mode, rng);
  for (const auto& block : decoder_) {
    ag::Tensor inner = linear(p, block.fc2, ag::leaky_relu(linear(p, block.fc1, h), kLeakySlope));
    h = dropout(residual_body(h, inner), mode, rng);
  }
  if (skip_) h = ag::add(h, first);
  return linear(p, out_proj_, h);
}

// ---------------------------------------------------------------------------
// networks

int ModelDims::style_width() const { return std::accumulate(style_groups.begin(), style_groups.end(), 0); }

BlockConfig NetShape::block(Index input_width, Index output_width) const {
  BlockConfig c;
  c.input_width = input_width;
  c.hidden = hidden;
  c.residual_layers = residual_layers;
  c.gru_layers = gru_layers;
  c.dropout = dropout;
  c.output_width = output_width;
  return c;
}

Matrix repeat_per_frame(const Matrix& per_sequence, Index time) {
  return per_sequence.replicate(time, 1);
}

Matrix sequence_sum_matrix(Index batch, Index time) {
  Matrix s = Matrix::Zero(batch, batch * time);
  for (Index t = 0; t < time; ++t)
    for (Index b = 0; b < batch; ++b) s(b, t * batch + b) = 1.0;
  return s;
}

Generator::Generator(ModelDims dims, NetShape shape)
    : dims_(std::move(dims)),
      net_(shape.block(dims_.channels + dims_.style_width(), dims_.channels), true) {}

ParamSet Generator::identity_params() const {
  const Index n = dims_.channels;
  if (net_.config().hidden < n) throw ValidationError("identity generator needs hidden >= channels");
  ParamSet p = net_.init_params(0).zeros_like();
  Matrix& in = p.at("in_proj.weight");
  Matrix& out = p.at("out_proj.weight");
  for (Index i = 0; i < n; ++i) {
    in(i, i) = 1.0;
    out(i, i) = 1.0;
  }
  return p;
}

ag::Tensor Generator::forward(std::span<const ag::Tensor> params, const ag::Tensor& x,
                              const Matrix& styles, Index batch, Mode mode, Rng* rng) const {
  if (styles.rows() != batch || styles.cols() != dims_.style_width())
    throw ValidationError("style matrix is " + std::to_string(styles.rows()) + "x" +
                          std::to_string(styles.cols()) + ", expected " + std::to_string(batch) +
                          "x" + std::to_string(dims_.style_width()));
  if (batch < 1 || x.rows() % batch != 0)
    throw ValidationError("input rows must be a multiple of the batch size");
  ag::Tensor parts[2] = {x, ag::constant(repeat_per_frame(styles, x.rows() / batch))};
  return net_.forward(params, ag::concat_cols(parts), batch, mode, rng);
}

Discriminator::Discriminator(ModelDims dims, NetShape shape)
    : dims_(std::move(dims)), net_(shape.block(dims_.channels, 1 + dims_.style_width()), false) {}

CriticOutput Discriminator::forward(std::span<const ag::Tensor> params, const ag::Tensor& x,
                                    Index batch, Mode mode, Rng* rng) const {
  ag::Tensor out = net_.forward(params, x, batch, mode, rng);
  return {ag::slice_cols(out, 0, 1), ag::slice_cols(out, 1, dims_.style_width())};
}

FrameClassifier::FrameClassifier(Index channels, Index classes, NetShape shape)
    : net_(shape.block(channels, classes), false) {}

ag::Tensor FrameClassifier::forward(std::span<const ag::Tensor> params, const ag::Tensor& x,
                                    Index batch, Mode mode, Rng* rng) const {
  return net_.forward(params, x, batch, mode, rng);
}

// ---------------------------------------------------------------------------
// graph-free wrappers

namespace {

void require_finite(const Matrix& x, const char* what) {
  if (!x.allFinite()) throw ValidationError(std::string(what) + " contains non-finite values");
}

}  // namespace

Matrix generator_forward(const Generator& g, const ParamSet& params, const Matrix& x,
                         Index batch, const Matrix& styles, Mode mode, Rng* rng) {
  require_finite(x, "generator input");
  if (x.cols() != g.dims().channels) throw ValidationError("generator input has wrong channel count");
  ag::NoGradGuard guard;
  auto p = params.tensors(false);
  Matrix out = g.forward(p, ag::constant(x), styles, batch, mode, rng).value();
  if (!out.allFinite()) throw NumericalError("generator output contains non-finite values");
  return out;
}

std::pair<Matrix, Matrix> discriminator_forward(const Discriminator& d, const ParamSet& params,
                                                const Matrix& x, Index batch, Mode mode,
                                                Rng* rng) {
  require_finite(x, "discriminator input");
  ag::NoGradGuard guard;
  auto p = params.tensors(false);
  auto out = d.forward(p, ag::constant(x), batch, mode, rng);
  return {out.critic.value(), out.logits.value()};
}

Matrix classifier_forward(const FrameClassifier& v, const ParamSet& params, const Matrix& x,
                          Index batch, Mode mode, Rng* rng) {
  require_finite(x, "classifier input");
  ag::NoGradGuard guard;
  auto p = params.tensors(false);
  return v.forward(p, ag::constant(x), batch, mode, rng).value();
}

}  // namespace rigstyle
