#include "rigstyle/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "rigstyle/error.hpp"

namespace rigstyle {

namespace fs = std::filesystem;
using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoints assume little-endian doubles");

namespace {

// Purposes for derived random streams.
enum Purpose : std::uint64_t {
  kBatch = 0,
  kShuffle = 1,
  kGeneratorInit = 2,
  kDiscriminatorInit = 3,
  kClassifierInit = 4,
  kClassifierSplit = 5,
  kOracleInit = 6,
  kOracleSplit = 7,
  kClassifierBatch = 8,
  kOracleBatch = 9,
};

Rng derived_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b),
                    static_cast<std::uint32_t>(c)};
  return Rng(seq);
}

std::uint64_t derived_seed(std::uint64_t seed, std::uint64_t purpose) {
  return derived_rng(seed, purpose, 0, 0)();
}

std::string to_string(loss::ClassMode m) {
  return m == loss::ClassMode::grouped_softmax ? "grouped_softmax" : "independent_sigmoid";
}

std::string to_string(loss::VisemeTarget t) {
  return t == loss::VisemeTarget::soft ? "soft" : "hard";
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ValidationError("config " + key + ": not a number: " + v);
  return out;
}

long long parse_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ValidationError("config " + key + ": not an integer: " + v);
  return out;
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericalError(std::string(what) + " is not finite");
}

json shape_json(const NetShape& s) {
  return {{"hidden", s.hidden},
          {"residual_layers", s.residual_layers},
          {"gru_layers", s.gru_layers},
          {"dropout", s.dropout}};
}

NetShape shape_from(const json& j) {
  NetShape s;
  s.hidden = j.at("hidden").get<Index>();
  s.residual_layers = j.at("residual_layers").get<int>();
  s.gru_layers = j.at("gru_layers").get<int>();
  s.dropout = j.at("dropout").get<double>();
  return s;
}

// Archive layout: 8-byte magic, u64 header length, JSON header, then the raw
// doubles of every tensor listed in header["tensors"], in order.
constexpr char kMagic[8] = {'R', 'I', 'G', 'S', 'T', 'Y', 'L', '1'};

struct NamedMatrix {
  std::string name;
  const Matrix* value;
};

void write_archive(const fs::path& path, json header, const std::vector<NamedMatrix>& tensors) {
  json list = json::array();
  for (const auto& t : tensors)
    list.push_back({{"name", t.name}, {"rows", t.value->rows()}, {"cols", t.value->cols()}});
  header["tensors"] = std::move(list);
  const std::string text = header.dump();

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw ValidationError("cannot write " + tmp.string());
    const std::uint64_t n = text.size();
    os.write(kMagic, sizeof kMagic);
    os.write(reinterpret_cast<const char*>(&n), sizeof n);
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : tensors)
      os.write(reinterpret_cast<const char*>(t.value->data()),
               static_cast<std::streamsize>(t.value->size() * sizeof(double)));
    if (!os) throw ValidationError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

struct Archive {
  json header;
  std::vector<std::pair<std::string, Matrix>> tensors;

  ParamSet group(const std::string& prefix) const {
    ParamSet out;
    for (const auto& [name, value] : tensors)
      if (name.rfind(prefix, 0) == 0) out.add(name.substr(prefix.size()), value);
    return out;
  }
};

Archive read_archive(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError(LoadErrorKind::io, "cannot open " + path.string());
  char magic[8];
  std::uint64_t n = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0 || n > (1ull << 32))
    throw LoadError(LoadErrorKind::malformed_header, path.string() + " is not a rigstyle archive");
  std::string text(n, '\0');
  in.read(text.data(), static_cast<std::streamsize>(n));
  Archive a;
  try {
    a.header = json::parse(text);
    for (const auto& t : a.header.at("tensors")) {
      Matrix m(t.at("rows").get<Index>(), t.at("cols").get<Index>());
      in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
      a.tensors.emplace_back(t.at("name").get<std::string>(), std::move(m));
    }
  } catch (const json::exception& e) {
    throw LoadError(LoadErrorKind::malformed_header, path.string() + ": " + e.what());
  }
  if (!in) throw LoadError(LoadErrorKind::malformed_header, path.string() + " is truncated");
  in.peek();
  if (!in.eof()) throw LoadError(LoadErrorKind::malformed_header, path.string() + " has trailing data");
  for (const auto& [name, m] : a.tensors)
    if (!m.allFinite())
      throw LoadError(LoadErrorKind::non_finite_value, path.string() + ": " + name + " is not finite");
  return a;
}

void require_layout(const ParamSet& got, const ParamSet& expected, const std::string& what) {
  if (!got.same_layout(expected))
    throw LoadError(LoadErrorKind::malformed_header, what + " parameters do not match the stored shape");
}

void add_group(std::vector<NamedMatrix>& out, const std::string& prefix, const ParamSet& p) {
  for (std::size_t i = 0; i < p.size(); ++i) out.push_back({prefix + p.name(i), &p[i]});
}

// Stretch, centre-crop back to the window length, then add noise.
Window augment(const Window& w, const TrainingConfig& config, Rng& rng) {
  if (config.stretch_max == 1.0 && config.noise_sigma == 0.0) return w;
  Window out = w;
  const Index T = w.data.rows();
  std::uniform_real_distribution<double> factor(config.stretch_min, config.stretch_max);
  const double f = factor(rng);
  if (f != 1.0) {
    Matrix s = time_stretch(w.data, f);
    const Index start = (s.rows() - T) / 2;
    out.data = s.middleRows(start, T);
    if (w.viseme_labels) {
      Matrix l = time_stretch(*w.viseme_labels, f).middleRows(start, T);
      for (Index r = 0; r < l.rows(); ++r) l.row(r) /= l.row(r).sum();
      out.viseme_labels = std::move(l);
    }
  }
  out.data = add_noise(out.data, config.noise_sigma, rng);
  return out;
}

Matrix batch_styles(const std::vector<StyleCode>& codes) {
  Matrix s(static_cast<Index>(codes.size()), codes.front().width());
  for (std::size_t b = 0; b < codes.size(); ++b) {
    auto bits = codes[b].bits();
    for (std::size_t c = 0; c < bits.size(); ++c) s(static_cast<Index>(b), static_cast<Index>(c)) = bits[c];
  }
  return s;
}

std::vector<Matrix> values_of(const std::vector<ag::Tensor>& grads) {
  std::vector<Matrix> out;
  out.reserve(grads.size());
  for (const auto& g : grads) out.push_back(g.value());
  return out;
}

bool all_finite(const std::vector<Matrix>& ms) {
  return std::all_of(ms.begin(), ms.end(), [](const Matrix& m) { return m.allFinite(); });
}

// 90/10 split of clip indices, shuffled by `seed`.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_clips(std::size_t n, Rng rng) {
  if (n < 2) throw ValidationError("need at least two clips to hold out a validation split");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.1 * static_cast<double>(n))));
  std::vector<std::size_t> val(order.end() - static_cast<std::ptrdiff_t>(n_val), order.end());
  order.resize(n - n_val);
  std::sort(order.begin(), order.end());
  std::sort(val.begin(), val.end());
  return {order, val};
}

// Minibatch Adam over windows for a frame classifier; `loss_fn` builds the loss
// for one batch.
using ClassifierLoss =
    std::function<ag::Tensor(const ag::Tensor& logits, const Batch& batch)>;

std::vector<double> train_classifier(const FrameClassifier& net, ParamSet& params,
                                     const std::vector<Window>& windows, const TrainingConfig& config,
                                     std::uint64_t stream, const ClassifierLoss& loss_fn) {
  std::vector<double> losses;
  if (config.classifier_epochs == 0) return losses;
  if (windows.empty()) throw ValidationError("no training windows for the classifier");
  AdamState opt = AdamState::zeros_like(params);
  const Index B = config.batch_size;
  const Index n_batches = (static_cast<Index>(windows.size()) + B - 1) / B;
  for (int epoch = 0; epoch < config.classifier_epochs; ++epoch) {
    std::vector<std::size_t> order(windows.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle = derived_rng(config.seed, stream, static_cast<std::uint64_t>(epoch), kShuffle);
    std::shuffle(order.begin(), order.end(), shuffle);
    double sum = 0.0;
    for (Index b = 0; b < n_batches; ++b) {
      Rng rng = derived_rng(config.seed, stream, static_cast<std::uint64_t>(epoch),
                            1000 + static_cast<std::uint64_t>(b));
      std::vector<Window> chosen;
      for (Index i = b * B; i < std::min<Index>((b + 1) * B, static_cast<Index>(windows.size())); ++i)
        chosen.push_back(windows[order[static_cast<std::size_t>(i)]]);
      Batch batch = assemble_batch(chosen);
      auto p = params.tensors(true);
      ag::Tensor logits = net.forward(p, ag::constant(batch.data), batch.size, Mode::train, &rng);
      ag::Tensor l = loss_fn(logits, batch);
      require_finite(l.item(), "classifier loss");
      auto grads = values_of(ag::grad(l, p));
      if (!all_finite(grads)) throw NumericalError("classifier gradient is not finite");
      adam_step(params, grads, opt, config.classifier_learning_rate, 0.9, config.beta2, config.adam_eps);
      sum += l.item();
    }
    losses.push_back(sum / static_cast<double>(n_batches));
  }
  return losses;
}

}  // namespace

// ---------------------------------------------------------------------------
// config

void TrainingConfig::validate() const {
  weights.validate();
  for (double r : {learning_rate, classifier_learning_rate, adam_eps})
    if (!std::isfinite(r) || r <= 0.0) throw ValidationError("rates must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ValidationError("Adam betas must lie in [0,1)");
  if (batch_size < 1) throw ValidationError("batch size must be at least 1");
  if (window < 1 || stride < 1) throw ValidationError("window and stride must be positive");
  if (epochs < 0 || classifier_epochs < 0) throw ValidationError("epoch counts must be non-negative");
  if (n_critic < 1) throw ValidationError("n_critic must be at least 1");
  if (!(stretch_min >= 1.0 && stretch_max >= stretch_min && stretch_max <= 2.0))
    throw ValidationError("stretch range must satisfy 1 <= min <= max <= 2");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma))
    throw ValidationError("noise sigma must be non-negative");
  if (checkpoint_every < 0) throw ValidationError("checkpoint cadence must be non-negative");
  shape.block(1, 1).validate();
  classifier_shape.block(1, 1).validate();
  for (Index c : mouth_channels)
    if (c < 0) throw ValidationError("mouth channel indices must be non-negative");
  if (weights.mouth > 0.0 && mouth_channels.empty())
    throw ValidationError("cosine mouth term needs mouth channels");
}

std::string TrainingConfig::to_text() const {
  std::ostringstream os;
  auto kv = [&](const char* k, const std::string& v) { os << k << " = " << v << '\n'; };
  kv("weights.cycle", fmt(weights.cycle));
  kv("weights.cls", fmt(weights.cls));
  kv("weights.viseme", fmt(weights.viseme));
  kv("weights.adv", fmt(weights.adv));
  kv("weights.gp", fmt(weights.gp));
  kv("weights.mouth", fmt(weights.mouth));
  kv("class_mode", to_string(class_mode));
  kv("viseme_target", to_string(viseme_target));
  kv("learning_rate", fmt(learning_rate));
  kv("beta1", fmt(beta1));
  kv("beta2", fmt(beta2));
  kv("adam_eps", fmt(adam_eps));
  kv("batch_size", std::to_string(batch_size));
  kv("window", std::to_string(window));
  kv("stride", std::to_string(stride));
  kv("epochs", std::to_string(epochs));
  kv("n_critic", std::to_string(n_critic));
  kv("seed", std::to_string(seed));
  kv("stretch_min", fmt(stretch_min));
  kv("stretch_max", fmt(stretch_max));
  kv("noise_sigma", fmt(noise_sigma));
  kv("checkpoint_every", std::to_string(checkpoint_every));
  kv("hidden", std::to_string(shape.hidden));
  kv("residual_layers", std::to_string(shape.residual_layers));
  kv("gru_layers", std::to_string(shape.gru_layers));
  kv("dropout", fmt(shape.dropout));
  std::string mouth;
  for (std::size_t i = 0; i < mouth_channels.size(); ++i)
    mouth += (i ? "," : "") + std::to_string(mouth_channels[i]);
  kv("mouth_channels", mouth);
  kv("classifier.hidden", std::to_string(classifier_shape.hidden));
  kv("classifier.residual_layers", std::to_string(classifier_shape.residual_layers));
  kv("classifier.gru_layers", std::to_string(classifier_shape.gru_layers));
  kv("classifier.dropout", fmt(classifier_shape.dropout));
  kv("classifier.epochs", std::to_string(classifier_epochs));
  kv("classifier.learning_rate", fmt(classifier_learning_rate));
  return os.str();
}

TrainingConfig TrainingConfig::from_text(const std::string& text) {
  TrainingConfig c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string k = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    auto d = [&] { return parse_double(k, v); };
    auto i = [&] { return parse_int(k, v); };
    if (k == "weights.cycle") c.weights.cycle = d();
    else if (k == "weights.cls") c.weights.cls = d();
    else if (k == "weights.viseme") c.weights.viseme = d();
    else if (k == "weights.adv") c.weights.adv = d();
    else if (k == "weights.gp") c.weights.gp = d();
    else if (k == "weights.mouth") c.weights.mouth = d();
    else if (k == "class_mode") {
      if (v == "grouped_softmax") c.class_mode = loss::ClassMode::grouped_softmax;
      else if (v == "independent_sigmoid") c.class_mode = loss::ClassMode::independent_sigmoid;
      else throw ValidationError("config class_mode: unknown value " + v);
    } else if (k == "viseme_target") {
      if (v == "soft") c.viseme_target = loss::VisemeTarget::soft;
      else if (v == "hard") c.viseme_target = loss::VisemeTarget::hard;
      else throw ValidationError("config viseme_target: unknown value " + v);
    }
    else if (k == "learning_rate") c.learning_rate = d();
    else if (k == "beta1") c.beta1 = d();
    else if (k == "beta2") c.beta2 = d();
    else if (k == "adam_eps") c.adam_eps = d();
    else if (k == "batch_size") c.batch_size = i();
    else if (k == "window") c.window = i();
    else if (k == "stride") c.stride = i();
    else if (k == "epochs") c.epochs = static_cast<int>(i());
    else if (k == "n_critic") c.n_critic = static_cast<int>(i());
    else if (k == "seed") {
      if (i() < 0) throw ValidationError("config seed must be non-negative");
      c.seed = static_cast<std::uint64_t>(i());
    }
    else if (k == "stretch_min") c.stretch_min = d();
    else if (k == "stretch_max") c.stretch_max = d();
    else if (k == "noise_sigma") c.noise_sigma = d();
    else if (k == "checkpoint_every") c.checkpoint_every = static_cast<int>(i());
    else if (k == "hidden") c.shape.hidden = i();
    else if (k == "residual_layers") c.shape.residual_layers = static_cast<int>(i());
    else if (k == "gru_layers") c.shape.gru_layers = static_cast<int>(i());
    else if (k == "dropout") c.shape.dropout = d();
    else if (k == "mouth_channels") {
      c.mouth_channels.clear();
      std::istringstream items(v);
      std::string item;
      while (std::getline(items, item, ','))
        if (!trim(item).empty()) c.mouth_channels.push_back(parse_int(k, trim(item)));
    }
    else if (k == "classifier.hidden") c.classifier_shape.hidden = i();
    else if (k == "classifier.residual_layers") c.classifier_shape.residual_layers = static_cast<int>(i());
    else if (k == "classifier.gru_layers") c.classifier_shape.gru_layers = static_cast<int>(i());
    else if (k == "classifier.dropout") c.classifier_shape.dropout = d();
    else if (k == "classifier.epochs") c.classifier_epochs = static_cast<int>(i());
    else if (k == "classifier.learning_rate") c.classifier_learning_rate = d();
    else throw ValidationError("config: unknown key " + k);
  }
  c.validate();
  return c;
}

TrainingConfig TrainingConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str());
}

std::uint64_t TrainingConfig::hash() const {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : to_text()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

// ---------------------------------------------------------------------------
// optimizer

void adam_step(ParamSet& params, const std::vector<Matrix>& grads, AdamState& state,
               double learning_rate, double beta1, double beta2, double eps) {
  if (grads.size() != params.size() || !state.m.same_layout(params) || !state.v.same_layout(params))
    throw ValidationError("optimizer state does not match the parameters");
  state.t += 1;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& g = grads[i];
    if (g.rows() != params[i].rows() || g.cols() != params[i].cols())
      throw ValidationError("gradient shape does not match " + params.name(i));
    state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
    state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g.cwiseProduct(g);
    params[i].array() -= learning_rate * (state.m[i].array() / c1) /
                         ((state.v[i].array() / c2).sqrt() + eps);
  }
}

// ---------------------------------------------------------------------------
// state and checkpoints

Networks::Networks(const ModelDims& dims, const NetShape& shape, const NetShape& classifier_shape)
    : generator(dims, shape),
      discriminator(dims, shape),
      viseme(dims.channels, dims.visemes, classifier_shape) {}

Networks::Networks(const TrainState& state)
    : Networks(state.dims, state.shape, state.classifier_shape) {}

TrainState init_state(const ModelDims& dims, const TrainingConfig& config, ParamSet viseme) {
  config.validate();
  for (Index c : config.mouth_channels)
    if (c >= dims.channels) throw ValidationError("mouth channel index exceeds the channel count");
  TrainState s;
  s.dims = dims;
  s.shape = config.shape;
  s.classifier_shape = config.classifier_shape;
  Networks nets(s);
  s.generator = nets.generator.init_params(derived_seed(config.seed, kGeneratorInit));
  s.discriminator = nets.discriminator.init_params(derived_seed(config.seed, kDiscriminatorInit));
  ParamSet expected_v = nets.viseme.init_params(0);
  if (!viseme.same_layout(expected_v))
    throw ValidationError("viseme classifier parameters do not match the configured shape");
  s.viseme = std::move(viseme);
  s.generator_opt = AdamState::zeros_like(s.generator);
  s.discriminator_opt = AdamState::zeros_like(s.discriminator);
  s.seed = config.seed;
  s.config_text = config.to_text();
  return s;
}

void save_checkpoint(const TrainState& s, const fs::path& path) {
  json h;
  h["kind"] = "train_state";
  h["version"] = 1;
  h["dims"] = {{"channels", s.dims.channels}, {"style_groups", s.dims.style_groups}, {"visemes", s.dims.visemes}};
  h["shape"] = shape_json(s.shape);
  h["classifier_shape"] = shape_json(s.classifier_shape);
  h["epoch"] = s.epoch;
  h["batch_in_epoch"] = s.batch_in_epoch;
  h["step"] = s.step;
  h["seed"] = s.seed;
  h["config"] = s.config_text;
  h["generator_adam_t"] = s.generator_opt.t;
  h["discriminator_adam_t"] = s.discriminator_opt.t;
  json hist = json::array();
  for (const auto& r : s.history)
    hist.push_back({r.step, std::string(1, r.phase), r.epoch, r.cycle, r.cls, r.viseme, r.mouth, r.adv,
                    r.gp, r.total});
  h["history"] = std::move(hist);

  std::vector<NamedMatrix> tensors;
  add_group(tensors, "generator/", s.generator);
  add_group(tensors, "discriminator/", s.discriminator);
  add_group(tensors, "viseme/", s.viseme);
  add_group(tensors, "generator_adam_m/", s.generator_opt.m);
  add_group(tensors, "generator_adam_v/", s.generator_opt.v);
  add_group(tensors, "discriminator_adam_m/", s.discriminator_opt.m);
  add_group(tensors, "discriminator_adam_v/", s.discriminator_opt.v);
  write_archive(path, std::move(h), tensors);
}

TrainState load_checkpoint(const fs::path& path) {
  Archive a = read_archive(path);
  TrainState s;
  try {
    const json& h = a.header;
    if (h.at("kind") != "train_state" || h.at("version") != 1)
      throw LoadError(LoadErrorKind::malformed_header, path.string() + " is not a training checkpoint");
    s.dims.channels = h.at("dims").at("channels").get<Index>();
    s.dims.style_groups = h.at("dims").at("style_groups").get<std::vector<int>>();
    s.dims.visemes = h.at("dims").at("visemes").get<Index>();
    s.shape = shape_from(h.at("shape"));
    s.classifier_shape = shape_from(h.at("classifier_shape"));
    s.epoch = h.at("epoch").get<int>();
    s.batch_in_epoch = h.at("batch_in_epoch").get<Index>();
    s.step = h.at("step").get<std::int64_t>();
    s.seed = h.at("seed").get<std::uint64_t>();
    s.config_text = h.at("config").get<std::string>();
    s.generator_opt.t = h.at("generator_adam_t").get<std::int64_t>();
    s.discriminator_opt.t = h.at("discriminator_adam_t").get<std::int64_t>();
    for (const auto& r : h.at("history")) {
      HistoryRow row;
      row.step = r.at(0).get<std::int64_t>();
      row.phase = r.at(1).get<std::string>().at(0);
      row.epoch = r.at(2).get<int>();
      row.cycle = r.at(3).get<double>();
      row.cls = r.at(4).get<double>();
      row.viseme = r.at(5).get<double>();
      row.mouth = r.at(6).get<double>();
      row.adv = r.at(7).get<double>();
      row.gp = r.at(8).get<double>();
      row.total = r.at(9).get<double>();
      s.history.push_back(row);
    }
  } catch (const json::exception& e) {
    throw LoadError(LoadErrorKind::malformed_header, path.string() + ": " + e.what());
  }
  s.generator = a.group("generator/");
  s.discriminator = a.group("discriminator/");
  s.viseme = a.group("viseme/");
  s.generator_opt.m = a.group("generator_adam_m/");
  s.generator_opt.v = a.group("generator_adam_v/");
  s.discriminator_opt.m = a.group("discriminator_adam_m/");
  s.discriminator_opt.v = a.group("discriminator_adam_v/");
  Networks nets(s);
  const ParamSet g = nets.generator.init_params(0), d = nets.discriminator.init_params(0);
  require_layout(s.generator, g, "generator");
  require_layout(s.discriminator, d, "discriminator");
  require_layout(s.viseme, nets.viseme.init_params(0), "viseme classifier");
  require_layout(s.generator_opt.m, g, "generator optimizer");
  require_layout(s.generator_opt.v, g, "generator optimizer");
  require_layout(s.discriminator_opt.m, d, "discriminator optimizer");
  require_layout(s.discriminator_opt.v, d, "discriminator optimizer");
  return s;
}

void write_history_csv(const std::vector<HistoryRow>& history, const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw ValidationError("cannot write " + path.string());
  os << "step,phase,epoch,cycle,cls,viseme,mouth,adv,gp,total\n";
  for (const auto& r : history)
    os << r.step << ',' << r.phase << ',' << r.epoch << ',' << fmt(r.cycle) << ',' << fmt(r.cls) << ','
       << fmt(r.viseme) << ',' << fmt(r.mouth) << ',' << fmt(r.adv) << ',' << fmt(r.gp) << ','
       << fmt(r.total) << '\n';
}

void save_classifier(const ClassifierCheckpoint& c, const fs::path& path) {
  json h;
  h["kind"] = c.kind;
  h["version"] = 1;
  h["channels"] = c.channels;
  h["classes"] = c.classes;
  h["style_groups"] = c.style_groups;
  h["shape"] = shape_json(c.shape);
  h["validation_accuracy"] = c.validation_accuracy;
  std::vector<NamedMatrix> tensors;
  add_group(tensors, "classifier/", c.params);
  write_archive(path, std::move(h), tensors);
}

ClassifierCheckpoint load_classifier(const fs::path& path) {
  Archive a = read_archive(path);
  ClassifierCheckpoint c;
  try {
    const json& h = a.header;
    c.kind = h.at("kind").get<std::string>();
    if ((c.kind != "viseme" && c.kind != "style_oracle") || h.at("version") != 1)
      throw LoadError(LoadErrorKind::malformed_header, path.string() + " is not a classifier archive");
    c.channels = h.at("channels").get<Index>();
    c.classes = h.at("classes").get<Index>();
    c.style_groups = h.at("style_groups").get<std::vector<int>>();
    c.shape = shape_from(h.at("shape"));
    c.validation_accuracy = h.at("validation_accuracy").get<double>();
  } catch (const json::exception& e) {
    throw LoadError(LoadErrorKind::malformed_header, path.string() + ": " + e.what());
  }
  c.params = a.group("classifier/");
  require_layout(c.params, c.network().init_params(0), "classifier");
  return c;
}

// ---------------------------------------------------------------------------
// steps

StyleCode sample_target_style(const StyleCode& source, Rng& rng) {
  auto all = StyleCode::enumerate(source.group_sizes());
  all.erase(std::remove(all.begin(), all.end(), source), all.end());
  if (all.empty()) throw ValidationError("no target style differs from the source");
  std::uniform_int_distribution<std::size_t> pick(0, all.size() - 1);
  StyleCode out = all[pick(rng)];
  return StyleCode(out.group_sizes(), out.values(), source.group_names());
}

Rng batch_rng(std::uint64_t seed, int epoch, Index batch, std::uint64_t purpose) {
  return derived_rng(seed, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(batch), purpose);
}

DiscriminatorStepResult discriminator_step(const Networks& nets, TrainState& state,
                                           const TrainingConfig& config, const Batch& batch, Rng& rng) {
  const Index B = batch.size;
  const auto& groups = state.dims.style_groups;
  std::vector<StyleCode> targets;
  for (const auto& code : batch.codes) targets.push_back(sample_target_style(code, rng));
  const Matrix fake =
      generator_forward(nets.generator, state.generator, batch.data, B, batch_styles(targets), Mode::train, &rng);

  auto p = state.discriminator.tensors(true);
  auto real_out = nets.discriminator.forward(p, ag::constant(batch.data), B, Mode::train, &rng);
  auto fake_out = nets.discriminator.forward(p, ag::constant(fake), B, Mode::train, &rng);
  ag::Tensor cls = loss::cls_real(real_out.logits, batch.styles, groups, B, config.class_mode);
  ag::Tensor gp;
  if (config.weights.gp > 0.0) {
    loss::Critic critic = [&](const ag::Tensor& xhat) {
      return nets.discriminator.forward(p, xhat, B, Mode::train, &rng).critic;
    };
    gp = loss::gradient_penalty(critic, batch.data, fake, B, rng);
  }
  ag::Tensor adv = loss::adversarial(real_out.critic, fake_out.critic, gp, config.weights.gp);

  DiscriminatorStepResult r;
  r.terms.cls = cls.item();
  r.terms.adv = adv.item();
  r.gp = gp.defined() ? gp.item() : 0.0;
  require_finite(r.terms.cls, "discriminator classification loss");
  require_finite(r.terms.adv, "adversarial loss");
  r.total = loss::total_discriminator_loss(r.terms, config.weights);

  ag::Tensor total = ag::add(ag::scale(cls, config.weights.cls), ag::scale(adv, config.weights.adv));
  auto grads = values_of(ag::grad(total, p));
  if (!all_finite(grads)) throw NumericalError("discriminator gradient is not finite");
  adam_step(state.discriminator, grads, state.discriminator_opt, config.learning_rate, config.beta1,
            config.beta2, config.adam_eps);
  return r;
}

GeneratorStepResult generator_step(const Networks& nets, TrainState& state, const TrainingConfig& config,
                                   const Batch& batch, Rng& rng) {
  const Index B = batch.size;
  const auto& groups = state.dims.style_groups;
  const auto& w = config.weights;
  std::vector<StyleCode> targets;
  for (const auto& code : batch.codes) targets.push_back(sample_target_style(code, rng));
  const Matrix target_bits = batch_styles(targets);

  auto p = state.generator.tensors(true);
  auto dp = state.discriminator.tensors(false);
  auto vp = state.viseme.tensors(false);
  ag::Tensor x = ag::constant(batch.data);
  ag::Tensor fake = nets.generator.forward(p, x, target_bits, B, Mode::train, &rng);
  ag::Tensor cycled = nets.generator.forward(p, fake, batch.styles, B, Mode::train, &rng);
  ag::Tensor cyc = loss::cycle(x, cycled, B);

  auto fake_out = nets.discriminator.forward(dp, fake, B, Mode::train, &rng);
  ag::Tensor cls = loss::cls_fake(fake_out.logits, target_bits, groups, B, config.class_mode);
  ag::Tensor real_critic;
  {
    ag::NoGradGuard guard;
    real_critic = nets.discriminator.forward(dp, x, B, Mode::train, &rng).critic;
  }
  ag::Tensor adv = loss::adversarial(real_critic, fake_out.critic, ag::Tensor(), 0.0);

  // The classifier is frozen and deterministic (eval mode).
  ag::Tensor source_logits = nets.viseme.forward(vp, x, B, Mode::eval, nullptr);
  ag::Tensor vis, mouth;
  if (w.viseme > 0.0) {
    vis = loss::viseme(source_logits, nets.viseme.forward(vp, fake, B, Mode::eval, nullptr), config.viseme_target);
  } else {
    ag::NoGradGuard guard;
    vis = loss::viseme(source_logits, nets.viseme.forward(vp, fake.detach(), B, Mode::eval, nullptr),
                       config.viseme_target);
  }
  if (w.mouth > 0.0) {
    mouth = loss::cosine_mouth(x, fake, config.mouth_channels);
  } else {
    ag::NoGradGuard guard;
    mouth = loss::cosine_mouth(x, fake.detach(), config.mouth_channels);
  }

  GeneratorStepResult r;
  r.terms = {cyc.item(), cls.item(), vis.item(), mouth.item(), adv.item()};
  for (double v : {r.terms.cycle, r.terms.cls, r.terms.viseme, r.terms.mouth, r.terms.adv})
    require_finite(v, "generator loss term");
  r.total = loss::total_generator_loss(r.terms, w);

  ag::Tensor total = ag::add(ag::scale(cyc, w.cycle), ag::scale(cls, w.cls));
  total = ag::sub(total, ag::scale(adv, w.adv));
  if (w.viseme > 0.0) total = ag::add(total, ag::scale(vis, w.viseme));
  if (w.mouth > 0.0) total = ag::add(total, ag::scale(mouth, w.mouth));
  auto grads = values_of(ag::grad(total, p));
  if (!all_finite(grads)) throw NumericalError("generator gradient is not finite");
  adam_step(state.generator, grads, state.generator_opt, config.learning_rate, config.beta1, config.beta2,
            config.adam_eps);
  return r;
}

// ---------------------------------------------------------------------------
// fit

std::vector<Window> training_windows(const std::vector<RigClip>& clips, const TrainingConfig& config) {
  std::vector<Window> out;
  for (const auto& clip : clips) {
    auto w = extract_windows(clip, config.window, config.stride);
    out.insert(out.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
  }
  return out;
}

void fit(const std::vector<Window>& windows, const TrainingConfig& config, TrainState& state,
         const FitOptions& options) {
  config.validate();
  if (state.seed != config.seed || state.config_text != config.to_text())
    throw ValidationError("training state was created with a different configuration");
  if (state.epoch >= config.epochs) return;
  if (windows.empty()) throw ValidationError("no training windows");
  for (const auto& w : windows) {
    if (w.data.rows() != config.window || w.data.cols() != state.dims.channels)
      throw ValidationError("window " + w.source_clip + " does not match the configured shape");
    if (w.style.group_sizes() != state.dims.style_groups)
      throw ValidationError("window " + w.source_clip + " has a different style grouping");
  }

  const Networks nets(state);
  const Index B = config.batch_size;
  const Index n_batches = (static_cast<Index>(windows.size()) + B - 1) / B;
  std::int64_t done = 0;
  auto checkpoint = [&](const std::string& name) {
    if (!options.checkpoint_dir.empty()) save_checkpoint(state, options.checkpoint_dir / name);
  };

  while (state.epoch < config.epochs) {
    const int epoch = state.epoch;
    std::vector<std::size_t> order(windows.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle = batch_rng(config.seed, epoch, 0, kShuffle);
    std::shuffle(order.begin(), order.end(), shuffle);

    for (Index b = state.batch_in_epoch; b < n_batches; ++b) {
      if (options.max_batches && done >= *options.max_batches) return;
      Rng rng = batch_rng(config.seed, epoch, b, kBatch);
      std::vector<Window> chosen;
      for (Index i = b * B; i < std::min<Index>((b + 1) * B, static_cast<Index>(windows.size())); ++i)
        chosen.push_back(augment(windows[order[static_cast<std::size_t>(i)]], config, rng));
      const Batch batch = assemble_batch(chosen);

      auto d = discriminator_step(nets, state, config, batch, rng);
      state.step += 1;
      state.history.push_back({state.step, 'D', epoch, 0.0, d.terms.cls, 0.0, 0.0, d.terms.adv, d.gp, d.total});
      if (state.step % config.n_critic == 0) {
        auto g = generator_step(nets, state, config, batch, rng);
        state.history.push_back({state.step, 'G', epoch, g.terms.cycle, g.terms.cls, g.terms.viseme,
                                 g.terms.mouth, g.terms.adv, 0.0, g.total});
      }
      state.batch_in_epoch = b + 1;
      ++done;
    }
    state.epoch = epoch + 1;
    state.batch_in_epoch = 0;
    if (config.checkpoint_every > 0 && state.epoch % config.checkpoint_every == 0)
      checkpoint("checkpoint_epoch" + std::to_string(state.epoch) + ".bin");
    if (options.on_epoch) options.on_epoch(state);
  }
  checkpoint("final.bin");
}

// ---------------------------------------------------------------------------
// classifiers

std::vector<Index> argmax_rows(const Matrix& m) {
  std::vector<Index> out(static_cast<std::size_t>(m.rows()), 0);
  for (Index r = 0; r < m.rows(); ++r) {
    Index best = 0;
    for (Index c = 1; c < m.cols(); ++c)
      if (m(r, c) > m(r, best)) best = c;
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

ClassifierResult pretrain_viseme_classifier(const std::vector<RigClip>& clips, const TrainingConfig& config) {
  config.validate();
  if (clips.empty()) throw ValidationError("no clips to pretrain on");
  for (const auto& c : clips)
    if (!c.visemes) throw ValidationError("clip " + c.clip_id + " has no viseme labels");
  const Index channels = clips.front().channels();
  const Index classes = clips.front().visemes->classes();
  for (const auto& c : clips)
    if (c.channels() != channels || c.visemes->classes() != classes)
      throw ValidationError("clips disagree on channel or viseme counts");

  auto [train_idx, val_idx] = split_clips(clips.size(), derived_rng(config.seed, kClassifierSplit, 0, 0));
  std::vector<RigClip> train;
  for (auto i : train_idx) train.push_back(clips[i]);
  FrameClassifier net(channels, classes, config.classifier_shape);
  ClassifierResult r;
  r.params = net.init_params(derived_seed(config.seed, kClassifierInit));
  r.epoch_losses = train_classifier(net, r.params, training_windows(train, config), config, kClassifierBatch,
                                    [](const ag::Tensor& logits, const Batch& batch) {
                                      return loss::viseme_pretrain(logits, *batch.visemes);
                                    });
  Index hits = 0, frames = 0;
  for (auto i : val_idx) {
    const RigClip& c = clips[i];
    r.validation_clips.push_back(c.clip_id);
    auto pred = argmax_rows(classifier_forward(net, r.params, c.frames, 1, Mode::eval));
    auto truth = argmax_rows(c.visemes->values);
    for (std::size_t t = 0; t < pred.size(); ++t) hits += pred[t] == truth[t];
    frames += static_cast<Index>(pred.size());
  }
  r.validation_accuracy = static_cast<double>(hits) / static_cast<double>(frames);
  return r;
}

StyleCode predict_style(const FrameClassifier& oracle, const ParamSet& params, const Matrix& frames,
                        const std::vector<int>& style_groups) {
  const int width = std::accumulate(style_groups.begin(), style_groups.end(), 0);
  if (oracle.classes() != width) throw ValidationError("oracle output width does not match the style groups");
  Matrix logits = classifier_forward(oracle, params, frames, 1, Mode::eval);
  std::vector<int> values;
  Index offset = 0;
  for (int size : style_groups) {
    std::vector<Index> votes(static_cast<std::size_t>(size), 0);
    for (Index v : argmax_rows(logits.middleCols(offset, size))) ++votes[static_cast<std::size_t>(v)];
    values.push_back(static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin()));
    offset += size;
  }
  return StyleCode(style_groups, values);
}

ClassifierResult train_style_oracle(const std::vector<RigClip>& clips, const TrainingConfig& config) {
  config.validate();
  if (clips.empty()) throw ValidationError("no clips to train the style oracle on");
  const Index channels = clips.front().channels();
  const auto groups = clips.front().style.group_sizes();
  for (const auto& c : clips)
    if (c.channels() != channels || c.style.group_sizes() != groups)
      throw ValidationError("clips disagree on channel count or style grouping");

  auto [train_idx, val_idx] = split_clips(clips.size(), derived_rng(config.seed, kOracleSplit, 0, 0));
  std::vector<RigClip> train;
  for (auto i : train_idx) train.push_back(clips[i]);
  const int width = std::accumulate(groups.begin(), groups.end(), 0);
  FrameClassifier net(channels, width, config.classifier_shape);
  ClassifierResult r;
  r.params = net.init_params(derived_seed(config.seed, kOracleInit));
  r.epoch_losses = train_classifier(net, r.params, training_windows(train, config), config, kOracleBatch,
                                    [&](const ag::Tensor& logits, const Batch& batch) {
                                      return loss::classification(logits, batch.styles, groups, batch.size);
                                    });
  Index hits = 0;
  for (auto i : val_idx) {
    r.validation_clips.push_back(clips[i].clip_id);
    hits += predict_style(net, r.params, clips[i].frames, groups) == clips[i].style;
  }
  r.validation_accuracy = static_cast<double>(hits) / static_cast<double>(val_idx.size());
  return r;
}

}  // namespace rigstyle
