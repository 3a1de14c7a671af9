#include "davdd/nn.hpp"

#include <cmath>
#include <random>

#include "davdd/error.hpp"
#include "davdd/io.hpp"

namespace davdd {

std::string to_string(Architecture a) { return a == Architecture::kMlp ? "mlp" : "convnet"; }

std::string to_string(Normalization n) {
  return n == Normalization::kNone ? "none" : "instance";
}

Architecture parse_architecture(const std::string& s) {
  if (s == "mlp") return Architecture::kMlp;
  if (s == "convnet") return Architecture::kConvNet;
  throw ConfigError("unknown architecture '" + s + "' (expected mlp or convnet)");
}

Normalization parse_normalization(const std::string& s) {
  if (s == "none") return Normalization::kNone;
  if (s == "instance") return Normalization::kInstance;
  throw ConfigError("unknown normalization '" + s + "' (expected none or instance)");
}

void to_json(Json& j, const EncoderConfig& c) {
  j = Json{{"architecture", to_string(c.architecture)},
           {"input_shape", c.input_shape},
           {"hidden", c.hidden},
           {"blocks", c.blocks},
           {"channels", c.channels},
           {"feature_dim", c.feature_dim},
           {"normalization", to_string(c.normalization)}};
}

void from_json(const Json& j, EncoderConfig& c) {
  const EncoderConfig d;
  c.architecture = parse_architecture(j.value("architecture", to_string(d.architecture)));
  c.input_shape = j.value("input_shape", d.input_shape);
  c.hidden = j.value("hidden", d.hidden);
  c.blocks = j.value("blocks", d.blocks);
  c.channels = j.value("channels", d.channels);
  c.feature_dim = j.value("feature_dim", d.feature_dim);
  c.normalization = parse_normalization(j.value("normalization", to_string(d.normalization)));
}

void to_json(Json& j, const PairConfig& c) { j = Json{{"audio", c.audio}, {"visual", c.visual}}; }

void from_json(const Json& j, PairConfig& c) {
  const PairConfig d = default_pair_config();
  c.audio = j.contains("audio") ? j.at("audio").get<EncoderConfig>() : d.audio;
  c.visual = j.contains("visual") ? j.at("visual").get<EncoderConfig>() : d.visual;
}

PairConfig default_pair_config() {
  PairConfig c;
  c.audio.input_shape = {1, 16, 16};
  c.visual.input_shape = {3, 16, 16};
  return c;
}

void PairConfig::validate() const {
  if (audio.feature_dim != visual.feature_dim) {
    throw ConfigError("audio and visual encoders must share feature_dim (" +
                      std::to_string(audio.feature_dim) + " vs " +
                      std::to_string(visual.feature_dim) + ")");
  }
}

std::size_t LayerSpec::param_count() const {
  return kind == LayerKind::kLinear || kind == LayerKind::kConv ? 2 : 0;
}

Model::Model(Shape input_shape, std::vector<LayerSpec> layers, std::vector<Tensor> params)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)), params_(std::move(params)) {
  std::size_t expected = 0;
  for (const auto& l : layers_) expected += l.param_count();
  if (expected != params_.size()) {
    throw ConfigError("model expects " + std::to_string(expected) + " parameter tensors, got " +
                      std::to_string(params_.size()));
  }
}

std::vector<Tensor>& Model::mutable_parameters() {
  if (frozen_) throw ContractError("parameters of a frozen model are read-only");
  return params_;
}

std::size_t Model::output_dim() const {
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    if (it->kind == LayerKind::kLinear) return it->out;
  }
  throw ContractError("model has no linear output layer");
}

Var Model::forward(std::span<const Var> params, const Var& x) const {
  if (params.size() != params_.size()) {
    throw ContractError("forward: " + std::to_string(params.size()) + " bound parameters for " +
                        std::to_string(params_.size()));
  }
  const Shape& xs = x.shape();
  if (xs.size() != input_shape_.size() + 1 ||
      !std::equal(input_shape_.begin(), input_shape_.end(), xs.begin() + 1)) {
    throw ContractError("forward: input " + shape_str(xs) + " does not match [N x " +
                        shape_str(input_shape_) + "]");
  }
  Var h = x;
  std::size_t p = 0;
  for (const LayerSpec& l : layers_) {
    switch (l.kind) {
      case LayerKind::kFlatten:
        h = flatten_rows(h);
        break;
      case LayerKind::kLinear:
        h = add_row_bias(matmul(h, params[p]), params[p + 1]);
        p += 2;
        break;
      case LayerKind::kConv:
        h = add_channel_bias(conv2d(h, params[p], l.stride, l.pad), params[p + 1]);
        p += 2;
        break;
      case LayerKind::kInstanceNorm:
        h = instance_norm(h, l.eps);
        break;
      case LayerKind::kRelu:
        h = relu(h);
        break;
      case LayerKind::kAvgPool:
        h = avg_pool2d(h, l.window);
        break;
    }
  }
  return h;
}

BoundModel bind(Tape& tape, const Model& model) {
  BoundModel b{&model, {}};
  b.params.reserve(model.parameters().size());
  for (const Tensor& t : model.parameters()) {
    Tensor p = t;
    p.set_requires_grad(!model.frozen());
    b.params.push_back(tape.leaf(std::move(p)));
  }
  return b;
}

BoundModel bind_constant(Tape& tape, const Model& model) {
  BoundModel b{&model, {}};
  for (const Tensor& t : model.parameters()) b.params.push_back(tape.constant(t));
  return b;
}

std::vector<Tensor> parameter_grads(const Gradients& grads, const BoundModel& bound) {
  std::vector<Tensor> out;
  out.reserve(bound.params.size());
  for (const Var& p : bound.params) out.push_back(grads.of(p));
  return out;
}

namespace {

Tensor he_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = u(rng);
  return t;
}

void push_linear(std::vector<LayerSpec>& layers, std::vector<Tensor>& params, std::size_t in,
                 std::size_t out, std::mt19937_64& rng) {
  layers.push_back({.kind = LayerKind::kLinear, .in = in, .out = out});
  params.push_back(he_uniform({in, out}, in, rng));
  params.emplace_back(Shape{out});
}

}  // namespace

Model build_encoder(const EncoderConfig& config, std::uint64_t seed) {
  if (config.feature_dim == 0) throw ConfigError("feature_dim must be positive");
  if (config.input_shape.empty() || shape_numel(config.input_shape) == 0) {
    throw ConfigError("encoder input shape must be non-empty, got " +
                      shape_str(config.input_shape));
  }
  std::mt19937_64 rng(seed);
  std::vector<LayerSpec> layers;
  std::vector<Tensor> params;

  if (config.architecture == Architecture::kMlp) {
    if (config.hidden.empty()) throw ConfigError("mlp encoder needs at least one hidden layer");
    layers.push_back({.kind = LayerKind::kFlatten});
    std::size_t width = shape_numel(config.input_shape);
    for (std::size_t h : config.hidden) {
      if (h == 0) throw ConfigError("mlp hidden width must be positive");
      push_linear(layers, params, width, h, rng);
      layers.push_back({.kind = LayerKind::kRelu});
      width = h;
    }
    push_linear(layers, params, width, config.feature_dim, rng);
    return Model(config.input_shape, std::move(layers), std::move(params));
  }

  if (config.input_shape.size() != 3) {
    throw ConfigError("convnet input must be [C x H x W], got " + shape_str(config.input_shape));
  }
  if (config.blocks == 0 || config.channels == 0) {
    throw ConfigError("convnet needs at least one block and one channel");
  }
  std::size_t c = config.input_shape[0], h = config.input_shape[1], w = config.input_shape[2];
  for (std::size_t b = 0; b < config.blocks; ++b) {
    if (h % 2 != 0 || w % 2 != 0) {
      throw ConfigError("convnet block " + std::to_string(b) + " cannot pool a " +
                        std::to_string(h) + "x" + std::to_string(w) + " map");
    }
    layers.push_back({.kind = LayerKind::kConv, .in = c, .out = config.channels, .kernel = 3,
                      .stride = 1, .pad = 1});
    params.push_back(he_uniform({config.channels, c, 3, 3}, c * 9, rng));
    params.emplace_back(Shape{config.channels});
    if (config.normalization == Normalization::kInstance) {
      layers.push_back({.kind = LayerKind::kInstanceNorm});
    }
    layers.push_back({.kind = LayerKind::kRelu});
    layers.push_back({.kind = LayerKind::kAvgPool, .window = 2});
    c = config.channels;
    h /= 2;
    w /= 2;
  }
  layers.push_back({.kind = LayerKind::kFlatten});
  push_linear(layers, params, c * h * w, config.feature_dim, rng);
  return Model(config.input_shape, std::move(layers), std::move(params));
}

Model build_linear(std::size_t in, std::size_t out, std::uint64_t seed, bool zero_init) {
  if (in == 0 || out == 0) throw ConfigError("linear layer extents must be positive");
  std::mt19937_64 rng(seed);
  std::vector<LayerSpec> layers;
  std::vector<Tensor> params;
  push_linear(layers, params, in, out, rng);
  if (zero_init) params[0] = Tensor(Shape{in, out});
  return Model(Shape{in}, std::move(layers), std::move(params));
}

Model build_mlp(std::span<const std::size_t> widths, std::uint64_t seed) {
  if (widths.size() < 2) throw ConfigError("mlp needs input and output widths");
  std::mt19937_64 rng(seed);
  std::vector<LayerSpec> layers;
  std::vector<Tensor> params;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    if (widths[i] == 0 || widths[i + 1] == 0) throw ConfigError("mlp widths must be positive");
    if (i > 0) layers.push_back({.kind = LayerKind::kRelu});
    push_linear(layers, params, widths[i], widths[i + 1], rng);
  }
  return Model(Shape{widths[0]}, std::move(layers), std::move(params));
}

void sgd_update(std::span<Tensor> params, std::span<const Tensor> grads, SgdState& state) {
  if (params.size() != grads.size()) {
    throw ContractError("sgd: " + std::to_string(grads.size()) + " gradients for " +
                        std::to_string(params.size()) + " parameters");
  }
  if (state.velocity.empty()) {
    for (const Tensor& p : params) state.velocity.emplace_back(p.shape());
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].shape() || state.velocity[i].shape() != params[i].shape()) {
      throw ShapeError("sgd: gradient " + shape_str(grads[i].shape()) + " for parameter " +
                       shape_str(params[i].shape()));
    }
    auto v = state.velocity[i].data();
    auto p = params[i].data();
    const auto g = grads[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = state.momentum * v[j] + g[j];
      p[j] -= state.lr * v[j];
    }
  }
}

void sgd_step(Model& model, std::span<const Tensor> grads, SgdState& state) {
  if (model.frozen()) throw ContractError("sgd_step on a frozen model");
  sgd_update(model.mutable_parameters(), grads, state);
}

Var fuse_and_classify(const Var& f_a, const Var& f_v, const BoundModel& head) {
  const std::size_t expected = shape_numel(head.model->input_shape());
  if (f_a.value().rank() != 2 || f_v.value().rank() != 2 ||
      f_a.dim(1) + f_v.dim(1) != expected) {
    throw ContractError("fuse_and_classify: features " + shape_str(f_a.shape()) + " + " +
                        shape_str(f_v.shape()) + " for a head expecting " +
                        std::to_string(expected));
  }
  return head(concat_cols(f_a, f_v));
}

namespace {

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::kFlatten: return "flatten";
    case LayerKind::kLinear: return "linear";
    case LayerKind::kConv: return "conv";
    case LayerKind::kInstanceNorm: return "instance_norm";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kAvgPool: return "avg_pool";
  }
  return "?";
}

LayerKind parse_kind(const std::string& s) {
  for (LayerKind k : {LayerKind::kFlatten, LayerKind::kLinear, LayerKind::kConv,
                      LayerKind::kInstanceNorm, LayerKind::kRelu, LayerKind::kAvgPool}) {
    if (s == kind_name(k)) return k;
  }
  throw IoError("unknown layer kind '" + s + "' in checkpoint");
}

}  // namespace

void save_model(const std::string& dir, const Model& model) {
  ensure_dir(dir);
  Json layers = Json::array();
  for (const LayerSpec& l : model.layers()) {
    layers.push_back({{"kind", kind_name(l.kind)}, {"in", l.in}, {"out", l.out},
                      {"kernel", l.kernel}, {"stride", l.stride}, {"pad", l.pad},
                      {"window", l.window}, {"eps", l.eps}});
  }
  Json files = Json::array();
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    const std::string name = "param_" + std::to_string(i) + ".dvt";
    save_tensor(dir + "/" + name, model.parameters()[i]);
    files.push_back(name);
  }
  write_json(dir + "/manifest.json", {{"format", "davdd-model-1"},
                                      {"input_shape", model.input_shape()},
                                      {"frozen", model.frozen()},
                                      {"layers", layers},
                                      {"params", files}});
}

Model load_model(const std::string& dir) {
  const Json m = read_json(dir + "/manifest.json");
  std::vector<LayerSpec> layers;
  for (const Json& l : m.at("layers")) {
    layers.push_back({.kind = parse_kind(l.at("kind").get<std::string>()),
                      .in = l.at("in").get<std::size_t>(),
                      .out = l.at("out").get<std::size_t>(),
                      .kernel = l.at("kernel").get<std::size_t>(),
                      .stride = l.at("stride").get<std::size_t>(),
                      .pad = l.at("pad").get<std::size_t>(),
                      .window = l.at("window").get<std::size_t>(),
                      .eps = l.at("eps").get<double>()});
  }
  std::vector<Tensor> params;
  for (const Json& f : m.at("params")) params.push_back(load_tensor(dir + "/" + f.get<std::string>()));
  Model model(m.at("input_shape").get<Shape>(), std::move(layers), std::move(params));
  if (m.at("frozen").get<bool>()) model.freeze();
  return model;
}

}  // namespace davdd
