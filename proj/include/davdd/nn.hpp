#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "davdd/io.hpp"
#include "davdd/ops.hpp"

namespace davdd {

enum class Architecture { kMlp, kConvNet };
enum class Normalization { kNone, kInstance };

std::string to_string(Architecture a);
std::string to_string(Normalization n);
Architecture parse_architecture(const std::string& s);
Normalization parse_normalization(const std::string& s);

struct EncoderConfig {
  Architecture architecture = Architecture::kConvNet;
  /// Per-sample input extents, e.g. {1, 16, 16}.
  Shape input_shape;
  /// Hidden widths of an MLP encoder.
  std::vector<std::size_t> hidden{128};
  /// ConvNet: each block is conv3x3 -> norm -> relu -> avgpool2.
  std::size_t blocks = 2;
  std::size_t channels = 8;
  std::size_t feature_dim = 64;
  Normalization normalization = Normalization::kInstance;
};

/// Audio and visual encoder configs of one pair; both must emit feature_dim.
struct PairConfig {
  EncoderConfig audio;
  EncoderConfig visual;

  void validate() const;
  std::size_t feature_dim() const { return audio.feature_dim; }
};

void to_json(Json& j, const EncoderConfig& c);
void from_json(const Json& j, EncoderConfig& c);
void to_json(Json& j, const PairConfig& c);
void from_json(const Json& j, PairConfig& c);
/// Desk default pair: convnet encoders over 1x16x16 audio and 3x16x16 visual inputs.
PairConfig default_pair_config();

enum class LayerKind { kFlatten, kLinear, kConv, kInstanceNorm, kRelu, kAvgPool };

struct LayerSpec {
  LayerKind kind = LayerKind::kRelu;
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t window = 0;
  double eps = 1e-5;

  std::size_t param_count() const;
};

/// Sequential network. Parameters are stored flat, in layer order.
class Model {
 public:
  Model() = default;
  Model(Shape input_shape, std::vector<LayerSpec> layers, std::vector<Tensor> params);

  const Shape& input_shape() const { return input_shape_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  /// Throws ContractError on a frozen model.
  std::vector<Tensor>& mutable_parameters();
  std::size_t output_dim() const;

  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

  /// Forward over a batch [N x input_shape...] with parameters already on a tape.
  Var forward(std::span<const Var> params, const Var& x) const;

 private:
  Shape input_shape_;
  std::vector<LayerSpec> layers_;
  std::vector<Tensor> params_;
  bool frozen_ = false;
};

/// A model whose parameters live on a tape: trainable leaves, or constants when frozen.
struct BoundModel {
  const Model* model = nullptr;
  std::vector<Var> params;

  Var operator()(const Var& x) const { return model->forward(params, x); }
};
BoundModel bind(Tape& tape, const Model& model);
/// Parameters as constants regardless of the frozen flag.
BoundModel bind_constant(Tape& tape, const Model& model);
/// Gradients for the bound parameters, in parameter order.
std::vector<Tensor> parameter_grads(const Gradients& grads, const BoundModel& bound);

/// Deterministic, uniform He fan-in initialization; biases start at zero.
Model build_encoder(const EncoderConfig& config, std::uint64_t seed);
/// A single linear layer [in] -> [out].
Model build_linear(std::size_t in, std::size_t out, std::uint64_t seed, bool zero_init = false);
/// Linear layers with ReLU between, widths {in, h1, ..., out}.
Model build_mlp(std::span<const std::size_t> widths, std::uint64_t seed);

struct SgdState {
  std::vector<Tensor> velocity;
  double lr = 0.2;
  double momentum = 0.9;
};

/// v <- momentum * v + g; p <- p - lr * v. Velocity is created on first use.
void sgd_update(std::span<Tensor> params, std::span<const Tensor> grads, SgdState& state);
/// sgd_update on a model's parameters; a frozen model is a ContractError.
void sgd_step(Model& model, std::span<const Tensor> grads, SgdState& state);

/// Logits of head([f_a ; f_v]).
Var fuse_and_classify(const Var& f_a, const Var& f_v, const BoundModel& head);

// Checkpoint: a directory holding manifest.json (layer specs) and one
// tensor file per parameter.
void save_model(const std::string& dir, const Model& model);
Model load_model(const std::string& dir);

}  // namespace davdd
