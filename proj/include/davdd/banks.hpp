#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "davdd/classifier.hpp"
#include "davdd/data.hpp"
#include "davdd/nn.hpp"

namespace davdd {

/// One frozen audio/visual encoder pair.
struct PretrainedPair {
  Model audio;
  Model visual;
  std::size_t id = 0;
  std::uint64_t seed = 0;

  std::size_t feature_dim() const { return audio.output_dim(); }
};

struct PretrainedBank {
  PairConfig config;
  std::vector<PretrainedPair> pairs;
};

/// Per-pair pretraining record: mean loss of each epoch.
struct PretrainLog {
  std::vector<std::vector<double>> epoch_loss;
};

/// Trains `pairs` encoder pairs end to end under a fused linear head, with
/// distinct seeds, then discards the heads and freezes the encoders.
PretrainedBank pretrain_bank(const PairedDataset& train, std::size_t pairs,
                             const PairConfig& config, const TrainOptions& options,
                             std::uint64_t seed, std::size_t jobs = 1, PretrainLog* log = nullptr);

struct DecouplerConfig {
  /// 1: a single linear map; 2: linear, relu, linear.
  std::size_t depth = 2;
  std::size_t common_dim = 64;
};

void to_json(Json& j, const DecouplerConfig& c);
void from_json(const Json& j, DecouplerConfig& c);

/// Projection heads g^a, g^v from the private feature space into the common space.
struct Decoupler {
  Model audio;
  Model visual;
  std::size_t pair = 0;
  std::size_t slot = 0;
  std::uint64_t seed = 0;

  std::size_t common_dim() const { return audio.output_dim(); }
};

Decoupler make_decoupler(std::size_t feature_dim, const DecouplerConfig& config,
                         std::uint64_t seed);

struct DecouplerBank {
  DecouplerConfig config;
  /// decouplers[m][t] is bound to pretrained pair m.
  std::vector<std::vector<Decoupler>> decouplers;

  std::size_t slots() const { return decouplers.empty() ? 0 : decouplers.front().size(); }
};

/// Private and common representations of one batch. An empty batch yields
/// `size == 0` and invalid handles.
struct Reps {
  Var zp_a, zc_a, zp_v, zc_v;
  std::size_t size = 0;
};

/// Encodes a batch through a frozen pair and decoupler. Parameters enter the
/// tape as constants; gradients flow only into the inputs.
Reps encode(Tape& tape, const PretrainedPair& pair, const Decoupler& dec, const Var& audio,
            const Var& visual);

/// Encoder outputs [N x d_p] of every sample, without gradients.
Tensor encode_private(const Model& encoder, const Tensor& inputs);

struct DecoupleWeights {
  double com = 2.0;
  double fu = 2.0;
  double inter = 1.0;
  double intra = 3.0;
  double align = 1.0;
};

void to_json(Json& j, const DecoupleWeights& w);
void from_json(const Json& j, DecoupleWeights& w);

/// Linear heads over the common space: per modality (d_c -> C) and fused (2 d_c -> C).
struct CommonHeads {
  BoundModel audio;
  BoundModel visual;
  BoundModel fused;
};

/// lambda_com * (CE(audio) + CE(visual)) + lambda_fu * CE(fused).
Var loss_cls(const Var& zc_a, const Var& zc_v, std::span<const int> labels,
             const CommonHeads& heads, double lambda_com, double lambda_fu);

/// Supervised contrastive loss over composites normalize(zc_a + zc_v) with
/// dot-product similarity. Anchors without a same-class partner are skipped;
/// a batch without any positive pair gives 0.
Var loss_inter(const Var& zc_a, const Var& zc_v, std::span<const int> labels, double tau);

/// Mean of the audio-to-visual and visual-to-audio InfoNCE losses under
/// cosine similarity, where the positive of a sample is its other modality.
Var loss_intra(const Var& zc_a, const Var& zc_v, double tau);

/// Per-class, per-modality unit prototypes with cumulative sample counts.
struct PrototypeBank {
  std::size_t dim = 0;
  std::vector<Tensor> audio;
  std::vector<Tensor> visual;
  std::vector<std::size_t> count_a;
  std::vector<std::size_t> count_v;

  PrototypeBank() = default;
  PrototypeBank(std::size_t num_classes, std::size_t dim);
  std::size_t num_classes() const { return audio.size(); }
  bool initialized(int c) const;
};

/// Cross-modal alignment of batch class means with the opposite modality's
/// prototypes, averaged over classes present in the batch and known to the
/// bank. Prototypes act as constants.
Var loss_align(const Var& zc_a, const Var& zc_v, std::span<const int> labels,
               const PrototypeBank& bank);

/// P <- m P + (1 - m) mu with m = N_prev / (N_prev + N_curr), then renormalized
/// unless `normalize` is false; the count grows by N_curr.
void ema_update(Tensor& prototype, std::size_t& count, std::span<const double> mu,
                std::size_t n_curr, bool normalize = true);

/// Unit mean of the unit-normalized rows of each class in the batch, fed to
/// ema_update for both modalities.
void update_prototypes(PrototypeBank& bank, const Tensor& zc_a, const Tensor& zc_v,
                       std::span<const int> labels);

/// The unit class mean used by loss_align and update_prototypes: rows are
/// normalized, averaged, then normalized again.
Var class_unit_mean(const Var& z, std::span<const std::size_t> rows);

struct DecoupleOptions {
  DecouplerConfig decoupler;
  DecoupleWeights weights;
  double tau = 0.1;
  std::size_t epochs = 20;
  std::size_t batch_size = 128;
  double lr = 0.02;
  double momentum = 0.9;
};

struct DecoupleStep {
  std::size_t pair = 0, slot = 0, epoch = 0, step = 0;
  double cls = 0, inter = 0, intra = 0, align = 0, total = 0;
};

/// Trains `slots` decouplers per pretrained pair on the full decoupling loss,
/// each with its own heads and prototype bank, all discarded afterwards.
/// The returned decouplers are frozen.
DecouplerBank train_decouplers(const PretrainedBank& bank, std::size_t slots,
                               const PairedDataset& train, const DecoupleOptions& options,
                               std::uint64_t seed, std::size_t jobs = 1,
                               std::vector<DecoupleStep>* log = nullptr);

/// Mean within-sample cosine between common audio and visual codes.
double mean_common_cosine(const PretrainedPair& pair, const Decoupler& dec,
                          const PairedDataset& ds);

// Bank directory: manifest.json plus pair_{m}/audio.ckpt, visual.ckpt and
// pair_{m}/dec_{t}.ckpt when decouplers are present.
void save_bank(const std::string& dir, const PretrainedBank& bank,
               const DecouplerBank* decouplers = nullptr, const Json& extra = Json::object());
PretrainedBank load_pretrained(const std::string& dir);
/// Throws IoError when the directory holds no decouplers.
DecouplerBank load_decouplers(const std::string& dir);

}  // namespace davdd
