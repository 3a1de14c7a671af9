#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "davdd/data.hpp"
#include "davdd/nn.hpp"

namespace davdd {

/// Audio encoder, visual encoder and a linear head over their concatenated features.
struct FusedClassifier {
  Model audio;
  Model visual;
  Model head;
};

FusedClassifier make_fused_classifier(const PairConfig& config, std::size_t num_classes,
                                      std::uint64_t seed);

struct TrainOptions {
  std::size_t epochs = 30;
  std::size_t batch_size = 128;
  double lr = 0.2;
  double momentum = 0.9;
};

/// Trains all three parts end to end on cross-entropy with SGD + momentum.
/// Returns the mean training loss of each epoch.
std::vector<double> train_classifier(FusedClassifier& model, const PairedDataset& train,
                                     const TrainOptions& options, std::uint64_t seed);

/// Fused logits [N x C] for every sample, evaluated without gradients.
Tensor predict_logits(const FusedClassifier& model, const PairedDataset& ds);

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
double accuracy(const Tensor& logits, std::span<const int> labels);

/// A linear classifier over fixed feature rows, trained on cross-entropy.
Model train_linear_probe(const Tensor& features, std::span<const int> labels,
                         std::size_t num_classes, const TrainOptions& options, std::uint64_t seed);
Tensor linear_logits(const Model& head, const Tensor& features);

}  // namespace davdd
