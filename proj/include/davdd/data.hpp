#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "davdd/io.hpp"
#include "davdd/tensor.hpp"

namespace davdd {

enum class Split { kTrain, kTest };
std::string to_string(Split s);
Split parse_split(const std::string& s);

/// Paired two-modality samples with labels. Row i of audio, visual and
/// labels belong to the same sample.
struct PairedDataset {
  Tensor audio;   // [N x audio_shape...]
  Tensor visual;  // [N x visual_shape...]
  std::vector<int> labels;
  std::size_t num_classes = 0;
  Split split = Split::kTrain;

  std::size_t size() const { return labels.size(); }
  Shape audio_shape() const;
  Shape visual_shape() const;
  /// Throws ContractError when leading extents or labels are inconsistent.
  void validate() const;
  PairedDataset subset(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> class_indices(int c) const;
  /// Order-independent checksum binding each audio row to its visual row and label.
  std::uint64_t pairing_checksum() const;
};

/// Guard for stages that must only ever see training data.
void require_train_split(const PairedDataset& ds, const char* stage);

struct BenchmarkSpec {
  std::size_t num_classes = 4;
  std::size_t samples_per_class = 100;
  std::size_t shared_dim = 8;
  std::size_t private_dim = 8;
  /// Pixel noise standard deviation.
  double noise = 0.5;
  /// Per-sample latent deviation around the class templates.
  double shared_jitter = 1.0;
  double private_jitter = 1.0;
  Shape audio_shape{1, 16, 16};
  Shape visual_shape{3, 16, 16};
  double test_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(Json& j, const BenchmarkSpec& s);
void from_json(const Json& j, BenchmarkSpec& s);

struct Benchmark {
  PairedDataset train;
  PairedDataset test;
};

/// Class templates in a shared latent space and one private latent space per
/// modality; each sample renders (shared template + shared jitter, private
/// template + private jitter) through fixed smooth linear maps, plus pixel
/// noise. Both modalities of a sample use the same shared draw. Split is
/// stratified by class.
Benchmark generate_benchmark(const BenchmarkSpec& spec);

/// Per class, the selected global row indices.
using Selection = std::vector<std::vector<std::size_t>>;

/// Greedy herding: the t-th pick of class c minimizes
/// ||mu_c - (sum of picked + f_i) / t|| over unpicked i. Ties go to the lowest index.
Selection herding_select(const Tensor& features, std::span<const int> labels,
                         std::size_t num_classes, std::size_t ipc);
/// Uniform without replacement per class.
Selection random_select(std::span<const int> labels, std::size_t num_classes, std::size_t ipc,
                        std::uint64_t seed);
std::vector<std::size_t> flatten_selection(const Selection& s);

/// Seeded shuffled mini-batches, reshuffled every epoch. With `by_class`,
/// only rows of that class are visited.
class BatchIterator {
 public:
  BatchIterator(const PairedDataset& ds, std::size_t batch_size, std::uint64_t seed,
                std::optional<int> by_class = std::nullopt);

  /// Row indices of every batch of the next epoch; the last batch may be short.
  std::vector<std::vector<std::size_t>> next_epoch();
  std::size_t epoch() const { return epoch_; }

 private:
  std::vector<std::size_t> rows_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
};

/// Directory with manifest.json, audio.dvt, visual.dvt, labels.dvt.
void save_dataset(const std::string& dir, const PairedDataset& ds, const Json& extra = Json::object());
PairedDataset load_dataset(const std::string& dir);

}  // namespace davdd
