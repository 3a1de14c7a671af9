#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "davdd/banks.hpp"

namespace davdd {

enum class InitMethod { kHerding, kRandom };
/// Feature extractors used for matching: freshly random encoders every step,
/// the frozen pretrained bank, or the pretrained bank with its decouplers.
enum class ExtractorMode { kRandom, kPretrained, kDecoupled };

std::string to_string(InitMethod m);
std::string to_string(ExtractorMode m);
InitMethod parse_init_method(const std::string& s);
ExtractorMode parse_extractor_mode(const std::string& s);

/// Learnable canvases, class-major: rows [c * ipc, (c + 1) * ipc) belong to class c.
struct SyntheticSet {
  Tensor audio;
  Tensor visual;
  std::size_t num_classes = 0;
  std::size_t ipc = 0;
  std::size_t factor = 1;
  /// Real rows the canvases were initialized from, in selection order per class.
  Selection source;

  std::vector<int> labels() const;
  std::size_t size() const { return num_classes * ipc; }
  /// Training instances after factor expansion, tagged as a training split.
  PairedDataset expanded() const;
};

struct DistillConfig {
  double lambda_c = 40.0;
  double lambda_p = 80.0;
  std::size_t steps = 200;
  double lr = 0.2;
  double momentum = 0.9;
  std::size_t batch_size = 128;
  std::size_t ipc = 4;
  std::size_t factor = 2;
  InitMethod init = InitMethod::kHerding;
  ExtractorMode extractor = ExtractorMode::kDecoupled;
  /// Include the joint audio+visual common-mean term.
  bool use_cim = true;
  bool per_class_matching = true;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(Json& j, const DistillConfig& c);
void from_json(const Json& j, DistillConfig& c);

/// Selects ipc * factor^2 real pairs per class and tiles each group of
/// factor^2 of them, downsampled by area averaging, into one canvas. With
/// factor 1 the canvases are plain copies. Herding ranks the concatenated
/// private features of `probe`.
SyntheticSet init_synthetic(const PairedDataset& train, std::size_t ipc, std::size_t factor,
                            InitMethod method, const PretrainedPair* probe, std::uint64_t seed);

/// Splits every canvas [n x C x H x W] into a factor x factor grid and
/// bilinearly resizes each cell back to H x W (half-pixel centers).
/// Output order: canvas-major, then row-major over the grid.
Var factor_expand(const Var& canvases, std::size_t factor);

/// Batch means of the four representations, each of shape [d].
struct RepMeans {
  Var zp_a, zp_v, zc_a, zc_v;
};
RepMeans rep_means(const Reps& reps);

/// ||mean zp_a(real) - mean zp_a(syn)||^2 + the same for the visual modality.
Var loss_private(const RepMeans& real, const RepMeans& syn);
Var loss_private(const Reps& real, const Reps& syn);
/// Per-modality common-mean gaps plus, when `joint`, the gap of the summed
/// audio and visual common means.
Var loss_common(const RepMeans& real, const RepMeans& syn, bool joint = true);
Var loss_common(const Reps& real, const Reps& syn, bool joint = true);

/// Feature extractors available to distillation.
struct DistillBanks {
  const PretrainedBank* pretrained = nullptr;
  const DecouplerBank* decouplers = nullptr;
  /// Architecture of freshly sampled random encoders.
  PairConfig random_config;
};

struct StepMetrics {
  std::size_t step = 0;
  std::size_t pair = 0;
  std::size_t slot = 0;
  double l_pr = 0.0;
  double l_com = 0.0;
  double l_dis = 0.0;
};

/// Optimizer state and cached real statistics that persist across steps.
class Distiller {
 public:
  Distiller(const PairedDataset& train, const DistillBanks& banks, const DistillConfig& config);

  /// Matching loss of `syn` under extractor draw (pair, slot) against the real
  /// batch of `step_seed`, summed over classes. `per_class`, when given,
  /// receives each class's contribution.
  Var matching_loss(Tape& tape, const Var& audio, const Var& visual, std::size_t pair,
                    std::size_t slot, std::uint64_t step_seed, StepMetrics& metrics,
                    std::vector<double>* per_class = nullptr);

  /// Draws (pair, slot) and the real batch from `step_seed`, then applies one
  /// momentum SGD step to the canvases only.
  StepMetrics step(SyntheticSet& syn, std::uint64_t step_seed);

  /// The extractor draw a step seed selects.
  std::pair<std::size_t, std::size_t> draw(std::uint64_t step_seed) const;

 private:
  struct Extractor {
    const PretrainedPair* pair = nullptr;
    const Decoupler* dec = nullptr;
    PretrainedPair owned;
  };
  Extractor extractor(std::size_t pair, std::size_t slot, std::uint64_t step_seed) const;
  std::vector<std::size_t> real_rows(int c, std::uint64_t step_seed) const;
  RepMeans real_means(Tape& tape, const Extractor& ex, std::span<const std::size_t> rows,
                      std::size_t pair, std::size_t slot, int cls);
  RepMeans syn_means(Tape& tape, const Extractor& ex, const Var& audio, const Var& visual);

  const PairedDataset& train_;
  DistillBanks banks_;
  DistillConfig config_;
  SgdState opt_a_, opt_v_;
  std::vector<std::vector<std::size_t>> class_rows_;
  // (pair, slot, class) -> cached real means over the whole class
  std::vector<std::optional<std::array<Tensor, 4>>> cache_;
};

struct DistillResult {
  SyntheticSet syn;
  std::vector<StepMetrics> trajectory;
};

/// Initialization followed by config.steps distillation steps.
DistillResult run_distillation(const PairedDataset& train, const DistillBanks& banks,
                               const DistillConfig& config);

/// Population standard deviation over a trailing window of `window` values,
/// evaluated at every position of the second half of `series`, then averaged.
double trailing_half_rolling_std(const std::vector<double>& series, std::size_t window);

/// Distilled set directory: the dataset format over the factor-expanded
/// instances, canvases.dvt files, distill_meta.json and trajectory.csv.
void save_distilled(const std::string& dir, const DistillResult& result,
                    const DistillConfig& config, const Json& extra = Json::object());
SyntheticSet load_synthetic(const std::string& dir);

}  // namespace davdd
