#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "davdd/distill.hpp"

namespace davdd {

/// Fresh encoders and fused head trained from scratch on `distilled`.
FusedClassifier train_downstream(const PairedDataset& distilled, const PairConfig& config,
                                 const TrainOptions& options, std::uint64_t seed);

/// Fraction of test samples whose fused argmax prediction is correct.
double evaluate(const FusedClassifier& model, const PairedDataset& test);

struct EvalReport {
  std::vector<std::uint64_t> seeds;
  std::vector<double> accuracies;
  double mean = 0.0;
  /// Population standard deviation over runs.
  double std = 0.0;
  std::string fingerprint;

  static EvalReport from_runs(std::vector<std::uint64_t> seeds, std::vector<double> accuracies,
                              std::string fingerprint);
};

void to_json(Json& j, const EvalReport& r);
void from_json(const Json& j, EvalReport& r);

/// Independent downstream trainings, one per run seed, each scored on `test`.
EvalReport run_protocol(const PairedDataset& distilled, const PairedDataset& test,
                        const PairConfig& config, const TrainOptions& options, std::size_t runs,
                        std::uint64_t seed, std::size_t jobs = 1);

/// report.json plus runs.csv with one row per run.
void save_report(const std::string& dir, const EvalReport& report, const Json& extra = Json::object());

struct AblationRow {
  std::string name;
  DistillConfig config;
  EvalReport report;
  std::vector<StepMetrics> trajectory;
};

/// The four cumulative configurations: random-encoder private matching,
/// pretrained-bank private matching, decoupled per-modality common matching,
/// and the full objective with the joint cross-modal term.
std::vector<DistillConfig> ablation_configs(const DistillConfig& base);
extern const char* const kAblationNames[4];

std::vector<AblationRow> ablation_suite(const PairedDataset& train, const PairedDataset& test,
                                        const DistillBanks& banks, const DistillConfig& base,
                                        const PairConfig& eval_config,
                                        const TrainOptions& eval_options, std::size_t runs,
                                        std::uint64_t seed, std::size_t jobs = 1);

}  // namespace davdd
