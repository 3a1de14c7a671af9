#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "davdd/eval.hpp"

namespace davdd {

struct PretrainSettings {
  std::size_t pairs = 4;
  TrainOptions train{.epochs = 10};
};

struct DecoupleSettings {
  std::size_t slots = 2;
  DecoupleOptions options;
};

struct EvalSettings {
  std::size_t runs = 5;
  TrainOptions train{.epochs = 200};
};

/// Everything a pipeline run depends on. Stage seeds derive from `seed`.
struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  BenchmarkSpec benchmark;
  PairConfig encoder = default_pair_config();
  PretrainSettings pretrain;
  DecoupleSettings decouple;
  DistillConfig distill;
  EvalSettings eval;

  void validate() const;
  /// Distillation settings with the seed derived from the run seed.
  DistillConfig distill_config() const;
};

void to_json(Json& j, const RunConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
void from_json(const Json& j, RunConfig& c);
RunConfig load_run_config(const std::string& path);

enum class StageSeed : std::uint64_t { kPretrain = 1, kDecouple = 2, kDistill = 3, kEval = 4 };
std::uint64_t stage_seed(const RunConfig& c, StageSeed s);

/// Writes <data>/train, <data>/test and config.json. Every stage also writes
/// stage_manifest.json with the config hash and input and output hashes.
void stage_gen(const RunConfig& c, const std::string& out);
/// Pretrained bank from <data>/train.
void stage_pretrain(const RunConfig& c, const std::string& data, const std::string& out);
/// Copies the pretrained bank at `bank` and adds trained decouplers.
void stage_decouple(const RunConfig& c, const std::string& data, const std::string& bank,
                    const std::string& out);
/// `bank` may be empty when the extractor is random and the init needs no probe.
void stage_distill(const RunConfig& c, const std::string& data, const std::string& bank,
                   const std::string& out);
void stage_eval(const RunConfig& c, const std::string& data, const std::string& distilled,
                const std::string& out);
void stage_ablate(const RunConfig& c, const std::string& data, const std::string& bank,
                  const std::string& out);
/// One CSV row per sample and modality of the dataset directory: index,
/// label, modality, then z_p and z_c coordinates under pair / slot.
void stage_export_embeddings(const std::string& dataset, const std::string& bank,
                             const std::string& out_csv, std::size_t pair, std::size_t slot);

}  // namespace davdd
