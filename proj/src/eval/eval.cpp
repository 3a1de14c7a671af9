#include "davdd/eval.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "davdd/error.hpp"
#include "davdd/parallel.hpp"

namespace davdd {

FusedClassifier train_downstream(const PairedDataset& distilled, const PairConfig& config,
                                 const TrainOptions& options, std::uint64_t seed) {
  require_train_split(distilled, "train_downstream");
  if (distilled.size() == 0) throw ContractError("train_downstream on an empty set");
  distilled.validate();
  FusedClassifier model = make_fused_classifier(config, distilled.num_classes, seed);
  train_classifier(model, distilled, options, seed);
  return model;
}

double evaluate(const FusedClassifier& model, const PairedDataset& test) {
  return accuracy(predict_logits(model, test), test.labels);
}

EvalReport EvalReport::from_runs(std::vector<std::uint64_t> seeds, std::vector<double> accuracies,
                                 std::string fingerprint) {
  if (accuracies.empty()) throw ContractError("a report needs at least one run");
  EvalReport r;
  r.seeds = std::move(seeds);
  r.accuracies = std::move(accuracies);
  r.fingerprint = std::move(fingerprint);
  const double n = static_cast<double>(r.accuracies.size());
  r.mean = std::accumulate(r.accuracies.begin(), r.accuracies.end(), 0.0) / n;
  double var = 0.0;
  for (double a : r.accuracies) var += (a - r.mean) * (a - r.mean);
  r.std = std::sqrt(var / n);
  return r;
}

void to_json(Json& j, const EvalReport& r) {
  j = Json{{"seeds", r.seeds},
           {"accuracies", r.accuracies},
           {"mean", r.mean},
           {"std", r.std},
           {"fingerprint", r.fingerprint}};
}

void from_json(const Json& j, EvalReport& r) {
  r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  r.accuracies = j.at("accuracies").get<std::vector<double>>();
  r.mean = j.at("mean").get<double>();
  r.std = j.at("std").get<double>();
  r.fingerprint = j.at("fingerprint").get<std::string>();
}

EvalReport run_protocol(const PairedDataset& distilled, const PairedDataset& test,
                        const PairConfig& config, const TrainOptions& options, std::size_t runs,
                        std::uint64_t seed, std::size_t jobs) {
  if (runs < 1) throw ConfigError("protocol needs at least one run");
  if (test.split != Split::kTest) throw ContractError("run_protocol scores only test-tagged data");
  std::vector<std::uint64_t> seeds(runs);
  for (std::size_t r = 0; r < runs; ++r) seeds[r] = mix_seed(seed, 0x52756eull, r);
  std::vector<double> acc(runs);
  parallel_for(runs, jobs, [&](std::size_t r) {
    acc[r] = evaluate(train_downstream(distilled, config, options, seeds[r]), test);
  });
  const Json fp{{"config", config},
                {"epochs", options.epochs},
                {"batch_size", options.batch_size},
                {"lr", options.lr},
                {"momentum", options.momentum},
                {"distilled", distilled.pairing_checksum()},
                {"test", test.pairing_checksum()},
                {"seed", seed}};
  return EvalReport::from_runs(std::move(seeds), std::move(acc), fnv1a_hex(fp.dump()));
}

void save_report(const std::string& dir, const EvalReport& report, const Json& extra) {
  ensure_dir(dir);
  Json j = extra;
  j["report"] = report;
  write_json(dir + "/report.json", j);
  std::ostringstream csv;
  csv << "run,seed,accuracy\n";
  for (std::size_t r = 0; r < report.accuracies.size(); ++r)
    csv << r << ',' << report.seeds[r] << ',' << format_double(report.accuracies[r]) << '\n';
  write_text(dir + "/runs.csv", csv.str());
}

const char* const kAblationNames[4] = {"baseline", "pretrained_bank", "decoupler_bank", "cim"};

std::vector<DistillConfig> ablation_configs(const DistillConfig& base) {
  std::vector<DistillConfig> rows(4, base);
  rows[0].extractor = ExtractorMode::kRandom;
  rows[0].use_cim = false;
  rows[1].extractor = ExtractorMode::kPretrained;
  rows[1].use_cim = false;
  rows[2].extractor = ExtractorMode::kDecoupled;
  rows[2].use_cim = false;
  rows[3].extractor = ExtractorMode::kDecoupled;
  rows[3].use_cim = true;
  return rows;
}

std::vector<AblationRow> ablation_suite(const PairedDataset& train, const PairedDataset& test,
                                        const DistillBanks& banks, const DistillConfig& base,
                                        const PairConfig& eval_config,
                                        const TrainOptions& eval_options, std::size_t runs,
                                        std::uint64_t seed, std::size_t jobs) {
  std::vector<AblationRow> out;
  const auto configs = ablation_configs(base);
  for (std::size_t i = 0; i < configs.size(); ++i) {
    DistillResult d = run_distillation(train, banks, configs[i]);
    EvalReport rep =
        run_protocol(d.syn.expanded(), test, eval_config, eval_options, runs, seed, jobs);
    out.push_back({kAblationNames[i], configs[i], std::move(rep), std::move(d.trajectory)});
  }
  return out;
}

}  // namespace davdd
