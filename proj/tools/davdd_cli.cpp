#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "davdd/error.hpp"
#include "davdd/pipeline.hpp"

namespace {

using namespace davdd;

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
};

struct DistillFlags {
  std::optional<double> lambda_c, lambda_p, lr_syn;
  std::optional<std::size_t> ipc, factor, steps;
  std::optional<std::string> extractor, init;
  bool no_cim = false;
  bool global = false;

  void add(CLI::App* app) {
    app->add_option("--lambda-c", lambda_c, "Weight of the common matching loss");
    app->add_option("--lambda-p", lambda_p, "Weight of the private matching loss");
    app->add_option("--lr-syn", lr_syn, "Learning rate of the synthetic canvases");
    app->add_option("--ipc", ipc, "Canvases per class");
    app->add_option("--factor", factor, "Factor l of the canvas grid");
    app->add_option("--steps", steps, "Distillation steps");
    app->add_option("--extractor", extractor, "random, pretrained or decoupled");
    app->add_option("--init", init, "herding or random");
    app->add_flag("--no-cim", no_cim, "Drop the joint audio+visual common term");
    app->add_flag("--global", global, "Match over the whole set rather than per class");
  }

  void apply(DistillConfig& d) const {
    if (lambda_c) d.lambda_c = *lambda_c;
    if (lambda_p) d.lambda_p = *lambda_p;
    if (lr_syn) d.lr = *lr_syn;
    if (ipc) d.ipc = *ipc;
    if (factor) d.factor = *factor;
    if (steps) d.steps = *steps;
    if (extractor) d.extractor = parse_extractor_mode(*extractor);
    if (init) d.init = parse_init_method(*init);
    if (no_cim) d.use_cim = false;
    if (global) d.per_class_matching = false;
  }
};

void add_common(CLI::App* app, Common& c, bool out_is_file = false) {
  app->add_option("--config", c.config, "Run config JSON; flags override its values");
  app->add_option("--out", c.out, out_is_file ? "Output CSV file" : "Output directory")->required();
  app->add_option("--seed", c.seed, "Run seed");
  app->add_option("--jobs", c.jobs, "Worker threads for independent jobs");
}

RunConfig base_config(const Common& c) {
  RunConfig rc;
  if (!c.config.empty()) rc = load_run_config(c.config);
  if (c.seed) rc.seed = *c.seed;
  if (c.jobs) rc.jobs = *c.jobs;
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Audio-visual dataset distillation on a desk-scale benchmark"};
  app.require_subcommand(1);

  Common common;
  DistillFlags dflags;
  std::string data, bank, distilled, spec, dataset;
  std::optional<std::size_t> pairs, slots, epochs, runs, common_dim;
  std::optional<double> noise;
  std::size_t pair = 0, slot = 0;

  auto* gen = app.add_subcommand("gen", "Generate the paired benchmark");
  add_common(gen, common);
  gen->add_option("--spec", spec, "Benchmark spec JSON overriding the config's benchmark");
  gen->add_option("--noise", noise, "Pixel noise standard deviation");

  auto* pretrain = app.add_subcommand("pretrain", "Pretrain the encoder-pair bank");
  add_common(pretrain, common);
  pretrain->add_option("--data", data, "Benchmark directory")->required();
  pretrain->add_option("--pairs", pairs, "Number of encoder pairs M");
  pretrain->add_option("--epochs", epochs, "Pretraining epochs");

  auto* decouple = app.add_subcommand("decouple", "Train decouplers over a pretrained bank");
  add_common(decouple, common);
  decouple->add_option("--data", data, "Benchmark directory")->required();
  decouple->add_option("--bank", bank, "Pretrained bank directory")->required();
  decouple->add_option("--slots", slots, "Decouplers per pair T");
  decouple->add_option("--common-dim", common_dim, "Common space dimension");
  decouple->add_option("--epochs", epochs, "Decoupler training epochs");

  auto* distill = app.add_subcommand("distill", "Distill a synthetic paired set");
  add_common(distill, common);
  distill->add_option("--data", data, "Benchmark directory")->required();
  distill->add_option("--bank", bank, "Bank directory (optional for random extractors)");
  dflags.add(distill);

  auto* eval = app.add_subcommand("eval", "Train from scratch on a set and score the test split");
  add_common(eval, common);
  eval->add_option("--data", data, "Benchmark directory holding the test split")->required();
  eval->add_option("--distilled", distilled, "Dataset directory to train on")->required();
  eval->add_option("--runs", runs, "Independent runs");
  eval->add_option("--epochs", epochs, "Downstream training epochs");

  auto* ablate = app.add_subcommand("ablate", "Run the four-row component ablation");
  add_common(ablate, common);
  ablate->add_option("--data", data, "Benchmark directory")->required();
  ablate->add_option("--bank", bank, "Bank directory with decouplers")->required();
  ablate->add_option("--runs", runs, "Independent runs per row");
  dflags.add(ablate);

  auto* exp = app.add_subcommand("export-embeddings", "Export private and common embeddings as CSV");
  add_common(exp, common, true);
  exp->add_option("--dataset", dataset, "Dataset directory")->required();
  exp->add_option("--bank", bank, "Bank directory with decouplers")->required();
  exp->add_option("--pair", pair, "Pretrained pair index");
  exp->add_option("--slot", slot, "Decoupler slot index");

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig rc = base_config(common);
    if (pairs) rc.pretrain.pairs = *pairs;
    if (slots) rc.decouple.slots = *slots;
    if (common_dim) rc.decouple.options.decoupler.common_dim = *common_dim;
    if (runs) rc.eval.runs = *runs;
    dflags.apply(rc.distill);
    const std::string& out = common.out;

    if (gen->parsed()) {
      if (!spec.empty()) {
        require_path(spec);
        Json patch = Json::object();
        patch["benchmark"] = read_json(spec);
        from_json(patch, rc);
      }
      if (noise) rc.benchmark.noise = *noise;
      if (common.seed) rc.benchmark.seed = *common.seed;
      rc.validate();
      stage_gen(rc, out);
    } else if (pretrain->parsed()) {
      if (epochs) rc.pretrain.train.epochs = *epochs;
      stage_pretrain(rc, data, out);
    } else if (decouple->parsed()) {
      if (epochs) rc.decouple.options.epochs = *epochs;
      stage_decouple(rc, data, bank, out);
    } else if (distill->parsed()) {
      stage_distill(rc, data, bank, out);
    } else if (eval->parsed()) {
      if (epochs) rc.eval.train.epochs = *epochs;
      stage_eval(rc, data, distilled, out);
    } else if (ablate->parsed()) {
      stage_ablate(rc, data, bank, out);
    } else if (exp->parsed()) {
      stage_export_embeddings(dataset, bank, out, pair, slot);
    }
  } catch (const davdd::Error& e) {
    std::cerr << "davdd: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "davdd: unexpected failure: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
