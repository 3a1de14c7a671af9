#include "davdd/pipeline.hpp"

#include <filesystem>
#include <set>
#include <sstream>

#include "davdd/error.hpp"

namespace davdd {
namespace {

namespace fs = std::filesystem;

void check_keys(const Json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
  }
}

Json train_json(const TrainOptions& o) {
  return Json{{"epochs", o.epochs}, {"batch_size", o.batch_size}, {"lr", o.lr}, {"momentum", o.momentum}};
}

void read_train(const Json& j, TrainOptions& o) {
  o.epochs = j.value("epochs", o.epochs);
  o.batch_size = j.value("batch_size", o.batch_size);
  o.lr = j.value("lr", o.lr);
  o.momentum = j.value("momentum", o.momentum);
}

const std::set<std::string> kTrainKeys{"epochs", "batch_size", "lr", "momentum"};

std::set<std::string> with(std::set<std::string> base, std::initializer_list<std::string> more) {
  base.insert(more);
  return base;
}

std::string rel(const std::string& dir, const fs::path& p) {
  return fs::relative(p, dir).generic_string();
}

// Stage manifest: config hash, input artifact hashes, output file hashes.
void write_manifest(const std::string& out, const std::string& stage, const RunConfig& c,
                    const std::vector<std::pair<std::string, std::string>>& inputs,
                    const Json& extra = Json::object()) {
  Json m = extra;
  m["stage"] = stage;
  m["config_hash"] = fnv1a_hex(Json(c).dump());
  Json in = Json::object();
  for (const auto& [name, path] : inputs) in[name] = Json{{"path", path}, {"hash", hash_path(path)}};
  m["inputs"] = in;
  Json outputs = Json::object();
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(out))
    if (e.is_regular_file() && e.path().filename() != "stage_manifest.json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) outputs[rel(out, f)] = hash_file(f.string());
  m["outputs"] = outputs;
  write_json(out + "/stage_manifest.json", m);
}

void write_stage_config(const std::string& out, const RunConfig& c) {
  ensure_dir(out);
  write_json(out + "/config.json", c);
}

PairedDataset load_split(const std::string& data, const char* split) {
  const std::string dir = data + "/" + split;
  require_path(dir + "/manifest.json");
  return load_dataset(dir);
}

void require_bank(const std::string& bank) {
  if (bank.empty()) throw ConfigError("this stage needs a bank directory");
  require_path(bank + "/manifest.json");
}

}  // namespace

void RunConfig::validate() const {
  if (jobs < 1) throw ConfigError("jobs must be at least 1");
  benchmark.validate();
  encoder.validate();
  if (encoder.audio.input_shape != benchmark.audio_shape ||
      encoder.visual.input_shape != benchmark.visual_shape) {
    throw ConfigError("encoder input shapes must match the benchmark modality shapes");
  }
  if (pretrain.pairs < 1) throw ConfigError("pretrain.pairs must be at least 1");
  if (decouple.slots < 1) throw ConfigError("decouple.slots must be at least 1");
  if (eval.runs < 1) throw ConfigError("eval.runs must be at least 1");
  for (const TrainOptions* o : {&pretrain.train, &eval.train}) {
    if (o->epochs < 1 || o->batch_size < 1) throw ConfigError("epochs and batch_size must be positive");
  }
  if (decouple.options.epochs < 1 || decouple.options.tau <= 0) {
    throw ConfigError("decouple.epochs must be positive and decouple.tau > 0");
  }
  distill.validate();
}

DistillConfig RunConfig::distill_config() const {
  DistillConfig d = distill;
  d.seed = stage_seed(*this, StageSeed::kDistill);
  return d;
}

std::uint64_t stage_seed(const RunConfig& c, StageSeed s) {
  return mix_seed(c.seed, 0x5374616765ull, static_cast<std::uint64_t>(s));
}

void to_json(Json& j, const RunConfig& c) {
  Json distill = c.distill;
  distill.erase("seed");
  Json pretrain = train_json(c.pretrain.train);
  pretrain["pairs"] = c.pretrain.pairs;
  const DecoupleOptions& d = c.decouple.options;
  Json decouple{{"slots", c.decouple.slots}, {"decoupler", d.decoupler}, {"weights", d.weights},
                {"tau", d.tau},              {"epochs", d.epochs},       {"batch_size", d.batch_size},
                {"lr", d.lr},                {"momentum", d.momentum}};
  Json eval = train_json(c.eval.train);
  eval["runs"] = c.eval.runs;
  j = Json{{"seed", c.seed},         {"jobs", c.jobs},       {"benchmark", c.benchmark},
           {"encoder", c.encoder},   {"pretrain", pretrain}, {"decouple", decouple},
           {"distill", distill},     {"eval", eval}};
}

void from_json(const Json& j, RunConfig& c) {
  check_keys(j, {"seed", "jobs", "benchmark", "encoder", "pretrain", "decouple", "distill", "eval"},
             "run config");
  c.seed = j.value("seed", c.seed);
  c.jobs = j.value("jobs", c.jobs);
  try {
    if (j.contains("benchmark")) {
      Json b = c.benchmark;
      std::set<std::string> keys;
      for (const auto& [key, v] : b.items()) keys.insert(key);
      check_keys(j["benchmark"], keys, "benchmark");
      b.merge_patch(j["benchmark"]);
      c.benchmark = b.get<BenchmarkSpec>();
      c.encoder.audio.input_shape = c.benchmark.audio_shape;
      c.encoder.visual.input_shape = c.benchmark.visual_shape;
    }
    if (j.contains("encoder")) {
      Json e = c.encoder;
      e.merge_patch(j["encoder"]);
      c.encoder = e.get<PairConfig>();
    }
    if (j.contains("pretrain")) {
      const Json& p = j["pretrain"];
      check_keys(p, with(kTrainKeys, {"pairs"}), "pretrain");
      c.pretrain.pairs = p.value("pairs", c.pretrain.pairs);
      read_train(p, c.pretrain.train);
    }
    if (j.contains("decouple")) {
      const Json& p = j["decouple"];
      check_keys(p, with(kTrainKeys, {"slots", "decoupler", "weights", "tau"}), "decouple");
      DecoupleOptions& d = c.decouple.options;
      c.decouple.slots = p.value("slots", c.decouple.slots);
      if (p.contains("decoupler")) {
        Json x = d.decoupler;
        x.merge_patch(p["decoupler"]);
        d.decoupler = x.get<DecouplerConfig>();
      }
      if (p.contains("weights")) {
        check_keys(p["weights"],
                   {"lambda_com", "lambda_fu", "lambda_inter", "lambda_intra", "lambda_align"},
                   "decouple.weights");
        Json x = d.weights;
        x.merge_patch(p["weights"]);
        d.weights = x.get<DecoupleWeights>();
      }
      d.tau = p.value("tau", d.tau);
      TrainOptions t{d.epochs, d.batch_size, d.lr, d.momentum};
      read_train(p, t);
      d.epochs = t.epochs;
      d.batch_size = t.batch_size;
      d.lr = t.lr;
      d.momentum = t.momentum;
    }
    if (j.contains("distill")) {
      Json base = c.distill;
      base.erase("seed");
      std::set<std::string> keys;
      for (const auto& [key, v] : base.items()) keys.insert(key);
      check_keys(j["distill"], keys, "distill");
      base.merge_patch(j["distill"]);
      c.distill = base.get<DistillConfig>();
    }
    if (j.contains("eval")) {
      const Json& p = j["eval"];
      check_keys(p, with(kTrainKeys, {"runs"}), "eval");
      c.eval.runs = p.value("runs", c.eval.runs);
      read_train(p, c.eval.train);
    }
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("invalid run config: ") + e.what());
  }
}

RunConfig load_run_config(const std::string& path) {
  require_path(path);
  RunConfig c;
  from_json(read_json(path), c);
  c.validate();
  return c;
}

void stage_gen(const RunConfig& c, const std::string& out) {
  c.benchmark.validate();
  const Benchmark b = generate_benchmark(c.benchmark);
  write_stage_config(out, c);
  save_dataset(out + "/train", b.train, Json{{"benchmark", c.benchmark}});
  save_dataset(out + "/test", b.test, Json{{"benchmark", c.benchmark}});
  write_manifest(out, "gen", c, {});
}

void stage_pretrain(const RunConfig& c, const std::string& data, const std::string& out) {
  c.validate();
  const PairedDataset train = load_split(data, "train");
  PretrainLog log;
  const PretrainedBank bank = pretrain_bank(train, c.pretrain.pairs, c.encoder, c.pretrain.train,
                                            stage_seed(c, StageSeed::kPretrain), c.jobs, &log);
  write_stage_config(out, c);
  save_bank(out, bank);
  std::ostringstream csv;
  csv << "pair,epoch,loss\n";
  for (std::size_t m = 0; m < log.epoch_loss.size(); ++m)
    for (std::size_t e = 0; e < log.epoch_loss[m].size(); ++e)
      csv << m << ',' << e << ',' << format_double(log.epoch_loss[m][e]) << '\n';
  write_text(out + "/metrics.csv", csv.str());
  write_manifest(out, "pretrain", c, {{"train", data + "/train"}});
}

void stage_decouple(const RunConfig& c, const std::string& data, const std::string& bank,
                    const std::string& out) {
  c.validate();
  require_bank(bank);
  const PairedDataset train = load_split(data, "train");
  const PretrainedBank pre = load_pretrained(bank);
  std::vector<DecoupleStep> log;
  const DecouplerBank dec = train_decouplers(pre, c.decouple.slots, train, c.decouple.options,
                                             stage_seed(c, StageSeed::kDecouple), c.jobs, &log);
  write_stage_config(out, c);
  save_bank(out, pre, &dec, Json{{"weights", c.decouple.options.weights}, {"tau", c.decouple.options.tau}});
  std::ostringstream csv;
  csv << "pair,slot,epoch,step,cls,inter,intra,align,total\n";
  for (const DecoupleStep& s : log) {
    csv << s.pair << ',' << s.slot << ',' << s.epoch << ',' << s.step << ',' << format_double(s.cls)
        << ',' << format_double(s.inter) << ',' << format_double(s.intra) << ','
        << format_double(s.align) << ',' << format_double(s.total) << '\n';
  }
  write_text(out + "/metrics.csv", csv.str());
  write_manifest(out, "decouple", c, {{"train", data + "/train"}, {"bank", bank}});
}

void stage_distill(const RunConfig& c, const std::string& data, const std::string& bank,
                   const std::string& out) {
  c.validate();
  const DistillConfig dc = c.distill_config();
  const PairedDataset train = load_split(data, "train");
  PretrainedBank pre;
  DecouplerBank dec;
  std::vector<std::pair<std::string, std::string>> inputs{{"train", data + "/train"}};
  const bool needs_bank = dc.extractor != ExtractorMode::kRandom || !bank.empty();
  if (needs_bank) {
    require_bank(bank);
    pre = load_pretrained(bank);
    if (dc.extractor == ExtractorMode::kDecoupled) dec = load_decouplers(bank);
    inputs.emplace_back("bank", bank);
  }
  const DistillBanks banks{needs_bank ? &pre : nullptr,
                           dc.extractor == ExtractorMode::kDecoupled ? &dec : nullptr, c.encoder};
  const DistillResult r = run_distillation(train, banks, dc);
  write_stage_config(out, c);
  Json extra = Json::object();
  if (needs_bank) extra["bank_manifest_hash"] = hash_file(bank + "/manifest.json");
  save_distilled(out, r, dc, extra);
  write_manifest(out, "distill", c, inputs);
}

void stage_eval(const RunConfig& c, const std::string& data, const std::string& distilled,
                const std::string& out) {
  c.validate();
  require_path(distilled + "/manifest.json");
  const PairedDataset syn = load_dataset(distilled);
  const PairedDataset test = load_split(data, "test");
  const EvalReport rep = run_protocol(syn, test, c.encoder, c.eval.train, c.eval.runs,
                                      stage_seed(c, StageSeed::kEval), c.jobs);
  write_stage_config(out, c);
  save_report(out, rep, Json{{"distilled_size", syn.size()}});
  write_manifest(out, "eval", c, {{"distilled", distilled}, {"test", data + "/test"}},
                 Json{{"mean", rep.mean}, {"std", rep.std}});
}

void stage_ablate(const RunConfig& c, const std::string& data, const std::string& bank,
                  const std::string& out) {
  c.validate();
  require_bank(bank);
  const PairedDataset train = load_split(data, "train");
  const PairedDataset test = load_split(data, "test");
  const PretrainedBank pre = load_pretrained(bank);
  const DecouplerBank dec = load_decouplers(bank);
  const DistillBanks banks{&pre, &dec, c.encoder};
  const auto rows = ablation_suite(train, test, banks, c.distill_config(), c.encoder, c.eval.train,
                                   c.eval.runs, stage_seed(c, StageSeed::kEval), c.jobs);
  write_stage_config(out, c);
  std::ostringstream table, metrics;
  table << "row,name,extractor,use_cim,init,mean,std,rolling_std\n";
  metrics << "row,step,pair,slot,l_pr,l_com,l_dis\n";
  Json summary = Json::array();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const AblationRow& r = rows[i];
    std::vector<double> l_dis;
    for (const StepMetrics& m : r.trajectory) {
      l_dis.push_back(m.l_dis);
      metrics << i + 1 << ',' << m.step << ',' << m.pair << ',' << m.slot << ','
              << format_double(m.l_pr) << ',' << format_double(m.l_com) << ','
              << format_double(m.l_dis) << '\n';
    }
    const double rs = l_dis.empty() ? 0.0 : trailing_half_rolling_std(l_dis, 10);
    table << i + 1 << ',' << r.name << ',' << to_string(r.config.extractor) << ','
          << (r.config.use_cim ? 1 : 0) << ',' << to_string(r.config.init) << ','
          << format_double(r.report.mean) << ',' << format_double(r.report.std) << ','
          << format_double(rs) << '\n';
    save_report(out + "/row_" + std::to_string(i + 1) + "_" + r.name, r.report,
                Json{{"distill", r.config}, {"rolling_std", rs}});
    summary.push_back(Json{{"name", r.name}, {"mean", r.report.mean}, {"std", r.report.std}});
  }
  write_text(out + "/ablation.csv", table.str());
  write_text(out + "/metrics.csv", metrics.str());
  write_manifest(out, "ablate", c, {{"train", data + "/train"}, {"test", data + "/test"}, {"bank", bank}},
                 Json{{"rows", summary}});
}

void stage_export_embeddings(const std::string& data, const std::string& bank,
                             const std::string& out_csv, std::size_t pair, std::size_t slot) {
  require_bank(bank);
  require_path(data + "/manifest.json");
  const PairedDataset ds = load_dataset(data);
  const PretrainedBank pre = load_pretrained(bank);
  const DecouplerBank dec = load_decouplers(bank);
  if (pair >= pre.pairs.size() || slot >= dec.slots()) {
    throw ConfigError("pair/slot (" + std::to_string(pair) + ", " + std::to_string(slot) +
                      ") outside the bank");
  }
  const PretrainedPair& p = pre.pairs[pair];
  const Decoupler& d = dec.decouplers[pair][slot];
  const Tensor zp[2] = {encode_private(p.audio, ds.audio), encode_private(p.visual, ds.visual)};
  const Tensor zc[2] = {encode_private(d.audio, zp[0]), encode_private(d.visual, zp[1])};
  const std::size_t dp = zp[0].dim(1), dcd = zc[0].dim(1);
  std::ostringstream csv;
  csv << "index,label,modality";
  for (std::size_t k = 0; k < dp; ++k) csv << ",zp_" << k;
  for (std::size_t k = 0; k < dcd; ++k) csv << ",zc_" << k;
  csv << '\n';
  static const char* const kModality[2] = {"audio", "visual"};
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (int m = 0; m < 2; ++m) {
      csv << i << ',' << ds.labels[i] << ',' << kModality[m];
      for (std::size_t k = 0; k < dp; ++k) csv << ',' << format_double(zp[m].at(i, k));
      for (std::size_t k = 0; k < dcd; ++k) csv << ',' << format_double(zc[m].at(i, k));
      csv << '\n';
    }
  const fs::path parent = fs::path(out_csv).parent_path();
  if (!parent.empty()) ensure_dir(parent.string());
  write_text(out_csv, csv.str());
}

}  // namespace davdd
