#include "davdd/banks.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "davdd/error.hpp"
#include "davdd/parallel.hpp"

namespace davdd {

PretrainedBank pretrain_bank(const PairedDataset& train, std::size_t pairs,
                             const PairConfig& config, const TrainOptions& options,
                             std::uint64_t seed, std::size_t jobs, PretrainLog* log) {
  if (pairs < 1) throw ConfigError("pretrained bank needs at least one pair");
  if (options.epochs < 1) throw ConfigError("pretraining needs at least one epoch");
  require_train_split(train, "pretrain_bank");
  config.validate();

  PretrainedBank bank;
  bank.config = config;
  bank.pairs.resize(pairs);
  std::vector<std::vector<double>> losses(pairs);
  parallel_for(pairs, jobs, [&](std::size_t m) {
    const std::uint64_t s = mix_seed(seed, 0x50726554ull, m);
    FusedClassifier fc = make_fused_classifier(config, train.num_classes, s);
    losses[m] = train_classifier(fc, train, options, s);
    fc.audio.freeze();
    fc.visual.freeze();
    bank.pairs[m] = PretrainedPair{std::move(fc.audio), std::move(fc.visual), m, s};
  });
  if (log) log->epoch_loss = std::move(losses);
  return bank;
}

void to_json(Json& j, const DecouplerConfig& c) {
  j = Json{{"depth", c.depth}, {"common_dim", c.common_dim}};
}

void from_json(const Json& j, DecouplerConfig& c) {
  const DecouplerConfig d;
  c.depth = j.value("depth", d.depth);
  c.common_dim = j.value("common_dim", d.common_dim);
}

Decoupler make_decoupler(std::size_t feature_dim, const DecouplerConfig& config,
                         std::uint64_t seed) {
  if (config.common_dim == 0) throw ConfigError("common_dim must be positive");
  auto head = [&](std::uint64_t s) {
    if (config.depth == 1) return build_linear(feature_dim, config.common_dim, s);
    if (config.depth == 2) {
      const std::size_t widths[] = {feature_dim, config.common_dim, config.common_dim};
      return build_mlp(widths, s);
    }
    throw ConfigError("decoupler depth must be 1 or 2, got " + std::to_string(config.depth));
  };
  Decoupler d;
  d.audio = head(mix_seed(seed, 1));
  d.visual = head(mix_seed(seed, 2));
  d.seed = seed;
  return d;
}

namespace {

void require_batch_shape(const Var& x, const Model& m, const char* which) {
  const Shape& s = x.shape();
  if (s.empty() || Shape(s.begin() + 1, s.end()) != m.input_shape()) {
    throw ContractError(std::string("encode: ") + which + " batch " + shape_str(s) +
                        " does not match encoder input " + shape_str(m.input_shape()));
  }
}

Var zero_scalar(Tape& tape) { return tape.constant(Tensor::scalar(0.0)); }

}  // namespace

Reps encode(Tape& tape, const PretrainedPair& pair, const Decoupler& dec, const Var& audio,
            const Var& visual) {
  require_batch_shape(audio, pair.audio, "audio");
  require_batch_shape(visual, pair.visual, "visual");
  if (audio.dim(0) != visual.dim(0)) {
    throw ContractError("encode: " + std::to_string(audio.dim(0)) + " audio rows vs " +
                        std::to_string(visual.dim(0)) + " visual rows");
  }
  if (dec.audio.input_shape() != Shape{pair.feature_dim()}) {
    throw ContractError("encode: decoupler input " + shape_str(dec.audio.input_shape()) +
                        " does not match encoder features of width " +
                        std::to_string(pair.feature_dim()));
  }
  Reps r;
  r.size = audio.dim(0);
  if (r.size == 0) return r;
  r.zp_a = bind_constant(tape, pair.audio)(audio);
  r.zp_v = bind_constant(tape, pair.visual)(visual);
  r.zc_a = bind_constant(tape, dec.audio)(r.zp_a);
  r.zc_v = bind_constant(tape, dec.visual)(r.zp_v);
  return r;
}

Tensor encode_private(const Model& encoder, const Tensor& inputs) {
  Tape tape;
  return bind_constant(tape, encoder)(tape.constant(inputs)).value();
}

void to_json(Json& j, const DecoupleWeights& w) {
  j = Json{{"lambda_com", w.com},
           {"lambda_fu", w.fu},
           {"lambda_inter", w.inter},
           {"lambda_intra", w.intra},
           {"lambda_align", w.align}};
}

void from_json(const Json& j, DecoupleWeights& w) {
  const DecoupleWeights d;
  w.com = j.value("lambda_com", d.com);
  w.fu = j.value("lambda_fu", d.fu);
  w.inter = j.value("lambda_inter", d.inter);
  w.intra = j.value("lambda_intra", d.intra);
  w.align = j.value("lambda_align", d.align);
}

Var loss_cls(const Var& zc_a, const Var& zc_v, std::span<const int> labels,
             const CommonHeads& heads, double lambda_com, double lambda_fu) {
  Var ce_a = cross_entropy(heads.audio(zc_a), labels);
  Var ce_v = cross_entropy(heads.visual(zc_v), labels);
  Var ce_f = cross_entropy(fuse_and_classify(zc_a, zc_v, heads.fused), labels);
  return add(scale(add(ce_a, ce_v), lambda_com), scale(ce_f, lambda_fu));
}

Var loss_inter(const Var& zc_a, const Var& zc_v, std::span<const int> labels, double tau) {
  const std::size_t n = zc_a.dim(0);
  if (labels.size() != n) throw ContractError("loss_inter: label count does not match batch");
  if (n < 2) throw ContractError("loss_inter needs a batch of at least 2");
  std::vector<std::size_t> positives(n, 0);
  std::size_t anchors = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t w = 0; w < n; ++w) positives[i] += (w != i && labels[w] == labels[i]);
    anchors += positives[i] > 0;
  }
  if (anchors == 0) return zero_scalar(zc_a.tape());

  Var z = l2_normalize_rows(add(zc_a, zc_v)).value;
  Var sim = scale(matmul(z, transpose(z)), 1.0 / tau);
  std::vector<unsigned char> mask(n * n, 1);
  for (std::size_t i = 0; i < n; ++i) mask[i * n + i] = 0;
  Var logp = log_softmax_rows(sim, mask);
  Tensor weights({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    if (positives[i] == 0) continue;
    const double w = -1.0 / (static_cast<double>(positives[i]) * static_cast<double>(anchors));
    for (std::size_t k = 0; k < n; ++k)
      if (k != i && labels[k] == labels[i]) weights.at(i, k) = w;
  }
  return weighted_sum(logp, weights);
}

Var loss_intra(const Var& zc_a, const Var& zc_v, double tau) {
  const std::size_t n = zc_a.dim(0);
  if (n == 0 || zc_v.dim(0) != n) throw ContractError("loss_intra needs equal, nonempty batches");
  Var sim = scale(matmul(l2_normalize_rows(zc_a).value, transpose(l2_normalize_rows(zc_v).value)),
                  1.0 / tau);
  Tensor diag({n, n});
  for (std::size_t i = 0; i < n; ++i) diag.at(i, i) = -0.5 / static_cast<double>(n);
  return add(weighted_sum(log_softmax_rows(sim), diag),
             weighted_sum(log_softmax_rows(transpose(sim)), diag));
}

PrototypeBank::PrototypeBank(std::size_t num_classes, std::size_t d)
    : dim(d),
      audio(num_classes, Tensor(Shape{d})),
      visual(num_classes, Tensor(Shape{d})),
      count_a(num_classes, 0),
      count_v(num_classes, 0) {}

bool PrototypeBank::initialized(int c) const {
  return c >= 0 && static_cast<std::size_t>(c) < num_classes() && count_a[c] > 0 &&
         count_v[c] > 0;
}

Var class_unit_mean(const Var& z, std::span<const std::size_t> rows) {
  return l2_normalize(mean_rows(l2_normalize_rows(gather_rows(z, rows)).value)).value;
}

namespace {

std::vector<std::vector<std::size_t>> rows_by_class(std::span<const int> labels) {
  std::set<int> classes(labels.begin(), labels.end());
  std::vector<std::vector<std::size_t>> out;
  for (int c : classes) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) rows.push_back(i);
    out.push_back(std::move(rows));
  }
  return out;
}

}  // namespace

Var loss_align(const Var& zc_a, const Var& zc_v, std::span<const int> labels,
               const PrototypeBank& bank) {
  Var total = zero_scalar(zc_a.tape());
  std::size_t present = 0;
  for (const auto& rows : rows_by_class(labels)) {
    const int c = labels[rows.front()];
    if (!bank.initialized(c)) continue;
    Var mu_a = class_unit_mean(zc_a, rows);
    Var mu_v = class_unit_mean(zc_v, rows);
    Var sims = add(weighted_sum(mu_a, bank.visual[c]), weighted_sum(mu_v, bank.audio[c]));
    total = add(total, scale(sims, -1.0));
    ++present;
  }
  if (present == 0) return total;
  const Tensor two = Tensor::scalar(2.0 * static_cast<double>(present));
  return scale(add(total, zc_a.tape().constant(two)), 1.0 / static_cast<double>(present));
}

void ema_update(Tensor& prototype, std::size_t& count, std::span<const double> mu,
                std::size_t n_curr, bool normalize) {
  if (n_curr == 0) throw ContractError("ema_update needs at least one new sample");
  if (mu.size() != prototype.numel()) {
    throw ShapeError("ema_update: mean of width " + std::to_string(mu.size()) +
                     " for prototype " + shape_str(prototype.shape()));
  }
  const double m = static_cast<double>(count) / static_cast<double>(count + n_curr);
  auto p = prototype.data();
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = m * p[i] + (1.0 - m) * mu[i];
  if (normalize) prototype = davdd::normalize(prototype).value;
  count += n_curr;
}

void update_prototypes(PrototypeBank& bank, const Tensor& zc_a, const Tensor& zc_v,
                       std::span<const int> labels) {
  Tape tape;
  const Var a = tape.constant(zc_a), v = tape.constant(zc_v);
  for (const auto& rows : rows_by_class(labels)) {
    const int c = labels[rows.front()];
    ema_update(bank.audio.at(c), bank.count_a[c], class_unit_mean(a, rows).value().data(),
               rows.size());
    ema_update(bank.visual.at(c), bank.count_v[c], class_unit_mean(v, rows).value().data(),
               rows.size());
  }
}

namespace {

struct DecoupleJob {
  std::size_t pair, slot;
};

Decoupler train_one_decoupler(const PretrainedBank& bank, const Tensor& zp_a, const Tensor& zp_v,
                              const PairedDataset& train, const DecoupleOptions& o,
                              DecoupleJob job, std::uint64_t seed,
                              std::vector<DecoupleStep>& log) {
  const std::size_t dp = bank.pairs[job.pair].feature_dim(), dc = o.decoupler.common_dim;
  const std::size_t C = train.num_classes;
  Decoupler dec = make_decoupler(dp, o.decoupler, seed);
  dec.pair = job.pair;
  dec.slot = job.slot;
  Model head_a = build_linear(dc, C, mix_seed(seed, 3));
  Model head_v = build_linear(dc, C, mix_seed(seed, 4));
  Model head_f = build_linear(2 * dc, C, mix_seed(seed, 5));
  std::vector<SgdState> opt(5, SgdState{{}, o.lr, o.momentum});
  PrototypeBank protos(C, dc);
  BatchIterator batches(train, o.batch_size, mix_seed(seed, 6));

  std::size_t step = 0;
  for (std::size_t e = 0; e < o.epochs; ++e) {
    for (const auto& rows : batches.next_epoch()) {
      std::vector<int> y;
      for (std::size_t i : rows) y.push_back(train.labels[i]);
      Tape tape;
      BoundModel ga = bind(tape, dec.audio), gv = bind(tape, dec.visual);
      CommonHeads heads{bind(tape, head_a), bind(tape, head_v), bind(tape, head_f)};
      Var zc_a = ga(tape.constant(zp_a.gather_rows(rows)));
      Var zc_v = gv(tape.constant(zp_v.gather_rows(rows)));

      DecoupleStep rec{job.pair, job.slot, e, step++};
      Var cls = loss_cls(zc_a, zc_v, y, heads, o.weights.com, o.weights.fu);
      Var total = cls;
      rec.cls = cls.value().item();
      if (rows.size() >= 2) {
        Var inter = loss_inter(zc_a, zc_v, y, o.tau);
        rec.inter = inter.value().item();
        total = add(total, scale(inter, o.weights.inter));
      }
      Var intra = loss_intra(zc_a, zc_v, o.tau);
      Var align = loss_align(zc_a, zc_v, y, protos);
      rec.intra = intra.value().item();
      rec.align = align.value().item();
      total = add(total, add(scale(intra, o.weights.intra), scale(align, o.weights.align)));
      rec.total = total.value().item();

      Gradients g = tape.backward(total);
      sgd_step(dec.audio, parameter_grads(g, ga), opt[0]);
      sgd_step(dec.visual, parameter_grads(g, gv), opt[1]);
      sgd_step(head_a, parameter_grads(g, heads.audio), opt[2]);
      sgd_step(head_v, parameter_grads(g, heads.visual), opt[3]);
      sgd_step(head_f, parameter_grads(g, heads.fused), opt[4]);
      update_prototypes(protos, zc_a.value(), zc_v.value(), y);
      log.push_back(rec);
    }
  }
  dec.audio.freeze();
  dec.visual.freeze();
  return dec;
}

}  // namespace

DecouplerBank train_decouplers(const PretrainedBank& bank, std::size_t slots,
                               const PairedDataset& train, const DecoupleOptions& options,
                               std::uint64_t seed, std::size_t jobs,
                               std::vector<DecoupleStep>* log) {
  if (slots < 1) throw ConfigError("decoupler bank needs at least one slot per pair");
  if (bank.pairs.empty()) throw ConfigError("decoupler training needs a nonempty pretrained bank");
  if (options.epochs < 1) throw ConfigError("decoupler training needs at least one epoch");
  if (!(options.tau > 0)) throw ConfigError("temperature must be positive");
  require_train_split(train, "train_decouplers");

  const std::size_t M = bank.pairs.size();
  std::vector<Tensor> zp_a(M), zp_v(M);
  parallel_for(M, jobs, [&](std::size_t m) {
    zp_a[m] = encode_private(bank.pairs[m].audio, train.audio);
    zp_v[m] = encode_private(bank.pairs[m].visual, train.visual);
  });

  DecouplerBank out;
  out.config = options.decoupler;
  out.decouplers.assign(M, std::vector<Decoupler>(slots));
  std::vector<std::vector<DecoupleStep>> logs(M * slots);
  parallel_for(M * slots, jobs, [&](std::size_t k) {
    const DecoupleJob job{k / slots, k % slots};
    out.decouplers[job.pair][job.slot] =
        train_one_decoupler(bank, zp_a[job.pair], zp_v[job.pair], train, options, job,
                            mix_seed(seed, 0x44656331ull, k), logs[k]);
  });
  if (log) {
    for (auto& l : logs) log->insert(log->end(), l.begin(), l.end());
  }
  return out;
}

double mean_common_cosine(const PretrainedPair& pair, const Decoupler& dec,
                          const PairedDataset& ds) {
  if (ds.size() == 0) throw ContractError("mean_common_cosine of an empty dataset");
  Tape tape;
  Reps r = encode(tape, pair, dec, tape.constant(ds.audio), tape.constant(ds.visual));
  const Tensor a = l2_normalize_rows(r.zc_a).value.value();
  const Tensor v = l2_normalize_rows(r.zc_v).value.value();
  const std::size_t d = a.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i)
    total += dot(a.data().subspan(i * d, d), v.data().subspan(i * d, d));
  return total / static_cast<double>(ds.size());
}

void save_bank(const std::string& dir, const PretrainedBank& bank, const DecouplerBank* decouplers,
               const Json& extra) {
  ensure_dir(dir);
  Json m = extra;
  m["format"] = "davdd-bank-1";
  m["M"] = bank.pairs.size();
  m["d_p"] = bank.pairs.empty() ? 0 : bank.pairs.front().feature_dim();
  m["pair_config"] = bank.config;
  Json seeds = Json::array();
  for (const auto& p : bank.pairs) {
    const std::string pd = dir + "/pair_" + std::to_string(p.id);
    ensure_dir(pd);
    save_model(pd + "/audio.ckpt", p.audio);
    save_model(pd + "/visual.ckpt", p.visual);
    seeds.push_back(p.seed);
  }
  m["pair_seeds"] = seeds;
  if (decouplers) {
    m["T"] = decouplers->slots();
    m["d_c"] = decouplers->config.common_dim;
    m["decoupler_config"] = decouplers->config;
    Json dseeds = Json::array();
    for (const auto& row : decouplers->decouplers) {
      Json r = Json::array();
      for (const auto& d : row) {
        const std::string dd = dir + "/pair_" + std::to_string(d.pair) + "/dec_" +
                               std::to_string(d.slot) + ".ckpt";
        ensure_dir(dd);
        save_model(dd + "/audio", d.audio);
        save_model(dd + "/visual", d.visual);
        r.push_back(d.seed);
      }
      dseeds.push_back(r);
    }
    m["decoupler_seeds"] = dseeds;
  } else {
    m["T"] = 0;
  }
  write_json(dir + "/manifest.json", m);
}

namespace {

Json read_bank_manifest(const std::string& dir) {
  require_path(dir + "/manifest.json");
  Json m = read_json(dir + "/manifest.json");
  if (m.value("format", "") != "davdd-bank-1") {
    throw IoError(dir + "/manifest.json is not a bank manifest");
  }
  return m;
}

}  // namespace

PretrainedBank load_pretrained(const std::string& dir) {
  const Json m = read_bank_manifest(dir);
  PretrainedBank bank;
  bank.config = m.at("pair_config").get<PairConfig>();
  const auto seeds = m.at("pair_seeds").get<std::vector<std::uint64_t>>();
  for (std::size_t i = 0; i < m.at("M").get<std::size_t>(); ++i) {
    const std::string pd = dir + "/pair_" + std::to_string(i);
    require_path(pd + "/audio.ckpt");
    require_path(pd + "/visual.ckpt");
    PretrainedPair p{load_model(pd + "/audio.ckpt"), load_model(pd + "/visual.ckpt"), i,
                     seeds.at(i)};
    p.audio.freeze();
    p.visual.freeze();
    bank.pairs.push_back(std::move(p));
  }
  return bank;
}

DecouplerBank load_decouplers(const std::string& dir) {
  const Json m = read_bank_manifest(dir);
  const std::size_t T = m.value("T", std::size_t{0});
  if (T == 0) throw IoError(dir + " holds no decouplers (run decouple first)");
  DecouplerBank out;
  out.config = m.at("decoupler_config").get<DecouplerConfig>();
  const auto seeds = m.at("decoupler_seeds").get<std::vector<std::vector<std::uint64_t>>>();
  const std::size_t M = m.at("M").get<std::size_t>();
  out.decouplers.resize(M);
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t t = 0; t < T; ++t) {
      const std::string dd =
          dir + "/pair_" + std::to_string(i) + "/dec_" + std::to_string(t) + ".ckpt";
      require_path(dd);
      Decoupler d{load_model(dd + "/audio"), load_model(dd + "/visual"), i, t, seeds.at(i).at(t)};
      d.audio.freeze();
      d.visual.freeze();
      out.decouplers[i].push_back(std::move(d));
    }
  }
  return out;
}

}  // namespace davdd
