#include "davdd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "davdd/error.hpp"

namespace davdd {

std::string to_string(InitMethod m) { return m == InitMethod::kHerding ? "herding" : "random"; }

std::string to_string(ExtractorMode m) {
  switch (m) {
    case ExtractorMode::kRandom: return "random";
    case ExtractorMode::kPretrained: return "pretrained";
    case ExtractorMode::kDecoupled: return "decoupled";
  }
  return "decoupled";
}

InitMethod parse_init_method(const std::string& s) {
  if (s == "herding") return InitMethod::kHerding;
  if (s == "random") return InitMethod::kRandom;
  throw ConfigError("unknown init method '" + s + "' (expected herding or random)");
}

ExtractorMode parse_extractor_mode(const std::string& s) {
  if (s == "random") return ExtractorMode::kRandom;
  if (s == "pretrained") return ExtractorMode::kPretrained;
  if (s == "decoupled") return ExtractorMode::kDecoupled;
  throw ConfigError("unknown extractor mode '" + s +
                    "' (expected random, pretrained or decoupled)");
}

std::vector<int> SyntheticSet::labels() const {
  std::vector<int> y;
  for (std::size_t c = 0; c < num_classes; ++c) y.insert(y.end(), ipc, static_cast<int>(c));
  return y;
}

PairedDataset SyntheticSet::expanded() const {
  Tape tape;
  PairedDataset ds;
  ds.audio = factor_expand(tape.constant(audio), factor).value();
  ds.visual = factor_expand(tape.constant(visual), factor).value();
  for (int y : labels()) ds.labels.insert(ds.labels.end(), factor * factor, y);
  ds.num_classes = num_classes;
  ds.split = Split::kTrain;
  return ds;
}

void DistillConfig::validate() const {
  if (lambda_c < 0 || lambda_p < 0) throw ConfigError("matching weights must be non-negative");
  if (ipc < 1) throw ConfigError("ipc must be at least 1");
  if (factor < 1) throw ConfigError("factor must be at least 1");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(lr > 0)) throw ConfigError("synthetic learning rate must be positive");
}

void to_json(Json& j, const DistillConfig& c) {
  j = Json{{"lambda_c", c.lambda_c},
           {"lambda_p", c.lambda_p},
           {"steps", c.steps},
           {"lr", c.lr},
           {"momentum", c.momentum},
           {"batch_size", c.batch_size},
           {"ipc", c.ipc},
           {"factor", c.factor},
           {"init", to_string(c.init)},
           {"extractor", to_string(c.extractor)},
           {"use_cim", c.use_cim},
           {"per_class_matching", c.per_class_matching},
           {"seed", c.seed}};
}

void from_json(const Json& j, DistillConfig& c) {
  const DistillConfig d;
  c.lambda_c = j.value("lambda_c", d.lambda_c);
  c.lambda_p = j.value("lambda_p", d.lambda_p);
  c.steps = j.value("steps", d.steps);
  c.lr = j.value("lr", d.lr);
  c.momentum = j.value("momentum", d.momentum);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.ipc = j.value("ipc", d.ipc);
  c.factor = j.value("factor", d.factor);
  c.init = parse_init_method(j.value("init", to_string(d.init)));
  c.extractor = parse_extractor_mode(j.value("extractor", to_string(d.extractor)));
  c.use_cim = j.value("use_cim", d.use_cim);
  c.per_class_matching = j.value("per_class_matching", d.per_class_matching);
  c.seed = j.value("seed", d.seed);
}

namespace {

Shape with_rows(std::size_t n, const Shape& per_sample) {
  Shape s{n};
  s.insert(s.end(), per_sample.begin(), per_sample.end());
  return s;
}

Tensor concat_features(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.dim(0), da = a.row_size(), db = b.row_size();
  Tensor out({n, da + db});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().begin() + static_cast<long>(i * da), da,
                out.data().begin() + static_cast<long>(i * (da + db)));
    std::copy_n(b.data().begin() + static_cast<long>(i * db), db,
                out.data().begin() + static_cast<long>(i * (da + db) + da));
  }
  return out;
}

// Area-averages sample `src` of `from` by `f` into grid cell (gi, gj) of canvas `dst` of `to`.
void tile_cell(const Tensor& from, std::size_t src, Tensor& to, std::size_t dst, std::size_t f,
               std::size_t gi, std::size_t gj) {
  const std::size_t C = from.dim(1), H = from.dim(2), W = from.dim(3);
  const std::size_t h = H / f, w = W / f;
  const double* in = from.data().data() + src * C * H * W;
  double* out = to.data().data() + dst * C * H * W;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < f; ++dy)
          for (std::size_t dx = 0; dx < f; ++dx) acc += in[(c * H + y * f + dy) * W + x * f + dx];
        out[(c * H + gi * h + y) * W + gj * w + x] = acc / static_cast<double>(f * f);
      }
}

}  // namespace

SyntheticSet init_synthetic(const PairedDataset& train, std::size_t ipc, std::size_t factor,
                            InitMethod method, const PretrainedPair* probe, std::uint64_t seed) {
  require_train_split(train, "init_synthetic");
  if (ipc < 1) throw ConfigError("ipc must be at least 1");
  if (factor < 1) throw ConfigError("factor must be at least 1");
  for (const Shape& s : {train.audio_shape(), train.visual_shape()}) {
    if (s.size() != 3 || s[1] % factor != 0 || s[2] % factor != 0) {
      throw ShapeError("init_synthetic: canvas " + shape_str(s) + " is not divisible by factor " +
                       std::to_string(factor));
    }
  }
  const std::size_t per = ipc * factor * factor;
  Selection sel;
  if (method == InitMethod::kHerding) {
    const Tensor feats =
        probe ? concat_features(encode_private(probe->audio, train.audio),
                                encode_private(probe->visual, train.visual))
              : concat_features(train.audio, train.visual);
    sel = herding_select(feats, train.labels, train.num_classes, per);
  } else {
    sel = random_select(train.labels, train.num_classes, per, seed);
  }

  SyntheticSet syn;
  syn.num_classes = train.num_classes;
  syn.ipc = ipc;
  syn.factor = factor;
  syn.source = sel;
  syn.audio = Tensor(with_rows(syn.size(), train.audio_shape()));
  syn.visual = Tensor(with_rows(syn.size(), train.visual_shape()));
  for (std::size_t c = 0; c < syn.num_classes; ++c)
    for (std::size_t j = 0; j < ipc; ++j)
      for (std::size_t q = 0; q < factor * factor; ++q) {
        const std::size_t src = sel[c][j * factor * factor + q], dst = c * ipc + j;
        tile_cell(train.audio, src, syn.audio, dst, factor, q / factor, q % factor);
        tile_cell(train.visual, src, syn.visual, dst, factor, q / factor, q % factor);
      }
  return syn;
}

namespace {

// Half-pixel bilinear taps for resizing `in` samples to `out` samples.
struct Taps {
  std::vector<std::size_t> i0, i1;
  std::vector<double> w1;
};

Taps bilinear_taps(std::size_t in, std::size_t out) {
  Taps t;
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    src = std::max(src, 0.0);
    const std::size_t lo = std::min(static_cast<std::size_t>(src), in - 1);
    t.i0.push_back(lo);
    t.i1.push_back(std::min(lo + 1, in - 1));
    t.w1.push_back(src - static_cast<double>(lo));
  }
  return t;
}

}  // namespace

Var factor_expand(const Var& canvases, std::size_t factor) {
  const Shape& s = canvases.shape();
  if (s.size() != 4) throw ShapeError("factor_expand: expected [n x C x H x W], got " + shape_str(s));
  if (factor < 1 || s[2] % factor != 0 || s[3] % factor != 0) {
    throw ShapeError("factor_expand: " + shape_str(s) + " is not divisible by factor " +
                     std::to_string(factor));
  }
  if (factor == 1) return canvases;
  const std::size_t n = s[0], C = s[1], H = s[2], W = s[3], h = H / factor, w = W / factor;
  const std::size_t f2 = factor * factor;
  const Taps ty = bilinear_taps(h, H), tx = bilinear_taps(w, W);

  // For each output pixel of a cell, the four source offsets inside the canvas
  // relative to the cell origin, with weights.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t g = 0; g < f2; ++g) {
        const std::size_t gi = g / factor, gj = g % factor, o = i * f2 + g;
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t in_base = (i * C + c) * H * W + gi * h * W + gj * w;
          const std::size_t out_base = (o * C + c) * H * W;
          for (std::size_t y = 0; y < H; ++y) {
            const double wy1 = ty.w1[y], wy0 = 1.0 - wy1;
            const std::size_t r0 = in_base + ty.i0[y] * W, r1 = in_base + ty.i1[y] * W;
            for (std::size_t x = 0; x < W; ++x) {
              const double wx1 = tx.w1[x], wx0 = 1.0 - wx1;
              fn(out_base + y * W + x, r0 + tx.i0[x], r0 + tx.i1[x], r1 + tx.i0[x],
                 r1 + tx.i1[x], wy0 * wx0, wy0 * wx1, wy1 * wx0, wy1 * wx1);
            }
          }
        }
      }
  };

  Tensor out(Shape{n * f2, C, H, W});
  const auto X = canvases.value().data();
  auto O = out.data();
  for_each_tap([&](std::size_t o, std::size_t a, std::size_t b, std::size_t c, std::size_t d,
                   double wa, double wb, double wc, double wd) {
    O[o] = wa * X[a] + wb * X[b] + wc * X[c] + wd * X[d];
  });
  return canvases.tape().record(
      std::move(out), std::span<const Var>(&canvases, 1),
      [for_each_tap](const Tensor& g, std::span<Tensor* const> gi) {
        auto D = gi[0]->data();
        for_each_tap([&](std::size_t o, std::size_t a, std::size_t b, std::size_t c, std::size_t d,
                         double wa, double wb, double wc, double wd) {
          D[a] += wa * g[o];
          D[b] += wb * g[o];
          D[c] += wc * g[o];
          D[d] += wd * g[o];
        });
      },
      "factor_expand");
}

RepMeans rep_means(const Reps& reps) {
  if (reps.size == 0) throw ContractError("matching loss of an empty batch");
  RepMeans m{mean_rows(reps.zp_a), mean_rows(reps.zp_v), {}, {}};
  if (reps.zc_a.valid()) {
    m.zc_a = mean_rows(reps.zc_a);
    m.zc_v = mean_rows(reps.zc_v);
  }
  return m;
}

Var loss_private(const RepMeans& real, const RepMeans& syn) {
  return add(squared_norm(sub(real.zp_a, syn.zp_a)), squared_norm(sub(real.zp_v, syn.zp_v)));
}

Var loss_private(const Reps& real, const Reps& syn) {
  return loss_private(rep_means(real), rep_means(syn));
}

Var loss_common(const RepMeans& real, const RepMeans& syn, bool joint) {
  if (!real.zc_a.valid() || !syn.zc_a.valid()) {
    throw ContractError("loss_common needs common representations");
  }
  Var da = sub(real.zc_a, syn.zc_a), dv = sub(real.zc_v, syn.zc_v);
  Var l = add(squared_norm(da), squared_norm(dv));
  return joint ? add(l, squared_norm(add(da, dv))) : l;
}

Var loss_common(const Reps& real, const Reps& syn, bool joint) {
  return loss_common(rep_means(real), rep_means(syn), joint);
}

Distiller::Distiller(const PairedDataset& train, const DistillBanks& banks,
                     const DistillConfig& config)
    : train_(train), banks_(banks), config_(config) {
  config.validate();
  require_train_split(train, "distillation");
  if (config.extractor != ExtractorMode::kRandom &&
      (!banks.pretrained || banks.pretrained->pairs.empty())) {
    throw ConfigError("distillation with " + to_string(config.extractor) +
                      " extractors needs a nonempty pretrained bank");
  }
  if (config.extractor == ExtractorMode::kDecoupled &&
      (!banks.decouplers || banks.decouplers->slots() == 0 ||
       banks.decouplers->decouplers.size() != banks.pretrained->pairs.size())) {
    throw ConfigError("decoupled distillation needs one decoupler row per pretrained pair");
  }
  if (config.extractor == ExtractorMode::kRandom) banks_.random_config.validate();
  opt_a_ = SgdState{{}, config.lr, config.momentum};
  opt_v_ = opt_a_;
  for (std::size_t c = 0; c < train.num_classes; ++c) {
    class_rows_.push_back(train.class_indices(static_cast<int>(c)));
    if (class_rows_.back().empty()) {
      throw ContractError("class " + std::to_string(c) + " has no training samples");
    }
  }
  const std::size_t M = banks.pretrained ? banks.pretrained->pairs.size() : 1;
  const std::size_t T = banks.decouplers ? std::max<std::size_t>(banks.decouplers->slots(), 1) : 1;
  cache_.resize(M * T * train.num_classes);
}

std::pair<std::size_t, std::size_t> Distiller::draw(std::uint64_t step_seed) const {
  if (config_.extractor == ExtractorMode::kRandom) return {0, 0};
  std::mt19937_64 rng(mix_seed(step_seed, 1));
  std::uniform_int_distribution<std::size_t> pm(0, banks_.pretrained->pairs.size() - 1);
  const std::size_t m = pm(rng);
  if (config_.extractor != ExtractorMode::kDecoupled) return {m, 0};
  std::uniform_int_distribution<std::size_t> pt(0, banks_.decouplers->slots() - 1);
  return {m, pt(rng)};
}

Distiller::Extractor Distiller::extractor(std::size_t pair, std::size_t slot,
                                          std::uint64_t step_seed) const {
  Extractor ex;
  if (config_.extractor == ExtractorMode::kRandom) {
    ex.owned.audio = build_encoder(banks_.random_config.audio, mix_seed(step_seed, 2));
    ex.owned.visual = build_encoder(banks_.random_config.visual, mix_seed(step_seed, 3));
    ex.owned.audio.freeze();
    ex.owned.visual.freeze();
    return ex;
  }
  ex.pair = &banks_.pretrained->pairs.at(pair);
  if (config_.extractor == ExtractorMode::kDecoupled) {
    ex.dec = &banks_.decouplers->decouplers.at(pair).at(slot);
  }
  return ex;
}

std::vector<std::size_t> Distiller::real_rows(int c, std::uint64_t step_seed) const {
  std::vector<std::size_t> pool;
  if (c >= 0) {
    pool = class_rows_[c];
  } else {
    pool.resize(train_.size());
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  }
  if (config_.batch_size >= pool.size()) return pool;
  std::mt19937_64 rng(mix_seed(step_seed, 4, static_cast<std::uint64_t>(c + 1)));
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(config_.batch_size);
  std::sort(pool.begin(), pool.end());
  return pool;
}

namespace {

RepMeans encode_means(Tape& tape, const PretrainedPair& pair, const Decoupler* dec,
                      const Var& audio, const Var& visual) {
  Var zp_a = bind_constant(tape, pair.audio)(audio);
  Var zp_v = bind_constant(tape, pair.visual)(visual);
  RepMeans m{mean_rows(zp_a), mean_rows(zp_v), {}, {}};
  if (dec) {
    m.zc_a = mean_rows(bind_constant(tape, dec->audio)(zp_a));
    m.zc_v = mean_rows(bind_constant(tape, dec->visual)(zp_v));
  }
  return m;
}

}  // namespace

RepMeans Distiller::real_means(Tape& tape, const Extractor& ex,
                               std::span<const std::size_t> rows, std::size_t pair,
                               std::size_t slot, int cls) {
  const PretrainedPair& p = ex.pair ? *ex.pair : ex.owned;
  const bool cacheable = ex.pair && cls >= 0 && rows.size() == class_rows_[cls].size();
  const std::size_t T = banks_.decouplers ? std::max<std::size_t>(banks_.decouplers->slots(), 1) : 1;
  const std::size_t key = (pair * T + slot) * train_.num_classes + static_cast<std::size_t>(std::max(cls, 0));
  if (!cacheable || !cache_[key]) {
    Tape local;
    RepMeans m = encode_means(local, p, ex.dec, local.constant(train_.audio.gather_rows(rows)),
                              local.constant(train_.visual.gather_rows(rows)));
    std::array<Tensor, 4> values{m.zp_a.value(), m.zp_v.value(),
                                 ex.dec ? m.zc_a.value() : Tensor(), ex.dec ? m.zc_v.value() : Tensor()};
    if (!cacheable) {
      RepMeans out{tape.constant(values[0]), tape.constant(values[1]), {}, {}};
      if (ex.dec) {
        out.zc_a = tape.constant(values[2]);
        out.zc_v = tape.constant(values[3]);
      }
      return out;
    }
    cache_[key] = std::move(values);
  }
  const auto& v = *cache_[key];
  RepMeans out{tape.constant(v[0]), tape.constant(v[1]), {}, {}};
  if (ex.dec) {
    out.zc_a = tape.constant(v[2]);
    out.zc_v = tape.constant(v[3]);
  }
  return out;
}

RepMeans Distiller::syn_means(Tape& tape, const Extractor& ex, const Var& audio,
                              const Var& visual) {
  const PretrainedPair& p = ex.pair ? *ex.pair : ex.owned;
  return encode_means(tape, p, ex.dec, factor_expand(audio, config_.factor),
                      factor_expand(visual, config_.factor));
}

Var Distiller::matching_loss(Tape& tape, const Var& audio, const Var& visual, std::size_t pair,
                             std::size_t slot, std::uint64_t step_seed, StepMetrics& metrics,
                             std::vector<double>* per_class) {
  const Extractor ex = extractor(pair, slot, step_seed);
  const std::size_t ipc = audio.dim(0) / train_.num_classes;
  if (ipc * train_.num_classes != audio.dim(0) || visual.dim(0) != audio.dim(0)) {
    throw ContractError("matching_loss: canvases are not class-major with equal ipc");
  }
  metrics.pair = pair;
  metrics.slot = slot;
  metrics.l_pr = metrics.l_com = metrics.l_dis = 0.0;

  auto term = [&](const RepMeans& real, const RepMeans& syn) {
    Var lp = loss_private(real, syn);
    Var total = scale(lp, config_.lambda_p);
    metrics.l_pr += lp.value().item();
    if (ex.dec) {
      Var lc = loss_common(real, syn, config_.use_cim);
      metrics.l_com += lc.value().item();
      total = add(total, scale(lc, config_.lambda_c));
    }
    metrics.l_dis += total.value().item();
    if (per_class) per_class->push_back(total.value().item());
    return total;
  };

  if (!config_.per_class_matching) {
    const auto rows = real_rows(-1, step_seed);
    return term(real_means(tape, ex, rows, pair, slot, -1), syn_means(tape, ex, audio, visual));
  }
  Var total;
  for (std::size_t c = 0; c < train_.num_classes; ++c) {
    const auto rows = real_rows(static_cast<int>(c), step_seed);
    std::vector<std::size_t> mine(ipc);
    for (std::size_t j = 0; j < ipc; ++j) mine[j] = c * ipc + j;
    Var t = term(real_means(tape, ex, rows, pair, slot, static_cast<int>(c)),
                 syn_means(tape, ex, gather_rows(audio, mine), gather_rows(visual, mine)));
    total = total.valid() ? add(total, t) : t;
  }
  return total;
}

StepMetrics Distiller::step(SyntheticSet& syn, std::uint64_t step_seed) {
  const auto [m, t] = draw(step_seed);
  Tape tape;
  Var a = tape.leaf(Tensor(syn.audio).set_requires_grad(true));
  Var v = tape.leaf(Tensor(syn.visual).set_requires_grad(true));
  StepMetrics metrics;
  Var loss = matching_loss(tape, a, v, m, t, step_seed, metrics);
  Gradients g = tape.backward(loss);
  std::vector<Tensor> params{std::move(syn.audio), std::move(syn.visual)};
  std::vector<Tensor> ga{g.of(a)}, gv{g.of(v)};
  sgd_update(std::span<Tensor>(&params[0], 1), ga, opt_a_);
  sgd_update(std::span<Tensor>(&params[1], 1), gv, opt_v_);
  syn.audio = std::move(params[0]);
  syn.visual = std::move(params[1]);
  return metrics;
}

DistillResult run_distillation(const PairedDataset& train, const DistillBanks& banks,
                               const DistillConfig& config) {
  config.validate();
  const PretrainedPair* probe =
      banks.pretrained && !banks.pretrained->pairs.empty() ? &banks.pretrained->pairs[0] : nullptr;
  DistillResult r{init_synthetic(train, config.ipc, config.factor, config.init, probe,
                                 mix_seed(config.seed, 0x496e6974ull)),
                  {}};
  if (config.steps == 0) return r;
  Distiller d(train, banks, config);
  for (std::size_t s = 0; s < config.steps; ++s) {
    StepMetrics m = d.step(r.syn, mix_seed(config.seed, 0x53746570ull, s));
    m.step = s;
    r.trajectory.push_back(m);
  }
  return r;
}

double trailing_half_rolling_std(const std::vector<double>& series, std::size_t window) {
  if (series.empty() || window == 0) throw ContractError("rolling std needs data and a window");
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t i = series.size() / 2; i < series.size(); ++i) {
    const std::size_t lo = i + 1 >= window ? i + 1 - window : 0;
    double mean = 0.0;
    for (std::size_t k = lo; k <= i; ++k) mean += series[k];
    mean /= static_cast<double>(i + 1 - lo);
    double var = 0.0;
    for (std::size_t k = lo; k <= i; ++k) var += (series[k] - mean) * (series[k] - mean);
    acc += std::sqrt(var / static_cast<double>(i + 1 - lo));
    ++count;
  }
  return acc / static_cast<double>(count);
}

void save_distilled(const std::string& dir, const DistillResult& result,
                    const DistillConfig& config, const Json& extra) {
  Json meta = extra;
  meta["config"] = config;
  meta["num_classes"] = result.syn.num_classes;
  meta["ipc"] = result.syn.ipc;
  meta["factor"] = result.syn.factor;
  meta["source"] = result.syn.source;
  meta["trajectory"] = "trajectory.csv";
  save_dataset(dir, result.syn.expanded(), Json{{"kind", "distilled"}});
  save_tensor(dir + "/canvas_audio.dvt", result.syn.audio);
  save_tensor(dir + "/canvas_visual.dvt", result.syn.visual);
  std::ostringstream csv;
  csv << "step,pair,slot,l_pr,l_com,l_dis\n";
  for (const auto& m : result.trajectory) {
    csv << m.step << ',' << m.pair << ',' << m.slot << ',' << format_double(m.l_pr) << ','
        << format_double(m.l_com) << ',' << format_double(m.l_dis) << '\n';
  }
  write_text(dir + "/trajectory.csv", csv.str());
  write_json(dir + "/distill_meta.json", meta);
}

SyntheticSet load_synthetic(const std::string& dir) {
  require_path(dir + "/distill_meta.json");
  const Json meta = read_json(dir + "/distill_meta.json");
  SyntheticSet s;
  s.audio = load_tensor(dir + "/canvas_audio.dvt");
  s.visual = load_tensor(dir + "/canvas_visual.dvt");
  s.num_classes = meta.at("num_classes").get<std::size_t>();
  s.ipc = meta.at("ipc").get<std::size_t>();
  s.factor = meta.at("factor").get<std::size_t>();
  s.source = meta.at("source").get<Selection>();
  return s;
}

}  // namespace davdd
