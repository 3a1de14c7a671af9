#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "davdd/distill.hpp"
#include "davdd/error.hpp"
#include "davdd/grad_check.hpp"
#include "davdd/ops.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace davdd;
using davdd::testing::random_tensor;

namespace {

// Small benchmark and untrained banks: matching semantics do not depend on
// extractor quality, and small shapes keep every test fast.
struct Fixture {
  Benchmark bench;
  PairConfig config;
  PretrainedBank bank;
  DecouplerBank decouplers;

  DistillBanks banks() const { return {&bank, &decouplers, config}; }
};

Fixture make_fixture(std::size_t pairs = 2, std::size_t slots = 2) {
  Fixture f;
  BenchmarkSpec s;
  s.samples_per_class = 10;
  s.num_classes = 3;
  s.audio_shape = {1, 8, 8};
  s.visual_shape = {2, 8, 8};
  s.seed = 3;
  f.bench = generate_benchmark(s);
  f.config = default_pair_config();
  f.config.audio.input_shape = s.audio_shape;
  f.config.visual.input_shape = s.visual_shape;
  for (EncoderConfig* e : {&f.config.audio, &f.config.visual}) {
    e->blocks = 1;
    e->channels = 3;
    e->feature_dim = 6;
  }
  f.bank.config = f.config;
  f.decouplers.config = {2, 5};
  for (std::size_t m = 0; m < pairs; ++m) {
    PretrainedPair p{build_encoder(f.config.audio, 100 + m), build_encoder(f.config.visual, 200 + m),
                     m, m};
    p.audio.freeze();
    p.visual.freeze();
    f.bank.pairs.push_back(std::move(p));
    std::vector<Decoupler> row;
    for (std::size_t t = 0; t < slots; ++t) {
      Decoupler d = make_decoupler(6, f.decouplers.config, 300 + 10 * m + t);
      d.pair = m;
      d.slot = t;
      row.push_back(std::move(d));
    }
    f.decouplers.decouplers.push_back(std::move(row));
  }
  return f;
}

const Fixture& fixture() {
  static const Fixture f = make_fixture();
  return f;
}

// Independent bilinear resize of one H x W plane with half-pixel centers.
std::vector<double> resize_oracle(const std::vector<double>& in, std::size_t h, std::size_t w,
                                  std::size_t H, std::size_t W) {
  std::vector<double> out(H * W);
  auto coord = [](std::size_t o, std::size_t n_in, std::size_t n_out) {
    double s = (o + 0.5) * static_cast<double>(n_in) / static_cast<double>(n_out) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(n_in - 1));
  };
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double sy = coord(y, h, H), sx = coord(x, w, W);
      const std::size_t y0 = static_cast<std::size_t>(std::floor(sy)), x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      const double fy = sy - y0, fx = sx - x0;
      out[y * W + x] = (1 - fy) * ((1 - fx) * in[y0 * w + x0] + fx * in[y0 * w + x1]) +
                       fy * ((1 - fx) * in[y1 * w + x0] + fx * in[y1 * w + x1]);
    }
  return out;
}

RepMeans means_1d(Tape& t, double pa, double pv, double ca, double cv) {
  return {t.constant(Tensor::vector({pa})), t.constant(Tensor::vector({pv})),
          t.constant(Tensor::vector({ca})), t.constant(Tensor::vector({cv}))};
}

std::string temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("davdd_distill_" + name);
  std::filesystem::remove_all(p);
  return p.string();
}

}  // namespace

TEST(FactorExpand, FactorOneIsIdentity) {
  Tape t;
  const Tensor x = random_tensor({2, 3, 4, 4}, 1);
  EXPECT_TRUE(factor_expand(t.constant(x), 1).value().bitwise_equal(x));
}

TEST(FactorExpand, CountsInstances) {
  Tape t;
  EXPECT_EQ(factor_expand(t.constant(random_tensor({3, 1, 4, 4}, 2)), 2).dim(0), 12u);
  EXPECT_EQ(factor_expand(t.constant(random_tensor({2, 1, 6, 6}, 2)), 3).dim(0), 18u);
}

TEST(FactorExpand, TwoByTwoCanvasGivesConstantCells) {
  Tape t;
  const Var out = factor_expand(t.constant(Tensor({1, 1, 2, 2}, {1, 2, 3, 4})), 2);
  ASSERT_EQ(out.shape(), (Shape{4, 1, 2, 2}));
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t p = 0; p < 4; ++p) EXPECT_DOUBLE_EQ(out.value()[k * 4 + p], k + 1.0);
}

TEST(FactorExpand, MatchesBilinearOracle) {
  Tape t;
  const std::size_t n = 2, C = 2, H = 6, W = 6, f = 2, h = 3, w = 3;
  const Tensor x = random_tensor({n, C, H, W}, 3);
  const Tensor out = factor_expand(t.constant(x), f).value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t g = 0; g < f * f; ++g)
      for (std::size_t c = 0; c < C; ++c) {
        std::vector<double> cell(h * w);
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t xx = 0; xx < w; ++xx)
            cell[y * w + xx] = x[((i * C + c) * H + (g / f) * h + y) * W + (g % f) * w + xx];
        const auto want = resize_oracle(cell, h, w, H, W);
        for (std::size_t p = 0; p < H * W; ++p)
          EXPECT_NEAR(out[(((i * f * f + g) * C + c) * H * W) + p], want[p], 1e-12);
      }
}

TEST(FactorExpand, IndivisibleExtentsThrow) {
  Tape t;
  EXPECT_THROW(factor_expand(t.constant(random_tensor({1, 1, 5, 4}, 4)), 2), ShapeError);
  EXPECT_THROW(factor_expand(t.constant(random_tensor({1, 4, 4}, 4)), 2), ShapeError);
}

TEST(FactorExpand, GradientMatchesFiniteDifferences) {
  const Tensor w = random_tensor({8, 1, 4, 4}, 5);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const double err = grad_check(
        [&](Tape& t, const Var& x) { return weighted_sum(factor_expand(x, 2), w); },
        random_tensor({2, 1, 4, 4}, 10 + seed));
    EXPECT_LT(err, 1e-6);
  }
}

TEST(InitSynthetic, CountsPerClass) {
  const auto& f = fixture();
  const SyntheticSet s = init_synthetic(f.bench.train, 1, 1, InitMethod::kRandom, nullptr, 1);
  EXPECT_EQ(s.audio.dim(0), 3u);
  EXPECT_EQ(s.visual.dim(0), 3u);
  EXPECT_EQ(s.labels(), (std::vector<int>{0, 1, 2}));
  const SyntheticSet s4 = init_synthetic(f.bench.train, 2, 2, InitMethod::kRandom, nullptr, 1);
  EXPECT_EQ(s4.size(), 6u);
  EXPECT_EQ(s4.expanded().size(), 24u);
  EXPECT_EQ(s4.expanded().split, Split::kTrain);
}

TEST(InitSynthetic, HerdingDelegatesToHerdingSelect) {
  const auto& f = fixture();
  const PairedDataset& train = f.bench.train;
  const PretrainedPair& probe = f.bank.pairs[0];
  const SyntheticSet s = init_synthetic(train, 2, 1, InitMethod::kHerding, &probe, 0);
  const Tensor a = encode_private(probe.audio, train.audio);
  const Tensor v = encode_private(probe.visual, train.visual);
  Tensor feats({train.size(), a.dim(1) + v.dim(1)});
  for (std::size_t i = 0; i < train.size(); ++i)
    for (std::size_t k = 0; k < a.dim(1) + v.dim(1); ++k)
      feats.at(i, k) = k < a.dim(1) ? a.at(i, k) : v.at(i, k - a.dim(1));
  const Selection want = herding_select(feats, train.labels, train.num_classes, 2);
  EXPECT_EQ(s.source, want);
  const auto rows = flatten_selection(want);
  EXPECT_TRUE(s.audio.bitwise_equal(train.audio.gather_rows(rows)));
  EXPECT_TRUE(s.visual.bitwise_equal(train.visual.gather_rows(rows)));
}

TEST(InitSynthetic, FactorTilesAreaDownsampledSources) {
  const auto& f = fixture();
  const PairedDataset& train = f.bench.train;
  const SyntheticSet s = init_synthetic(train, 1, 2, InitMethod::kRandom, nullptr, 9);
  ASSERT_EQ(s.source[0].size(), 4u);
  for (std::size_t q = 0; q < 4; ++q) {
    const std::size_t src = s.source[0][q], gi = q / 2, gj = q % 2;
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) {
        double avg = 0;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) avg += train.audio[src * 64 + (2 * y + dy) * 8 + 2 * x + dx] / 4;
        EXPECT_NEAR(s.audio[(gi * 4 + y) * 8 + gj * 4 + x], avg, 1e-12);
      }
  }
}

TEST(InitSynthetic, Contracts) {
  const auto& f = fixture();
  EXPECT_THROW(init_synthetic(f.bench.train, 0, 1, InitMethod::kRandom, nullptr, 0), ConfigError);
  EXPECT_THROW(init_synthetic(f.bench.train, 3, 2, InitMethod::kHerding, nullptr, 0), ContractError);
  EXPECT_THROW(init_synthetic(f.bench.train, 1, 3, InitMethod::kRandom, nullptr, 0), ShapeError);
  EXPECT_THROW(init_synthetic(f.bench.test, 1, 1, InitMethod::kRandom, nullptr, 0), ContractError);
}

TEST(MatchingLosses, PrivatePlugIn) {
  Tape t;
  EXPECT_DOUBLE_EQ(loss_private(means_1d(t, 2, 2, 0, 0), means_1d(t, 0, 0, 0, 0)).value().item(), 8.0);
  EXPECT_DOUBLE_EQ(loss_private(means_1d(t, 2, -1, 5, 5), means_1d(t, 2, -1, 0, 0)).value().item(), 0.0);
}

TEST(MatchingLosses, CommonPlugIn) {
  Tape t;
  const RepMeans zero = means_1d(t, 0, 0, 0, 0);
  EXPECT_DOUBLE_EQ(loss_common(means_1d(t, 0, 0, 1, 1), zero).value().item(), 6.0);
  EXPECT_DOUBLE_EQ(loss_common(means_1d(t, 0, 0, 1, -1), zero).value().item(), 2.0);
  EXPECT_DOUBLE_EQ(loss_common(means_1d(t, 0, 0, 1, 1), zero, false).value().item(), 2.0);
  EXPECT_DOUBLE_EQ(loss_common(means_1d(t, 9, 9, 3, 4), means_1d(t, 0, 0, 3, 4)).value().item(), 0.0);
}

TEST(MatchingLosses, MatchBruteForceOnRandomBatches) {
  namespace o = davdd::testing::oracle;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::size_t d = 3 + seed % 5;
    auto batch = [&](std::size_t n, std::uint64_t s) {
      return o::Batch{random_tensor({n, d}, s), random_tensor({n, d}, s + 1),
                      random_tensor({n, d}, s + 2), random_tensor({n, d}, s + 3)};
    };
    const o::Batch r = batch(7, 10 * seed), s = batch(3, 10 * seed + 5);
    Tape t;
    auto reps = [&](const o::Batch& b) {
      return Reps{t.constant(b.zp_a), t.constant(b.zc_a), t.constant(b.zp_v), t.constant(b.zc_v),
                  b.zp_a.dim(0)};
    };
    const Reps rr = reps(r), sr = reps(s);
    EXPECT_NEAR(loss_private(rr, sr).value().item(), o::private_oracle(r, s), 1e-12);
    EXPECT_NEAR(loss_common(rr, sr).value().item(), o::common_oracle(r, s, true), 1e-12);
    EXPECT_NEAR(loss_common(rr, sr, false).value().item(), o::common_oracle(r, s, false), 1e-12);
  }
}

TEST(MatchingLosses, EmptyBatchThrows) {
  EXPECT_THROW(loss_private(Reps{}, Reps{}), ContractError);
  EXPECT_THROW(loss_common(Reps{}, Reps{}), ContractError);
}

TEST(MatchingLosses, GradientsMatchFiniteDifferences) {
  const auto& f = fixture();
  const PretrainedPair& p = f.bank.pairs[1];
  const Decoupler& d = f.decouplers.decouplers[1][0];
  const Tensor real_a = random_tensor({5, 1, 8, 8}, 20), real_v = random_tensor({5, 2, 8, 8}, 21);
  const Tensor fixed_v = random_tensor({3, 2, 8, 8}, 22);
  for (std::uint64_t seed = 0; seed < 2; ++seed) {
    for (int which = 0; which < 2; ++which) {
      const double err = grad_check(
          [&](Tape& t, const Var& a) {
            const Reps real = encode(t, p, d, t.constant(real_a), t.constant(real_v));
            const Reps syn = encode(t, p, d, a, t.constant(fixed_v));
            return which == 0 ? loss_private(real, syn) : loss_common(real, syn);
          },
          random_tensor({3, 1, 8, 8}, 30 + seed));
      EXPECT_LT(err, 1e-4);
    }
  }
}

TEST(DecouplingIsolation, PrivateTermsIgnoreOtherModality) {
  const auto& f = fixture();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Tape t;
    const PretrainedPair& p = f.bank.pairs[seed % 2];
    const Decoupler& d = f.decouplers.decouplers[seed % 2][seed % 2];
    const Reps real = encode(t, p, d, t.constant(random_tensor({6, 1, 8, 8}, seed)),
                             t.constant(random_tensor({6, 2, 8, 8}, seed + 1)));
    const Var a = t.leaf(random_tensor({4, 1, 8, 8}, seed + 2).set_requires_grad(true));
    const Var v = t.leaf(random_tensor({4, 2, 8, 8}, seed + 3).set_requires_grad(true));
    const RepMeans r = rep_means(real), s = rep_means(encode(t, p, d, factor_expand(a, 2), factor_expand(v, 2)));
    const Gradients ga = t.backward(squared_norm(sub(r.zp_a, s.zp_a)));
    const Gradients gv = t.backward(squared_norm(sub(r.zp_v, s.zp_v)));
    const Gradients gj = t.backward(squared_norm(sub(add(r.zc_a, r.zc_v), add(s.zc_a, s.zc_v))));
    const Tensor cross_a = ga.of(v), cross_v = gv.of(a);
    for (double g : cross_a.data()) ASSERT_EQ(g, 0.0);
    for (double g : cross_v.data()) ASSERT_EQ(g, 0.0);
    EXPECT_GT(squared_norm(t.constant(ga.of(a))).value().item(), 0.0);
    EXPECT_GT(squared_norm(t.constant(gv.of(v))).value().item(), 0.0);
    EXPECT_GT(squared_norm(t.constant(gj.of(a))).value().item(), 0.0);
    EXPECT_GT(squared_norm(t.constant(gj.of(v))).value().item(), 0.0);
  }
}

TEST(Distiller, FixedPointWhenCanvasesAreTheClassBatch) {
  const auto& f = fixture();
  const PairedDataset& train = f.bench.train;
  DistillConfig c;
  c.factor = 1;
  c.ipc = train.class_indices(0).size();
  Distiller d(train, f.banks(), c);
  std::vector<std::size_t> rows;
  for (int k = 0; k < 3; ++k)
    for (std::size_t r : train.class_indices(k)) rows.push_back(r);
  for (std::uint64_t step = 0; step < 4; ++step) {
    Tape t;
    StepMetrics m;
    const auto [pm, ps] = d.draw(step);
    const Var total = d.matching_loss(t, t.constant(train.audio.gather_rows(rows)),
                                      t.constant(train.visual.gather_rows(rows)), pm, ps, step, m);
    EXPECT_LT(m.l_pr, 1e-10);
    EXPECT_LT(m.l_com, 1e-10);
    EXPECT_LT(total.value().item(), 1e-10);
  }
}

TEST(Distiller, PerClassTermsSumToTotal) {
  const auto& f = fixture();
  const PairedDataset& train = f.bench.train;
  DistillConfig c;
  c.ipc = 2;
  c.batch_size = 4;
  SyntheticSet syn = init_synthetic(train, 2, 2, InitMethod::kRandom, nullptr, 3);
  Distiller d(train, f.banks(), c);
  for (std::uint64_t step = 0; step < 3; ++step) {
    Tape t;
    StepMetrics m;
    std::vector<double> per;
    const auto [pm, ps] = d.draw(step);
    const double total = d.matching_loss(t, t.constant(syn.audio), t.constant(syn.visual), pm, ps,
                                         step, m, &per).value().item();
    ASSERT_EQ(per.size(), 3u);
    double sum = 0;
    for (double x : per) sum += x;
    EXPECT_NEAR(total, sum, 1e-10);
    EXPECT_NEAR(m.l_dis, total, 1e-10 * std::max(1.0, total));
  }
}

TEST(Distiller, PerClassTermsMatchDirectEncoding) {
  const auto& f = fixture();
  const PairedDataset& train = f.bench.train;
  DistillConfig c;
  c.ipc = 2;
  SyntheticSet syn = init_synthetic(train, 2, 2, InitMethod::kRandom, nullptr, 4);
  Distiller d(train, f.banks(), c);
  Tape t;
  StepMetrics m;
  std::vector<double> per;
  const auto [pm, ps] = d.draw(7);
  d.matching_loss(t, t.constant(syn.audio), t.constant(syn.visual), pm, ps, 7, m, &per);
  const PretrainedPair& p = f.bank.pairs[pm];
  const Decoupler& dec = f.decouplers.decouplers[pm][ps];
  for (int k = 0; k < 3; ++k) {
    const auto rows = train.class_indices(k);
    const std::vector<std::size_t> mine{2u * k, 2u * k + 1};
    Tape u;
    const Reps real = encode(u, p, dec, u.constant(train.audio.gather_rows(rows)),
                             u.constant(train.visual.gather_rows(rows)));
    const Reps s = encode(u, p, dec, factor_expand(u.constant(syn.audio.gather_rows(mine)), 2),
                          factor_expand(u.constant(syn.visual.gather_rows(mine)), 2));
    const double want = c.lambda_p * loss_private(real, s).value().item() +
                        c.lambda_c * loss_common(real, s).value().item();
    EXPECT_NEAR(per[k], want, 1e-10 * std::max(1.0, want));
  }
}

TEST(Distiller, StepDescendsForSmallEnoughRate) {
  const auto& f = fixture();
  const PairedDataset& train = f.bench.train;
  const SyntheticSet init = init_synthetic(train, 2, 2, InitMethod::kRandom, nullptr, 5);
  for (ExtractorMode mode : {ExtractorMode::kRandom, ExtractorMode::kPretrained, ExtractorMode::kDecoupled}) {
    DistillConfig c;
    c.ipc = 2;
    c.momentum = 0.0;
    c.extractor = mode;
    const std::uint64_t step_seed = 11;
    auto loss_of = [&](const SyntheticSet& s, Distiller& d) {
      Tape t;
      StepMetrics m;
      const auto [pm, ps] = d.draw(step_seed);
      return d.matching_loss(t, t.constant(s.audio), t.constant(s.visual), pm, ps, step_seed, m).value().item();
    };
    bool descended = false;
    for (int halving = 0; halving < 30 && !descended; ++halving) {
      c.lr = std::ldexp(1.0, -halving);
      Distiller d(train, f.banks(), c);
      SyntheticSet s = init;
      const double before = loss_of(s, d);
      d.step(s, step_seed);
      descended = loss_of(s, d) < before;
    }
    EXPECT_TRUE(descended) << to_string(mode);
  }
}

TEST(Distiller, BanksAreFrozenAcrossSteps) {
  const Fixture before = make_fixture();
  Fixture f = make_fixture();
  DistillConfig c;
  c.ipc = 1;
  c.steps = 10;
  c.lr = 0.01;
  run_distillation(f.bench.train, f.banks(), c);
  for (std::size_t m = 0; m < f.bank.pairs.size(); ++m) {
    for (Model PretrainedPair::*pair : {&PretrainedPair::audio, &PretrainedPair::visual}) {
      const auto& x = (f.bank.pairs[m].*pair).parameters();
      const auto& y = (before.bank.pairs[m].*pair).parameters();
      for (std::size_t i = 0; i < x.size(); ++i) EXPECT_TRUE(x[i].bitwise_equal(y[i]));
    }
    for (std::size_t t = 0; t < f.decouplers.slots(); ++t)
      for (Model Decoupler::*side : {&Decoupler::audio, &Decoupler::visual}) {
        const auto& x = (f.decouplers.decouplers[m][t].*side).parameters();
        const auto& y = (before.decouplers.decouplers[m][t].*side).parameters();
        for (std::size_t i = 0; i < x.size(); ++i) EXPECT_TRUE(x[i].bitwise_equal(y[i]));
      }
  }
}

TEST(Distiller, DrawsStayInBankAndCoverIt) {
  const auto& f = fixture();
  DistillConfig c;
  Distiller d(f.bench.train, f.banks(), c);
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto draw = d.draw(s);
    ASSERT_LT(draw.first, 2u);
    ASSERT_LT(draw.second, 2u);
    seen.insert(draw);
  }
  EXPECT_EQ(seen.size(), 4u);
}

TEST(Distiller, ConfigContracts) {
  const auto& f = fixture();
  DistillConfig c;
  c.lambda_c = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = DistillConfig{};
  EXPECT_THROW(Distiller(f.bench.train, DistillBanks{&f.bank, nullptr, f.config}, c), ConfigError);
  c.extractor = ExtractorMode::kPretrained;
  EXPECT_THROW(Distiller(f.bench.train, DistillBanks{nullptr, nullptr, f.config}, c), ConfigError);
  c.extractor = ExtractorMode::kRandom;
  EXPECT_NO_THROW(Distiller(f.bench.train, DistillBanks{nullptr, nullptr, f.config}, c));
  EXPECT_THROW(Distiller(f.bench.test, f.banks(), DistillConfig{}), ContractError);
}

TEST(DistillConfigJson, RoundTrip) {
  DistillConfig c;
  c.lambda_c = 0;
  c.steps = 17;
  c.init = InitMethod::kRandom;
  c.extractor = ExtractorMode::kPretrained;
  c.use_cim = false;
  c.per_class_matching = false;
  c.seed = 99;
  Json j = c;
  const DistillConfig back = j.get<DistillConfig>();
  EXPECT_EQ(Json(back).dump(), j.dump());
  EXPECT_EQ(Json(DistillConfig{}).at("lambda_c").get<double>(), 40.0);
  EXPECT_EQ(Json(DistillConfig{}).at("lambda_p").get<double>(), 80.0);
  EXPECT_THROW(parse_extractor_mode("gradient"), ConfigError);
}

TEST(RunDistillation, ZeroStepsReturnsInitialization) {
  const auto& f = fixture();
  DistillConfig c;
  c.ipc = 2;
  c.steps = 0;
  const DistillResult r = run_distillation(f.bench.train, f.banks(), c);
  const SyntheticSet init =
      init_synthetic(f.bench.train, 2, 2, InitMethod::kHerding, &f.bank.pairs[0], mix_seed(0, 0x496e6974ull));
  EXPECT_TRUE(r.trajectory.empty());
  EXPECT_TRUE(r.syn.audio.bitwise_equal(init.audio));
  EXPECT_TRUE(r.syn.visual.bitwise_equal(init.visual));
}

TEST(RunDistillation, DeterministicAndGlobalModeRuns) {
  const auto& f = fixture();
  for (bool per_class : {true, false}) {
    DistillConfig c;
    c.ipc = 1;
    c.steps = 6;
    c.lr = 0.01;
    c.per_class_matching = per_class;
    const DistillResult a = run_distillation(f.bench.train, f.banks(), c);
    const DistillResult b = run_distillation(f.bench.train, f.banks(), c);
    ASSERT_EQ(a.trajectory.size(), 6u);
    for (std::size_t s = 0; s < 6; ++s) {
      EXPECT_EQ(a.trajectory[s].l_dis, b.trajectory[s].l_dis);
      EXPECT_EQ(a.trajectory[s].pair, b.trajectory[s].pair);
      EXPECT_TRUE(std::isfinite(a.trajectory[s].l_dis));
    }
    EXPECT_TRUE(a.syn.audio.bitwise_equal(b.syn.audio));
    EXPECT_TRUE(a.syn.visual.bitwise_equal(b.syn.visual));
  }
}

TEST(RunDistillation, PrivateOnlyModesRecordNoCommonLoss) {
  const auto& f = fixture();
  DistillConfig c;
  c.ipc = 1;
  c.steps = 3;
  c.lr = 0.01;
  for (ExtractorMode mode : {ExtractorMode::kRandom, ExtractorMode::kPretrained}) {
    c.extractor = mode;
    for (const StepMetrics& m : run_distillation(f.bench.train, f.banks(), c).trajectory) {
      EXPECT_EQ(m.l_com, 0.0);
      EXPECT_NEAR(m.l_dis, c.lambda_p * m.l_pr, 1e-9 * m.l_dis);
    }
  }
}

TEST(RunDistillation, SaveAndLoadRoundTrip) {
  const auto& f = fixture();
  DistillConfig c;
  c.ipc = 1;
  c.steps = 4;
  c.lr = 0.01;
  const DistillResult r = run_distillation(f.bench.train, f.banks(), c);
  const std::string dir = temp_dir("roundtrip");
  save_distilled(dir, r, c, Json{{"note", "x"}});
  const SyntheticSet s = load_synthetic(dir);
  EXPECT_TRUE(s.audio.bitwise_equal(r.syn.audio));
  EXPECT_TRUE(s.visual.bitwise_equal(r.syn.visual));
  EXPECT_EQ(s.source, r.syn.source);
  const PairedDataset ds = load_dataset(dir);
  EXPECT_EQ(ds.size(), 12u);
  EXPECT_TRUE(ds.audio.bitwise_equal(r.syn.expanded().audio));
  std::ifstream csv(dir + "/trajectory.csv");
  std::size_t lines = 0;
  for (std::string line; std::getline(csv, line);) ++lines;
  EXPECT_EQ(lines, 5u);
  const Json meta = read_json(dir + "/distill_meta.json");
  EXPECT_EQ(meta.at("note"), "x");
  EXPECT_EQ(meta.at("config").get<DistillConfig>().steps, 4u);
  EXPECT_THROW(load_synthetic(temp_dir("missing")), IoError);
}

TEST(RollingStd, ConstantAndOracle) {
  EXPECT_EQ(trailing_half_rolling_std(std::vector<double>(20, 3.0), 5), 0.0);
  EXPECT_EQ(trailing_half_rolling_std({1, 2, 3, 4}, 1), 0.0);
  // Positions 2 and 3 with window 2: windows {2,3} and {3,4}, each with std 0.5.
  EXPECT_NEAR(trailing_half_rolling_std({1, 2, 3, 4}, 2), 0.5, 1e-15);
  // Alternating series: every full window of 2 has std 1.
  EXPECT_NEAR(trailing_half_rolling_std({0, 2, 0, 2, 0, 2}, 2), 1.0, 1e-15);
  EXPECT_THROW(trailing_half_rolling_std({}, 3), ContractError);
}
