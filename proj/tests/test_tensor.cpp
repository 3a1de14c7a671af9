#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "davdd/error.hpp"
#include "davdd/grad_check.hpp"
#include "davdd/ops.hpp"
#include "grad_cases.hpp"
#include "test_util.hpp"

using namespace davdd;
using davdd::testing::random_away_from_zero;
using davdd::testing::random_tensor;

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
      c.at(i, j) = s;
    }
  return c;
}

// Direct definition of cross-correlation with zero padding.
Tensor naive_conv(const Tensor& x, const Tensor& k, std::size_t stride, std::size_t pad) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = k.dim(0), KH = k.dim(2), KW = k.dim(3);
  const std::size_t OH = (H + 2 * pad - KH) / stride + 1, OW = (W + 2 * pad - KW) / stride + 1;
  Tensor y(Shape{N, O, OH, OW});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox) {
          double s = 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < KH; ++i)
              for (std::size_t j = 0; j < KW; ++j) {
                const long iy = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W))
                  continue;
                s += x[((n * C + c) * H + iy) * W + ix] * k[((o * C + c) * KH + i) * KW + j];
              }
          y[((n * O + o) * OH + oy) * OW + ox] = s;
        }
  return y;
}

void expect_near(const Tensor& a, const Tensor& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "at " << i;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tape tape;
  Var a = tape.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  Var i = tape.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  EXPECT_TRUE(matmul(a, i).value().bitwise_equal(a.value()));
}

TEST(Matmul, MatchesTripleLoop) {
  Tape tape;
  Var a = tape.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  Var b = tape.constant(Tensor::matrix({{5}, {6}}));
  Tensor c = matmul(a, b).value();
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_DOUBLE_EQ(c[0], 17.0);
  EXPECT_DOUBLE_EQ(c[1], 39.0);

  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Tensor x = random_tensor({3, 5}, seed), y = random_tensor({5, 4}, seed + 100);
    expect_near(matmul(tape.constant(x), tape.constant(y)).value(), naive_matmul(x, y), 1e-14);
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape tape;
  Var a = tape.constant(Tensor({2, 3}));
  Var b = tape.constant(Tensor({4, 2}));
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x2]"), std::string::npos) << msg;
  }
}

TEST(Conv2d, UnitKernelIsIdentity) {
  Tape tape;
  Tensor x = random_tensor({1, 3, 3}, 1);
  Var y = conv2d(tape.constant(x), tape.constant(Tensor({1, 1, 1, 1}, 1.0)), 1, 0);
  EXPECT_TRUE(y.value().bitwise_equal(x));
}

TEST(Conv2d, OnesKernelSumsWindow) {
  Tape tape;
  Var x = tape.constant(Tensor(Shape{1, 2, 2}, {1, 2, 3, 4}));
  Var y = conv2d(x, tape.constant(Tensor({1, 1, 2, 2}, 1.0)), 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.value()[0], 10.0);
}

TEST(Conv2d, NonIntegralExtentIsShapeError) {
  Tape tape;
  Var x = tape.constant(Tensor({1, 3, 3}));
  Var k = tape.constant(Tensor({1, 1, 2, 2}));
  EXPECT_THROW(conv2d(x, k, 2, 0), ShapeError);
}

TEST(Conv2d, MatchesNaiveLoopAcrossStridesAndPadding) {
  Tape tape;
  struct Case {
    std::size_t h, k, stride, pad;
  };
  for (Case c : {Case{5, 3, 1, 1}, Case{6, 2, 2, 0}, Case{7, 3, 2, 1}, Case{4, 3, 1, 2}}) {
    Tensor x = random_tensor({2, 3, c.h, c.h}, c.h);
    Tensor k = random_tensor({4, 3, c.k, c.k}, c.k + 10);
    expect_near(conv2d(tape.constant(x), tape.constant(k), c.stride, c.pad).value(),
                naive_conv(x, k, c.stride, c.pad), 1e-13);
  }
}

TEST(Relu, Definition) {
  Tape tape;
  Var y = relu(tape.constant(Tensor::vector({-1, 0, 2})));
  EXPECT_TRUE(y.value().bitwise_equal(Tensor::vector({0, 0, 2})));
}

TEST(Relu, DeadRegionHasZeroGradient) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({-1, -2, -0.5}).set_requires_grad(true));
  Var y = relu(x);
  for (double v : y.value().data()) EXPECT_EQ(v, 0.0);
  Tensor g = tape.backward(sum(y)).of(x);
  for (double v : g.data()) EXPECT_EQ(v, 0.0);
}

TEST(Relu, PassesPositiveValuesThrough) {
  Tape tape;
  Tensor x = random_tensor({10}, 4, 0.1, 2.0);
  EXPECT_TRUE(relu(tape.constant(x)).value().bitwise_equal(x));
}

TEST(L2Normalize, Examples) {
  Tape tape;
  Normalized a = l2_normalize(tape.constant(Tensor::vector({3, 4})));
  EXPECT_FALSE(a.degenerate);
  EXPECT_NEAR(a.value.value()[0], 0.6, 1e-15);
  EXPECT_NEAR(a.value.value()[1], 0.8, 1e-15);

  Normalized b = l2_normalize(a.value);
  expect_near(b.value.value(), a.value.value(), 1e-15);

  Normalized z = l2_normalize(tape.constant(Tensor::vector({0, 0})));
  EXPECT_TRUE(z.degenerate);
  EXPECT_TRUE(z.value.value().bitwise_equal(Tensor::vector({0, 0})));

  NormalizedTensor zt = normalize(Tensor::vector({0, 0}));
  EXPECT_TRUE(zt.degenerate);
}

TEST(Backward, SumOfSquares) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1, 2}).set_requires_grad(true));
  Tensor g = tape.backward(squared_norm(x)).of(x);
  EXPECT_DOUBLE_EQ(g[0], 2.0);
  EXPECT_DOUBLE_EQ(g[1], 4.0);
}

TEST(Backward, DisconnectedInputGetsZeros) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1, 2}).set_requires_grad(true));
  Var w = tape.leaf(Tensor::vector({3, 4}).set_requires_grad(true));
  Gradients g = tape.backward(squared_norm(w));
  EXPECT_TRUE(g.of(x).bitwise_equal(Tensor::vector({0, 0})));
}

TEST(Backward, NonScalarLossIsContractError) {
  Tape tape;
  Var x = tape.leaf(Tensor::vector({1, 2}).set_requires_grad(true));
  EXPECT_THROW(tape.backward(relu(x)), ContractError);
}

TEST(Backward, CompositeMlpMatchesFiniteDifferences) {
  const Tensor w1 = random_tensor({6, 8}, 11), w2 = random_tensor({8, 3}, 12);
  const Tensor b1 = random_tensor({8}, 13);
  auto f = [&](Tape& t, const Var& x) {
    Var h = relu(add_row_bias(matmul(x, t.constant(w1)), t.constant(b1)));
    return cross_entropy(matmul(h, t.constant(w2)), std::vector<int>{0, 2, 1, 1});
  };
  EXPECT_LT(grad_check(f, random_tensor({4, 6}, 14), 1e-5), 1e-4);
}

TEST(GradCheck, QuadraticIsExact) {
  auto f = [](Tape&, const Var& x) { return squared_norm(x); };
  EXPECT_LT(grad_check(f, random_away_from_zero({7}, 3, 0.1)), 1e-8);
}

TEST(GradCheck, ReluAwayFromKinks) {
  auto f = [](Tape&, const Var& x) { return sum(relu(x)); };
  EXPECT_LT(grad_check(f, random_away_from_zero({9}, 5)), 1e-6);
}

TEST(GradCheck, ConvMatmulChain) {
  const Tensor k = random_tensor({2, 1, 3, 3}, 21), w = random_tensor({18, 2}, 22);
  auto f = [&](Tape& t, const Var& x) {
    Var y = conv2d(x, t.constant(k), 1, 0);
    return squared_norm(matmul(reshape(y, Shape{1, 18}), t.constant(w)));
  };
  EXPECT_LT(grad_check(f, random_tensor({1, 5, 5}, 23)), 1e-4);
}

TEST(GradCheck, NonFiniteFunctionIsDiagnosed) {
  auto f = [](Tape&, const Var& x) { return scale(sum(x), INFINITY); };
  EXPECT_THROW(grad_check(f, Tensor::vector({1.0})), NumericError);
}

// Every differentiable op, composed into a scalar with a fixed random
// projection so that all output coordinates carry distinct weights.
TEST(GradientFidelity, EveryOperationOnFiveSeeds) {
  for (const auto& c : davdd::testing::op_grad_cases()) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const Tensor x = random_away_from_zero(c.shape, seed * 31 + 7);
      const double err =
          grad_check([&](Tape& t, const Var& v) { return c.fn(t, v, seed); }, x, 1e-5);
      EXPECT_LT(err, 1e-4) << c.name << " seed " << seed;
    }
  }
}

TEST(GradientProperties, BackwardIsLinear) {
  const Tensor x0 = random_tensor({4, 3}, 77);
  const Tensor w = random_tensor({3, 3}, 78);
  const double a = 1.7, b = -0.6;
  auto grad_of = [&](auto&& build) {
    Tape t;
    Var x = t.leaf(Tensor(x0).set_requires_grad(true));
    return t.backward(build(t, x)).of(x);
  };
  auto f = [&](Tape& t, const Var& x) { return squared_norm(matmul(x, t.constant(w))); };
  auto g = [&](Tape&, const Var& x) { return sum(l2_normalize_rows(x).value); };
  Tensor gf = grad_of(f), gg = grad_of(g);
  Tensor gc = grad_of([&](Tape& t, const Var& x) { return add(scale(f(t, x), a), scale(g(t, x), b)); });
  for (std::size_t i = 0; i < gc.numel(); ++i) EXPECT_NEAR(gc[i], a * gf[i] + b * gg[i], 1e-10);
}

TEST(GradientProperties, DeterministicForwardAndBackward) {
  auto run = [] {
    Tape t;
    Var x = t.leaf(random_tensor({2, 1, 6, 6}, 5).set_requires_grad(true));
    Var y = instance_norm(conv2d(x, t.constant(random_tensor({3, 1, 3, 3}, 6)), 1, 1));
    Var loss = squared_norm(avg_pool2d(relu(y), 2));
    return std::pair{loss.value(), t.backward(loss).of(x)};
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  EXPECT_TRUE(l1.bitwise_equal(l2));
  EXPECT_TRUE(g1.bitwise_equal(g2));
}

TEST(Tape, NonFiniteForwardIsAnError) {
  Tape tape;
  EXPECT_THROW(scale(tape.constant(Tensor::vector({1.0})), NAN), NumericError);
}

TEST(Serialization, HeaderLayout) {
  std::ostringstream os;
  write_tensor(os, Tensor(Shape{2, 1}, {1.0, -2.0}));
  const std::string bytes = os.str();
  ASSERT_EQ(bytes.size(), 4u + 8u + 16u + 16u);
  EXPECT_EQ(bytes.substr(0, 4), "DVT1");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 2);  // rank, little-endian
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 2);
  EXPECT_EQ(static_cast<unsigned char>(bytes[20]), 1);
  // 1.0 == 0x3FF0000000000000: top byte last.
  EXPECT_EQ(static_cast<unsigned char>(bytes[28 + 7]), 0x3F);
}

TEST(Serialization, RoundTripPreservesBitsForRandomShapes) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    Shape s(1 + rng() % 4);
    for (auto& e : s) e = 1 + rng() % 5;
    Tensor t = random_tensor(s, rng(), -1e6, 1e6);
    std::stringstream ss;
    write_tensor(ss, t);
    EXPECT_TRUE(read_tensor(ss).bitwise_equal(t));
  }
}

TEST(Serialization, BadMagicIsRejected) {
  std::istringstream is("XXXX");
  EXPECT_THROW(read_tensor(is), IoError);
}
