#include "davdd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "davdd/error.hpp"

namespace davdd {
namespace {

void require_rank(const Var& x, std::size_t rank, const char* op) {
  if (x.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(x.shape()));
  }
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands live on different tapes");
}

Var record(Tape& tape, Tensor value, std::initializer_list<Var> inputs, GradFn fn,
           std::string_view op) {
  return tape.record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                     std::move(fn), op);
}

void accumulate(Tensor* dst, std::span<const double> src, double s = 1.0) {
  if (!dst) return;
  auto d = dst->data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * src[i];
}

// Output extent of a strided window; throws if it is not integral.
std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                        const char* axis) {
  const std::size_t padded = in + 2 * pad;
  if (stride == 0 || k == 0 || k > padded || (padded - k) % stride != 0) {
    throw ShapeError("conv2d: " + std::string(axis) + " extent (" + std::to_string(in) +
                     " + 2*" + std::to_string(pad) + " - " + std::to_string(k) + ")/" +
                     std::to_string(stride) + " + 1 is not integral");
  }
  return (padded - k) / stride + 1;
}

// Range of output columns whose input column ox*stride - pad + kj is in [0, in).
void valid_range(std::size_t in, std::size_t out, std::size_t stride, std::size_t pad,
                 std::size_t kj, std::size_t& lo, std::size_t& hi) {
  const long long p = static_cast<long long>(pad) - static_cast<long long>(kj);
  const long long s = static_cast<long long>(stride);
  long long l = p > 0 ? (p + s - 1) / s : 0;
  long long h = (static_cast<long long>(in) - 1 + p);
  h = h < 0 ? -1 : h / s;
  h = std::min<long long>(h, static_cast<long long>(out) - 1);
  lo = static_cast<std::size_t>(l);
  hi = h < l ? lo : static_cast<std::size_t>(h + 1);
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: dimension mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out(Shape{m, n});
  const auto A = a.value().data();
  const auto B = b.value().data();
  auto C = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &B[p * n];
      double* crow = &C[i * n];
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return record(
      a.tape(), std::move(out), {a, b},
      [a, b, m, k, n](const Tensor& g, std::span<Tensor* const> gi) {
        const auto G = g.data();
        if (gi[0]) {
          const auto Bv = b.value().data();
          auto dA = gi[0]->data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * Bv[p * n + j];
              dA[i * k + p] += s;
            }
        }
        if (gi[1]) {
          const auto Av = a.value().data();
          auto dB = gi[1]->data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double av = Av[i * k + p];
              if (av == 0.0) continue;
              for (std::size_t j = 0; j < n; ++j) dB[p * n + j] += av * G[i * n + j];
            }
        }
      },
      "matmul");
}

Var transpose(const Var& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor out(Shape{c, r});
  const auto A = a.value().data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = A[i * c + j];
  return record(
      a.tape(), std::move(out), {a},
      [r, c](const Tensor& g, std::span<Tensor* const> gi) {
        auto d = gi[0]->data();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) d[i * c + j] += g[j * r + i];
      },
      "transpose");
}

Var add(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  accumulate(&out, b.value().data());
  return record(
      a.tape(), std::move(out), {a, b},
      [](const Tensor& g, std::span<Tensor* const> gi) {
        accumulate(gi[0], g.data());
        accumulate(gi[1], g.data());
      },
      "add");
}

Var sub(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  accumulate(&out, b.value().data(), -1.0);
  return record(
      a.tape(), std::move(out), {a, b},
      [](const Tensor& g, std::span<Tensor* const> gi) {
        accumulate(gi[0], g.data());
        accumulate(gi[1], g.data(), -1.0);
      },
      "sub");
}

Var mul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  const auto B = b.value().data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= B[i];
  return record(
      a.tape(), std::move(out), {a, b},
      [a, b](const Tensor& g, std::span<Tensor* const> gi) {
        const auto A = a.value().data();
        const auto Bv = b.value().data();
        if (gi[0]) {
          auto d = gi[0]->data();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * Bv[i];
        }
        if (gi[1]) {
          auto d = gi[1]->data();
          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * A[i];
        }
      },
      "mul");
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  return record(
      a.tape(), std::move(out), {a},
      [s](const Tensor& g, std::span<Tensor* const> gi) { accumulate(gi[0], g.data(), s); },
      "scale");
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return record(
      a.tape(), Tensor::scalar(s), {a},
      [](const Tensor& g, std::span<Tensor* const> gi) {
        for (double& d : gi[0]->data()) d += g[0];
      },
      "sum");
}

Var squared_norm(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v * v;
  return record(
      a.tape(), Tensor::scalar(s), {a},
      [a](const Tensor& g, std::span<Tensor* const> gi) {
        accumulate(gi[0], a.value().data(), 2.0 * g[0]);
      },
      "squared_norm");
}

Var sum_rows(const Var& a) {
  require_rank(a, 2, "sum_rows");
  const std::size_t n = a.dim(0), d = a.dim(1);
  Tensor out(Shape{d});
  const auto A = a.value().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[j] += A[i * d + j];
  return record(
      a.tape(), std::move(out), {a},
      [n, d](const Tensor& g, std::span<Tensor* const> gi) {
        auto G = gi[0]->data();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) G[i * d + j] += g[j];
      },
      "sum_rows");
}

Var mean_rows(const Var& a) {
  require_rank(a, 2, "mean_rows");
  if (a.dim(0) == 0) throw ContractError("mean_rows of an empty batch");
  return scale(sum_rows(a), 1.0 / static_cast<double>(a.dim(0)));
}

Var weighted_sum(const Var& a, const Tensor& w) {
  if (w.shape() != a.shape()) {
    throw ShapeError("weighted_sum: weights " + shape_str(w.shape()) + " vs " +
                     shape_str(a.shape()));
  }
  const double s = dot(a.value().data(), w.data());
  return record(
      a.tape(), Tensor::scalar(s), {a},
      [w](const Tensor& g, std::span<Tensor* const> gi) { accumulate(gi[0], w.data(), g[0]); },
      "weighted_sum");
}

Var add_row_bias(const Var& x, const Var& bias) {
  require_same_tape(x, bias);
  require_rank(x, 2, "add_row_bias");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (bias.value().numel() != d) {
    throw ShapeError("add_row_bias: bias " + shape_str(bias.shape()) + " for input " +
                     shape_str(x.shape()));
  }
  Tensor out = x.value();
  const auto B = bias.value().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] += B[j];
  return record(
      x.tape(), std::move(out), {x, bias},
      [n, d](const Tensor& g, std::span<Tensor* const> gi) {
        accumulate(gi[0], g.data());
        if (gi[1]) {
          auto db = gi[1]->data();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) db[j] += g[i * d + j];
        }
      },
      "add_row_bias");
}

Var concat_cols(const Var& a, const Var& b) {
  require_same_tape(a, b);
  require_rank(a, 2, "concat_cols");
  require_rank(b, 2, "concat_cols");
  if (a.dim(0) != b.dim(0)) {
    throw ShapeError("concat_cols: row mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), p = a.dim(1), q = b.dim(1);
  Tensor out(Shape{n, p + q});
  const auto A = a.value().data();
  const auto B = b.value().data();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(&A[i * p], p, &out[i * (p + q)]);
    std::copy_n(&B[i * q], q, &out[i * (p + q) + p]);
  }
  return record(
      a.tape(), std::move(out), {a, b},
      [n, p, q](const Tensor& g, std::span<Tensor* const> gi) {
        for (std::size_t i = 0; i < n; ++i) {
          if (gi[0])
            for (std::size_t j = 0; j < p; ++j) gi[0]->data()[i * p + j] += g[i * (p + q) + j];
          if (gi[1])
            for (std::size_t j = 0; j < q; ++j)
              gi[1]->data()[i * q + j] += g[i * (p + q) + p + j];
        }
      },
      "concat_cols");
}

Var gather_rows(const Var& x, std::span<const std::size_t> rows) {
  Tensor out = x.value().gather_rows(rows);
  const std::size_t rs = x.value().row_size();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return record(
      x.tape(), std::move(out), {x},
      [idx = std::move(idx), rs](const Tensor& g, std::span<Tensor* const> gi) {
        auto d = gi[0]->data();
        for (std::size_t r = 0; r < idx.size(); ++r)
          for (std::size_t j = 0; j < rs; ++j) d[idx[r] * rs + j] += g[r * rs + j];
      },
      "gather_rows");
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return record(
      x.tape(), std::move(out), {x},
      [](const Tensor& g, std::span<Tensor* const> gi) { accumulate(gi[0], g.data()); },
      "reshape");
}

Var flatten_rows(const Var& x) {
  if (x.value().rank() < 1) throw ShapeError("flatten_rows on a rank-0 tensor");
  return reshape(x, Shape{x.dim(0), x.value().row_size()});
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return record(
      x.tape(), std::move(out), {x},
      [x](const Tensor& g, std::span<Tensor* const> gi) {
        const auto X = x.value().data();
        auto d = gi[0]->data();
        for (std::size_t i = 0; i < d.size(); ++i)
          if (X[i] > 0.0) d[i] += g[i];
      },
      "relu");
}

Var conv2d(const Var& x, const Var& kernel, std::size_t stride, std::size_t pad) {
  require_same_tape(x, kernel);
  const bool batched = x.value().rank() == 4;
  if (!batched && x.value().rank() != 3) {
    throw ShapeError("conv2d: input must be [C x H x W] or [N x C x H x W], got " +
                     shape_str(x.shape()));
  }
  require_rank(kernel, 4, "conv2d");
  const Shape& xs = x.shape();
  const std::size_t N = batched ? xs[0] : 1;
  const std::size_t C = xs[batched ? 1 : 0], H = xs[batched ? 2 : 1], W = xs[batched ? 3 : 2];
  const std::size_t O = kernel.dim(0), KH = kernel.dim(2), KW = kernel.dim(3);
  if (kernel.dim(1) != C) {
    throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) + " expects " +
                     std::to_string(kernel.dim(1)) + " input channels, input is " +
                     shape_str(xs));
  }
  const std::size_t OH = conv_extent(H, KH, stride, pad, "height");
  const std::size_t OW = conv_extent(W, KW, stride, pad, "width");

  Shape os = batched ? Shape{N, O, OH, OW} : Shape{O, OH, OW};
  Tensor out(os);

  // Per-tap valid output ranges, shared by forward and backward.
  struct Tap {
    std::size_t y_lo, y_hi, x_lo, x_hi;
  };
  std::vector<Tap> taps(KH * KW);
  for (std::size_t ki = 0; ki < KH; ++ki)
    for (std::size_t kj = 0; kj < KW; ++kj) {
      Tap& t = taps[ki * KW + kj];
      valid_range(H, OH, stride, pad, ki, t.y_lo, t.y_hi);
      valid_range(W, OW, stride, pad, kj, t.x_lo, t.x_hi);
    }

  const auto X = x.value().data();
  const auto K = kernel.value().data();
  auto Y = out.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o) {
      double* yplane = &Y[(n * O + o) * OH * OW];
      for (std::size_t c = 0; c < C; ++c) {
        const double* xplane = &X[(n * C + c) * H * W];
        for (std::size_t ki = 0; ki < KH; ++ki)
          for (std::size_t kj = 0; kj < KW; ++kj) {
            const double w = K[((o * C + c) * KH + ki) * KW + kj];
            const Tap& t = taps[ki * KW + kj];
            if (t.x_lo >= t.x_hi) continue;
            const std::size_t ix0 = t.x_lo * stride + kj - pad;
            for (std::size_t oy = t.y_lo; oy < t.y_hi; ++oy) {
              const double* xrow = xplane + (oy * stride + ki - pad) * W + ix0;
              double* yrow = yplane + oy * OW;
              for (std::size_t ox = t.x_lo, q = 0; ox < t.x_hi; ++ox, q += stride)
                yrow[ox] += w * xrow[q];
            }
          }
      }
    }

  return record(
      x.tape(), std::move(out), {x, kernel},
      [=](const Tensor& g, std::span<Tensor* const> gi) {
        const auto Xv = x.value().data();
        const auto Kv = kernel.value().data();
        const auto G = g.data();
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t o = 0; o < O; ++o) {
            const double* gplane = &G[(n * O + o) * OH * OW];
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t ki = 0; ki < KH; ++ki)
                for (std::size_t kj = 0; kj < KW; ++kj) {
                  const std::size_t kidx = ((o * C + c) * KH + ki) * KW + kj;
                  const Tap& t = taps[ki * KW + kj];
                  if (t.x_lo >= t.x_hi) continue;
                  const std::size_t xoff = (n * C + c) * H * W + t.x_lo * stride + kj - pad;
                  double wsum = 0.0;
                  const double w = Kv[kidx];
                  for (std::size_t oy = t.y_lo; oy < t.y_hi; ++oy) {
                    const std::size_t base = xoff + (oy * stride + ki - pad) * W;
                    const double* grow = gplane + oy * OW;
                    if (gi[0]) {
                      double* dx = gi[0]->data().data() + base;
                      for (std::size_t ox = t.x_lo, q = 0; ox < t.x_hi; ++ox, q += stride)
                        dx[q] += w * grow[ox];
                    }
                    if (gi[1]) {
                      const double* xrow = Xv.data() + base;
                      for (std::size_t ox = t.x_lo, q = 0; ox < t.x_hi; ++ox, q += stride)
                        wsum += grow[ox] * xrow[q];
                    }
                  }
                  if (gi[1]) gi[1]->data()[kidx] += wsum;
                }
          }
      },
      "conv2d");
}

Var add_channel_bias(const Var& x, const Var& bias) {
  require_same_tape(x, bias);
  require_rank(x, 4, "add_channel_bias");
  const std::size_t N = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
  if (bias.value().numel() != C) {
    throw ShapeError("add_channel_bias: bias " + shape_str(bias.shape()) + " for input " +
                     shape_str(x.shape()));
  }
  Tensor out = x.value();
  const auto B = bias.value().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t s = 0; s < S; ++s) out[(n * C + c) * S + s] += B[c];
  return record(
      x.tape(), std::move(out), {x, bias},
      [N, C, S](const Tensor& g, std::span<Tensor* const> gi) {
        accumulate(gi[0], g.data());
        if (gi[1]) {
          auto db = gi[1]->data();
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t s = 0; s < S; ++s) db[c] += g[(n * C + c) * S + s];
        }
      },
      "add_channel_bias");
}

Var instance_norm(const Var& x, double eps) {
  require_rank(x, 4, "instance_norm");
  const std::size_t planes = x.dim(0) * x.dim(1), S = x.dim(2) * x.dim(3);
  Tensor out(x.shape());
  std::vector<double> inv_std(planes);
  const auto X = x.value().data();
  for (std::size_t p = 0; p < planes; ++p) {
    const double* xp = &X[p * S];
    double mean = 0.0;
    for (std::size_t s = 0; s < S; ++s) mean += xp[s];
    mean /= static_cast<double>(S);
    double var = 0.0;
    for (std::size_t s = 0; s < S; ++s) var += (xp[s] - mean) * (xp[s] - mean);
    var /= static_cast<double>(S);
    inv_std[p] = 1.0 / std::sqrt(var + eps);
    for (std::size_t s = 0; s < S; ++s) out[p * S + s] = (xp[s] - mean) * inv_std[p];
  }
  Tensor y = out;
  return record(
      x.tape(), std::move(out), {x},
      [planes, S, inv_std = std::move(inv_std), y = std::move(y)](
          const Tensor& g, std::span<Tensor* const> gi) {
        auto d = gi[0]->data();
        const double n = static_cast<double>(S);
        for (std::size_t p = 0; p < planes; ++p) {
          double gsum = 0.0, gy = 0.0;
          for (std::size_t s = 0; s < S; ++s) {
            gsum += g[p * S + s];
            gy += g[p * S + s] * y[p * S + s];
          }
          for (std::size_t s = 0; s < S; ++s) {
            const std::size_t i = p * S + s;
            d[i] += inv_std[p] / n * (n * g[i] - gsum - y[i] * gy);
          }
        }
      },
      "instance_norm");
}

Var avg_pool2d(const Var& x, std::size_t window) {
  require_rank(x, 4, "avg_pool2d");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (window == 0 || H % window != 0 || W % window != 0) {
    throw ShapeError("avg_pool2d: window " + std::to_string(window) + " does not tile " +
                     shape_str(x.shape()));
  }
  const std::size_t OH = H / window, OW = W / window;
  const double inv = 1.0 / static_cast<double>(window * window);
  Tensor out(Shape{N, C, OH, OW});
  const auto X = x.value().data();
  for (std::size_t p = 0; p < N * C; ++p)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx)
        out[(p * OH + y / window) * OW + xx / window] += inv * X[(p * H + y) * W + xx];
  return record(
      x.tape(), std::move(out), {x},
      [=](const Tensor& g, std::span<Tensor* const> gi) {
        auto d = gi[0]->data();
        for (std::size_t p = 0; p < N * C; ++p)
          for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx)
              d[(p * H + y) * W + xx] += inv * g[(p * OH + y / window) * OW + xx / window];
      },
      "avg_pool2d");
}

namespace {

// Shared by l2_normalize and l2_normalize_rows: normalizes `rows` blocks of
// width `d`, passing degenerate blocks through unchanged.
Normalized normalize_blocks(const Var& x, std::size_t rows, std::size_t d, const char* op) {
  Tensor out = x.value();
  std::vector<double> norms(rows);
  bool degenerate = false;
  for (std::size_t r = 0; r < rows; ++r) {
    std::span<double> row = out.data().subspan(r * d, d);
    norms[r] = l2_norm(row);
    if (norms[r] <= kNormEpsilon) {
      degenerate = true;
      continue;
    }
    for (double& v : row) v /= norms[r];
  }
  Tensor y = out;
  Var v = record(
      x.tape(), std::move(out), {x},
      [rows, d, norms = std::move(norms), y = std::move(y)](const Tensor& g,
                                                            std::span<Tensor* const> gi) {
        auto dx = gi[0]->data();
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t off = r * d;
          if (norms[r] <= kNormEpsilon) {
            for (std::size_t j = 0; j < d; ++j) dx[off + j] += g[off + j];
            continue;
          }
          double yg = 0.0;
          for (std::size_t j = 0; j < d; ++j) yg += y[off + j] * g[off + j];
          for (std::size_t j = 0; j < d; ++j)
            dx[off + j] += (g[off + j] - y[off + j] * yg) / norms[r];
        }
      },
      op);
  return {v, degenerate};
}

}  // namespace

Normalized l2_normalize(const Var& x) {
  return normalize_blocks(x, 1, x.value().numel(), "l2_normalize");
}

Normalized l2_normalize_rows(const Var& x) {
  require_rank(x, 2, "l2_normalize_rows");
  return normalize_blocks(x, x.dim(0), x.dim(1), "l2_normalize_rows");
}

Var log_softmax_rows(const Var& x, std::span<const unsigned char> mask) {
  require_rank(x, 2, "log_softmax_rows");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (!mask.empty() && mask.size() != n * c) {
    throw ShapeError("log_softmax_rows: mask size " + std::to_string(mask.size()) +
                     " for input " + shape_str(x.shape()));
  }
  std::vector<unsigned char> keep(mask.begin(), mask.end());
  if (keep.empty()) keep.assign(n * c, 1);
  Tensor out(Shape{n, c});
  Tensor prob(Shape{n, c});
  const auto X = x.value().data();
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (keep[i * c + j]) mx = std::max(mx, X[i * c + j]);
    if (!std::isfinite(mx)) continue;  // fully masked row
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      if (keep[i * c + j]) z += std::exp(X[i * c + j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) {
      if (!keep[i * c + j]) continue;
      out[i * c + j] = X[i * c + j] - lse;
      prob[i * c + j] = std::exp(out[i * c + j]);
    }
  }
  return record(
      x.tape(), std::move(out), {x},
      [n, c, keep = std::move(keep), prob = std::move(prob)](const Tensor& g,
                                                             std::span<Tensor* const> gi) {
        auto d = gi[0]->data();
        for (std::size_t i = 0; i < n; ++i) {
          double gs = 0.0;
          for (std::size_t j = 0; j < c; ++j)
            if (keep[i * c + j]) gs += g[i * c + j];
          for (std::size_t j = 0; j < c; ++j)
            if (keep[i * c + j]) d[i * c + j] += g[i * c + j] - prob[i * c + j] * gs;
        }
      },
      "log_softmax_rows");
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) {
    throw ContractError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(n) + " rows");
  }
  if (n == 0) throw ContractError("cross_entropy of an empty batch");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ContractError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                          std::to_string(c) + ")");
    }
  }
  const auto X = logits.value().data();
  Tensor prob(Shape{n, c});
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = &X[i * c];
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    loss += lse - row[labels[i]];
    for (std::size_t j = 0; j < c; ++j) prob[i * c + j] = std::exp(row[j] - lse);
  }
  loss /= static_cast<double>(n);
  std::vector<int> y(labels.begin(), labels.end());
  return record(
      logits.tape(), Tensor::scalar(loss), {logits},
      [n, c, y = std::move(y), prob = std::move(prob)](const Tensor& g,
                                                       std::span<Tensor* const> gi) {
        auto d = gi[0]->data();
        const double s = g[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j)
            d[i * c + j] += s * (prob[i * c + j] - (static_cast<int>(j) == y[i] ? 1.0 : 0.0));
      },
      "cross_entropy");
}

}  // namespace davdd
