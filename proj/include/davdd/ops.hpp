#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "davdd/tape.hpp"

namespace davdd {

// Differentiable operations. Every result lives on the tape of its inputs.

/// [m x k] * [k x n] -> [m x n].
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);

/// Sum of all elements, shape [1].
Var sum(const Var& a);
/// Sum of squares of all elements, shape [1].
Var squared_norm(const Var& a);
/// Column sums / means of an [N x d] matrix, shape [d].
Var sum_rows(const Var& a);
Var mean_rows(const Var& a);
/// Sum of w (.) a for a constant weight tensor of a's shape.
Var weighted_sum(const Var& a, const Tensor& w);

/// [N x d] + [d] broadcast over rows.
Var add_row_bias(const Var& x, const Var& bias);
/// [N x p] | [N x q] -> [N x (p+q)].
Var concat_cols(const Var& a, const Var& b);
Var gather_rows(const Var& x, std::span<const std::size_t> rows);
Var reshape(const Var& x, Shape shape);
/// Collapses trailing axes: [N x ...] -> [N x prod(...)].
Var flatten_rows(const Var& x);

/// Elementwise max(0, x); the subgradient at 0 is 0.
Var relu(const Var& x);

/// Cross-correlation. x is [C x H x W] or [N x C x H x W]; kernel is
/// [O x C x kh x kw]. Output extents must be integral.
Var conv2d(const Var& x, const Var& kernel, std::size_t stride, std::size_t pad);
/// [N x C x H x W] + per-channel bias [C].
Var add_channel_bias(const Var& x, const Var& bias);
/// Per-sample, per-channel standardization over spatial positions.
Var instance_norm(const Var& x, double eps = 1e-5);
/// Non-overlapping average pooling with a square window.
Var avg_pool2d(const Var& x, std::size_t window);

struct Normalized {
  Var value;
  /// True when some normalized vector had norm <= kNormEpsilon and was passed through.
  bool degenerate = false;
};
/// x / ||x||_2 over the whole tensor.
Normalized l2_normalize(const Var& x);
/// Row-wise normalization of an [N x d] matrix.
Normalized l2_normalize_rows(const Var& x);

/// Row-wise log-softmax of [N x C]. With a mask (1 = include), excluded
/// entries take no part in the normalizer and output 0.
Var log_softmax_rows(const Var& x, std::span<const unsigned char> mask = {});

/// Mean over rows of -log softmax(logits)[label], via log-sum-exp.
Var cross_entropy(const Var& logits, std::span<const int> labels);

}  // namespace davdd
