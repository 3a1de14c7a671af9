#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "davdd/tensor.hpp"

namespace davdd {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const;
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Local gradient rule: accumulates into the gradient buffers of the inputs
/// that require gradients (null entries are inputs that do not).
using GradFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

class Tape;

/// Gradients produced by one backward pass.
class Gradients {
 public:
  /// Gradient of the loss w.r.t. `v`; zeros when `v` does not reach the loss.
  Tensor of(const Var& v) const;

 private:
  friend class Tape;
  std::vector<Tensor> grads_;
  const Tape* tape_ = nullptr;
};

/// Records operations in execution order, which is a topological order by
/// construction. Confined to one thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf whose gradient is tracked iff `value.requires_grad()`.
  Var leaf(Tensor value);
  Var constant(Tensor value);
  /// Appends an operation result. Throws NumericError on non-finite output.
  Var record(Tensor value, std::span<const Var> inputs, GradFn grad_fn, std::string_view op);

  /// Reverse-mode sweep from a scalar loss.
  Gradients backward(const Var& loss) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  friend class Var;
  friend class Gradients;

  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    GradFn grad_fn;
    bool requires_grad = false;
  };

  void check_owned(const Var& v) const;

  std::deque<Node> nodes_;
};

}  // namespace davdd
