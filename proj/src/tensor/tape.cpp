#include "davdd/tape.hpp"

#include <string>

#include "davdd/error.hpp"

namespace davdd {

const Tensor& Var::value() const { return tape().nodes_[id_].value; }

bool Var::requires_grad() const { return tape().nodes_[id_].requires_grad; }

Tape& Var::tape() const {
  if (!tape_) throw ContractError("use of an unbound Var");
  return *tape_;
}

Tensor Gradients::of(const Var& v) const {
  if (tape_ == nullptr || &v.tape() != tape_) {
    throw ContractError("gradient requested for a Var from another tape");
  }
  if (v.id() < grads_.size() && !grads_[v.id()].shape().empty()) return grads_[v.id()];
  return Tensor(v.shape());
}

void Tape::check_owned(const Var& v) const {
  if (&v.tape() != this) throw ContractError("Var belongs to a different tape");
}

Var Tape::leaf(Tensor value) {
  const bool rg = value.requires_grad();
  nodes_.push_back(Node{std::move(value), {}, {}, rg});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  value.set_requires_grad(false);
  return leaf(std::move(value));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, GradFn grad_fn,
                 std::string_view op) {
  if (!value.all_finite()) {
    throw NumericError("non-finite output from " + std::string(op));
  }
  Node node;
  node.value = std::move(value);
  node.value.set_requires_grad(false);
  node.inputs.reserve(inputs.size());
  for (const Var& in : inputs) {
    check_owned(in);
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (node.requires_grad) node.grad_fn = std::move(grad_fn);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(const Var& loss) const {
  check_owned(loss);
  const Node& root = nodes_[loss.id()];
  if (root.value.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_str(root.value.shape()));
  }
  Gradients g;
  g.tape_ = this;
  g.grads_.resize(loss.id() + 1);
  g.grads_[loss.id()] = Tensor(root.value.shape(), 1.0);

  std::vector<Tensor*> slots;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (!node.requires_grad || !node.grad_fn || g.grads_[i].shape().empty()) continue;
    slots.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const std::size_t j = node.inputs[k];
      if (!nodes_[j].requires_grad) continue;
      if (g.grads_[j].shape().empty()) g.grads_[j] = Tensor(nodes_[j].value.shape());
      slots[k] = &g.grads_[j];
    }
    node.grad_fn(g.grads_[i], slots);
  }
  return g;
}

}  // namespace davdd
