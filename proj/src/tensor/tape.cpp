#include "mstage/tape.hpp"

#include <stdexcept>

namespace mstage {

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::constant(Tensor value) {
  auto node = std::make_unique<Node>();
  node->owned = std::move(value);
  node->value = &node->owned;
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::param(Parameter& p) {
  auto node = std::make_unique<Node>();
  node->value = &p.value;
  node->param = &p;
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<Var> inputs, Backward backward) {
  auto node = std::make_unique<Node>();
  node->owned = std::move(value);
  node->value = &node->owned;
  node->inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in.tape != this) throw std::logic_error("Tape::record: input belongs to another tape");
    node->inputs.push_back(in.id);
  }
  node->backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

void Tape::backward(Var loss) {
  if (nodes_.empty()) throw std::logic_error("backward: tape is empty (no forward pass recorded)");
  if (loss.tape != this || loss.id >= nodes_.size())
    throw std::logic_error("backward: loss is not a node of this tape");
  const Tensor& lv = *nodes_[loss.id]->value;
  if (lv.size() != 1)
    throw DimensionError("backward", "loss must be scalar, got shape " + shape_to_string(lv.shape()));

  for (auto& n : nodes_) n->grad = Tensor();
  nodes_[loss.id]->grad = Tensor(lv.shape(), 1.0);

  std::vector<Tensor*> grad_in;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = *nodes_[i];
    if (n.grad.empty()) continue;
    if (n.param) {
      if (n.param->grad.shape() != n.param->value.shape()) n.param->grad = Tensor(n.param->value.shape());
      n.param->grad += n.grad;
      continue;
    }
    if (!n.backward) continue;
    grad_in.clear();
    for (auto id : n.inputs) {
      Node& in = *nodes_[id];
      if (in.grad.empty()) in.grad = Tensor(in.value->shape());
      grad_in.push_back(&in.grad);
    }
    n.backward(n.grad, grad_in);
  }
}

}  // namespace mstage
