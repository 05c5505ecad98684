#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "mstage/tensor.hpp"

namespace mstage {

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Reverse-mode gradient record.
///
/// Ops append nodes in execution order; backward() walks them in exactly the
/// reverse order. Each backward closure receives the output gradient and one
/// accumulator per input; it must add (never assign) into the accumulators so
/// fan-out sums correctly. Parameter leaves read the parameter's value in place
/// and add their gradient into Parameter::grad, trainable or not.
class Tape {
 public:
  using Backward = std::function<void(const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var param(Parameter& p);

  /// Records an op node. `backward` may be empty for ops with no differentiable inputs.
  Var record(Tensor value, std::vector<Var> inputs, Backward backward);

  const Tensor& value(Var v) const { return *nodes_.at(v.id)->value; }
  /// Gradient accumulated on a node by the last backward(); empty if unreached.
  const Tensor& grad(Var v) const { return nodes_.at(v.id)->grad; }

  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* value = nullptr;
    Tensor grad;
    std::vector<std::size_t> inputs;
    Backward backward;
    Parameter* param = nullptr;
  };

  std::vector<std::unique_ptr<Node>> nodes_;
};

}  // namespace mstage
