#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

#include "mtpt/tensor.hpp"

namespace mtpt::diff {

class Tape;

/// Handle to a value recorded on a `Tape`. Cheap to copy; valid while the tape lives.
class Var {
  public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape() const noexcept { return tape_; }
    std::size_t id() const noexcept { return id_; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;

  private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// View handed to a backward closure: the incoming adjoint plus accumulators
/// for each input that needs a gradient.
class BackwardContext {
  public:
    BackwardContext(Tape& tape, std::size_t node) : tape_(tape), node_(node) {}

    std::span<const double> out_grad() const;
    const Tensor& output() const;
    const Tensor& input(std::size_t k) const;
    /// Empty when input `k` does not need a gradient.
    std::span<double> input_grad(std::size_t k);

  private:
    Tape& tape_;
    std::size_t node_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

/// Computation record for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every input id precedes its
/// output id and `backward` walks the record in strict reverse. A tape is
/// confined to one thread and may be differentiated once.
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Records `tensor` as a leaf. If it requires a gradient, `backward`
    /// accumulates d(root)/d(leaf) into `tensor.grad()`; the tensor must
    /// outlive the backward pass.
    Var leaf(Tensor& tensor);
    /// Records a copy of `tensor` that never receives a gradient.
    Var constant(Tensor tensor);
    /// Same value as `v`, cut from the graph.
    Var detach(Var v);

    /// Appends an op node. `backward` is dropped when no input needs a
    /// gradient. Throws NonFiniteError if `value` holds NaN or Inf.
    Var record(std::string_view op, std::initializer_list<Var> inputs, Tensor value, BackwardFn backward);
    Var record(std::string_view op, std::span<const Var> inputs, Tensor value, BackwardFn backward);

    const Tensor& value(Var v) const { return nodes_.at(v.id()).value; }
    bool requires_grad(Var v) const { return nodes_.at(v.id()).needs_grad; }
    std::string_view op(Var v) const { return nodes_.at(v.id()).op; }
    std::size_t size() const noexcept { return nodes_.size(); }
    std::span<const std::size_t> inputs(Var v) const { return nodes_.at(v.id()).inputs; }

    /// Reverse pass from a scalar root. Throws if the root is not scalar or
    /// the tape was already consumed.
    void backward(Var root);
    bool consumed() const noexcept { return consumed_; }
    /// Adjoint of `v` after `backward`; zeros if the root does not depend on it.
    Tensor grad(Var v) const;

  private:
    friend class BackwardContext;

    struct Node {
        std::string_view op;
        std::vector<std::size_t> inputs;
        Tensor value;
        bool needs_grad = false;
        BackwardFn backward;
        Tensor* bound = nullptr;
    };

    std::span<double> grad_buffer(std::size_t id);

    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    bool consumed_ = false;
};

}  // namespace mtpt::diff
