#include "mtpt/tape.hpp"

#include <cmath>

namespace mtpt::diff {

const Tensor& Var::value() const { return tape_->value(*this); }

bool Var::requires_grad() const { return tape_->requires_grad(*this); }

std::span<const double> BackwardContext::out_grad() const { return tape_.grads_[node_]; }

const Tensor& BackwardContext::output() const { return tape_.nodes_[node_].value; }

const Tensor& BackwardContext::input(std::size_t k) const {
    return tape_.nodes_[tape_.nodes_[node_].inputs.at(k)].value;
}

std::span<double> BackwardContext::input_grad(std::size_t k) {
    const std::size_t id = tape_.nodes_[node_].inputs.at(k);
    if (!tape_.nodes_[id].needs_grad) return {};
    return tape_.grad_buffer(id);
}

Var Tape::leaf(Tensor& tensor) {
    Node node;
    node.op = "leaf";
    node.value = Tensor(tensor.shape(), tensor.storage());
    node.needs_grad = tensor.requires_grad();
    node.bound = node.needs_grad ? &tensor : nullptr;
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
}

Var Tape::constant(Tensor tensor) {
    Node node;
    node.op = "constant";
    tensor.set_requires_grad(false);
    node.value = std::move(tensor);
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
}

Var Tape::detach(Var v) { return constant(value(v)); }

Var Tape::record(std::string_view op, std::initializer_list<Var> inputs, Tensor value, BackwardFn backward) {
    return record(op, std::span<const Var>(inputs.begin(), inputs.size()), std::move(value), std::move(backward));
}

Var Tape::record(std::string_view op, std::span<const Var> inputs, Tensor value, BackwardFn backward) {
    if (consumed_) throw DiffError(std::string(op), "tape already consumed by backward");
    const auto data = value.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (!std::isfinite(data[i])) throw NonFiniteError(std::string(op), i);
    }
    Node node;
    node.op = op;
    node.inputs.reserve(inputs.size());
    for (const Var& in : inputs) {
        if (in.tape() != this || in.id() >= nodes_.size()) {
            throw DiffError(std::string(op), "input does not belong to this tape");
        }
        node.inputs.push_back(in.id());
        node.needs_grad = node.needs_grad || nodes_[in.id()].needs_grad;
    }
    node.value = std::move(value);
    if (node.needs_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
}

std::span<double> Tape::grad_buffer(std::size_t id) {
    auto& g = grads_[id];
    if (g.empty()) g.assign(nodes_[id].value.numel(), 0.0);
    return g;
}

void Tape::backward(Var root) {
    if (consumed_) throw DiffError("backward", "tape already consumed");
    if (root.tape() != this) throw DiffError("backward", "root does not belong to this tape");
    if (value(root).numel() != 1 || value(root).rank() != 0) {
        throw ShapeError("backward", "root must be a scalar, got " + shape_str(value(root).shape()));
    }
    consumed_ = true;
    grads_.assign(nodes_.size(), {});
    if (!nodes_[root.id()].needs_grad) return;
    grad_buffer(root.id())[0] = 1.0;

    for (std::size_t id = root.id() + 1; id-- > 0;) {
        Node& node = nodes_[id];
        if (!node.needs_grad || grads_[id].empty()) continue;
        if (node.bound != nullptr) {
            auto dst = node.bound->grad();
            const auto& src = grads_[id];
            for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
        } else if (node.backward) {
            BackwardContext ctx(*this, id);
            node.backward(ctx);
        }
    }
}

Tensor Tape::grad(Var v) const {
    const Tensor& val = value(v);
    if (v.id() < grads_.size() && !grads_[v.id()].empty()) return Tensor(val.shape(), grads_[v.id()]);
    return Tensor(val.shape());
}

}  // namespace mtpt::diff
