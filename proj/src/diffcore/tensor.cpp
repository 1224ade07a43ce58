#include "mtpt/tensor.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace mtpt::diff {

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

DiffError::DiffError(std::string op, const std::string& what)
    : std::runtime_error(op + ": " + what), op_(std::move(op)) {}

ShapeError::ShapeError(std::string op, const Shape& lhs, const Shape& rhs)
    : DiffError(std::move(op), "shape mismatch " + shape_str(lhs) + " vs " + shape_str(rhs)) {}

ShapeError::ShapeError(std::string op, const std::string& detail) : DiffError(std::move(op), detail) {}

NonFiniteError::NonFiniteError(std::string op, std::size_t index)
    : DiffError(std::move(op), "non-finite value at element " + std::to_string(index)), index_(index) {}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
        throw ShapeError("tensor", "shape " + shape_str(shape_) + " does not hold " +
                                       std::to_string(data_.size()) + " elements");
    }
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::filled(Shape shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw ShapeError("dim", "axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    }
    return shape_[axis];
}

double Tensor::item() const {
    if (data_.size() != 1) throw ShapeError("item", shape_, Shape{});
    return data_[0];
}

void Tensor::set_requires_grad(bool flag) {
    requires_grad_ = flag;
    if (flag) {
        grad_.assign(data_.size(), 0.0);
    } else {
        grad_.clear();
        grad_.shrink_to_fit();
    }
}

std::span<double> Tensor::grad() {
    if (!requires_grad_) throw DiffError("grad", "tensor does not require grad");
    return grad_;
}

std::span<const double> Tensor::grad() const {
    if (!requires_grad_) throw DiffError("grad", "tensor does not require grad");
    return grad_;
}

void Tensor::zero_grad() { std::fill(grad_.begin(), grad_.end(), 0.0); }

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) throw ShapeError("reshape", shape_, shape);
    return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

}  // namespace mtpt::diff
