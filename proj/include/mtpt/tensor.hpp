#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtpt::diff {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Base class of every error raised by the differentiation core.
class DiffError : public std::runtime_error {
  public:
    DiffError(std::string op, const std::string& what);
    const std::string& op() const noexcept { return op_; }

  private:
    std::string op_;
};

/// Operand shapes are incompatible for `op`.
class ShapeError : public DiffError {
  public:
    ShapeError(std::string op, const Shape& lhs, const Shape& rhs);
    ShapeError(std::string op, const std::string& detail);
};

/// An op produced NaN or Inf.
class NonFiniteError : public DiffError {
  public:
    NonFiniteError(std::string op, std::size_t index);
    std::size_t index() const noexcept { return index_; }

  private:
    std::size_t index_;
};

/// Dense row-major array of doubles.
///
/// A tensor that requires a gradient owns a gradient buffer of identical
/// shape. Tensors themselves never carry graph state: recording happens
/// through `Tape`, which hands out `Var` handles.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double value);
    static Tensor vector(std::initializer_list<double> values);
    static Tensor filled(Shape shape, double value);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t numel() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t axis) const;

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& storage() noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double item() const;

    bool requires_grad() const noexcept { return requires_grad_; }
    /// Turning the flag on allocates a zeroed gradient buffer; off drops it.
    void set_requires_grad(bool flag);
    std::span<double> grad();
    std::span<const double> grad() const;
    void zero_grad();

    /// Same data under a new shape with the same element count.
    Tensor reshaped(Shape shape) const;

    bool all_finite() const noexcept;

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

  private:
    Shape shape_;
    std::vector<double> data_;
    bool requires_grad_ = false;
    std::vector<double> grad_;
};

/// True iff both tensors hold the same shape and bit-identical values.
bool bitwise_equal(const Tensor& a, const Tensor& b);

}  // namespace mtpt::diff
