#include "rdarts/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace rdarts {

std::size_t shape_numel(const Shape& shape)
{
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

void check_extents(const Shape& shape)
{
    if (shape.empty()) throw ShapeError("tensor shape must have at least one axis");
    for (auto e : shape)
        if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
}

} // namespace

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape))
{
    check_extents(shape_);
    data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data))
{
    check_extents(shape_);
    if (shape_numel(shape_) != data_.size())
        throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_str(shape_));
}

Tensor Tensor::vector(std::initializer_list<double> values)
{
    return Tensor(Shape{values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values)
{
    return Tensor(Shape{rows, cols}, std::vector<double>(values));
}

double Tensor::item() const
{
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const
{
    if (shape_numel(shape) != data_.size())
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v)
{
    std::fill(data_.begin(), data_.end(), v);
}

bool Tensor::all_finite() const
{
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

Tensor zeros_like(const Tensor& t) { return Tensor(t.shape(), 0.0); }
Tensor ones_like(const Tensor& t) { return Tensor(t.shape(), 1.0); }

double dot(std::span<const double> a, std::span<const double> b)
{
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

} // namespace rdarts
