#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "vpn/error.hpp"

namespace vpn::diff {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// Row-major strides of a shape.
inline std::vector<std::size_t> strides_of(const Shape& shape) {
    std::vector<std::size_t> st(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) st[i - 1] = st[i] * shape[i];
    return st;
}

/// Immutable dense array of doubles in row-major order.
///
/// Copies share storage. Construction rejects non-finite values, so every
/// tensor that exists is finite. A rank-0 tensor (empty shape) is a scalar.
class Tensor {
public:
    Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}

    Tensor(Shape shape, std::vector<double> values)
        : shape_(std::move(shape)),
          data_(std::make_shared<const std::vector<double>>(std::move(values))) {
        if (std::find(shape_.begin(), shape_.end(), std::size_t{0}) != shape_.end())
            throw ShapeError("tensor extents must be positive, got " + to_string(shape_));
        if (numel(shape_) != data_->size())
            throw ShapeError(detail::concat("tensor of shape ", to_string(shape_), " needs ", numel(shape_),
                                            " values, got ", data_->size()));
        if (!std::all_of(data_->begin(), data_->end(), [](double v) { return std::isfinite(v); }))
            throw NonFiniteError("non-finite value in tensor of shape " + to_string(shape_));
    }

    static Tensor zeros(Shape shape) {
        auto n = numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0));
    }
    static Tensor full(Shape shape, double v) {
        auto n = numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, v));
    }
    static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }
    static Tensor vector(std::vector<double> v) {
        Shape s{v.size()};
        return Tensor(std::move(s), std::move(v));
    }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
        return Tensor(Shape{rows, cols}, std::move(v));
    }
    static Tensor identity(std::size_t n) {
        std::vector<double> v(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
        return Tensor(Shape{n, n}, std::move(v));
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_->size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::span<const double> values() const { return *data_; }
    const double* data() const { return data_->data(); }
    double operator[](std::size_t i) const { return (*data_)[i]; }
    double item() const {
        detail::require<ShapeError>(size() == 1, "item() on tensor of shape ", to_string(shape_));
        return (*data_)[0];
    }

    /// Same storage viewed with a different shape of equal element count.
    Tensor reshaped(Shape shape) const {
        detail::require<ShapeError>(numel(shape) == size(), "cannot reshape ", to_string(shape_), " to ",
                                    to_string(shape));
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    std::vector<double> to_vector() const { return *data_; }

    bool bitwise_equal(const Tensor& o) const {
        if (shape_ != o.shape_) return false;
        for (std::size_t i = 0; i < size(); ++i) {
            double a = (*data_)[i], b = (*o.data_)[i];
            if (std::memcmp(&a, &b, sizeof(double)) != 0) return false;
        }
        return true;
    }

private:
    Shape shape_;
    std::shared_ptr<const std::vector<double>> data_;
};

inline std::ostream& operator<<(std::ostream& os, const Tensor& t) {
    os << "Tensor" << to_string(t.shape()) << "{";
    for (std::size_t i = 0; i < t.size() && i < 16; ++i) os << (i ? ", " : "") << t[i];
    if (t.size() > 16) os << ", ...";
    return os << "}";
}

}  // namespace vpn::diff
