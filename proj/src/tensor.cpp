#include "portpatch/tensor.hpp"

#include <bit>
#include <cmath>
#include <limits>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "portpatch/error.hpp"

namespace portpatch {

std::string_view dtype_name(DType t) noexcept {
    return t == DType::f32 ? "F32" : "F64";
}

std::size_t dtype_size(DType t) noexcept {
    return t == DType::f32 ? 4 : 8;
}

double dtype_epsilon(DType t) noexcept {
    return t == DType::f32 ? static_cast<double>(std::numeric_limits<float>::epsilon())
                           : std::numeric_limits<double>::epsilon();
}

std::string shape_string(const Shape& shape) {
    return fmt::format("[{}]", fmt::join(shape, ", "));
}

double round_to(DType dtype, double v) noexcept {
    return dtype == DType::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

namespace {

void check_shape(const Shape& shape, std::size_t count) {
    if (shape.empty() || shape.size() > 2) {
        throw ShapeError(fmt::format("tensor rank must be 1 or 2, got shape {}", shape_string(shape)));
    }
    std::size_t product = 1;
    for (std::size_t dim : shape) {
        if (dim == 0) {
            throw ShapeError(fmt::format("zero-sized dimension in shape {}", shape_string(shape)));
        }
        product *= dim;
    }
    if (product != count) {
        throw ShapeError(fmt::format("shape {} needs {} values, got {}", shape_string(shape), product,
                                     count));
    }
}

}  // namespace

Tensor::Tensor() : dtype_(DType::f64), shape_{1}, data_(1, 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> values, DType dtype)
    : dtype_(dtype), shape_(std::move(shape)), data_(std::move(values)) {
    check_shape(shape_, data_.size());
    if (dtype_ == DType::f32) {
        for (double& v : data_) v = round_to(DType::f32, v);
    }
}

Tensor Tensor::zeros(Shape shape, DType dtype) {
    return full(std::move(shape), 0.0, dtype);
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
    std::size_t n = 1;
    for (std::size_t dim : shape) n *= dim;
    return Tensor(std::move(shape), std::vector<double>(n, value), dtype);
}

Tensor Tensor::identity(std::size_t n, DType dtype) {
    std::vector<double> v(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
    return Tensor({n, n}, std::move(v), dtype);
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, DType dtype) {
    return Tensor(std::move(shape), std::move(values), dtype);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows, DType dtype) {
    std::size_t r = rows.size();
    std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> v;
    v.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw ShapeError("ragged matrix literal");
        v.insert(v.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(v), dtype);
}

Tensor Tensor::vector(std::initializer_list<double> values, DType dtype) {
    return Tensor({values.size()}, std::vector<double>(values), dtype);
}

std::size_t Tensor::rows() const {
    if (shape_.size() != 2) throw ShapeError(fmt::format("expected a matrix, got shape {}", shape_string(shape_)));
    return shape_[0];
}

std::size_t Tensor::cols() const {
    if (shape_.size() != 2) throw ShapeError(fmt::format("expected a matrix, got shape {}", shape_string(shape_)));
    return shape_[1];
}

Tensor Tensor::astype(DType dtype) const {
    return Tensor(shape_, data_, dtype);
}

Tensor Tensor::row(std::size_t r) const {
    std::size_t c = cols();
    if (r >= rows()) throw ShapeError(fmt::format("row {} out of range for shape {}", r, shape_string(shape_)));
    return Tensor({c}, std::vector<double>(data_.begin() + r * c, data_.begin() + (r + 1) * c), dtype_);
}

Tensor Tensor::slice_cols(std::size_t begin, std::size_t end) const {
    std::size_t r = rows();
    std::size_t c = cols();
    if (begin >= end || end > c) {
        throw ShapeError(fmt::format("column slice [{}, {}) invalid for shape {}", begin, end, shape_string(shape_)));
    }
    std::vector<double> v;
    v.reserve(r * (end - begin));
    for (std::size_t i = 0; i < r; ++i) {
        v.insert(v.end(), data_.begin() + i * c + begin, data_.begin() + i * c + end);
    }
    return Tensor({r, end - begin}, std::move(v), dtype_);
}

Tensor Tensor::gather_rows(std::span<const std::size_t> indices) const {
    std::size_t r = rows();
    std::size_t c = cols();
    if (indices.empty()) throw ShapeError("gather_rows with no indices");
    std::vector<double> v;
    v.reserve(indices.size() * c);
    for (std::size_t idx : indices) {
        if (idx >= r) throw ShapeError(fmt::format("row index {} out of range for shape {}", idx, shape_string(shape_)));
        v.insert(v.end(), data_.begin() + idx * c, data_.begin() + (idx + 1) * c);
    }
    return Tensor({indices.size(), c}, std::move(v), dtype_);
}

bool Tensor::all_finite() const noexcept {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

bool operator==(const Tensor& a, const Tensor& b) noexcept {
    if (a.dtype_ != b.dtype_ || a.shape_ != b.shape_) return false;
    for (std::size_t i = 0; i < a.data_.size(); ++i) {
        if (std::bit_cast<std::uint64_t>(a.data_[i]) != std::bit_cast<std::uint64_t>(b.data_[i])) {
            return false;
        }
    }
    return true;
}

}  // namespace portpatch
