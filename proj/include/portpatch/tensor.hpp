#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace portpatch {

enum class DType { f32, f64 };

std::string_view dtype_name(DType t) noexcept;  // "F32" / "F64"
std::size_t dtype_size(DType t) noexcept;
double dtype_epsilon(DType t) noexcept;

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

/// Dense row-major tensor of rank 1 or 2.
///
/// Values are held as doubles for both dtypes. An F32 tensor only ever holds
/// values exactly representable as float: every constructor and every kernel
/// rounds its result through float before storing it, so an F32 tensor behaves
/// like float storage while reductions still accumulate in 64-bit.
class Tensor {
public:
    Tensor();  // F64 scalar-like {1} zero; placeholder for containers

    static Tensor zeros(Shape shape, DType dtype = DType::f64);
    static Tensor full(Shape shape, double value, DType dtype = DType::f64);
    static Tensor identity(std::size_t n, DType dtype = DType::f64);
    static Tensor from_values(Shape shape, std::vector<double> values, DType dtype = DType::f64);
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                         DType dtype = DType::f64);
    static Tensor vector(std::initializer_list<double> values, DType dtype = DType::f64);

    DType dtype() const noexcept { return dtype_; }
    const Shape& shape() const noexcept { return shape_; }
    std::size_t ndim() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t rows() const;  // 2-D only
    std::size_t cols() const;  // 2-D only
    bool is_matrix() const noexcept { return shape_.size() == 2; }

    std::span<const double> values() const noexcept { return data_; }
    double operator[](std::size_t i) const { return data_[i]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    Tensor astype(DType dtype) const;
    Tensor row(std::size_t r) const;                             // 1-D copy of a matrix row
    Tensor slice_cols(std::size_t begin, std::size_t end) const;  // columns [begin, end)
    Tensor gather_rows(std::span<const std::size_t> indices) const;

    bool all_finite() const noexcept;

    /// Bitwise identity of dtype, shape and every stored value.
    friend bool operator==(const Tensor& a, const Tensor& b) noexcept;

private:
    Tensor(Shape shape, std::vector<double> values, DType dtype);

    DType dtype_;
    Shape shape_;
    std::vector<double> data_;
};

/// Rounds `v` to the representable set of `dtype`.
double round_to(DType dtype, double v) noexcept;

}  // namespace portpatch
