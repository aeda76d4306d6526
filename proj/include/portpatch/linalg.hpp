#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "portpatch/tensor.hpp"

namespace portpatch {

// Kernels. All are pure; reductions accumulate in 64-bit in a fixed order.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

enum class ElementwiseOp { add, sub, scale };
/// Dispatching form; `scalar` is only read for `scale`, `b` only for add/sub.
Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor* b, double scalar = 0.0);

/// sqrt(sum of squares), summed in row-major order.
double fro_norm(const Tensor& a);

struct PowerIterationOptions {
    std::size_t max_iters = 1000;
    double tol = 1e-10;
    std::uint64_t seed = 0;
};

/// Largest singular value by power iteration on the smaller Gram matrix.
double sigma_max(const Tensor& a, const PowerIterationOptions& opts = {});

struct SvdResult {
    Tensor u;               // m x k, orthonormal columns
    std::vector<double> s;  // k = min(m, n), descending
    Tensor v;               // n x k, orthonormal columns
};

/// One-sided (Hestenes) Jacobi sweeps over columns; throws NumericalError if
/// the off-diagonal mass has not vanished after `svd_max_sweeps` sweeps.
inline constexpr std::size_t svd_max_sweeps = 80;
inline constexpr std::size_t svd_max_dim = 1024;

SvdResult svd(const Tensor& a);
std::vector<double> singular_values(const Tensor& a);

/// Number of singular values above `tol`. Without `tol` the threshold is
/// max(m, n) * eps(dtype) * sigma_1.
std::size_t numerical_rank(const Tensor& a, std::optional<double> tol = std::nullopt);

Tensor softmax_rows(const Tensor& a);
Tensor layer_norm_rows(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps);

struct Distribution {
    enum class Kind { normal, uniform, zeros };
    Kind kind = Kind::zeros;
    double p0 = 0.0;  // mu or lo
    double p1 = 0.0;  // sigma or hi

    static Distribution normal(double mu, double sigma) { return {Kind::normal, mu, sigma}; }
    static Distribution uniform(double lo, double hi) { return {Kind::uniform, lo, hi}; }
    static Distribution zeros() { return {Kind::zeros, 0.0, 0.0}; }
};

/// Fills row-major from a fresh Xoshiro256(seed); one generator draw sequence
/// per call so equal (shape, seed, dist) give equal bytes everywhere.
Tensor seeded_init(const Shape& shape, std::uint64_t seed, const Distribution& dist,
                   DType dtype = DType::f64);

}  // namespace portpatch
