#include "portpatch/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>

#include "portpatch/error.hpp"
#include "portpatch/rng.hpp"

namespace portpatch {

namespace {

void require_matrix(const Tensor& a, const char* op) {
    if (!a.is_matrix()) {
        throw ShapeError(fmt::format("{}: expected a 2-D tensor, got shape {}", op, shape_string(a.shape())));
    }
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", op, shape_string(a.shape()),
                                     shape_string(b.shape())));
    }
    if (a.dtype() != b.dtype()) {
        throw ShapeError(fmt::format("{}: dtype mismatch {} vs {}", op, dtype_name(a.dtype()),
                                     dtype_name(b.dtype())));
    }
}

// Four interleaved partial sums; fixed order, so still bit-reproducible.
double dot(const double* x, const double* y, std::size_t n) noexcept {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += x[i] * y[i];
        s1 += x[i + 1] * y[i + 1];
        s2 += x[i + 2] * y[i + 2];
        s3 += x[i + 3] * y[i + 3];
    }
    for (; i < n; ++i) s0 += x[i] * y[i];
    return (s0 + s1) + (s2 + s3);
}

double norm2(const std::vector<double>& x) noexcept {
    return std::sqrt(dot(x.data(), x.data(), x.size()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (!a.is_matrix() || !b.is_matrix() || a.cols() != b.rows()) {
        throw ShapeError(fmt::format("matmul: shape mismatch {} x {}", shape_string(a.shape()),
                                     shape_string(b.shape())));
    }
    if (a.dtype() != b.dtype()) {
        throw ShapeError(fmt::format("matmul: dtype mismatch {} vs {}", dtype_name(a.dtype()),
                                     dtype_name(b.dtype())));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<double> c(m * n, 0.0);
    // i-p-j order: each c[i][j] still accumulates over p = 0..k-1 in sequence.
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            const double* brow = bv.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
    return Tensor::from_values({m, n}, std::move(c), a.dtype());
}

Tensor transpose(const Tensor& a) {
    require_matrix(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> t(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a(i, j);
    return Tensor::from_values({n, m}, std::move(t), a.dtype());
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return Tensor::from_values(a.shape(), std::move(out), a.dtype());
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return Tensor::from_values(a.shape(), std::move(out), a.dtype());
}

Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
    return Tensor::from_values(a.shape(), std::move(out), a.dtype());
}

Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor* b, double scalar) {
    if (op == ElementwiseOp::scale) return scale(a, scalar);
    if (b == nullptr) throw ShapeError("elementwise: add/sub need a second tensor");
    return op == ElementwiseOp::add ? add(a, *b) : sub(a, *b);
}

double fro_norm(const Tensor& a) {
    double sum = 0.0;
    for (double v : a.values()) sum += v * v;
    return std::sqrt(sum);
}

double sigma_max(const Tensor& a, const PowerIterationOptions& opts) {
    require_matrix(a, "sigma_max");
    if (opts.max_iters == 0) throw ParameterError("sigma_max: max_iters must be >= 1");
    const std::size_t m = a.rows(), n = a.cols();
    const auto av = a.values();
    // Iterate on the smaller Gram matrix, applied implicitly.
    const bool left = m <= n;
    const std::size_t k = left ? m : n;
    const std::size_t other = left ? n : m;

    std::vector<double> v(k);
    Xoshiro256 gen(opts.seed);
    for (double& x : v) x = gen.normal();
    double nv = norm2(v);
    for (double& x : v) x /= nv;

    std::vector<double> tmp(other), w(k);
    auto apply_gram = [&] {
        std::fill(tmp.begin(), tmp.end(), 0.0);
        std::fill(w.begin(), w.end(), 0.0);
        if (left) {
            // tmp = a^T v (n), w = a tmp (m)
            for (std::size_t i = 0; i < m; ++i) {
                const double vi = v[i];
                const double* arow = av.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) tmp[j] += arow[j] * vi;
            }
            for (std::size_t i = 0; i < m; ++i) w[i] = dot(av.data() + i * n, tmp.data(), n);
        } else {
            // tmp = a v (m), w = a^T tmp (n)
            for (std::size_t i = 0; i < m; ++i) tmp[i] = dot(av.data() + i * n, v.data(), n);
            for (std::size_t i = 0; i < m; ++i) {
                const double ti = tmp[i];
                const double* arow = av.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) w[j] += arow[j] * ti;
            }
        }
    };

    double lambda = 0.0;
    for (std::size_t it = 0; it < opts.max_iters; ++it) {
        apply_gram();
        const double next = dot(v.data(), w.data(), k);
        const double nw = norm2(w);
        if (nw == 0.0) return 0.0;
        for (std::size_t i = 0; i < k; ++i) v[i] = w[i] / nw;
        const bool done = it > 0 && std::abs(next - lambda) < opts.tol * std::abs(next);
        lambda = next;
        if (done) break;
    }
    return std::sqrt(std::max(lambda, 0.0));
}

namespace {

struct JacobiOutput {
    std::vector<double> cols;  // k columns of length len, column-contiguous
    std::vector<double> v;     // k x k, column-contiguous
    std::size_t len = 0;
    std::size_t k = 0;
};

// Hestenes one-sided Jacobi: rotate column pairs of W until mutually
// orthogonal. W = columns of `a` (or of a^T when a is wide).
JacobiOutput jacobi(const Tensor& a, bool flip, bool want_v) {
    const std::size_t m = a.rows(), n = a.cols();
    JacobiOutput out;
    out.len = flip ? n : m;
    out.k = flip ? m : n;
    const std::size_t len = out.len, k = out.k;
    out.cols.resize(len * k);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (flip) out.cols[i * len + j] = a(i, j);
            else out.cols[j * len + i] = a(i, j);
        }
    }
    if (want_v) {
        out.v.assign(k * k, 0.0);
        for (std::size_t i = 0; i < k; ++i) out.v[i * k + i] = 1.0;
    }

    const double tol = std::numeric_limits<double>::epsilon() * static_cast<double>(len);
    const double tiny = std::numeric_limits<double>::min() / std::numeric_limits<double>::epsilon();
    for (std::size_t sweep = 0; sweep < svd_max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < k; ++p) {
            double* cp = out.cols.data() + p * len;
            for (std::size_t q = p + 1; q < k; ++q) {
                double* cq = out.cols.data() + q * len;
                const double alpha = dot(cp, cp, len);
                const double beta = dot(cq, cq, len);
                if (alpha < tiny || beta < tiny) continue;
                const double gamma = dot(cp, cq, len);
                if (std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < len; ++i) {
                    const double xp = cp[i], xq = cq[i];
                    cp[i] = c * xp - s * xq;
                    cq[i] = s * xp + c * xq;
                }
                if (want_v) {
                    double* vp = out.v.data() + p * k;
                    double* vq = out.v.data() + q * k;
                    for (std::size_t i = 0; i < k; ++i) {
                        const double xp = vp[i], xq = vq[i];
                        vp[i] = c * xp - s * xq;
                        vq[i] = s * xp + c * xq;
                    }
                }
            }
        }
        if (!rotated) return out;
    }
    throw NumericalError(fmt::format("svd: Jacobi sweeps did not converge after {} sweeps ({} x {})",
                                     svd_max_sweeps, m, n));
}

void check_svd_input(const Tensor& a) {
    require_matrix(a, "svd");
    if (std::min(a.rows(), a.cols()) > svd_max_dim) {
        throw ParameterError(fmt::format("svd: min dimension exceeds {} (shape {})", svd_max_dim,
                                         shape_string(a.shape())));
    }
    if (!a.all_finite()) throw NumericalError("svd: non-finite input");
}

std::vector<std::size_t> descending_order(const std::vector<double>& s) {
    std::vector<std::size_t> order(s.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return s[x] > s[y]; });
    return order;
}

// Columns of `basis` (len x k, column-contiguous) that are exactly zero are
// replaced by unit vectors orthogonal to the rest.
void complete_orthonormal(std::vector<double>& basis, std::size_t len, std::size_t k,
                          const std::vector<bool>& filled) {
    std::vector<bool> ok = filled;
    std::size_t candidate = 0;
    for (std::size_t j = 0; j < k; ++j) {
        if (ok[j]) continue;
        double* col = basis.data() + j * len;
        while (candidate < len) {
            std::fill(col, col + len, 0.0);
            col[candidate++] = 1.0;
            for (int pass = 0; pass < 2; ++pass) {
                for (std::size_t i = 0; i < k; ++i) {
                    if (!ok[i]) continue;
                    const double* other = basis.data() + i * len;
                    const double proj = dot(col, other, len);
                    for (std::size_t t = 0; t < len; ++t) col[t] -= proj * other[t];
                }
            }
            const double nrm = std::sqrt(dot(col, col, len));
            if (nrm > 0.5) {
                for (std::size_t t = 0; t < len; ++t) col[t] /= nrm;
                ok[j] = true;
                break;
            }
        }
    }
}

}  // namespace

SvdResult svd(const Tensor& a) {
    check_svd_input(a);
    const std::size_t m = a.rows(), n = a.cols();
    const bool flip = m < n;
    JacobiOutput j = jacobi(a, flip, true);
    const std::size_t len = j.len, k = j.k;

    std::vector<double> sigma(k);
    for (std::size_t c = 0; c < k; ++c) sigma[c] = std::sqrt(dot(&j.cols[c * len], &j.cols[c * len], len));
    const auto order = descending_order(sigma);

    // Left basis (length len) from normalized columns, right basis from V.
    std::vector<double> left(len * k, 0.0), right(k * k);
    std::vector<bool> filled(k, false);
    SvdResult out;
    out.s.resize(k);
    for (std::size_t c = 0; c < k; ++c) {
        const std::size_t src = order[c];
        out.s[c] = sigma[src];
        if (sigma[src] > 0.0) {
            for (std::size_t t = 0; t < len; ++t) left[c * len + t] = j.cols[src * len + t] / sigma[src];
            filled[c] = true;
        }
        std::copy_n(&j.v[src * k], k, &right[c * k]);
    }
    complete_orthonormal(left, len, k, filled);

    auto to_tensor = [&](const std::vector<double>& colmajor, std::size_t rows) {
        std::vector<double> rm(rows * k);
        for (std::size_t c = 0; c < k; ++c)
            for (std::size_t r = 0; r < rows; ++r) rm[r * k + c] = colmajor[c * rows + r];
        return Tensor::from_values({rows, k}, std::move(rm), DType::f64);
    };
    Tensor lt = to_tensor(left, len);
    Tensor rt = to_tensor(right, k);
    if (flip) {
        out.u = std::move(rt);  // m x k
        out.v = std::move(lt);  // n x k
    } else {
        out.u = std::move(lt);
        out.v = std::move(rt);
    }
    return out;
}

std::vector<double> singular_values(const Tensor& a) {
    check_svd_input(a);
    JacobiOutput j = jacobi(a, a.rows() < a.cols(), false);
    std::vector<double> s(j.k);
    for (std::size_t c = 0; c < j.k; ++c) s[c] = std::sqrt(dot(&j.cols[c * j.len], &j.cols[c * j.len], j.len));
    std::sort(s.begin(), s.end(), std::greater<>());
    return s;
}

std::size_t numerical_rank(const Tensor& a, std::optional<double> tol) {
    require_matrix(a, "numerical_rank");
    const auto s = singular_values(a);
    if (s.empty() || s.front() == 0.0) return 0;
    const double threshold =
        tol ? *tol
            : static_cast<double>(std::max(a.rows(), a.cols())) * dtype_epsilon(a.dtype()) * s.front();
    return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [&](double x) { return x > threshold; }));
}

Tensor softmax_rows(const Tensor& a) {
    require_matrix(a, "softmax_rows");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = a.values().data() + i * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] = std::exp(row[j] - mx);
            sum += out[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= sum;
    }
    return Tensor::from_values({m, n}, std::move(out), a.dtype());
}

Tensor layer_norm_rows(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
    require_matrix(a, "layer_norm_rows");
    const std::size_t m = a.rows(), n = a.cols();
    if (gain.ndim() != 1 || bias.ndim() != 1 || gain.size() != n || bias.size() != n) {
        throw ShapeError(fmt::format("layer_norm_rows: gain {} / bias {} do not match row width {}",
                                     shape_string(gain.shape()), shape_string(bias.shape()), n));
    }
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = a.values().data() + i * n;
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += row[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(n);
        const double denom = std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            const double centered = row[j] - mean;
            const double normed = denom > 0.0 ? centered / denom : 0.0;
            out[i * n + j] = normed * gain[j] + bias[j];
        }
    }
    return Tensor::from_values({m, n}, std::move(out), a.dtype());
}

Tensor seeded_init(const Shape& shape, std::uint64_t seed, const Distribution& dist, DType dtype) {
    std::size_t count = 1;
    for (std::size_t d : shape) count *= d;
    std::vector<double> v(count, 0.0);
    Xoshiro256 gen(seed);
    switch (dist.kind) {
    case Distribution::Kind::zeros:
        break;
    case Distribution::Kind::normal:
        for (double& x : v) x = dist.p0 + dist.p1 * gen.normal();
        break;
    case Distribution::Kind::uniform:
        for (double& x : v) x = dist.p0 + (dist.p1 - dist.p0) * gen.uniform();
        break;
    }
    return Tensor::from_values(shape, std::move(v), dtype);
}

}  // namespace portpatch
