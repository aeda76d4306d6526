#include <gtest/gtest.h>

#include <cmath>

#include "portpatch/error.hpp"
#include "portpatch/linalg.hpp"
#include "portpatch/rng.hpp"
#include "portpatch/tensor.hpp"

using namespace portpatch;

namespace {

Tensor randn(Shape shape, std::uint64_t seed, double sigma = 1.0) {
    return seeded_init(shape, seed, Distribution::normal(0.0, sigma));
}

Tensor triple_loop(const Tensor& a, const Tensor& b) {
    std::vector<double> out(a.rows() * b.cols(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
            out[i * b.cols() + j] = s;
        }
    return Tensor::from_values({a.rows(), b.cols()}, out);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST(Rng, XoshiroReferenceVector) {
    auto g = Xoshiro256::from_state({1, 2, 3, 4});
    EXPECT_EQ(g.next(), 11520u);
    EXPECT_EQ(g.next(), 0u);
    EXPECT_EQ(g.next(), 1509978240u);
    EXPECT_EQ(g.next(), 1215971899390074240u);
}

TEST(Rng, SplitmixSeeding) {
    Xoshiro256 g(0);
    EXPECT_EQ(g.state()[0], 0xe220a8397b1dcdafull);
}

TEST(Rng, NormalsMatchReferenceImplementation) {
    // Values from tests/oracles/reference.py seeded_normal((4,), 42, 0, 1).
    const Tensor t = seeded_init({4}, 42, Distribution::normal(0.0, 1.0));
    const double expected[] = {-0.30326306, 1.34381176, 0.38346179, 0.93696243};
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(t[i], expected[i], 5e-9);
}

TEST(Rng, DeriveSeedSeparatesStreams) {
    EXPECT_NE(derive_seed(5, 0), derive_seed(5, 1));
    EXPECT_NE(derive_seed(5, 0), derive_seed(6, 0));
    EXPECT_EQ(derive_seed(5, 3), derive_seed(5, 3));
}

TEST(Tensor, ShapeValidation) {
    EXPECT_THROW(Tensor::zeros({}), ShapeError);
    EXPECT_THROW(Tensor::zeros({2, 0}), ShapeError);
    EXPECT_THROW(Tensor::zeros({1, 2, 3}), ShapeError);
    EXPECT_THROW(Tensor::from_values({2, 2}, {1, 2, 3}), ShapeError);
    EXPECT_THROW(Tensor::vector({1, 2}).rows(), ShapeError);
}

TEST(Tensor, F32StorageRounds) {
    const Tensor t = Tensor::vector({0.1}, DType::f32);
    EXPECT_EQ(t[0], static_cast<double>(0.1f));
    EXPECT_NE(t[0], 0.1);
}

TEST(Tensor, SliceAndGather) {
    const Tensor m = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
    EXPECT_EQ(m.slice_cols(1, 3), Tensor::matrix({{2, 3}, {5, 6}}));
    const std::size_t idx[] = {1, 1, 0};
    EXPECT_EQ(m.gather_rows(idx), Tensor::matrix({{4, 5, 6}, {4, 5, 6}, {1, 2, 3}}));
}

TEST(Matmul, IdentityAndOuterProduct) {
    const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
    EXPECT_EQ(matmul(Tensor::identity(2), a), a);
    EXPECT_EQ(matmul(Tensor::matrix({{1}, {0}}), Tensor::matrix({{0, 2}})), Tensor::matrix({{0, 2}, {0, 0}}));
}

TEST(Matmul, MatchesTripleLoop) {
    const Tensor a = randn({8, 8}, 1), b = randn({8, 8}, 2);
    EXPECT_LE(max_abs_diff(matmul(a, b), triple_loop(a, b)), 1e-12);
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
    try {
        matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
        FAIL();
    } catch (const ShapeError& ex) {
        EXPECT_NE(std::string(ex.what()).find("[2, 3]"), std::string::npos);
    }
    EXPECT_THROW(matmul(Tensor::zeros({2, 2}), Tensor::zeros({2, 2}, DType::f32)), ShapeError);
}

TEST(Matmul, Associativity) {
    const Tensor a = randn({16, 16}, 3), b = randn({16, 16}, 4), c = randn({16, 16}, 5);
    const double bound = 1e-9 * fro_norm(a) * fro_norm(b) * fro_norm(c);
    EXPECT_LE(fro_norm(sub(matmul(matmul(a, b), c), matmul(a, matmul(b, c)))), bound);
}

TEST(Elementwise, Basics) {
    const Tensor a = Tensor::matrix({{1, 2}});
    EXPECT_EQ(add(a, Tensor::zeros({1, 2})), a);
    EXPECT_EQ(sub(a, a), Tensor::zeros({1, 2}));
    EXPECT_EQ(scale(Tensor::matrix({{2, 4}}), 0.5), a);
    EXPECT_EQ(elementwise(ElementwiseOp::scale, a, nullptr, 2.0), Tensor::matrix({{2, 4}}));
    const Tensor b = Tensor::zeros({2, 1});
    EXPECT_THROW(add(a, b), ShapeError);
    EXPECT_THROW(elementwise(ElementwiseOp::add, a, nullptr), ShapeError);
}

TEST(FroNorm, KnownAndOracle) {
    EXPECT_DOUBLE_EQ(fro_norm(Tensor::matrix({{3, 4}, {0, 0}})), 5.0);
    EXPECT_EQ(fro_norm(Tensor::zeros({4, 4})), 0.0);
    const Tensor t = randn({16, 16}, 6);
    double s = 0.0;
    for (std::size_t i = 0; i < 16; ++i)
        for (std::size_t j = 0; j < 16; ++j) s += t(i, j) * t(i, j);
    EXPECT_NEAR(fro_norm(t), std::sqrt(s), 1e-12 * std::sqrt(s));
}

TEST(SigmaMax, KnownValues) {
    EXPECT_NEAR(sigma_max(Tensor::matrix({{3, 0}, {0, 1}})), 3.0, 1e-12);
    EXPECT_EQ(sigma_max(Tensor::zeros({3, 5})), 0.0);
    EXPECT_THROW(sigma_max(Tensor::vector({1, 2})), ShapeError);
}

TEST(SigmaMax, MatchesSvd) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Tensor a = randn({64, 64}, 100 + seed);
        const double ref = svd(a).s[0];
        EXPECT_NEAR(sigma_max(a), ref, 1e-8 * ref);
    }
    const Tensor wide = randn({5, 40}, 9);
    EXPECT_NEAR(sigma_max(wide), singular_values(wide)[0], 1e-8 * singular_values(wide)[0]);
}

TEST(Svd, DiagonalAndRankOne) {
    const auto s = svd(Tensor::matrix({{2, 0}, {0, 1}})).s;
    EXPECT_NEAR(s[0], 2.0, 1e-14);
    EXPECT_NEAR(s[1], 1.0, 1e-14);
    const double r = 1.0 / std::sqrt(2.0);
    const auto s1 = svd(Tensor::matrix({{r * 0.6, r * 0.8}, {r * 0.6, r * 0.8}})).s;
    EXPECT_NEAR(s1[0], 1.0, 1e-14);
    EXPECT_NEAR(s1[1], 0.0, 1e-14);
}

TEST(Svd, ReconstructionAndOrthonormality) {
    for (Shape shape : {Shape{32, 48}, Shape{48, 32}}) {
        const Tensor a = randn(shape, 11);
        const SvdResult r = svd(a);
        ASSERT_EQ(r.s.size(), 32u);
        for (std::size_t i = 1; i < r.s.size(); ++i) EXPECT_GE(r.s[i - 1], r.s[i]);
        std::vector<double> us(r.u.size());
        for (std::size_t i = 0; i < r.u.rows(); ++i)
            for (std::size_t j = 0; j < r.u.cols(); ++j) us[i * r.u.cols() + j] = r.u(i, j) * r.s[j];
        const Tensor rec = matmul(Tensor::from_values(r.u.shape(), us), transpose(r.v));
        EXPECT_LE(fro_norm(sub(rec, a)), 1e-9 * fro_norm(a));
        const Tensor utu = matmul(transpose(r.u), r.u);
        EXPECT_LE(fro_norm(sub(utu, Tensor::identity(32))), 1e-10);
        double ss = 0.0;
        for (double v : r.s) ss += v * v;
        EXPECT_NEAR(fro_norm(a) * fro_norm(a), ss, 1e-9 * ss);
    }
}

TEST(Svd, RankDeficientKeepsOrthonormalU) {
    const Tensor a = matmul(randn({20, 3}, 1), randn({3, 12}, 2));
    const SvdResult r = svd(a);
    EXPECT_LE(fro_norm(sub(matmul(transpose(r.u), r.u), Tensor::identity(12))), 1e-10);
}

TEST(NumericalRank, Bounds) {
    EXPECT_EQ(numerical_rank(Tensor::identity(5)), 5u);
    const Tensor ba = matmul(randn({64, 8}, 1), randn({8, 64}, 2));
    EXPECT_EQ(numerical_rank(ba), 8u);
    const Tensor two = add(ba, matmul(randn({64, 8}, 3), randn({8, 64}, 4)));
    EXPECT_EQ(numerical_rank(two), 16u);
    EXPECT_EQ(numerical_rank(Tensor::zeros({4, 4})), 0u);
    EXPECT_EQ(numerical_rank(Tensor::identity(3), 2.0), 0u);
}

TEST(Softmax, Rows) {
    const Tensor s = softmax_rows(Tensor::matrix({{0, 0}, {1000, 0}}));
    EXPECT_DOUBLE_EQ(s(0, 0), 0.5);
    EXPECT_NEAR(s(1, 0), 1.0, 1e-12);
    EXPECT_NEAR(s(1, 1), 0.0, 1e-12);
    const Tensor r = softmax_rows(randn({8, 8}, 5, 3.0));
    for (std::size_t i = 0; i < 8; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < 8; ++j) sum += r(i, j);
        EXPECT_NEAR(sum, 1.0, 1e-9);
    }
}

TEST(LayerNorm, Cases) {
    const Tensor ones = Tensor::full({4}, 1.0), zeros = Tensor::zeros({4});
    EXPECT_EQ(layer_norm_rows(Tensor::full({1, 4}, 3.0), ones, zeros, 1e-5), Tensor::zeros({1, 4}));
    const Tensor r = layer_norm_rows(Tensor::matrix({{-1, 1}}), Tensor::full({2}, 1.0), Tensor::zeros({2}), 0.0);
    EXPECT_DOUBLE_EQ(r(0, 0), -1.0);
    EXPECT_DOUBLE_EQ(r(0, 1), 1.0);
    EXPECT_THROW(layer_norm_rows(Tensor::zeros({2, 3}), ones, zeros, 1e-5), ShapeError);
}

TEST(LayerNorm, MeanAndVarianceOracle) {
    const Tensor x = randn({6, 10}, 21, 4.0);
    const Tensor gain = randn({10}, 22), bias = randn({10}, 23);
    const Tensor plain = layer_norm_rows(x, Tensor::full({10}, 1.0), Tensor::zeros({10}), 0.0);
    const Tensor y = layer_norm_rows(x, gain, bias, 1e-5);
    for (std::size_t i = 0; i < 6; ++i) {
        double mean = 0.0, var = 0.0, mu = 0.0, sq = 0.0, ymean = 0.0;
        for (std::size_t j = 0; j < 10; ++j) mean += plain(i, j), mu += x(i, j);
        mean /= 10.0, mu /= 10.0;
        for (std::size_t j = 0; j < 10; ++j) var += plain(i, j) * plain(i, j), sq += (x(i, j) - mu) * (x(i, j) - mu);
        EXPECT_LE(std::abs(mean), 1e-9);
        EXPECT_NEAR(var / 10.0, 1.0, 1e-6);
        // Affine form computed directly.
        double expected_mean = 0.0;
        for (std::size_t j = 0; j < 10; ++j) {
            const double z = (x(i, j) - mu) / std::sqrt(sq / 10.0 + 1e-5);
            EXPECT_NEAR(y(i, j), z * gain[j] + bias[j], 1e-12);
            expected_mean += z * gain[j] + bias[j];
            ymean += y(i, j);
        }
        EXPECT_NEAR(ymean / 10.0, expected_mean / 10.0, 1e-12);
    }
}

TEST(SeededInit, Determinism) {
    EXPECT_EQ(seeded_init({2, 2}, 1, Distribution::zeros()), Tensor::zeros({2, 2}));
    EXPECT_EQ(randn({5, 7}, 3), randn({5, 7}, 3));
    EXPECT_FALSE(randn({5, 7}, 3) == randn({5, 7}, 4));
    const Tensor u = seeded_init({100}, 9, Distribution::uniform(-2.0, 3.0));
    for (double v : u.values()) {
        EXPECT_GE(v, -2.0);
        EXPECT_LT(v, 3.0);
    }
}
