#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "portpatch/checkpoint.hpp"
#include "portpatch/error.hpp"
#include "portpatch/linalg.hpp"
#include "portpatch/lora.hpp"
#include "portpatch/transformer.hpp"

using namespace portpatch;

#ifndef PORTPATCH_TEST_DATA
#define PORTPATCH_TEST_DATA "tests/data"
#endif

namespace {

Tensor randn(Shape shape, std::uint64_t seed, double sigma = 1.0) {
    return seeded_init(shape, seed, Distribution::normal(0.0, sigma));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// Scalar loops over the textbook definition.
Tensor reference_head(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv, bool causal) {
    const std::size_t n = x.rows(), d = x.cols(), dh = wq.cols();
    auto proj = [&](const Tensor& w, std::size_t i, std::size_t c) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) s += x(i, k) * w(k, c);
        return s;
    };
    std::vector<double> out(n * dh, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> score(n, -std::numeric_limits<double>::infinity());
        double top = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (causal && j > i) continue;
            double s = 0.0;
            for (std::size_t c = 0; c < dh; ++c) s += proj(wq, i, c) * proj(wk, j, c);
            score[j] = s / std::sqrt(static_cast<double>(dh));
            top = std::max(top, score[j]);
        }
        double z = 0.0;
        for (double& s : score) z += (s = std::exp(s - top));
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t c = 0; c < dh; ++c) out[i * dh + c] += score[j] / z * proj(wv, j, c);
    }
    return Tensor::from_values({n, dh}, out);
}

TransformerConfig small(std::size_t d, std::size_t h, std::size_t layers) {
    TransformerConfig c;
    c.d = d;
    c.heads = h;
    c.d_ff = 2 * d;
    c.layers = layers;
    return c;
}

}  // namespace

TEST(AttentionHead, SingleTokenReturnsValues) {
    const Tensor x = randn({1, 6}, 1), wq = randn({6, 3}, 2), wk = randn({6, 3}, 3), wv = randn({6, 3}, 4);
    EXPECT_LE(max_abs_diff(attention_head(x, wq, wk, wv, true), matmul(x, wv)), 1e-15);
}

TEST(AttentionHead, ZeroQueryIsUniform) {
    const Tensor x = randn({5, 6}, 1), wk = randn({6, 3}, 3), wv = randn({6, 3}, 4);
    const Tensor out = attention_head(x, Tensor::zeros({6, 3}), wk, wv, false);
    const Tensor v = matmul(x, wv);
    for (std::size_t c = 0; c < 3; ++c) {
        double mean = 0.0;
        for (std::size_t j = 0; j < 5; ++j) mean += v(j, c) / 5.0;
        for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(out(i, c), mean, 1e-12);
    }
}

TEST(AttentionHead, MatchesScalarReference) {
    const Tensor x = randn({4, 6}, 7), wq = randn({6, 2}, 8), wk = randn({6, 2}, 9), wv = randn({6, 2}, 10);
    for (bool causal : {false, true}) {
        EXPECT_LE(max_abs_diff(attention_head(x, wq, wk, wv, causal), reference_head(x, wq, wk, wv, causal)),
                  1e-10);
    }
    EXPECT_THROW(attention_head(x, randn({5, 2}, 1), wk, wv, true), ShapeError);
}

TEST(AttentionProbabilities, RowStochastic) {
    const Tensor x = randn({6, 8}, 3);
    const Tensor p = attention_probabilities(x, randn({8, 4}, 4), randn({8, 4}, 5), true);
    for (std::size_t i = 0; i < 6; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < 6; ++j) {
            s += p(i, j);
            if (j > i) EXPECT_EQ(p(i, j), 0.0);
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(MultiHead, SingleHeadAndIdentityOutput) {
    const TransformerConfig c1 = small(6, 1, 1);
    const Tensor x = randn({4, 6}, 1), wq = randn({6, 6}, 2), wk = randn({6, 6}, 3), wv = randn({6, 6}, 4),
                 wo = randn({6, 6}, 5);
    EXPECT_LE(max_abs_diff(multi_head_attention(x, wq, wk, wv, wo, c1),
                           matmul(attention_head(x, wq, wk, wv, true), wo)),
              1e-12);

    TransformerConfig c3 = small(6, 3, 1);
    const Tensor concat = multi_head_attention(x, wq, wk, wv, Tensor::identity(6), c3);
    for (std::size_t h = 0; h < 3; ++h) {
        const Tensor head = attention_head(x, wq.slice_cols(2 * h, 2 * h + 2), wk.slice_cols(2 * h, 2 * h + 2),
                                           wv.slice_cols(2 * h, 2 * h + 2), true);
        EXPECT_LE(max_abs_diff(concat.slice_cols(2 * h, 2 * h + 2), head), 1e-12);
    }
    TransformerConfig bad = small(6, 4, 1);
    EXPECT_THROW(multi_head_attention(x, wq, wk, wv, wo, bad), ConfigError);
}

TEST(MultiHead, BlockDiagonalHeadsMatchSeparateRuns) {
    // Two heads whose projections only read their own half of x behave like
    // two independent single-head layers on the halves.
    const Tensor x = randn({5, 4}, 11);
    auto block = [](const Tensor& top, const Tensor& bottom) {
        std::vector<double> v(16, 0.0);
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < 2; ++j) v[i * 4 + j] = top(i, j), v[(i + 2) * 4 + j + 2] = bottom(i, j);
        return Tensor::from_values({4, 4}, v);
    };
    const Tensor q1 = randn({2, 2}, 1), q2 = randn({2, 2}, 2), k1 = randn({2, 2}, 3), k2 = randn({2, 2}, 4),
                 v1 = randn({2, 2}, 5), v2 = randn({2, 2}, 6);
    const Tensor out = multi_head_attention(x, block(q1, q2), block(k1, k2), block(v1, v2), Tensor::identity(4),
                                            small(4, 2, 1));
    const Tensor left = attention_head(x.slice_cols(0, 2), q1, k1, v1, true);
    const Tensor right = attention_head(x.slice_cols(2, 4), q2, k2, v2, true);
    EXPECT_LE(max_abs_diff(out.slice_cols(0, 2), left), 1e-12);
    EXPECT_LE(max_abs_diff(out.slice_cols(2, 4), right), 1e-12);
}

TEST(FeedForward, Properties) {
    const Tensor x = randn({4, 6}, 1);
    const Tensor b2 = Tensor::vector({1, 2, 3, 4, 5, 6});
    const Tensor zero_out = feed_forward(x, Tensor::zeros({6, 8}), Tensor::zeros({8}), Tensor::zeros({8, 6}), b2,
                                         Activation::gelu);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(zero_out(i, j), b2[j]);

    const Tensor dead = feed_forward(x, Tensor::zeros({6, 8}), Tensor::full({8}, -1.0), randn({8, 6}, 2), b2,
                                     Activation::relu);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(dead(i, j), b2[j]);

    const Tensor wu = randn({6, 8}, 3), b1 = randn({8}, 4), wd = randn({8, 6}, 5);
    const Tensor y = feed_forward(x, wu, b1, wd, b2, Activation::gelu);
    const std::size_t perm[] = {2, 0, 3, 1};
    const Tensor yp = feed_forward(x.gather_rows(perm), wu, b1, wd, b2, Activation::gelu);
    EXPECT_EQ(yp, y.gather_rows(perm));
    EXPECT_THROW(feed_forward(x, wu, b1, randn({7, 6}, 1), b2, Activation::gelu), ShapeError);
}

TEST(Forward, EmptyStackAndDeterminism) {
    TransformerConfig cfg = small(8, 2, 0);
    const auto w = init_transformer(cfg, 3);
    const std::int64_t toks[] = {1, 4, 2};
    const std::size_t idx[] = {1, 4, 2};
    EXPECT_LE(max_abs_diff(forward(w, cfg, toks), matmul(w.at("embed.weight").gather_rows(idx), w.at("head.weight"))),
              0.0);
    cfg.layers = 2;
    const auto w2 = init_transformer(cfg, 3);
    EXPECT_EQ(forward(w2, cfg, toks), forward(w2, cfg, toks));
}

TEST(Forward, InputErrors) {
    const TransformerConfig cfg = small(8, 2, 1);
    const auto w = init_transformer(cfg, 3);
    const std::int64_t bad[] = {1, 11};
    EXPECT_THROW(forward(w, cfg, bad), InputError);
    const std::int64_t neg[] = {-1};
    EXPECT_THROW(forward(w, cfg, neg), InputError);
    EXPECT_THROW(forward(w, cfg, std::span<const std::int64_t>{}), InputError);
    std::vector<std::int64_t> too_long(cfg.max_len + 1, 0);
    EXPECT_THROW(forward(w, cfg, too_long), InputError);
    auto missing = w;
    missing.tensors.erase("layers.0.ln1.gain");
    const std::int64_t ok[] = {1};
    EXPECT_THROW(forward(missing, cfg, ok), LookupError);
}

TEST(Forward, CausalPrefixInvariance) {
    const TransformerConfig cfg = small(16, 4, 2);
    const auto w = init_transformer(cfg, 5);
    const std::int64_t a[] = {1, 2, 3, 4, 5, 6};
    const std::int64_t b[] = {1, 2, 3, 9, 0, 10};
    const Tensor la = forward(w, cfg, a), lb = forward(w, cfg, b);
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t v = 0; v < cfg.vocab; ++v) EXPECT_EQ(la(t, v), lb(t, v));
}

TEST(Forward, GoldenLogitsFromReferenceImplementation) {
    const std::string dir = PORTPATCH_TEST_DATA;
    struct Case {
        const char* weights;
        const char* logits;
        Activation act;
        bool causal;
        std::uint64_t seed;
    };
    const Case cases[] = {
        {"tiny_weights_gelu_causal", "tiny_logits_gelu_causal", Activation::gelu, true, 7},
        {"tiny_weights_relu_full", "tiny_logits_relu_full", Activation::relu, false, 8},
    };
    for (const auto& c : cases) {
        TransformerConfig cfg;  // d=16, H=2, d_ff=32, L=2, V=11
        cfg.activation = c.act;
        cfg.causal = c.causal;
        const Checkpoint w = read_container(dir + "/" + c.weights + ".safetensors");
        EXPECT_EQ(w, init_transformer(cfg, c.seed)) << c.weights;
        const Checkpoint golden = read_container(dir + "/" + c.logits + ".safetensors");
        for (int k = 0; k < 3; ++k) {
            const Tensor& tok = golden.at("tokens." + std::to_string(k));
            std::vector<std::int64_t> ids;
            for (double v : tok.values()) ids.push_back(static_cast<std::int64_t>(v));
            const Tensor logits = forward(w, cfg, ids);
            EXPECT_LE(max_abs_diff(logits, golden.at("logits." + std::to_string(k))), 1e-10) << c.logits << k;
        }
    }
}

TEST(ForwardWithPatch, EquivalentToMerge) {
    const TransformerConfig cfg = small(16, 2, 2);
    const auto base = init_transformer(cfg, 9);
    const auto mods = adaptable_modules(cfg);
    const LoraPatch p = random_patch(base, mods, 4, 8.0, 0.2, 3);
    const std::int64_t toks[] = {0, 3, 3, 7, 10};
    EXPECT_LE(max_abs_diff(forward_with_patch(base, p, cfg, toks), forward(merge(base, p), cfg, toks)), 1e-10);
    EXPECT_EQ(forward_with_patch(base, LoraPatch{}, cfg, toks), forward(base, cfg, toks));
}

TEST(ForwardWithPatch, QueryOnlyPatchChangesLogits) {
    const TransformerConfig cfg = small(16, 2, 1);
    const auto base = init_transformer(cfg, 9);
    const std::string q[] = {"layers.0.attn.q"};
    const LoraPatch p = random_patch(base, q, 2, 2.0, 0.5, 3);
    const std::int64_t toks[] = {0, 3, 5};
    EXPECT_GT(max_abs_diff(forward_with_patch(base, p, cfg, toks), forward(base, cfg, toks)), 1e-6);
}

TEST(ForwardWithPatch, RejectsNonAdaptableTargets) {
    const TransformerConfig cfg = small(16, 2, 1);
    const auto base = init_transformer(cfg, 9);
    const std::string embed[] = {"embed"};
    const LoraPatch p = random_patch(base, embed, 2, 2.0, 0.5, 3);
    const std::int64_t toks[] = {0};
    EXPECT_THROW(forward_with_patch(base, p, cfg, toks), MergeError);
}

TEST(Config, Validation) {
    TransformerConfig c;
    c.heads = 3;
    EXPECT_THROW(c.validate(), ConfigError);
    c.heads = 2;
    c.vocab = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}
