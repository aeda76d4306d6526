#include "portpatch/transformer.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <set>

#include <fmt/format.h>

#include "portpatch/error.hpp"
#include "portpatch/linalg.hpp"
#include "portpatch/rng.hpp"

namespace portpatch {

void TransformerConfig::validate() const {
    if (d == 0 || heads == 0 || d_ff == 0 || vocab == 0 || max_len == 0) {
        throw ConfigError("transformer dims must all be >= 1");
    }
    if (d % heads != 0) throw ConfigError(fmt::format("head count {} does not divide hidden width {}", heads, d));
    if (!(ln_eps >= 0.0)) throw ConfigError("ln_eps must be >= 0");
}

namespace {

std::string layer_name(std::size_t l, const char* rest) {
    return fmt::format("layers.{}.{}", l, rest);
}

struct Expected {
    std::string name;
    Shape shape;
};

std::vector<Expected> schema(const TransformerConfig& cfg) {
    const std::size_t d = cfg.d, f = cfg.d_ff;
    std::vector<Expected> out{{"embed.weight", {cfg.vocab, d}}, {"head.weight", {d, cfg.vocab}}};
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        for (const char* p : {"attn.q.weight", "attn.k.weight", "attn.v.weight", "attn.o.weight"}) {
            out.push_back({layer_name(l, p), {d, d}});
        }
        out.push_back({layer_name(l, "ffn.up.weight"), {d, f}});
        out.push_back({layer_name(l, "ffn.up.bias"), {f}});
        out.push_back({layer_name(l, "ffn.down.weight"), {f, d}});
        out.push_back({layer_name(l, "ffn.down.bias"), {d}});
        for (const char* p : {"ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias"}) out.push_back({layer_name(l, p), {d}});
    }
    return out;
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    const std::size_t m = x.rows(), n = x.cols();
    if (bias.ndim() != 1 || bias.size() != n) {
        throw ShapeError(fmt::format("bias {} does not match width {}", shape_string(bias.shape()), n));
    }
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x(i, j) + bias[j];
    return Tensor::from_values({m, n}, std::move(out), x.dtype());
}

Tensor activate(const Tensor& h, Activation act) {
    std::vector<double> out(h.values().begin(), h.values().end());
    for (double& v : out) {
        v = act == Activation::relu ? (v > 0.0 ? v : 0.0) : 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2));
    }
    return Tensor::from_values(h.shape(), std::move(out), h.dtype());
}

// Dense weight plus an optional low-rank correction applied without
// materializing it.
struct Linear {
    const Tensor* weight = nullptr;
    const LoraFactors* factors = nullptr;
    double scaling = 1.0;

    Tensor apply(const Tensor& x) const {
        Tensor y = matmul(x, *weight);
        if (factors == nullptr) return y;
        const Tensor xb = matmul(x, factors->b.astype(x.dtype()));
        const Tensor low = scale(matmul(xb, factors->a.astype(x.dtype())), scaling);
        return add(y, low);
    }
};

Tensor attend(const Tensor& q, const Tensor& k, const Tensor& v, bool causal) {
    const std::size_t n = q.rows(), dh = q.cols();
    if (k.rows() != n || v.rows() != n || k.cols() != dh) {
        throw ShapeError(fmt::format("attention: q {} k {} v {} are inconsistent", shape_string(q.shape()),
                                     shape_string(k.shape()), shape_string(v.shape())));
    }
    const Tensor raw = matmul(q, transpose(k));
    const double root = std::sqrt(static_cast<double>(dh));
    std::vector<double> scores(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            scores[i * n + j] = causal && j > i ? -std::numeric_limits<double>::infinity() : raw(i, j) / root;
        }
    }
    const Tensor probs = softmax_rows(Tensor::from_values({n, n}, std::move(scores), q.dtype()));
    return matmul(probs, v);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    const std::size_t n = parts.front().rows();
    std::size_t width = 0;
    for (const auto& p : parts) width += p.cols();
    std::vector<double> out(n * width);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < p.cols(); ++j) out[i * width + offset + j] = p(i, j);
        offset += p.cols();
    }
    return Tensor::from_values({n, width}, std::move(out), parts.front().dtype());
}

Tensor mha_projected(const Tensor& x, const Linear& q, const Linear& k, const Linear& v, const Linear& o,
                     const TransformerConfig& cfg) {
    const Tensor qx = q.apply(x), kx = k.apply(x), vx = v.apply(x);
    const std::size_t dh = cfg.head_dim();
    std::vector<Tensor> heads;
    heads.reserve(cfg.heads);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        heads.push_back(attend(qx.slice_cols(h * dh, (h + 1) * dh), kx.slice_cols(h * dh, (h + 1) * dh),
                               vx.slice_cols(h * dh, (h + 1) * dh), cfg.causal));
    }
    return o.apply(concat_cols(heads));
}

Tensor ffn_projected(const Tensor& x, const Linear& up, const Tensor& b1, const Linear& down, const Tensor& b2,
                     Activation act) {
    return add_row_bias(down.apply(activate(add_row_bias(up.apply(x), b1), act)), b2);
}

Tensor run(const TransformerWeights& w, const LoraPatch* patch, const TransformerConfig& cfg,
           std::span<const std::int64_t> tokens) {
    validate_weights(w, cfg);
    if (tokens.empty() || tokens.size() > cfg.max_len) {
        throw InputError(fmt::format("sequence length {} outside [1, {}]", tokens.size(), cfg.max_len));
    }
    std::vector<std::size_t> ids;
    ids.reserve(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= cfg.vocab) {
            throw InputError(fmt::format("token id {} at position {} outside [0, {})", tokens[i], i, cfg.vocab));
        }
        ids.push_back(static_cast<std::size_t>(tokens[i]));
    }

    std::set<std::string> adaptable;
    if (patch != nullptr) {
        patch->validate();
        for (auto& m : adaptable_modules(cfg)) adaptable.insert(std::move(m));
        for (const auto& [module, f] : patch->modules) {
            if (!adaptable.contains(module)) {
                throw MergeError(fmt::format("module '{}' is not an attention or FFN weight of this model", module));
            }
            const Tensor& target = w.at(resolve_target(w, module));
            if (target.shape() != Shape{f.b.rows(), f.a.cols()}) {
                throw MergeError(fmt::format("module '{}': weight {} but the patch produces [{}, {}]", module,
                                             shape_string(target.shape()), f.b.rows(), f.a.cols()));
            }
        }
    }
    auto linear = [&](const std::string& module) {
        Linear lin{&w.at(module + ".weight"), nullptr, 1.0};
        if (patch != nullptr) {
            auto it = patch->modules.find(module);
            if (it != patch->modules.end()) {
                lin.factors = &it->second;
                lin.scaling = patch->scaling();
            }
        }
        return lin;
    };

    Tensor x = w.at("embed.weight").gather_rows(ids);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::string p = fmt::format("layers.{}.", l);
        const Tensor attn = mha_projected(x, linear(p + "attn.q"), linear(p + "attn.k"), linear(p + "attn.v"),
                                          linear(p + "attn.o"), cfg);
        x = layer_norm_rows(add(x, attn), w.at(p + "ln1.gain"), w.at(p + "ln1.bias"), cfg.ln_eps);
        const Tensor ffn = ffn_projected(x, linear(p + "ffn.up"), w.at(p + "ffn.up.bias"), linear(p + "ffn.down"),
                                         w.at(p + "ffn.down.bias"), cfg.activation);
        x = layer_norm_rows(add(x, ffn), w.at(p + "ln2.gain"), w.at(p + "ln2.bias"), cfg.ln_eps);
    }
    return matmul(x, w.at("head.weight"));
}

}  // namespace

void validate_weights(const TransformerWeights& w, const TransformerConfig& cfg) {
    cfg.validate();
    std::optional<DType> dtype;
    for (const auto& e : schema(cfg)) {
        auto it = w.tensors.find(e.name);
        if (it == w.tensors.end()) throw LookupError(fmt::format("transformer weight '{}' missing", e.name));
        if (it->second.shape() != e.shape) {
            throw ShapeError(fmt::format("transformer weight '{}' has shape {}, expected {}", e.name,
                                         shape_string(it->second.shape()), shape_string(e.shape)));
        }
        if (dtype && *dtype != it->second.dtype()) {
            throw ShapeError(fmt::format("transformer weight '{}' is {} but others are {}", e.name,
                                         dtype_name(it->second.dtype()), dtype_name(*dtype)));
        }
        dtype = it->second.dtype();
    }
}

TransformerWeights init_transformer(const TransformerConfig& cfg, std::uint64_t seed, DType dtype) {
    cfg.validate();
    TransformerWeights w;
    const double inv_d = 1.0 / std::sqrt(static_cast<double>(cfg.d));
    const double inv_f = 1.0 / std::sqrt(static_cast<double>(cfg.d_ff));
    std::uint64_t stream = 0;
    for (const auto& e : schema(cfg)) {
        Distribution dist = Distribution::normal(0.0, inv_d);
        if (e.name == "embed.weight") {
            dist = Distribution::normal(0.0, 1.0);
        } else if (e.name.ends_with("ffn.down.weight")) {
            dist = Distribution::normal(0.0, inv_f);
        } else if (e.name.ends_with(".gain")) {
            dist = Distribution::normal(1.0, 0.1);
        } else if (e.name.ends_with("ln1.bias") || e.name.ends_with("ln2.bias")) {
            dist = Distribution::normal(0.0, 0.1);
        } else if (e.name.ends_with(".bias")) {
            dist = Distribution::normal(0.0, 0.02);
        }
        w.tensors.emplace(e.name, seeded_init(e.shape, derive_seed(seed, stream++), dist, dtype));
    }
    w.metadata[model_version_key] = fmt::format("tiny-transformer-seed{}", seed);
    return w;
}

std::vector<std::string> adaptable_modules(const TransformerConfig& cfg) {
    std::vector<std::string> out;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        for (const char* p : {"attn.q", "attn.k", "attn.v", "attn.o", "ffn.up", "ffn.down"}) {
            out.push_back(layer_name(l, p));
        }
    }
    return out;
}

Tensor attention_probabilities(const Tensor& x, const Tensor& wq, const Tensor& wk, bool causal) {
    const Tensor q = matmul(x, wq), k = matmul(x, wk);
    const std::size_t n = q.rows();
    const Tensor raw = matmul(q, transpose(k));
    const double root = std::sqrt(static_cast<double>(q.cols()));
    std::vector<double> scores(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            scores[i * n + j] = causal && j > i ? -std::numeric_limits<double>::infinity() : raw(i, j) / root;
    return softmax_rows(Tensor::from_values({n, n}, std::move(scores), q.dtype()));
}

Tensor attention_head(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv, bool causal) {
    if (!x.is_matrix() || !wq.is_matrix() || wq.shape() != wk.shape() || wq.shape() != wv.shape() ||
        wq.rows() != x.cols()) {
        throw ShapeError(fmt::format("attention_head: x {} with wq {} wk {} wv {}", shape_string(x.shape()),
                                     shape_string(wq.shape()), shape_string(wk.shape()), shape_string(wv.shape())));
    }
    return attend(matmul(x, wq), matmul(x, wk), matmul(x, wv), causal);
}

Tensor multi_head_attention(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                            const Tensor& wo, const TransformerConfig& cfg) {
    if (cfg.heads == 0 || cfg.d % cfg.heads != 0) {
        throw ConfigError(fmt::format("head count {} does not divide hidden width {}", cfg.heads, cfg.d));
    }
    const Shape square{cfg.d, cfg.d};
    if (!x.is_matrix() || x.cols() != cfg.d || wq.shape() != square || wk.shape() != square ||
        wv.shape() != square || wo.shape() != square) {
        throw ShapeError("multi_head_attention: projections must be [d, d] and x must have d columns");
    }
    return mha_projected(x, Linear{&wq}, Linear{&wk}, Linear{&wv}, Linear{&wo}, cfg);
}

Tensor feed_forward(const Tensor& x, const Tensor& w_up, const Tensor& b1, const Tensor& w_down, const Tensor& b2,
                    Activation activation) {
    if (!x.is_matrix() || !w_up.is_matrix() || !w_down.is_matrix() || x.cols() != w_up.rows() ||
        w_up.cols() != w_down.rows() || w_down.cols() != x.cols()) {
        throw ShapeError(fmt::format("feed_forward: x {} w_up {} w_down {}", shape_string(x.shape()),
                                     shape_string(w_up.shape()), shape_string(w_down.shape())));
    }
    return ffn_projected(x, Linear{&w_up}, b1, Linear{&w_down}, b2, activation);
}

Tensor forward(const TransformerWeights& w, const TransformerConfig& cfg, std::span<const std::int64_t> tokens) {
    return run(w, nullptr, cfg, tokens);
}

Tensor forward_with_patch(const TransformerWeights& base, const LoraPatch& patch, const TransformerConfig& cfg,
                          std::span<const std::int64_t> tokens) {
    return run(base, patch.empty() ? nullptr : &patch, cfg, tokens);
}

}  // namespace portpatch
