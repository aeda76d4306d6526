#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "portpatch/checkpoint.hpp"
#include "portpatch/lora.hpp"
#include "portpatch/tensor.hpp"

namespace portpatch {

enum class Activation { relu, gelu };  // gelu is the exact erf form

struct TransformerConfig {
    std::size_t d = 16;        // hidden width
    std::size_t heads = 2;
    std::size_t d_ff = 32;     // FFN hidden width
    std::size_t layers = 2;    // may be 0
    std::size_t vocab = 11;
    std::size_t max_len = 16;
    Activation activation = Activation::gelu;
    bool causal = true;
    double ln_eps = 1e-5;

    std::size_t head_dim() const { return d / heads; }
    void validate() const;  // ConfigError
};

// Weights are a plain checkpoint following
//   embed.weight [V, d], head.weight [d, V],
//   layers.{l}.attn.{q,k,v,o}.weight [d, d],
//   layers.{l}.ffn.up.weight [d, d_ff], layers.{l}.ffn.up.bias [d_ff],
//   layers.{l}.ffn.down.weight [d_ff, d], layers.{l}.ffn.down.bias [d],
//   layers.{l}.{ln1,ln2}.{gain,bias} [d].
// Activations multiply from the left (x W), so a weight's rows are its inputs.
using TransformerWeights = Checkpoint;

void validate_weights(const TransformerWeights& w, const TransformerConfig& cfg);
TransformerWeights init_transformer(const TransformerConfig& cfg, std::uint64_t seed, DType dtype = DType::f64);

/// Module paths a patch may target: layers.{l}.attn.{q,k,v,o} and layers.{l}.ffn.{up,down}.
std::vector<std::string> adaptable_modules(const TransformerConfig& cfg);

/// softmax((x wq)(x wk)^T / sqrt(d_H) + causal mask), rows sum to one.
Tensor attention_probabilities(const Tensor& x, const Tensor& wq, const Tensor& wk, bool causal);

Tensor attention_head(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv, bool causal);

/// Packed [d, d] projections, sliced column-wise per head.
Tensor multi_head_attention(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                            const Tensor& wo, const TransformerConfig& cfg);

Tensor feed_forward(const Tensor& x, const Tensor& w_up, const Tensor& b1, const Tensor& w_down, const Tensor& b2,
                    Activation activation);

/// Post-LN stack: x <- LN1(x + MHA(x)); x <- LN2(x + FFN(x)); logits = x head.
Tensor forward(const TransformerWeights& w, const TransformerConfig& cfg, std::span<const std::int64_t> tokens);

/// Same network with the adapter applied on the fly: x W + (alpha/r) (x B) A.
Tensor forward_with_patch(const TransformerWeights& base, const LoraPatch& patch, const TransformerConfig& cfg,
                          std::span<const std::int64_t> tokens);

}  // namespace portpatch
