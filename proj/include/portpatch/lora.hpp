#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "portpatch/checkpoint.hpp"
#include "portpatch/tensor.hpp"

namespace portpatch {

/// One adapted module: delta = (alpha / rank) * b * a.
struct LoraFactors {
    Tensor a;  // rank x cols of the target weight
    Tensor b;  // rows of the target weight x rank

    friend bool operator==(const LoraFactors&, const LoraFactors&) = default;
};

struct LoraPatch {
    std::map<std::string, LoraFactors> modules;  // keyed by module path
    std::size_t rank = 1;
    double alpha = 1.0;
    Metadata metadata;  // extra keys carried through serialization (e.g. model_version)

    double scaling() const { return alpha / static_cast<double>(rank); }
    bool empty() const { return modules.empty(); }
    std::vector<std::string> module_names() const;

    /// Throws AdapterFormatError on rank < 1, non-matrix factors, or inner-dim
    /// mismatch with `rank`.
    void validate() const;

    friend bool operator==(const LoraPatch&, const LoraPatch&) = default;
};

/// Dense per-module residual C = delta(new) - delta(old).
struct ResidualPatch {
    std::map<std::string, Tensor> modules;

    /// sqrt of the sum of per-module squared Frobenius norms, in name order.
    double fro_norm() const;
};

/// Name of the checkpoint tensor a module path targets: "P.weight" when present,
/// otherwise "P" itself. Throws MergeError if neither exists.
std::string resolve_target(const Checkpoint& ckpt, const std::string& module);

Tensor delta_weight(const LoraPatch& patch, const std::string& module);

Checkpoint merge(const Checkpoint& base, const LoraPatch& patch);

/// Same arithmetic as merge(); records source/target model versions in the
/// result metadata ("port.*" keys) and a "port.warning" when either is missing.
Checkpoint port(const Checkpoint& updated, const LoraPatch& patch);

ResidualPatch residual_patch(const LoraPatch& old_patch, const LoraPatch& new_patch);

/// Best rank-r approximation of `diff` by truncated SVD: b = U_r diag(s_r), a = V_r^T.
LoraFactors extract_adapter(const Tensor& diff, std::size_t r);

/// Applies extract_adapter to every 2-D tensor of `diff`; module paths drop a
/// trailing ".weight". 1-D tensors are skipped. alpha = r.
LoraPatch extract_patch(const Checkpoint& diff, std::size_t r);

/// Seeded random factors for the given modules of `base`.
LoraPatch random_patch(const Checkpoint& base, std::span<const std::string> modules, std::size_t rank,
                       double alpha, double scale, std::uint64_t seed, DType dtype = DType::f64);

}  // namespace portpatch
