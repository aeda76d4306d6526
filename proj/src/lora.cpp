#include "portpatch/lora.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "portpatch/error.hpp"
#include "portpatch/linalg.hpp"
#include "portpatch/rng.hpp"

namespace portpatch {

std::vector<std::string> LoraPatch::module_names() const {
    std::vector<std::string> names;
    names.reserve(modules.size());
    for (const auto& [name, _] : modules) names.push_back(name);
    return names;
}

void LoraPatch::validate() const {
    if (rank < 1) throw AdapterFormatError("adapter rank must be >= 1");
    for (const auto& [name, f] : modules) {
        if (!f.a.is_matrix() || !f.b.is_matrix()) {
            throw AdapterFormatError(fmt::format("module '{}': lora factors must be 2-D", name));
        }
        if (f.a.rows() != rank || f.b.cols() != rank) {
            throw AdapterFormatError(fmt::format("module '{}': rank mismatch, rank {} but lora_A {} and lora_B {}",
                                                 name, rank, shape_string(f.a.shape()),
                                                 shape_string(f.b.shape())));
        }
        if (!f.a.all_finite() || !f.b.all_finite()) {
            throw AdapterFormatError(fmt::format("module '{}': non-finite factor entries", name));
        }
    }
}

double ResidualPatch::fro_norm() const {
    double sum = 0.0;
    for (const auto& [name, c] : modules) {
        for (double v : c.values()) sum += v * v;
    }
    return std::sqrt(sum);
}

std::string resolve_target(const Checkpoint& ckpt, const std::string& module) {
    std::string weight = module + ".weight";
    if (ckpt.contains(weight)) return weight;
    if (ckpt.contains(module)) return module;
    throw MergeError(fmt::format("module '{}' not found in checkpoint (looked for '{}' and '{}')", module, weight,
                                 module));
}

Tensor delta_weight(const LoraPatch& patch, const std::string& module) {
    auto it = patch.modules.find(module);
    if (it == patch.modules.end()) throw LookupError(fmt::format("module '{}' not in patch", module));
    const Tensor ba = matmul(it->second.b.astype(DType::f64), it->second.a.astype(DType::f64));
    return scale(ba, patch.scaling());
}

namespace {

std::string patch_summary(const LoraPatch& patch) {
    auto src = patch.metadata.find(model_version_key);
    return fmt::format("rank={},alpha={},modules={},source={}", patch.rank, patch.alpha, patch.modules.size(),
                       src == patch.metadata.end() ? "unknown" : src->second);
}

Checkpoint apply_patch(const Checkpoint& base, const LoraPatch& patch) {
    patch.validate();
    Checkpoint out = base;
    for (const auto& [module, factors] : patch.modules) {
        const std::string target = resolve_target(base, module);
        const Tensor& w = base.at(target);
        const Shape delta_shape{factors.b.rows(), factors.a.cols()};
        if (w.shape() != delta_shape) {
            throw MergeError(fmt::format("module '{}': base tensor '{}' has shape {} but the patch produces {}",
                                         module, target, shape_string(w.shape()), shape_string(delta_shape)));
        }
        const Tensor delta = delta_weight(patch, module);
        // One add per element, rounded once into the base dtype.
        std::vector<double> merged(w.size());
        for (std::size_t i = 0; i < merged.size(); ++i) merged[i] = w[i] + delta[i];
        out.tensors.at(target) = Tensor::from_values(w.shape(), std::move(merged), w.dtype());
    }
    return out;
}

void record_applied(Checkpoint& ckpt, const LoraPatch& patch) {
    auto& applied = ckpt.metadata["applied_patches"];
    if (!applied.empty()) applied += ";";
    applied += patch_summary(patch);
}

}  // namespace

Checkpoint merge(const Checkpoint& base, const LoraPatch& patch) {
    if (patch.empty()) return base;
    Checkpoint out = apply_patch(base, patch);
    record_applied(out, patch);
    return out;
}

Checkpoint port(const Checkpoint& updated, const LoraPatch& patch) {
    Checkpoint out = patch.empty() ? updated : apply_patch(updated, patch);
    if (!patch.empty()) record_applied(out, patch);

    const auto target = updated.model_version();
    const auto src_it = patch.metadata.find(model_version_key);
    if (target) out.metadata["port.target_version"] = *target;
    if (src_it != patch.metadata.end()) out.metadata["port.source_version"] = src_it->second;
    if (!target || src_it == patch.metadata.end()) {
        out.metadata["port.warning"] = fmt::format("model_version missing on {}; cannot confirm the patch is ported "
                                                   "across versions",
                                                   !target ? "target checkpoint" : "patch");
    } else if (*target == src_it->second) {
        out.metadata["port.warning"] = fmt::format("patch source version equals target version '{}'", *target);
    }
    return out;
}

ResidualPatch residual_patch(const LoraPatch& old_patch, const LoraPatch& new_patch) {
    const auto old_names = old_patch.module_names();
    const auto new_names = new_patch.module_names();
    if (old_names != new_names) {
        std::vector<std::string> diff;
        std::set_symmetric_difference(old_names.begin(), old_names.end(), new_names.begin(), new_names.end(),
                                      std::back_inserter(diff));
        throw CompatibilityError(fmt::format("patches target different modules: {}", fmt::join(diff, ", ")));
    }
    old_patch.validate();
    new_patch.validate();
    ResidualPatch out;
    for (const auto& name : old_names) {
        const Tensor d_old = delta_weight(old_patch, name);
        const Tensor d_new = delta_weight(new_patch, name);
        if (d_old.shape() != d_new.shape()) {
            throw CompatibilityError(fmt::format("module '{}': delta shapes differ, {} vs {}", name,
                                                 shape_string(d_old.shape()), shape_string(d_new.shape())));
        }
        out.modules.emplace(name, sub(d_new, d_old));
    }
    return out;
}

LoraFactors extract_adapter(const Tensor& diff, std::size_t r) {
    if (!diff.is_matrix()) {
        throw ShapeError(fmt::format("extract_adapter: expected a 2-D diff, got {}", shape_string(diff.shape())));
    }
    if (r == 0) throw ParameterError("extract_adapter: rank must be >= 1");
    if (r > std::min(diff.rows(), diff.cols())) {
        throw ParameterError(fmt::format("extract_adapter: rank {} exceeds min dimension of {}", r,
                                         shape_string(diff.shape())));
    }
    const SvdResult s = svd(diff.astype(DType::f64));
    const std::size_t m = diff.rows(), n = diff.cols();
    std::vector<double> b(m * r), a(r * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < r; ++j) b[i * r + j] = s.u(i, j) * s.s[j];
    for (std::size_t j = 0; j < r; ++j)
        for (std::size_t c = 0; c < n; ++c) a[j * n + c] = s.v(c, j);
    return {Tensor::from_values({r, n}, std::move(a)), Tensor::from_values({m, r}, std::move(b))};
}

LoraPatch extract_patch(const Checkpoint& diff, std::size_t r) {
    LoraPatch patch;
    patch.rank = r;
    patch.alpha = static_cast<double>(r);
    for (const auto& [name, t] : diff.tensors) {
        if (!t.is_matrix()) continue;
        std::string module = name;
        constexpr std::string_view suffix = ".weight";
        if (module.size() > suffix.size() && module.ends_with(suffix)) module.resize(module.size() - suffix.size());
        patch.modules.emplace(module, extract_adapter(t, r));
    }
    if (auto v = diff.model_version()) patch.metadata[model_version_key] = *v;
    return patch;
}

LoraPatch random_patch(const Checkpoint& base, std::span<const std::string> modules, std::size_t rank,
                       double alpha, double scale_std, std::uint64_t seed, DType dtype) {
    LoraPatch patch;
    patch.rank = rank;
    patch.alpha = alpha;
    std::uint64_t index = 0;
    for (const auto& module : modules) {
        const Tensor& w = base.at(resolve_target(base, module));
        LoraFactors f{seeded_init({rank, w.cols()}, derive_seed(seed, 2 * index), Distribution::normal(0.0, scale_std),
                                  dtype),
                      seeded_init({w.rows(), rank}, derive_seed(seed, 2 * index + 1),
                                  Distribution::normal(0.0, scale_std), dtype)};
        patch.modules.emplace(module, std::move(f));
        ++index;
    }
    return patch;
}

}  // namespace portpatch
