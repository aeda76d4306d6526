#include "portpatch/adapter_io.hpp"

#include <charconv>
#include <cmath>
#include <optional>
#include <set>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "portpatch/error.hpp"

namespace portpatch {

namespace {

constexpr std::string_view rank_key = "rank";
constexpr std::string_view alpha_key = "alpha";
constexpr std::string_view targets_key = "target_modules";

bool is_reserved(const std::string& key) {
    return key == rank_key || key == alpha_key || key == targets_key;
}

std::optional<std::string> strip_suffix(const std::string& name, std::string_view suffix) {
    if (name.size() > suffix.size() && name.ends_with(suffix)) return name.substr(0, name.size() - suffix.size());
    return std::nullopt;
}

std::size_t parse_rank(const std::string& text) {
    std::size_t value = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc() || ptr != text.data() + text.size() || value == 0) {
        throw AdapterFormatError(fmt::format("metadata rank '{}' is not a positive integer", text));
    }
    return value;
}

double parse_alpha(const std::string& text) {
    double value = 0.0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc() || ptr != text.data() + text.size() || !std::isfinite(value)) {
        throw AdapterFormatError(fmt::format("metadata alpha '{}' is not a finite number", text));
    }
    return value;
}

}  // namespace

bool looks_like_adapter(const Checkpoint& ckpt) {
    if (ckpt.tensors.empty()) return ckpt.metadata.contains(std::string(rank_key));
    for (const auto& [name, _] : ckpt.tensors) {
        if (!strip_suffix(name, lora_a_suffix) && !strip_suffix(name, lora_b_suffix)) return false;
    }
    return true;
}

Checkpoint adapter_to_checkpoint(const LoraPatch& patch) {
    patch.validate();
    Checkpoint ckpt;
    for (const auto& [k, v] : patch.metadata) {
        if (!is_reserved(k)) ckpt.metadata[k] = v;
    }
    ckpt.metadata[std::string(rank_key)] = fmt::format("{}", patch.rank);
    ckpt.metadata[std::string(alpha_key)] = fmt::format("{}", patch.alpha);
    ckpt.metadata[std::string(targets_key)] = fmt::format("{}", fmt::join(patch.module_names(), ","));
    for (const auto& [module, f] : patch.modules) {
        ckpt.tensors.emplace(module + lora_a_suffix, f.a);
        ckpt.tensors.emplace(module + lora_b_suffix, f.b);
    }
    return ckpt;
}

LoraPatch adapter_from_checkpoint(const Checkpoint& ckpt) {
    std::map<std::string, const Tensor*> as, bs;
    for (const auto& [name, t] : ckpt.tensors) {
        if (auto m = strip_suffix(name, lora_a_suffix)) {
            as.emplace(*m, &t);
        } else if (auto m2 = strip_suffix(name, lora_b_suffix)) {
            bs.emplace(*m2, &t);
        } else {
            throw AdapterFormatError(fmt::format("tensor '{}' does not follow the '<module>{}' / '<module>{}' naming",
                                                 name, lora_a_suffix, lora_b_suffix));
        }
    }
    for (const auto& [m, _] : as) {
        if (!bs.contains(m)) throw AdapterFormatError(fmt::format("orphan lora_A for module '{}'", m));
    }
    for (const auto& [m, _] : bs) {
        if (!as.contains(m)) throw AdapterFormatError(fmt::format("orphan lora_B for module '{}'", m));
    }

    LoraPatch patch;
    for (const auto& [k, v] : ckpt.metadata) {
        if (!is_reserved(k)) patch.metadata[k] = v;
    }

    auto rank_it = ckpt.metadata.find(std::string(rank_key));
    if (rank_it != ckpt.metadata.end()) {
        patch.rank = parse_rank(rank_it->second);
    } else if (!as.empty()) {
        // No declared rank: accept it only if every factor agrees.
        const auto* first = as.begin()->second;
        if (!first->is_matrix()) throw AdapterFormatError("lora_A factors must be 2-D");
        patch.rank = first->rows();
    }

    for (const auto& [m, a] : as) {
        const Tensor* b = bs.at(m);
        if (!a->is_matrix() || !b->is_matrix()) {
            throw AdapterFormatError(fmt::format("module '{}': lora factors must be 2-D", m));
        }
        if (a->rows() != patch.rank || b->cols() != patch.rank) {
            throw AdapterFormatError(fmt::format("module '{}': rank mismatch, rank {} but lora_A {} and lora_B {}", m,
                                                 patch.rank, shape_string(a->shape()), shape_string(b->shape())));
        }
        patch.modules.emplace(m, LoraFactors{*a, *b});
    }

    auto alpha_it = ckpt.metadata.find(std::string(alpha_key));
    patch.alpha = alpha_it != ckpt.metadata.end() ? parse_alpha(alpha_it->second) : static_cast<double>(patch.rank);

    auto targets_it = ckpt.metadata.find(std::string(targets_key));
    if (targets_it != ckpt.metadata.end()) {
        const auto names = patch.module_names();
        const std::string expected = fmt::format("{}", fmt::join(names, ","));
        std::set<std::string> declared;
        std::string_view rest = targets_it->second;
        while (!rest.empty()) {
            auto comma = rest.find(',');
            declared.emplace(rest.substr(0, comma));
            rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
        }
        std::set<std::string> actual(names.begin(), names.end());
        if (declared != actual) {
            throw AdapterFormatError(fmt::format("target_modules '{}' does not match the stored factors '{}'",
                                                 targets_it->second, expected));
        }
    }
    patch.validate();
    return patch;
}

LoraPatch read_adapter(const std::filesystem::path& path) {
    try {
        return adapter_from_checkpoint(read_container(path));
    } catch (const AdapterFormatError& ex) {
        throw AdapterFormatError(fmt::format("{}: {}", path.string(), ex.what()));
    }
}

void write_adapter(const std::filesystem::path& path, const LoraPatch& patch) {
    write_container(path, adapter_to_checkpoint(patch));
}

}  // namespace portpatch
