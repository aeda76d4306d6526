#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "portpatch/tensor.hpp"

namespace portpatch {

using Metadata = std::map<std::string, std::string>;

/// Named tensors plus string metadata. Iteration is lexicographic by name.
struct Checkpoint {
    std::map<std::string, Tensor> tensors;
    Metadata metadata;

    bool contains(const std::string& name) const { return tensors.contains(name); }
    const Tensor& at(const std::string& name) const;  // LookupError when absent
    std::optional<std::string> model_version() const;

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline constexpr const char* model_version_key = "model_version";
inline constexpr const char* metadata_header_key = "__metadata__";

// Single-file tensor container:
//   u64 little-endian header length N
//   N bytes UTF-8 JSON header, right-padded with spaces so 8 + N is a multiple of 8
//   payload: raw little-endian row-major tensor bytes
// The header maps each tensor name to {"dtype","shape","data_offsets"} with
// offsets relative to the payload start. "__metadata__" (when metadata is
// non-empty) comes first, then tensors in lexicographic order with ascending
// offsets. The JSON is compact and contains no floating-point numbers.

std::vector<std::uint8_t> encode_container(const Checkpoint& ckpt);
Checkpoint decode_container(std::span<const std::uint8_t> bytes);

/// Writes through a temporary sibling file and renames it into place.
void write_container(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_container(const std::filesystem::path& path);

/// Atomic whole-file write shared by every output path of the toolkit.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace portpatch
