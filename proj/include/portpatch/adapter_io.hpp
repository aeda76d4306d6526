#pragma once

#include <filesystem>

#include "portpatch/checkpoint.hpp"
#include "portpatch/lora.hpp"

namespace portpatch {

// Adapter naming: module path P is stored as "P.lora_A.weight" (rank x cols)
// and "P.lora_B.weight" (rows x rank). Metadata keys "rank", "alpha" and
// "target_modules" (comma-joined) are written for every adapter.

inline constexpr const char* lora_a_suffix = ".lora_A.weight";
inline constexpr const char* lora_b_suffix = ".lora_B.weight";

Checkpoint adapter_to_checkpoint(const LoraPatch& patch);
LoraPatch adapter_from_checkpoint(const Checkpoint& ckpt);

LoraPatch read_adapter(const std::filesystem::path& path);
void write_adapter(const std::filesystem::path& path, const LoraPatch& patch);

/// True when every tensor name follows the adapter naming convention.
bool looks_like_adapter(const Checkpoint& ckpt);

}  // namespace portpatch
