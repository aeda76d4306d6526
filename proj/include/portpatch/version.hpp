#pragma once

namespace portpatch {

inline constexpr const char* version = "0.1.0";

}  // namespace portpatch
