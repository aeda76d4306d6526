#include "portpatch/error.hpp"

namespace portpatch {

std::string_view category_name(ErrorCategory c) noexcept {
    switch (c) {
    case ErrorCategory::usage: return "usage";
    case ErrorCategory::io: return "io";
    case ErrorCategory::parse: return "parse";
    case ErrorCategory::adapter_format: return "adapter-format";
    case ErrorCategory::shape: return "shape";
    case ErrorCategory::lookup: return "lookup";
    case ErrorCategory::merge: return "merge";
    case ErrorCategory::compatibility: return "compatibility";
    case ErrorCategory::parameter: return "parameter";
    case ErrorCategory::config: return "config";
    case ErrorCategory::input: return "input";
    case ErrorCategory::numerical: return "numerical";
    case ErrorCategory::fit: return "fit";
    }
    return "unknown";
}

}  // namespace portpatch
