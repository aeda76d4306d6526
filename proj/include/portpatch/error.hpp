#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace portpatch {

enum class ErrorCategory {
    usage,
    io,
    parse,
    adapter_format,
    shape,
    lookup,
    merge,
    compatibility,
    parameter,
    config,
    input,
    numerical,
    fit,
};

std::string_view category_name(ErrorCategory c) noexcept;

/// Every failure raised by the library carries a category so callers (the CLI
/// in particular) can map it onto an exit code without string matching.
class Error : public std::runtime_error {
public:
    Error(ErrorCategory category, const std::string& message)
        : std::runtime_error(message), category_(category) {}

    ErrorCategory category() const noexcept { return category_; }

private:
    ErrorCategory category_;
};

#define PORTPATCH_DEFINE_ERROR(Name, cat)                                   \
    class Name : public Error {                                             \
    public:                                                                 \
        explicit Name(const std::string& message) : Error(cat, message) {}  \
    }

PORTPATCH_DEFINE_ERROR(UsageError, ErrorCategory::usage);
PORTPATCH_DEFINE_ERROR(IoError, ErrorCategory::io);
PORTPATCH_DEFINE_ERROR(ParseError, ErrorCategory::parse);
PORTPATCH_DEFINE_ERROR(AdapterFormatError, ErrorCategory::adapter_format);
PORTPATCH_DEFINE_ERROR(ShapeError, ErrorCategory::shape);
PORTPATCH_DEFINE_ERROR(LookupError, ErrorCategory::lookup);
PORTPATCH_DEFINE_ERROR(MergeError, ErrorCategory::merge);
PORTPATCH_DEFINE_ERROR(CompatibilityError, ErrorCategory::compatibility);
PORTPATCH_DEFINE_ERROR(ParameterError, ErrorCategory::parameter);
PORTPATCH_DEFINE_ERROR(ConfigError, ErrorCategory::config);
PORTPATCH_DEFINE_ERROR(InputError, ErrorCategory::input);
PORTPATCH_DEFINE_ERROR(NumericalError, ErrorCategory::numerical);
PORTPATCH_DEFINE_ERROR(FitError, ErrorCategory::fit);

#undef PORTPATCH_DEFINE_ERROR

}  // namespace portpatch
