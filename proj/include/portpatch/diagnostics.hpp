#pragma once

#include <map>
#include <string>
#include <string_view>

#include "portpatch/checkpoint.hpp"
#include "portpatch/lora.hpp"
#include "portpatch/tensor.hpp"

namespace portpatch {

struct TermMetrics {
    double sigma_max = 0.0;
    double fro = 0.0;
    friend bool operator==(const TermMetrics&, const TermMetrics&) = default;
};

/// sigma_max by power iteration and the Frobenius norm, both in 64-bit.
TermMetrics term_metrics(const Tensor& t);

/// num / den, or +inf when den == 0.
double ratio(double num, double den);

struct TermComparison {
    TermMetrics naive;     // theta' + delta(old)
    TermMetrics residual;  // delta(new) - delta(old)
    double ratio_sigma = 0.0;
    double ratio_fro = 0.0;

    static TermComparison of(const TermMetrics& naive, const TermMetrics& residual);
    friend bool operator==(const TermComparison&, const TermComparison&) = default;
};

struct MeanRatio {
    double ratio_sigma = 0.0;
    double ratio_fro = 0.0;
    friend bool operator==(const MeanRatio&, const MeanRatio&) = default;
};

struct NegligibilityReport {
    Metadata provenance;
    std::map<std::string, TermComparison> per_module;
    // Block-diagonal aggregate: sigma_max is the max over modules, fro the
    // root of the summed squares.
    TermComparison aggregate;
    // Arithmetic mean of the per-module ratios.
    MeanRatio mean_ratio;

    friend bool operator==(const NegligibilityReport&, const NegligibilityReport&) = default;
};

/// Builds aggregate and mean_ratio from already measured per-module terms.
NegligibilityReport assemble_report(std::map<std::string, TermComparison> per_module, Metadata provenance = {});

NegligibilityReport negligibility_report(const Checkpoint& theta_prime, const LoraPatch& patch_old,
                                         const LoraPatch& patch_new);

enum class ReportFormat { json, markdown };

ReportFormat parse_report_format(std::string_view name);  // "json", "md" or "markdown"

/// JSON: keys in the order provenance, per_module, aggregate, mean_ratio;
/// numbers with 17 significant digits; infinite ratios as the string "inf".
/// Markdown: one column per module plus the aggregate, rows per term.
std::string render_report(const NegligibilityReport& r, ReportFormat format);

NegligibilityReport parse_report_json(std::string_view text);

}  // namespace portpatch
