#include "portpatch/diagnostics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "json.hpp"
#include "portpatch/error.hpp"
#include "portpatch/linalg.hpp"
#include "portpatch/version.hpp"

namespace portpatch {

TermMetrics term_metrics(const Tensor& t) {
    if (!t.is_matrix()) throw ShapeError(fmt::format("term_metrics: expected 2-D, got {}", shape_string(t.shape())));
    const Tensor t64 = t.astype(DType::f64);
    return {sigma_max(t64), fro_norm(t64)};
}

double ratio(double num, double den) {
    if (den == 0.0) return std::numeric_limits<double>::infinity();
    return num / den;
}

TermComparison TermComparison::of(const TermMetrics& naive, const TermMetrics& residual) {
    return {naive, residual, ratio(naive.sigma_max, residual.sigma_max), ratio(naive.fro, residual.fro)};
}

NegligibilityReport assemble_report(std::map<std::string, TermComparison> per_module, Metadata provenance) {
    NegligibilityReport r;
    r.provenance = std::move(provenance);
    r.per_module = std::move(per_module);
    TermMetrics naive, residual;
    double naive_sq = 0.0, residual_sq = 0.0, sum_sigma = 0.0, sum_fro = 0.0;
    for (const auto& [name, c] : r.per_module) {
        naive.sigma_max = std::max(naive.sigma_max, c.naive.sigma_max);
        residual.sigma_max = std::max(residual.sigma_max, c.residual.sigma_max);
        naive_sq += c.naive.fro * c.naive.fro;
        residual_sq += c.residual.fro * c.residual.fro;
        sum_sigma += c.ratio_sigma;
        sum_fro += c.ratio_fro;
    }
    naive.fro = std::sqrt(naive_sq);
    residual.fro = std::sqrt(residual_sq);
    r.aggregate = TermComparison::of(naive, residual);
    if (!r.per_module.empty()) {
        const double n = static_cast<double>(r.per_module.size());
        r.mean_ratio = {sum_sigma / n, sum_fro / n};
    }
    return r;
}

NegligibilityReport negligibility_report(const Checkpoint& theta_prime, const LoraPatch& patch_old,
                                         const LoraPatch& patch_new) {
    const ResidualPatch residual = residual_patch(patch_old, patch_new);
    std::map<std::string, TermComparison> per_module;
    for (const auto& [module, c] : residual.modules) {
        const Tensor& w = theta_prime.at(resolve_target(theta_prime, module));
        const Tensor delta = delta_weight(patch_old, module);
        if (w.shape() != delta.shape()) {
            throw MergeError(fmt::format("module '{}': weight {} but the patch produces {}", module,
                                         shape_string(w.shape()), shape_string(delta.shape())));
        }
        const Tensor naive = add(w.astype(DType::f64), delta);
        per_module.emplace(module, TermComparison::of(term_metrics(naive), term_metrics(c)));
    }
    Metadata prov;
    prov["tool"] = fmt::format("portpatch {}", version);
    prov["theta_prime_version"] = theta_prime.model_version().value_or("unknown");
    auto version_of = [](const LoraPatch& p) {
        auto it = p.metadata.find(model_version_key);
        return it == p.metadata.end() ? std::string("unknown") : it->second;
    };
    prov["patch_old_version"] = version_of(patch_old);
    prov["patch_new_version"] = version_of(patch_new);
    return assemble_report(std::move(per_module), std::move(prov));
}

ReportFormat parse_report_format(std::string_view name) {
    if (name == "json") return ReportFormat::json;
    if (name == "md" || name == "markdown") return ReportFormat::markdown;
    throw UsageError(fmt::format("unknown report format '{}' (expected json or md)", name));
}

namespace {

std::string number(double v) {
    if (std::isinf(v)) return v > 0 ? "\"inf\"" : "\"-inf\"";
    if (std::isnan(v)) return "\"nan\"";
    return fmt::format("{:.17g}", v);
}

std::string quoted(const std::string& s) { return nlohmann::json(s).dump(); }

std::string metrics_json(const TermMetrics& m) {
    return fmt::format("{{\"sigma_max\": {}, \"fro\": {}}}", number(m.sigma_max), number(m.fro));
}

std::string comparison_json(const TermComparison& c, std::string_view indent) {
    return fmt::format("{{\n{0}  \"naive\": {1},\n{0}  \"residual\": {2},\n{0}  \"ratio_sigma\": {3},\n"
                       "{0}  \"ratio_fro\": {4}\n{0}}}",
                       indent, metrics_json(c.naive), metrics_json(c.residual), number(c.ratio_sigma),
                       number(c.ratio_fro));
}

std::string render_json(const NegligibilityReport& r) {
    std::string out = "{\n  \"provenance\": {";
    bool first = true;
    for (const auto& [k, v] : r.provenance) {
        out += fmt::format("{}\n    {}: {}", first ? "" : ",", quoted(k), quoted(v));
        first = false;
    }
    out += r.provenance.empty() ? "},\n" : "\n  },\n";
    out += "  \"per_module\": {";
    first = true;
    for (const auto& [k, c] : r.per_module) {
        out += fmt::format("{}\n    {}: {}", first ? "" : ",", quoted(k), comparison_json(c, "    "));
        first = false;
    }
    out += r.per_module.empty() ? "},\n" : "\n  },\n";
    out += fmt::format("  \"aggregate\": {},\n", comparison_json(r.aggregate, "  "));
    out += fmt::format("  \"mean_ratio\": {{\"ratio_sigma\": {}, \"ratio_fro\": {}}}\n}}\n",
                       number(r.mean_ratio.ratio_sigma), number(r.mean_ratio.ratio_fro));
    return out;
}

std::string cell(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return fmt::format("{:.2f}", v);
}

std::string render_markdown(const NegligibilityReport& r) {
    std::vector<std::pair<std::string, const TermComparison*>> cols;
    for (const auto& [k, c] : r.per_module) cols.emplace_back(k, &c);
    cols.emplace_back("aggregate", &r.aggregate);

    std::string out = "| Term | |";
    std::string rule = "|---|---|";
    for (const auto& [name, _] : cols) {
        out += fmt::format(" {} |", name);
        rule += "---|";
    }
    out += " mean |\n" + rule + "---|\n";

    auto row = [&](std::string_view term, std::string_view measure, auto get, bool with_mean, double mean) {
        out += fmt::format("| {} | {} |", term, measure);
        for (const auto& [_, c] : cols) out += fmt::format(" {} |", cell(get(*c)));
        out += with_mean ? fmt::format(" {} |\n", cell(mean)) : std::string(" |\n");
    };
    constexpr std::string_view sigma = "$\\sigma_{\\max}$";
    constexpr std::string_view fro = "$\\lVert\\cdot\\rVert_F$";
    row("$\\theta^\\prime + \\Delta\\theta_i$", sigma, [](const TermComparison& c) { return c.naive.sigma_max; },
        false, 0.0);
    row("", fro, [](const TermComparison& c) { return c.naive.fro; }, false, 0.0);
    row("$\\Delta\\theta_i^\\prime - \\Delta\\theta_i$", sigma,
        [](const TermComparison& c) { return c.residual.sigma_max; }, false, 0.0);
    row("", fro, [](const TermComparison& c) { return c.residual.fro; }, false, 0.0);
    row(fmt::format("{} / {}", sigma, sigma), "", [](const TermComparison& c) { return c.ratio_sigma; }, true,
        r.mean_ratio.ratio_sigma);
    row(fmt::format("{} / {}", fro, fro), "", [](const TermComparison& c) { return c.ratio_fro; }, true,
        r.mean_ratio.ratio_fro);
    return out;
}

double read_number(const nlohmann::json& v, std::string_view field) {
    if (v.is_number()) return v.get<double>();
    if (v.is_string()) {
        const auto& s = v.get_ref<const std::string&>();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    }
    throw ParseError(fmt::format("report field '{}' is not a number", field));
}

const nlohmann::json& field(const nlohmann::json& obj, const char* key) {
    if (!obj.is_object() || !obj.contains(key)) throw ParseError(fmt::format("report is missing '{}'", key));
    return obj[key];
}

TermMetrics read_metrics(const nlohmann::json& j) {
    return {read_number(field(j, "sigma_max"), "sigma_max"), read_number(field(j, "fro"), "fro")};
}

TermComparison read_comparison(const nlohmann::json& j) {
    return {read_metrics(field(j, "naive")), read_metrics(field(j, "residual")),
            read_number(field(j, "ratio_sigma"), "ratio_sigma"), read_number(field(j, "ratio_fro"), "ratio_fro")};
}

}  // namespace

std::string render_report(const NegligibilityReport& r, ReportFormat format) {
    return format == ReportFormat::json ? render_json(r) : render_markdown(r);
}

NegligibilityReport parse_report_json(std::string_view text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& ex) {
        throw ParseError(fmt::format("malformed report JSON: {}", ex.what()));
    }
    NegligibilityReport r;
    for (const auto& [k, v] : field(j, "provenance").items()) {
        if (!v.is_string()) throw ParseError(fmt::format("provenance '{}' must be a string", k));
        r.provenance[k] = v.get<std::string>();
    }
    for (const auto& [k, v] : field(j, "per_module").items()) r.per_module.emplace(k, read_comparison(v));
    r.aggregate = read_comparison(field(j, "aggregate"));
    const auto& mean = field(j, "mean_ratio");
    r.mean_ratio = {read_number(field(mean, "ratio_sigma"), "ratio_sigma"),
                    read_number(field(mean, "ratio_fro"), "ratio_fro")};
    return r;
}

}  // namespace portpatch
