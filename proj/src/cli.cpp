#include "portpatch/cli.hpp"

#include <cstdlib>
#include <exception>
#include <filesystem>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "CLI11.hpp"
#include "portpatch/adapter_io.hpp"
#include "portpatch/checkpoint.hpp"
#include "portpatch/diagnostics.hpp"
#include "portpatch/error.hpp"
#include "portpatch/evolution.hpp"
#include "portpatch/linalg.hpp"
#include "portpatch/lora.hpp"
#include "portpatch/version.hpp"

namespace portpatch {

namespace fs = std::filesystem;

namespace {

void require_input(const fs::path& p, std::string_view flag) {
    std::error_code ec;
    if (!fs::is_regular_file(p, ec)) throw IoError(fmt::format("{}: '{}' is not a readable file", flag, p.string()));
}

void require_output(const fs::path& p, std::string_view flag) {
    std::error_code ec;
    if (fs::is_directory(p, ec)) throw IoError(fmt::format("{}: '{}' is a directory", flag, p.string()));
    const fs::path parent = p.has_parent_path() ? p.parent_path() : fs::path(".");
    if (!fs::is_directory(parent, ec)) {
        throw IoError(fmt::format("{}: directory '{}' does not exist", flag, parent.string()));
    }
}

void require_output_dir(const fs::path& p, std::string_view flag) {
    std::error_code ec;
    if (fs::exists(p, ec)) {
        if (!fs::is_directory(p, ec)) throw IoError(fmt::format("{}: '{}' is not a directory", flag, p.string()));
        return;
    }
    const fs::path parent = p.has_parent_path() ? p.parent_path() : fs::path(".");
    if (!fs::is_directory(parent, ec)) {
        throw IoError(fmt::format("{}: parent directory '{}' does not exist", flag, parent.string()));
    }
}

int category_exit(ErrorCategory c) {
    switch (c) {
        case ErrorCategory::usage: return exit_usage;
        case ErrorCategory::numerical:
        case ErrorCategory::fit: return exit_numerical;
        default: return exit_data;
    }
}

void cmd_inspect(const fs::path& file, std::ostream& out) {
    require_input(file, "inspect");
    const Checkpoint ckpt = read_container(file);
    out << fmt::format("{}: {} tensors, {} metadata keys\n", file.string(), ckpt.tensors.size(),
                       ckpt.metadata.size());
    for (const auto& [k, v] : ckpt.metadata) out << fmt::format("  meta {} = {}\n", k, v);
    for (const auto& [name, t] : ckpt.tensors) {
        out << fmt::format("  {} {} {}\n", name, dtype_name(t.dtype()), shape_string(t.shape()));
    }
    if (looks_like_adapter(ckpt)) {
        const LoraPatch p = adapter_from_checkpoint(ckpt);
        out << fmt::format("  adapter: rank {} alpha {} scaling {} modules {}\n", p.rank, p.alpha, p.scaling(),
                           p.modules.size());
    }
}

Checkpoint diff_checkpoints(const Checkpoint& a, const Checkpoint& b) {
    std::vector<std::string> only;
    for (const auto& [name, _] : a.tensors)
        if (!b.contains(name)) only.push_back(name);
    for (const auto& [name, _] : b.tensors)
        if (!a.contains(name)) only.push_back(name);
    if (!only.empty()) {
        throw CompatibilityError(fmt::format("checkpoints hold different tensors: {}", fmt::join(only, ", ")));
    }
    Checkpoint out;
    for (const auto& [name, ta] : a.tensors) {
        const Tensor& tb = b.at(name);
        if (ta.shape() != tb.shape()) {
            throw ShapeError(fmt::format("tensor '{}': {} vs {}", name, shape_string(ta.shape()),
                                         shape_string(tb.shape())));
        }
        const DType dt = ta.dtype() == tb.dtype() ? ta.dtype() : DType::f64;
        out.tensors.emplace(name, sub(ta.astype(DType::f64), tb.astype(DType::f64)).astype(dt));
    }
    out.metadata["diff.a"] = a.model_version().value_or("unknown");
    out.metadata["diff.b"] = b.model_version().value_or("unknown");
    if (auto v = a.model_version()) out.metadata[model_version_key] = *v;
    return out;
}

std::size_t thread_budget(std::size_t jobs) {
    std::size_t n = 0;
    if (const char* env = std::getenv("PORTPATCH_THREADS")) {
        const std::string s(env);
        std::size_t pos = 0;
        try {
            n = std::stoul(s, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (s.empty() || pos != s.size()) {
            throw ConfigError(fmt::format("PORTPATCH_THREADS='{}' is not a non-negative integer", s));
        }
    }
    if (n == 0) n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    return std::max<std::size_t>(1, std::min(n, jobs));
}

void cmd_simulate(const std::optional<fs::path>& config, const fs::path& out_dir, std::size_t seeds,
                  std::ostream& out) {
    if (config) require_input(*config, "--config");
    require_output_dir(out_dir, "--out-dir");
    if (seeds == 0) throw UsageError("--seeds must be >= 1");
    const SimConfig base = config ? read_sim_config(*config) : SimConfig{};
    base.validate();

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError(fmt::format("cannot create '{}': {}", out_dir.string(), ec.message()));

    std::vector<std::optional<NegligibilityReport>> reports(seeds);
    std::vector<std::exception_ptr> failures(seeds);
    std::size_t next = 0;
    std::mutex lock;
    auto worker = [&] {
        for (;;) {
            std::size_t i;
            {
                std::lock_guard guard(lock);
                if (next == seeds) return;
                i = next++;
            }
            try {
                SimConfig cfg = base;
                cfg.seed = base.seed + i;
                const SimQuadruple q = run_cycle(cfg);
                const fs::path dir = out_dir / fmt::format("seed_{}", cfg.seed);
                write_quadruple(dir, q);
                NegligibilityReport r = negligibility_report(q.theta_prime, q.patch_i, q.patch_i_prime);
                write_text_atomic(dir / "report.json", render_report(r, ReportFormat::json));
                reports[i] = std::move(r);
            } catch (...) {
                failures[i] = std::current_exception();
            }
        }
    };
    const std::size_t threads = thread_budget(seeds);
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    for (const auto& f : failures)
        if (f) std::rethrow_exception(f);

    std::map<std::string, TermComparison> combined;
    for (std::size_t i = 0; i < seeds; ++i) {
        const std::uint64_t seed = base.seed + i;
        for (const auto& [module, c] : reports[i]->per_module) {
            combined.emplace(fmt::format("seed_{}/{}", seed, module), c);
        }
        out << fmt::format("seed {}: ratio_sigma {:.4f} ratio_fro {:.4f}\n", seed,
                           reports[i]->aggregate.ratio_sigma, reports[i]->aggregate.ratio_fro);
    }
    Metadata prov{{"tool", fmt::format("portpatch {}", version)},
                  {"seeds", fmt::format("{}..{}", base.seed, base.seed + seeds - 1)},
                  {"config", format_sim_config(base)}};
    const NegligibilityReport all = assemble_report(std::move(combined), std::move(prov));
    write_text_atomic(out_dir / "report.json", render_report(all, ReportFormat::json));
    out << fmt::format("aggregate: ratio_sigma {:.4f} ratio_fro {:.4f}\n", all.aggregate.ratio_sigma,
                       all.aggregate.ratio_fro);
}

}  // namespace

int run_cli(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Merge, port and diagnose low-rank adapter patches", "portpatch"};
    app.set_version_flag("--version", version);
    app.require_subcommand(1, 1);

    std::string file;
    auto* inspect = app.add_subcommand("inspect", "List tensors and metadata of a container");
    inspect->add_option("file", file, "container file")->required();

    std::string base, adapter, output;
    auto* merge_cmd = app.add_subcommand("merge", "Materialize an adapter into a base checkpoint");
    merge_cmd->add_option("--base", base)->required();
    merge_cmd->add_option("--adapter", adapter)->required();
    merge_cmd->add_option("--out", output)->required();

    std::string updated, patch;
    auto* port_cmd = app.add_subcommand("port", "Apply an adapter fitted on an older model to an updated one");
    port_cmd->add_option("--updated", updated)->required();
    port_cmd->add_option("--patch", patch)->required();
    port_cmd->add_option("--out", output)->required();

    std::string a, b;
    auto* diff_cmd = app.add_subcommand("diff", "Tensor-wise difference a - b");
    diff_cmd->add_option("--a", a)->required();
    diff_cmd->add_option("--b", b)->required();
    diff_cmd->add_option("--out", output)->required();

    std::string diff;
    std::size_t rank = 0;
    auto* extract_cmd = app.add_subcommand("extract", "Compress a dense difference into a rank-r adapter");
    extract_cmd->add_option("--diff", diff)->required();
    extract_cmd->add_option("--rank", rank)->required();
    extract_cmd->add_option("--out", output)->required();

    std::string patch_old, patch_new, format = "json";
    std::optional<std::string> report_out;
    auto* diagnose_cmd = app.add_subcommand("diagnose", "Compare the naive-update and residual terms");
    diagnose_cmd->add_option("--updated", updated)->required();
    diagnose_cmd->add_option("--patch-old", patch_old)->required();
    diagnose_cmd->add_option("--patch-new", patch_new)->required();
    diagnose_cmd->add_option("--format", format)->check(CLI::IsMember({"json", "md", "markdown"}));
    diagnose_cmd->add_option("--out", report_out);

    std::optional<std::string> config;
    std::string out_dir;
    std::size_t seeds = 1;
    auto* simulate_cmd = app.add_subcommand("simulate", "Run the synthetic evolution cycle per seed");
    simulate_cmd->add_option("--config", config);
    simulate_cmd->add_option("--out-dir", out_dir)->required();
    simulate_cmd->add_option("--seeds", seeds);

    std::vector<std::string> argv_store{"portpatch"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<const char*> argv;
    for (const auto& s : argv_store) argv.push_back(s.c_str());

    try {
        try {
            app.parse(static_cast<int>(argv.size()), argv.data());
        } catch (const CLI::CallForHelp&) {
            out << app.help();
            return exit_ok;
        } catch (const CLI::CallForVersion&) {
            out << version << "\n";
            return exit_ok;
        } catch (const CLI::ParseError& ex) {
            throw UsageError(ex.what());
        }

        if (*inspect) {
            cmd_inspect(file, out);
        } else if (*merge_cmd) {
            require_input(base, "--base");
            require_input(adapter, "--adapter");
            require_output(output, "--out");
            write_container(output, merge(read_container(base), read_adapter(adapter)));
        } else if (*port_cmd) {
            require_input(updated, "--updated");
            require_input(patch, "--patch");
            require_output(output, "--out");
            const Checkpoint result = port(read_container(updated), read_adapter(patch));
            if (auto it = result.metadata.find("port.warning"); it != result.metadata.end()) {
                err << fmt::format("warning: {}\n", it->second);
            }
            write_container(output, result);
        } else if (*diff_cmd) {
            require_input(a, "--a");
            require_input(b, "--b");
            require_output(output, "--out");
            write_container(output, diff_checkpoints(read_container(a), read_container(b)));
        } else if (*extract_cmd) {
            require_input(diff, "--diff");
            require_output(output, "--out");
            write_adapter(output, extract_patch(read_container(diff), rank));
        } else if (*diagnose_cmd) {
            require_input(updated, "--updated");
            require_input(patch_old, "--patch-old");
            require_input(patch_new, "--patch-new");
            if (report_out) require_output(*report_out, "--out");
            const auto report =
                negligibility_report(read_container(updated), read_adapter(patch_old), read_adapter(patch_new));
            const std::string text = render_report(report, parse_report_format(format));
            if (report_out) {
                write_text_atomic(*report_out, text);
            } else {
                out << text;
            }
        } else if (*simulate_cmd) {
            cmd_simulate(config ? std::optional<fs::path>(*config) : std::nullopt, out_dir, seeds, out);
        }
        return exit_ok;
    } catch (const Error& ex) {
        err << fmt::format("ERROR({}): {}\n", category_name(ex.category()), ex.what());
        return category_exit(ex.category());
    } catch (const std::exception& ex) {
        err << fmt::format("ERROR(internal): {}\n", ex.what());
        return exit_data;
    }
}

}  // namespace portpatch
