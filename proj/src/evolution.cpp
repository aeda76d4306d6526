#include "portpatch/evolution.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "json.hpp"
#include "portpatch/adapter_io.hpp"
#include "portpatch/error.hpp"
#include "portpatch/linalg.hpp"
#include "portpatch/rng.hpp"
#include "portpatch/version.hpp"

namespace portpatch {

void SimConfig::validate() const {
    if (d == 0) throw ConfigError("d must be >= 1");
    if (!(r_ds < r_cp && r_cp <= d)) {
        throw ConfigError(fmt::format("need r_ds < r_cp <= d, got r_ds={} r_cp={} d={}", r_ds, r_cp, d));
    }
    if (r_ds == 0) throw ConfigError("r_ds must be >= 1");
    if (task_rank == 0 || task_rank > r_ds) {
        throw ConfigError(fmt::format("need 1 <= task_rank <= r_ds, got task_rank={} r_ds={}", task_rank, r_ds));
    }
    if (!(base_scale > 0.0) || !std::isfinite(base_scale)) throw ConfigError("base_scale must be > 0");
    const std::pair<const char*, double> non_negative[] = {
        {"cp_scale", cp_scale}, {"task_scale", task_scale}, {"noise_std", noise_std}, {"init_std", init_std}};
    for (const auto& [name, v] : non_negative) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(fmt::format("{} must be a finite value >= 0", name));
    }
    if (!std::isfinite(alpha_cp) || alpha_cp <= 0.0) throw ConfigError("alpha_cp must be > 0");
    if (alpha_ds && (!std::isfinite(*alpha_ds) || *alpha_ds <= 0.0)) throw ConfigError("alpha_ds must be > 0");
    if (samples < d) throw ConfigError(fmt::format("samples ({}) must be >= d ({})", samples, d));
    if (!(fit_lr > 0.0) || !std::isfinite(fit_lr)) throw ConfigError("fit_lr must be > 0");
    if (modules == 0) throw ConfigError("modules must be >= 1");
}

namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
    T value{};
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc() || ptr != text.data() + text.size()) {
        throw ConfigError(fmt::format("config key '{}': cannot parse '{}'", key, text));
    }
    return value;
}

using Setter = std::function<void(SimConfig&, std::string_view key, std::string_view value)>;

template <typename T>
Setter set(T SimConfig::*field) {
    return [field](SimConfig& c, std::string_view k, std::string_view v) { c.*field = parse_number<T>(k, v); };
}

const std::map<std::string, Setter, std::less<>>& setters() {
    static const std::map<std::string, Setter, std::less<>> table{
        {"d", set(&SimConfig::d)},
        {"r_cp", set(&SimConfig::r_cp)},
        {"alpha_cp", set(&SimConfig::alpha_cp)},
        {"r_ds", set(&SimConfig::r_ds)},
        {"alpha_ds",
         [](SimConfig& c, std::string_view k, std::string_view v) { c.alpha_ds = parse_number<double>(k, v); }},
        {"base_scale", set(&SimConfig::base_scale)},
        {"cp_scale", set(&SimConfig::cp_scale)},
        {"task_rank", set(&SimConfig::task_rank)},
        {"task_scale", set(&SimConfig::task_scale)},
        {"noise_std", set(&SimConfig::noise_std)},
        {"samples", set(&SimConfig::samples)},
        {"fit_steps", set(&SimConfig::fit_steps)},
        {"fit_lr", set(&SimConfig::fit_lr)},
        {"init_std", set(&SimConfig::init_std)},
        {"seed", set(&SimConfig::seed)},
        {"modules", set(&SimConfig::modules)},
    };
    return table;
}

}  // namespace

SimConfig parse_sim_config(std::string_view text) {
    SimConfig cfg;
    std::set<std::string, std::less<>> seen;
    std::size_t line_no = 0;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError(fmt::format("config line {}: expected 'key = value'", line_no));
        }
        const auto key = trim(line.substr(0, eq));
        const auto value = trim(line.substr(eq + 1));
        auto it = setters().find(key);
        if (it == setters().end()) throw ConfigError(fmt::format("config line {}: unknown key '{}'", line_no, key));
        if (!seen.emplace(key).second) {
            throw ConfigError(fmt::format("config line {}: key '{}' given twice", line_no, key));
        }
        it->second(cfg, key, value);
    }
    cfg.validate();
    return cfg;
}

std::string format_sim_config(const SimConfig& cfg) {
    std::string out;
    auto line = [&out](std::string_view k, const auto& v) { out += fmt::format("{} = {}\n", k, v); };
    line("d", cfg.d);
    line("r_cp", cfg.r_cp);
    line("alpha_cp", cfg.alpha_cp);
    line("r_ds", cfg.r_ds);
    line("alpha_ds", cfg.downstream_alpha());
    line("base_scale", cfg.base_scale);
    line("cp_scale", cfg.cp_scale);
    line("task_rank", cfg.task_rank);
    line("task_scale", cfg.task_scale);
    line("noise_std", cfg.noise_std);
    line("samples", cfg.samples);
    line("fit_steps", cfg.fit_steps);
    line("fit_lr", cfg.fit_lr);
    line("init_std", cfg.init_std);
    line("seed", cfg.seed);
    line("modules", cfg.modules);
    return out;
}

SimConfig read_sim_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(fmt::format("cannot open config '{}'", path.string()));
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return parse_sim_config(ss.str());
    } catch (const ConfigError& ex) {
        throw ConfigError(fmt::format("{}: {}", path.string(), ex.what()));
    }
}

std::string sim_module(std::size_t k) { return fmt::format("layers.{}.proj", k); }

BaseAndUpdate gen_base_and_update(const SimConfig& cfg) {
    cfg.validate();
    BaseAndUpdate out;
    out.cp_patch.rank = cfg.r_cp;
    out.cp_patch.alpha = cfg.alpha_cp;
    const auto normal = [](double sigma) { return Distribution::normal(0.0, sigma); };
    for (std::size_t k = 0; k < cfg.modules; ++k) {
        const std::uint64_t ms = derive_seed(cfg.seed, k);
        out.theta.tensors.emplace(sim_module(k) + ".weight",
                                  seeded_init({cfg.d, cfg.d}, derive_seed(ms, 1), normal(cfg.base_scale)));
        LoraFactors f{seeded_init({cfg.r_cp, cfg.d}, derive_seed(ms, 3), normal(cfg.cp_scale)),
                      seeded_init({cfg.d, cfg.r_cp}, derive_seed(ms, 2), normal(cfg.cp_scale))};
        out.cp_patch.modules.emplace(sim_module(k), std::move(f));
    }
    out.theta.metadata[model_version_key] = fmt::format("sim-theta-seed{}", cfg.seed);
    out.cp_patch.metadata[model_version_key] = out.theta.metadata[model_version_key];
    out.theta_prime = merge(out.theta, out.cp_patch);
    out.theta_prime.metadata[model_version_key] = fmt::format("sim-theta-prime-seed{}", cfg.seed);

    for (const auto& [name, w] : out.theta.tensors) {
        const std::size_t before = numerical_rank(w);
        const std::size_t after = numerical_rank(out.theta_prime.at(name));
        if (after < before) {
            throw NumericalError(fmt::format("continued update lowered the rank of '{}' from {} to {}", name, before,
                                             after));
        }
    }
    return out;
}

TaskDataset gen_task(const SimConfig& cfg, const Tensor& w_ref, std::uint64_t seed) {
    cfg.validate();
    if (w_ref.shape() != Shape{cfg.d, cfg.d}) {
        throw ShapeError(fmt::format("gen_task: reference weight {} is not [{}, {}]", shape_string(w_ref.shape()),
                                     cfg.d, cfg.d));
    }
    const auto std_normal = Distribution::normal(0.0, 1.0);
    const Tensor p = seeded_init({cfg.d, cfg.task_rank}, derive_seed(seed, 1), std_normal);
    const Tensor q = seeded_init({cfg.task_rank, cfg.d}, derive_seed(seed, 2), std_normal);
    TaskDataset t;
    t.planted = scale(matmul(p, q), cfg.task_scale / static_cast<double>(cfg.d));
    t.x = seeded_init({cfg.samples, cfg.d}, derive_seed(seed, 3), std_normal);
    const Tensor noise = seeded_init({cfg.samples, cfg.d}, derive_seed(seed, 4), std_normal);
    t.y = add(matmul(t.x, add(w_ref, t.planted)), scale(noise, cfg.noise_std));
    return t;
}

namespace {

// Lower Cholesky factor of a symmetric positive definite matrix.
Tensor cholesky(const Tensor& s) {
    const std::size_t n = s.rows();
    std::vector<double> l(n * n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        double diag = s(j, j);
        for (std::size_t k = 0; k < j; ++k) diag -= l[j * n + k] * l[j * n + k];
        if (!(diag > 0.0)) {
            throw NumericalError(fmt::format("input Gram matrix is not positive definite (pivot {})", j));
        }
        const double root = std::sqrt(diag);
        l[j * n + j] = root;
        for (std::size_t i = j + 1; i < n; ++i) {
            double v = s(i, j);
            for (std::size_t k = 0; k < j; ++k) v -= l[i * n + k] * l[j * n + k];
            l[i * n + j] = v / root;
        }
    }
    return Tensor::from_values({n, n}, std::move(l));
}

// L^{-1} rhs for lower-triangular L.
Tensor forward_substitute(const Tensor& l, const Tensor& rhs) {
    const std::size_t n = l.rows(), c = rhs.cols();
    std::vector<double> out(rhs.values().begin(), rhs.values().end());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < i; ++k) {
            const double lik = l(i, k);
            for (std::size_t j = 0; j < c; ++j) out[i * c + j] -= lik * out[k * c + j];
        }
        const double inv = 1.0 / l(i, i);
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= inv;
    }
    return Tensor::from_values({n, c}, std::move(out));
}

double squared_sum(const Tensor& t) {
    double s = 0.0;
    for (double v : t.values()) s += v * v;
    return s;
}

}  // namespace

AdapterObjective::AdapterObjective(const Tensor& w, const TaskDataset& task, double scaling) : scaling_(scaling) {
    if (!w.is_matrix() || w.rows() != w.cols() || !task.x.is_matrix() || task.x.cols() != w.rows() ||
        task.y.shape() != task.x.shape()) {
        throw ShapeError(fmt::format("objective: w {} with x {} and y {}", shape_string(w.shape()),
                                     shape_string(task.x.shape()), shape_string(task.y.shape())));
    }
    const Tensor xt = transpose(task.x);
    chol_ = cholesky(matmul(xt, task.x));
    const Tensor z = forward_substitute(chol_, matmul(xt, task.y));
    offset_ = sub(matmul(transpose(chol_), w), z);
    constant_ = std::max(squared_sum(task.y) - squared_sum(z), 0.0);
    inv_m_ = 1.0 / static_cast<double>(task.x.rows());
}

Tensor AdapterObjective::residual(const LoraFactors& f, Tensor* lb) const {
    Tensor lt_b = matmul(transpose(chol_), f.b);
    Tensor e = add(offset_, scale(matmul(lt_b, f.a), scaling_));
    if (lb != nullptr) *lb = std::move(lt_b);
    return e;
}

double AdapterObjective::loss(const LoraFactors& f) const {
    return (squared_sum(residual(f, nullptr)) + constant_) * inv_m_;
}

AdapterObjective::Evaluation AdapterObjective::evaluate(const LoraFactors& f) const {
    Tensor lb;
    const Tensor e = residual(f, &lb);
    Evaluation out;
    out.loss = (squared_sum(e) + constant_) * inv_m_;
    const double g = 2.0 * inv_m_ * scaling_;
    out.grad_b = scale(matmul(chol_, matmul(e, transpose(f.a))), g);
    out.grad_a = scale(matmul(transpose(lb), e), g);
    return out;
}

FitResult fit_adapter(const Tensor& w, const TaskDataset& task, const FitOptions& opts) {
    if (!w.is_matrix()) throw ShapeError("fit_adapter: weight must be 2-D");
    if (opts.rank == 0 || opts.rank > std::min(w.rows(), w.cols())) {
        throw ParameterError(fmt::format("fit_adapter: rank {} outside [1, {}]", opts.rank,
                                         std::min(w.rows(), w.cols())));
    }
    if (!(opts.lr > 0.0)) throw ParameterError("fit_adapter: learning rate must be > 0");
    const double s = opts.alpha / static_cast<double>(opts.rank);
    const AdapterObjective objective(w, task, s);

    FitResult out;
    out.factors.a = seeded_init({opts.rank, w.cols()}, opts.init_seed, Distribution::normal(0.0, opts.init_std));
    out.factors.b = Tensor::zeros({w.rows(), opts.rank});
    out.losses.reserve(opts.steps + 1);
    for (std::size_t step = 0; step <= opts.steps; ++step) {
        if (step == opts.steps) {
            out.losses.push_back(objective.loss(out.factors));
        } else {
            auto ev = objective.evaluate(out.factors);
            out.losses.push_back(ev.loss);
            if (std::isfinite(ev.loss)) {
                out.factors.a = sub(out.factors.a, scale(ev.grad_a, opts.lr));
                out.factors.b = sub(out.factors.b, scale(ev.grad_b, opts.lr));
            }
        }
        if (!std::isfinite(out.losses.back())) {
            throw FitError(fmt::format("fit diverged: loss is {} at step {}", out.losses.back(), step));
        }
    }
    return out;
}

SimQuadruple run_cycle(const SimConfig& cfg) {
    BaseAndUpdate base = gen_base_and_update(cfg);
    SimQuadruple q;
    q.config = cfg;
    q.patch_i.rank = q.patch_i_prime.rank = cfg.r_ds;
    q.patch_i.alpha = q.patch_i_prime.alpha = cfg.downstream_alpha();
    q.patch_i.metadata[model_version_key] = *base.theta.model_version();
    q.patch_i_prime.metadata[model_version_key] = *base.theta_prime.model_version();

    for (std::size_t k = 0; k < cfg.modules; ++k) {
        const std::string module = sim_module(k);
        const std::string tensor = module + ".weight";
        const std::uint64_t ms = derive_seed(cfg.seed, k);
        const TaskDataset task = gen_task(cfg, base.theta.at(tensor), derive_seed(ms, 10));
        const FitOptions opts{cfg.r_ds, cfg.downstream_alpha(), cfg.fit_steps, cfg.fit_lr, cfg.init_std,
                              derive_seed(ms, 11)};
        FitResult old_fit = fit_adapter(base.theta.at(tensor), task, opts);
        FitResult new_fit = fit_adapter(base.theta_prime.at(tensor), task, opts);
        q.patch_i.modules.emplace(module, std::move(old_fit.factors));
        q.patch_i_prime.modules.emplace(module, std::move(new_fit.factors));
        q.fits.push_back({module, ms, std::move(old_fit.losses), std::move(new_fit.losses)});
    }
    q.theta = std::move(base.theta);
    q.theta_prime = std::move(base.theta_prime);
    q.cp_patch = std::move(base.cp_patch);
    return q;
}

std::string provenance_json(const SimQuadruple& q) {
    nlohmann::ordered_json j;
    j["tool"] = "portpatch";
    j["version"] = version;
    j["config"] = format_sim_config(q.config);
    j["theta_version"] = q.theta.model_version().value_or("");
    j["theta_prime_version"] = q.theta_prime.model_version().value_or("");
    nlohmann::ordered_json fits = nlohmann::ordered_json::array();
    for (const auto& f : q.fits) {
        fits.push_back({{"module", f.module},
                        {"module_seed", f.module_seed},
                        {"steps", f.losses_old.size() - 1},
                        {"loss_old_initial", fmt::format("{:.17g}", f.losses_old.front())},
                        {"loss_old_final", fmt::format("{:.17g}", f.losses_old.back())},
                        {"loss_new_initial", fmt::format("{:.17g}", f.losses_new.front())},
                        {"loss_new_final", fmt::format("{:.17g}", f.losses_new.back())}});
    }
    j["fits"] = std::move(fits);
    return j.dump(2) + "\n";
}

void write_quadruple(const std::filesystem::path& dir, const SimQuadruple& q) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError(fmt::format("cannot create directory '{}': {}", dir.string(), ec.message()));
    write_container(dir / theta_file, q.theta);
    write_container(dir / theta_prime_file, q.theta_prime);
    write_adapter(dir / patch_i_file, q.patch_i);
    write_adapter(dir / patch_i_prime_file, q.patch_i_prime);
    write_text_atomic(dir / provenance_file, provenance_json(q));
}

}  // namespace portpatch
