#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "portpatch/checkpoint.hpp"
#include "portpatch/lora.hpp"
#include "portpatch/tensor.hpp"

namespace portpatch {

struct SimConfig {
    std::size_t d = 256;
    std::size_t r_cp = 64;
    double alpha_cp = 128.0;
    std::size_t r_ds = 8;
    std::optional<double> alpha_ds;  // unset means r_ds
    double base_scale = 0.0625;
    double cp_scale = 0.015;
    std::size_t task_rank = 4;
    double task_scale = 4.0;
    double noise_std = 0.05;
    std::size_t samples = 512;
    std::size_t fit_steps = 300;
    double fit_lr = 0.05;
    double init_std = 0.0625;
    std::uint64_t seed = 0;
    std::size_t modules = 1;

    double downstream_alpha() const { return alpha_ds.value_or(static_cast<double>(r_ds)); }
    void validate() const;  // ConfigError

    friend bool operator==(const SimConfig&, const SimConfig&) = default;
};

/// Flat "key = value" lines; '#' starts a comment. Unknown or repeated keys
/// are ConfigErrors, missing keys keep their defaults.
SimConfig parse_sim_config(std::string_view text);
std::string format_sim_config(const SimConfig& cfg);
SimConfig read_sim_config(const std::filesystem::path& path);

/// Module path of simulated layer k: "layers.{k}.proj" (tensor "<path>.weight").
std::string sim_module(std::size_t k);

struct BaseAndUpdate {
    Checkpoint theta;
    Checkpoint theta_prime;
    LoraPatch cp_patch;
};

BaseAndUpdate gen_base_and_update(const SimConfig& cfg);

struct TaskDataset {
    Tensor x;        // samples x d
    Tensor y;        // samples x d
    Tensor planted;  // d x d, rank <= task_rank
};

/// y = x (w_ref + G) + noise_std * eps, all draws derived from `seed`.
TaskDataset gen_task(const SimConfig& cfg, const Tensor& w_ref, std::uint64_t seed);

/// (1/m) ||x (w + s B A) - y||_F^2 and its factor gradients.
///
/// The data enter only through x^T x = L L^T and Z = L^{-1} x^T y, so each
/// evaluation costs O(d^2 r) instead of O(m d^2):
///   loss = (||L^T w - Z + s L^T B A||^2 + ||y||^2 - ||Z||^2) / m.
class AdapterObjective {
public:
    AdapterObjective(const Tensor& w, const TaskDataset& task, double scaling);

    struct Evaluation {
        double loss = 0.0;
        Tensor grad_a;
        Tensor grad_b;
    };

    double loss(const LoraFactors& f) const;
    Evaluation evaluate(const LoraFactors& f) const;

private:
    Tensor residual(const LoraFactors& f, Tensor* lb) const;

    Tensor chol_;    // lower L
    Tensor offset_;  // L^T w - Z
    double constant_ = 0.0;
    double inv_m_ = 0.0;
    double scaling_ = 1.0;
};

struct FitOptions {
    std::size_t rank = 8;
    double alpha = 8.0;
    std::size_t steps = 300;
    double lr = 0.05;
    double init_std = 0.0625;
    std::uint64_t init_seed = 0;
};

struct FitResult {
    LoraFactors factors;
    std::vector<double> losses;  // steps + 1 entries, losses[0] at the initial factors
};

/// Plain gradient descent on both factors from A ~ N(0, init_std), B = 0.
/// Throws FitError naming the step at which the loss stops being finite.
FitResult fit_adapter(const Tensor& w, const TaskDataset& task, const FitOptions& opts);

struct ModuleFit {
    std::string module;
    std::uint64_t module_seed = 0;
    std::vector<double> losses_old;  // fit against theta
    std::vector<double> losses_new;  // fit against theta_prime
};

struct SimQuadruple {
    Checkpoint theta;
    Checkpoint theta_prime;
    LoraPatch cp_patch;
    LoraPatch patch_i;        // fitted on theta
    LoraPatch patch_i_prime;  // fitted on theta_prime, same task
    SimConfig config;
    std::vector<ModuleFit> fits;
};

SimQuadruple run_cycle(const SimConfig& cfg);

std::string provenance_json(const SimQuadruple& q);

/// theta, theta_prime, patch_i, patch_i_prime containers plus provenance.json.
void write_quadruple(const std::filesystem::path& dir, const SimQuadruple& q);

inline constexpr const char* theta_file = "theta.safetensors";
inline constexpr const char* theta_prime_file = "theta_prime.safetensors";
inline constexpr const char* patch_i_file = "patch_i.safetensors";
inline constexpr const char* patch_i_prime_file = "patch_i_prime.safetensors";
inline constexpr const char* provenance_file = "provenance.json";

}  // namespace portpatch
