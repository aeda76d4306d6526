#pragma once

#include <array>
#include <cstdint>

namespace portpatch {

/// splitmix64 finalizer (Steele, Lea, Flood). Used for seeding and for
/// deriving independent sub-stream seeds.
std::uint64_t splitmix64_mix(std::uint64_t z) noexcept;

/// Seed of sub-stream `stream` of `base`: mix(base + (stream + 1) * golden).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) noexcept;

/// xoshiro256** 1.0 (Blackman & Vigna). The state is filled with four
/// successive splitmix64 outputs starting from the seed, so any 64-bit seed
/// (including 0) yields a valid non-zero state.
class Xoshiro256 {
public:
    explicit Xoshiro256(std::uint64_t seed) noexcept;
    static Xoshiro256 from_state(const std::array<std::uint64_t, 4>& state) noexcept;

    std::uint64_t next() noexcept;

    /// 53-bit uniform in [0, 1).
    double uniform() noexcept;

    /// Standard normal via Box-Muller, one variate per two uniforms:
    /// sqrt(-2 ln(1 - u1)) * cos(2 pi u2).
    double normal() noexcept;

    const std::array<std::uint64_t, 4>& state() const noexcept { return s_; }

private:
    Xoshiro256() = default;
    std::array<std::uint64_t, 4> s_{};
};

}  // namespace portpatch
