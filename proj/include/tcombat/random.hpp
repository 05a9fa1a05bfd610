#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace tcombat {

/// Seeded xoshiro256** stream. Stream ids are separated by 2^128 jumps, so
/// per-chain streams never overlap. The sequence is fully specified here and
/// is identical across platforms.
class RngStream {
public:
    RngStream(std::uint64_t seed = 0, std::uint64_t stream_id = 0);

    std::uint64_t next_u64();
    /// Uniform on the open interval (0, 1).
    double uniform();
    double standard_normal();

    struct State {
        std::array<std::uint64_t, 4> s{};
        bool has_spare = false;
        double spare = 0.0;
        bool operator==(const State&) const = default;
    };
    State state() const { return {s_, has_spare_, spare_}; }
    void restore(const State& st);

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream_id() const { return stream_id_; }

private:
    void jump();

    std::array<std::uint64_t, 4> s_{};
    bool has_spare_ = false;
    double spare_ = 0.0;
    std::uint64_t seed_ = 0;
    std::uint64_t stream_id_ = 0;
};

/// GIG(eta, chi, psi): density proportional to x^(eta-1) exp(-(chi/x + psi x)/2), x > 0.
struct GigParams {
    double eta = 1.0;
    double chi = 1.0;
    double psi = 1.0;

    bool valid() const;
};

double draw_normal(double mean, double var, RngStream& rng);
double draw_gamma(double shape, double rate, RngStream& rng);
/// Inverse-gamma with density proportional to x^(-shape-1) exp(-scale/x).
double draw_inverse_gamma(double shape, double scale, RngStream& rng);
std::vector<double> draw_dirichlet(std::span<const double> concentration, RngStream& rng);
std::size_t draw_categorical(std::span<const double> weights, RngStream& rng);
/// Categorical draw from unnormalized log-weights (Gumbel-max).
std::size_t draw_categorical_log(std::span<const double> log_weights, RngStream& rng);

struct GigStats {
    std::uint64_t draws = 0;
    std::uint64_t proposals = 0;
    double acceptance_rate() const {
        return proposals ? static_cast<double>(draws) / static_cast<double>(proposals) : 1.0;
    }
};

/// Ratio-of-uniforms / concave-density rejection sampler (Hoermann and Leydold
/// construction) valid over the full parameter range, with exact gamma and
/// inverse-gamma reductions on the boundaries.
double draw_gig(const GigParams& params, RngStream& rng, GigStats* stats = nullptr);

}  // namespace tcombat
