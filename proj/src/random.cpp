#include "tcombat/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "tcombat/errors.hpp"

namespace tcombat {

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_id_(stream_id) {
    std::uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
    for (std::uint64_t i = 0; i < stream_id; ++i) jump();
}

std::uint64_t RngStream::next_u64() {
    const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

void RngStream::jump() {
    static constexpr std::uint64_t kJump[] = {0x180ec6d33cfd0abaULL, 0xd5a61266f0c9392cULL,
                                              0xa9582618e03fc9aaULL, 0x39abdc4529b1661cULL};
    std::array<std::uint64_t, 4> acc{};
    for (std::uint64_t word : kJump) {
        for (int b = 0; b < 64; ++b) {
            if (word & (std::uint64_t{1} << b))
                for (int i = 0; i < 4; ++i) acc[i] ^= s_[i];
            next_u64();
        }
    }
    s_ = acc;
}

double RngStream::uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double RngStream::standard_normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

void RngStream::restore(const State& st) {
    s_ = st.s;
    has_spare_ = st.has_spare;
    spare_ = st.spare;
}

bool GigParams::valid() const {
    if (!std::isfinite(eta) || !(chi >= 0.0) || !(psi >= 0.0)) return false;
    if (!std::isfinite(chi) || !std::isfinite(psi)) return false;
    return (chi > 0.0 || eta > 0.0) && (psi > 0.0 || eta < 0.0);
}

double draw_normal(double mean, double var, RngStream& rng) {
    if (!std::isfinite(mean) || !(var >= 0.0) || !std::isfinite(var))
        throw ConfigError("normal: invalid mean or variance");
    if (var == 0.0) return mean;
    return mean + std::sqrt(var) * rng.standard_normal();
}

namespace {

// Marsaglia-Tsang for shape >= 1.
double gamma_unit(double shape, RngStream& rng) {
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x, v;
        do {
            x = rng.standard_normal();
            v = 1.0 + c * x;
        } while (v <= 0.0);
        v = v * v * v;
        const double u = rng.uniform();
        if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
        if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
}

// log of a unit-rate gamma variate; stable for tiny shapes.
double log_gamma_unit(double shape, RngStream& rng) {
    if (shape >= 1.0) return std::log(gamma_unit(shape, rng));
    const double g = gamma_unit(shape + 1.0, rng);
    return std::log(g) + std::log(rng.uniform()) / shape;
}

}  // namespace

double draw_gamma(double shape, double rate, RngStream& rng) {
    if (!(shape > 0.0) || !(rate > 0.0) || !std::isfinite(shape) || !std::isfinite(rate))
        throw ConfigError("gamma: shape and rate must be positive and finite");
    if (shape >= 1.0) return gamma_unit(shape, rng) / rate;
    return std::exp(log_gamma_unit(shape, rng)) / rate;
}

double draw_inverse_gamma(double shape, double scale, RngStream& rng) {
    if (!(shape > 0.0) || !(scale > 0.0))
        throw ConfigError("inverse gamma: shape and scale must be positive");
    return 1.0 / draw_gamma(shape, scale, rng);
}

std::vector<double> draw_dirichlet(std::span<const double> concentration, RngStream& rng) {
    if (concentration.empty()) throw ConfigError("dirichlet: empty concentration");
    std::vector<double> logs(concentration.size());
    for (std::size_t h = 0; h < concentration.size(); ++h) {
        const double a = concentration[h];
        if (!(a > 0.0) || !std::isfinite(a))
            throw ConfigError("dirichlet: concentrations must be positive");
        logs[h] = log_gamma_unit(a, rng);
    }
    const double top = *std::max_element(logs.begin(), logs.end());
    double total = 0.0;
    for (auto& l : logs) {
        l = std::exp(l - top);
        total += l;
    }
    for (auto& l : logs) l /= total;
    return logs;
}

std::size_t draw_categorical(std::span<const double> weights, RngStream& rng) {
    double total = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0) || !std::isfinite(w))
            throw ConfigError("categorical: weights must be finite and non-negative");
        total += w;
    }
    if (!(total > 0.0)) throw ConfigError("categorical: all weights are zero");
    const double target = rng.uniform() * total;
    double cum = 0.0;
    std::size_t last = 0;
    for (std::size_t h = 0; h < weights.size(); ++h) {
        if (weights[h] <= 0.0) continue;
        last = h;
        cum += weights[h];
        if (target < cum) return h;
    }
    return last;
}

std::size_t draw_categorical_log(std::span<const double> log_weights, RngStream& rng) {
    if (log_weights.empty()) throw ConfigError("categorical: no components");
    std::size_t best = 0;
    double best_key = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t h = 0; h < log_weights.size(); ++h) {
        const double gumbel = -std::log(-std::log(rng.uniform()));
        const double lw = log_weights[h];
        if (std::isnan(lw) || lw == std::numeric_limits<double>::infinity())
            throw ConfigError("categorical: invalid log-weight");
        if (lw == -std::numeric_limits<double>::infinity()) continue;
        const double key = lw + gumbel;
        if (!any || key > best_key) {
            best_key = key;
            best = h;
            any = true;
        }
    }
    if (!any) throw ConfigError("categorical: all weights are zero");
    return best;
}

namespace {

// Mode of x^(lambda-1) exp(-omega/2 (x + 1/x)).
double gig_mode(double lambda, double omega) {
    if (lambda >= 1.0) return (std::sqrt((lambda - 1.0) * (lambda - 1.0) + omega * omega) + (lambda - 1.0)) / omega;
    return omega / (std::sqrt((1.0 - lambda) * (1.0 - lambda) + omega * omega) + (1.0 - lambda));
}

struct Counter {
    std::uint64_t proposals = 0;
};

double rou_noshift(double lambda, double omega, RngStream& rng, Counter& cnt) {
    const double t = 0.5 * (lambda - 1.0);
    const double s = 0.25 * omega;
    const double xm = gig_mode(lambda, omega);
    const double nc = t * std::log(xm) - s * (xm + 1.0 / xm);
    const double ym = ((lambda + 1.0) + std::sqrt((lambda + 1.0) * (lambda + 1.0) + omega * omega)) / omega;
    const double um = std::exp(0.5 * (lambda + 1.0) * std::log(ym) - s * (ym + 1.0 / ym) - nc);
    for (;;) {
        ++cnt.proposals;
        const double u = um * rng.uniform();
        const double v = rng.uniform();
        const double x = u / v;
        if (std::log(v) <= t * std::log(x) - s * (x + 1.0 / x) - nc) return x;
    }
}

double rou_shift(double lambda, double omega, RngStream& rng, Counter& cnt) {
    const double t = 0.5 * (lambda - 1.0);
    const double s = 0.25 * omega;
    const double xm = gig_mode(lambda, omega);
    const double nc = t * std::log(xm) - s * (xm + 1.0 / xm);
    // Roots of the cubic locating the extremes of the shifted bounding rectangle.
    const double a = -(2.0 * (lambda + 1.0) / omega + xm);
    const double b = (2.0 * (lambda - 1.0) * xm / omega - 1.0);
    const double c = xm;
    const double p = b - a * a / 3.0;
    const double q = (2.0 * a * a * a) / 27.0 - (a * b) / 3.0 + c;
    const double fi = std::acos(-q / (2.0 * std::sqrt(-(p * p * p) / 27.0)));
    const double fak = 2.0 * std::sqrt(-p / 3.0);
    const double y1 = fak * std::cos(fi / 3.0) - a / 3.0;
    const double y2 = fak * std::cos(fi / 3.0 + 4.0 / 3.0 * std::numbers::pi) - a / 3.0;
    const double uplus = (y1 - xm) * std::exp(t * std::log(y1) - s * (y1 + 1.0 / y1) - nc);
    const double uminus = (y2 - xm) * std::exp(t * std::log(y2) - s * (y2 + 1.0 / y2) - nc);
    for (;;) {
        ++cnt.proposals;
        const double u = uminus + rng.uniform() * (uplus - uminus);
        const double v = rng.uniform();
        const double x = u / v + xm;
        if (x <= 0.0) continue;
        if (std::log(v) <= t * std::log(x) - s * (x + 1.0 / x) - nc) return x;
    }
}

// Dominating function for the concave case 0 <= lambda < 1, omega small.
double concave(double lambda, double omega, RngStream& rng, Counter& cnt) {
    const double xm = gig_mode(lambda, omega);
    const double x0 = omega / (1.0 - lambda);
    const double k0 = std::exp((lambda - 1.0) * std::log(xm) - 0.5 * omega * (xm + 1.0 / xm));
    double area[3];
    area[0] = k0 * x0;
    double k1, k2;
    if (x0 >= 2.0 / omega) {
        k1 = 0.0;
        area[1] = 0.0;
        k2 = std::pow(x0, lambda - 1.0);
        area[2] = k2 * 2.0 * std::exp(-omega * x0 / 2.0) / omega;
    } else {
        k1 = std::exp(-omega);
        area[1] = (lambda == 0.0) ? k1 * std::log(2.0 / (omega * omega))
                                  : k1 / lambda * (std::pow(2.0 / omega, lambda) - std::pow(x0, lambda));
        k2 = std::pow(2.0 / omega, lambda - 1.0);
        area[2] = k2 * 2.0 * std::exp(-1.0) / omega;
    }
    const double total = area[0] + area[1] + area[2];
    for (;;) {
        ++cnt.proposals;
        double v = total * rng.uniform();
        double x, hx;
        if (v <= area[0]) {
            x = x0 * v / area[0];
            hx = k0;
        } else if ((v -= area[0]) <= area[1]) {
            if (lambda == 0.0) {
                x = omega * std::exp(std::exp(omega) * v);
                hx = k1 / x;
            } else {
                x = std::pow(std::pow(x0, lambda) + (lambda / k1 * v), 1.0 / lambda);
                hx = k1 * std::pow(x, lambda - 1.0);
            }
        } else {
            v -= area[1];
            const double lo = std::max(x0, 2.0 / omega);
            x = -2.0 / omega * std::log(std::exp(-omega / 2.0 * lo) - omega / (2.0 * k2) * v);
            hx = k2 * std::exp(-omega / 2.0 * x);
        }
        const double u = rng.uniform() * hx;
        if (std::log(u) <= (lambda - 1.0) * std::log(x) - omega / 2.0 * (x + 1.0 / x)) return x;
    }
}

}  // namespace

double draw_gig(const GigParams& params, RngStream& rng, GigStats* stats) {
    if (!params.valid())
        throw ConfigError("GIG: invalid parameters (need chi>0 or eta>0, and psi>0 or eta<0)");
    Counter cnt;
    double result;
    const double eta = params.eta, chi = params.chi, psi = params.psi;
    constexpr double kTiny = 10.0 * std::numeric_limits<double>::epsilon();
    const double omega = std::sqrt(chi * psi);
    if (chi == 0.0 || (omega < kTiny && eta > 0.0)) {
        cnt.proposals = 1;
        result = draw_gamma(eta, psi / 2.0, rng);
    } else if (psi == 0.0 || (omega < kTiny && eta < 0.0)) {
        cnt.proposals = 1;
        result = draw_inverse_gamma(-eta, chi / 2.0, rng);
    } else if (omega < kTiny) {
        throw ConfigError("GIG: eta == 0 with vanishing chi*psi is improper");
    } else {
        const double lambda = std::abs(eta);
        const double scale = std::sqrt(chi / psi);
        double x;
        if (lambda > 2.0 || omega > 3.0)
            x = rou_shift(lambda, omega, rng, cnt);
        else if (lambda >= 1.0 - 2.25 * omega * omega || omega > 0.2)
            x = rou_noshift(lambda, omega, rng, cnt);
        else
            x = concave(lambda, omega, rng, cnt);
        result = eta < 0.0 ? scale / x : scale * x;
    }
    if (stats) {
        stats->draws += 1;
        stats->proposals += cnt.proposals;
    }
    return result;
}

}  // namespace tcombat
