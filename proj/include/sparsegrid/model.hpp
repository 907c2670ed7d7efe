#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "sparsegrid/random.hpp"

namespace sparsegrid {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Stacked control layout: one (charge, discharge) pair per time step,
/// i.e. u = (u+(k), u-(k), u+(k+1), u-(k+1), ...), length 2N per subsystem.
inline Eigen::Index charge_index(Eigen::Index step) { return 2 * step; }
inline Eigen::Index discharge_index(Eigen::Index step) { return 2 * step + 1; }

/// Battery and converter parameters of one residential energy system.
/// Efficiencies are unitless in (0,1]; capacity is kWh; rate bounds are kW
/// with u_min <= 0 <= u_max.
template <typename Scalar = double>
struct SubsystemParams {
    Scalar alpha{1};     ///< self-discharge efficiency
    Scalar beta{1};      ///< charging efficiency
    Scalar gamma{1};     ///< discharging efficiency
    Scalar capacity{0};  ///< battery capacity [kWh]
    Scalar u_max{0};     ///< max charge rate [kW], >= 0
    Scalar u_min{0};     ///< max discharge rate [kW], <= 0

    bool valid() const {
        return alpha > Scalar(0) && alpha <= Scalar(1) && beta > Scalar(0) && beta <= Scalar(1) &&
               gamma > Scalar(0) && gamma <= Scalar(1) && capacity >= Scalar(0) &&
               u_max >= Scalar(0) && u_min <= Scalar(0);
    }
};

/// State of charge plus the discrete time index it belongs to.
template <typename Scalar = double>
struct SubsystemState {
    Scalar soc{0};  ///< [kWh]
    Eigen::Index time{0};
};

/// One step's control pair: charge >= 0, discharge <= 0, both kW.
template <typename Scalar = double>
struct ControlInput {
    Scalar charge{0};
    Scalar discharge{0};
};

/// Mean and standard deviation used when sampling one parameter.
template <typename Scalar = double>
struct MomentPair {
    Scalar mean{0};
    Scalar sd{0};
};

/// Sampling moments for all subsystem parameters. Defaults are the benchmark
/// heterogeneous-household statistics used throughout the test scenarios.
template <typename Scalar = double>
struct ParameterStats {
    MomentPair<Scalar> capacity{Scalar(2.0563), Scalar(0.2431)};
    MomentPair<Scalar> u_max{Scalar(0.5229), Scalar(0.1563)};
    MomentPair<Scalar> u_min{Scalar(-0.5105), Scalar(0.1474)};
    MomentPair<Scalar> alpha{Scalar(0.9913), Scalar(0.0053)};
    MomentPair<Scalar> beta{Scalar(0.9494), Scalar(0.0098)};
    MomentPair<Scalar> gamma{Scalar(0.9487), Scalar(0.0100)};

    bool valid() const {
        return capacity.sd >= Scalar(0) && u_max.sd >= Scalar(0) && u_min.sd >= Scalar(0) &&
               alpha.sd >= Scalar(0) && beta.sd >= Scalar(0) && gamma.sd >= Scalar(0);
    }
};

/// A population of subsystems plus their net-consumption profiles (kW, load
/// minus generation, possibly negative) sampled at a fixed interval of T hours.
template <typename Scalar = double>
struct GridScenario {
    std::vector<SubsystemParams<Scalar>> subsystems;
    std::vector<Vector<Scalar>> profiles;
    Scalar T{Scalar(0.5)};       ///< hours per step
    Vector<Scalar> initial_soc;  ///< kWh, one entry per subsystem
    std::uint64_t seed{0};
    Eigen::Index default_horizon{24};

    Eigen::Index size() const { return static_cast<Eigen::Index>(subsystems.size()); }

    Eigen::Index profile_length() const {
        return profiles.empty() ? 0 : profiles.front().size();
    }

    bool valid(std::string* why = nullptr) const {
        auto fail = [&](const std::string& msg) {
            if (why) *why = msg;
            return false;
        };
        if (subsystems.empty()) return fail("scenario has no subsystems");
        if (profiles.size() != subsystems.size()) return fail("profile count != subsystem count");
        if (initial_soc.size() != size()) return fail("initial_soc count != subsystem count");
        if (!(T > Scalar(0))) return fail("sampling interval T must be positive");
        for (Eigen::Index i = 0; i < size(); ++i) {
            if (!subsystems[i].valid()) return fail("invalid parameters for subsystem " + std::to_string(i));
            if (initial_soc[i] < Scalar(0) || initial_soc[i] > subsystems[i].capacity)
                return fail("initial SoC out of [0, C] for subsystem " + std::to_string(i));
            if (profiles[i].size() != profile_length())
                return fail("ragged profile lengths");
        }
        return true;
    }
};

/// SoC recursion: x' = alpha*x + T*(beta*u+ + u-). No clipping.
template <typename Scalar>
Scalar step_dynamics(Scalar x, const ControlInput<Scalar>& u, const SubsystemParams<Scalar>& p,
                     Scalar T) {
    return p.alpha * x + T * (p.beta * u.charge + u.discharge);
}

/// Grid-visible power demand: z = w + u+ + gamma*u-. May be negative
/// (surplus fed back to the grid).
template <typename Scalar>
Scalar power_demand(const ControlInput<Scalar>& u, Scalar w, Scalar gamma) {
    return w + u.charge + gamma * u.discharge;
}

/// Rolls the SoC recursion over a stacked control trajectory of N steps.
/// Returns the N+1 states x(k..k+N) with x(k) = soc0. Bounds are not enforced.
template <typename Scalar>
Vector<Scalar> simulate_trajectory(Scalar soc0, const Eigen::Ref<const Vector<Scalar>>& controls,
                                   const SubsystemParams<Scalar>& p, Scalar T) {
    if (controls.size() % 2 != 0)
        throw std::invalid_argument("control trajectory must stack (charge, discharge) pairs");
    const Eigen::Index steps = controls.size() / 2;
    Vector<Scalar> soc(steps + 1);
    soc[0] = soc0;
    for (Eigen::Index n = 0; n < steps; ++n) {
        const ControlInput<Scalar> u{controls[charge_index(n)], controls[discharge_index(n)]};
        soc[n + 1] = step_dynamics(soc[n], u, p, T);
    }
    return soc;
}

/// One violated constraint found by check_feasible.
template <typename Scalar = double>
struct Violation {
    Eigen::Index step{0};
    std::string constraint;
    Scalar amount{0};  ///< how far outside the bound
};

template <typename Scalar = double>
struct FeasibilityReport {
    bool feasible{true};
    std::vector<Violation<Scalar>> violations;
};

/// Checks rate bounds, the charge/discharge ratio coupling and simulated SoC
/// bounds for a stacked trajectory, all within tol. States x(k+1..k+N-1) are
/// always checked; the terminal state x(k+N) only when constrain_terminal.
/// A zero rate bound forces the matching input to zero and contributes zero
/// to the ratio.
template <typename Scalar>
FeasibilityReport<Scalar> check_feasible(const Eigen::Ref<const Vector<Scalar>>& controls,
                                         Scalar soc0, const SubsystemParams<Scalar>& p, Scalar T,
                                         Scalar tol = Scalar(1e-8),
                                         bool constrain_terminal = true) {
    FeasibilityReport<Scalar> report;
    auto flag = [&](Eigen::Index step, const char* what, Scalar amount) {
        report.feasible = false;
        report.violations.push_back({step, what, amount});
    };
    const Eigen::Index steps = controls.size() / 2;
    for (Eigen::Index n = 0; n < steps; ++n) {
        const Scalar up = controls[charge_index(n)];
        const Scalar um = controls[discharge_index(n)];
        if (up < -tol) flag(n, "charge below zero", -up);
        if (up > p.u_max + tol) flag(n, "charge above u_max", up - p.u_max);
        if (um > tol) flag(n, "discharge above zero", um);
        if (um < p.u_min - tol) flag(n, "discharge below u_min", p.u_min - um);
        Scalar ratio = 0;
        if (p.u_max > Scalar(0)) ratio += up / p.u_max;
        if (p.u_min < Scalar(0)) ratio += um / p.u_min;
        if (ratio > Scalar(1) + tol) flag(n, "charge/discharge ratio above one", ratio - Scalar(1));
    }
    const Vector<Scalar> soc = simulate_trajectory<Scalar>(soc0, controls, p, T);
    const Eigen::Index last = constrain_terminal ? steps : steps - 1;
    for (Eigen::Index n = 0; n <= last; ++n) {
        if (soc[n] < -tol) flag(n, "SoC below zero", -soc[n]);
        if (soc[n] > p.capacity + tol) flag(n, "SoC above capacity", soc[n] - p.capacity);
    }
    return report;
}

/// Knobs of the synthetic net-consumption generator. The shape is a daily
/// load curve (single evening peak plus a morning/evening double peak) minus
/// a midday generation bump, plus noise that is re-centered per day so the
/// per-day sample mean stays exactly at base_load.
template <typename Scalar = double>
struct SynthProfileOptions {
    Scalar base_load{Scalar(0.35)};           ///< kW
    Scalar evening_amplitude{Scalar(0.25)};   ///< kW, 24 h harmonic peaking at 19:00
    Scalar twin_peak_amplitude{Scalar(0.15)}; ///< kW, 12 h harmonic peaking 08:00/20:00
    Scalar solar_amplitude{Scalar(0.45)};     ///< kW, 24 h harmonic subtracted, peak 13:00
    Scalar noise_sd{Scalar(0.05)};            ///< kW
    Scalar phase_jitter_hours{Scalar(1.0)};   ///< per-household phase shift, uniform +-
    Scalar amplitude_jitter{Scalar(0.2)};     ///< per-household relative amplitude spread
};

/// Generates I synthetic household net-consumption profiles of the given
/// length (steps of T hours). Deterministic for a fixed seed. When 24/T is an
/// integer M, every full M-sample day window averages exactly to base_load.
template <typename Scalar>
std::vector<Vector<Scalar>> synth_profiles(Eigen::Index count, Eigen::Index length, Scalar T,
                                           std::uint64_t seed,
                                           const SynthProfileOptions<Scalar>& opts = {}) {
    if (count < 1) throw std::invalid_argument("profile count must be >= 1");
    if (length < 1) throw std::invalid_argument("profile length must be >= 1");
    constexpr double two_pi = 6.28318530717958647692;
    const auto day_samples = static_cast<Eigen::Index>(std::llround(24.0 / static_cast<double>(T)));
    std::vector<Vector<Scalar>> profiles;
    profiles.reserve(static_cast<std::size_t>(count));
    for (Eigen::Index i = 0; i < count; ++i) {
        SeededRng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
        const Scalar phase = Scalar(rng.uniform(-1, 1)) * opts.phase_jitter_hours;
        const Scalar a_evening =
            opts.evening_amplitude * (Scalar(1) + Scalar(rng.uniform(-1, 1)) * opts.amplitude_jitter);
        const Scalar a_twin =
            opts.twin_peak_amplitude * (Scalar(1) + Scalar(rng.uniform(-1, 1)) * opts.amplitude_jitter);
        const Scalar a_solar =
            opts.solar_amplitude * (Scalar(1) + Scalar(rng.uniform(-1, 1)) * opts.amplitude_jitter);
        Vector<Scalar> w(length);
        for (Eigen::Index n = 0; n < length; ++n) {
            const Scalar t = Scalar(n) * T;  // hours
            const Scalar evening =
                a_evening * Scalar(std::cos(two_pi * static_cast<double>(t - Scalar(19) - phase) / 24.0));
            const Scalar twin =
                a_twin * Scalar(std::cos(2.0 * two_pi * static_cast<double>(t - Scalar(8) - phase) / 24.0));
            const Scalar solar =
                a_solar * Scalar(std::cos(two_pi * static_cast<double>(t - Scalar(13) - phase) / 24.0));
            w[n] = opts.base_load + evening + twin - solar;
        }
        if (opts.noise_sd > Scalar(0)) {
            // Per-day re-centered noise keeps day-window means at base_load.
            for (Eigen::Index start = 0; start < length; start += day_samples) {
                const Eigen::Index chunk = std::min(day_samples, length - start);
                Vector<Scalar> noise(chunk);
                for (Eigen::Index j = 0; j < chunk; ++j)
                    noise[j] = Scalar(rng.gaussian(0.0, static_cast<double>(opts.noise_sd)));
                noise.array() -= noise.mean();
                w.segment(start, chunk) += noise;
            }
        }
        profiles.push_back(std::move(w));
    }
    return profiles;
}

/// Samples a heterogeneous scenario: normal parameter draws clamped to their
/// admissible ranges, initial SoC of 0.5 kWh (capped by capacity) and
/// synthetic net-consumption profiles. Deterministic for a fixed seed.
template <typename Scalar>
GridScenario<Scalar> generate_scenario(Eigen::Index count, const ParameterStats<Scalar>& stats,
                                       std::uint64_t seed, Eigen::Index horizon_length,
                                       Scalar T = Scalar(0.5),
                                       const SynthProfileOptions<Scalar>& profile_opts = {}) {
    if (count < 1) throw std::invalid_argument("subsystem count must be >= 1");
    if (!stats.valid()) throw std::invalid_argument("parameter standard deviations must be >= 0");
    auto clamp = [](Scalar v, Scalar lo, Scalar hi) { return std::min(std::max(v, lo), hi); };
    constexpr double inf = std::numeric_limits<double>::infinity();

    GridScenario<Scalar> sc;
    sc.T = T;
    sc.seed = seed;
    sc.subsystems.reserve(static_cast<std::size_t>(count));
    sc.initial_soc.resize(count);
    SeededRng rng(derive_seed(seed, 0x5ca1ab1e));
    for (Eigen::Index i = 0; i < count; ++i) {
        SubsystemParams<Scalar> p;
        // Clamps keep draws inside physically admissible ranges; zero rate
        // bounds are excluded so the ratio constraint stays well defined.
        p.capacity = clamp(Scalar(rng.gaussian(stats.capacity.mean, stats.capacity.sd)),
                           Scalar(0.01), Scalar(inf));
        p.u_max = clamp(Scalar(rng.gaussian(stats.u_max.mean, stats.u_max.sd)), Scalar(0.01),
                        Scalar(inf));
        p.u_min = clamp(Scalar(rng.gaussian(stats.u_min.mean, stats.u_min.sd)), Scalar(-inf),
                        Scalar(-0.01));
        p.alpha = clamp(Scalar(rng.gaussian(stats.alpha.mean, stats.alpha.sd)), Scalar(0.01), Scalar(1));
        p.beta = clamp(Scalar(rng.gaussian(stats.beta.mean, stats.beta.sd)), Scalar(0.01), Scalar(1));
        p.gamma = clamp(Scalar(rng.gaussian(stats.gamma.mean, stats.gamma.sd)), Scalar(0.01), Scalar(1));
        sc.initial_soc[i] = std::min(Scalar(0.5), p.capacity);
        sc.subsystems.push_back(p);
    }
    sc.profiles = synth_profiles<Scalar>(count, horizon_length, T, derive_seed(seed, 0x9e0f17e5),
                                         profile_opts);
    return sc;
}

}  // namespace sparsegrid
