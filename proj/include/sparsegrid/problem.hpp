#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

#include "sparsegrid/model.hpp"

namespace sparsegrid {

/// Per-subsystem block of a stacked vector (I blocks of length 2N).
template <typename Scalar>
Eigen::Ref<const Vector<Scalar>> group_block(const Eigen::Ref<const Vector<Scalar>>& stacked,
                                             Eigen::Index i, Eigen::Index block_len) {
    return stacked.segment(i * block_len, block_len);
}

/// The averaging operator that maps stacked controls to their per-slot grid
/// contribution: slot n of apply(u) is (1/I) * sum_i (u_i+(n) + gamma_i * u_i-(n)).
/// Stored implicitly through the per-subsystem discharge efficiencies; the
/// equivalent dense matrix (I_N blocks of (1 gamma_i)/I) is never materialized.
template <typename Scalar = double>
class CouplingOperator {
public:
    CouplingOperator() = default;
    CouplingOperator(Vector<Scalar> gammas, Eigen::Index horizon)
        : gammas_(std::move(gammas)), horizon_(horizon) {
        if (gammas_.size() < 1 || horizon_ < 1)
            throw std::invalid_argument("coupling operator needs >= 1 subsystem and horizon");
    }

    Eigen::Index subsystem_count() const { return gammas_.size(); }
    Eigen::Index horizon() const { return horizon_; }
    Eigen::Index stacked_size() const { return 2 * horizon_ * gammas_.size(); }
    const Vector<Scalar>& gammas() const { return gammas_; }

    /// Row Gram scale c such that A*A^T = c*I_N.
    Scalar gram_scale() const {
        const Scalar count = Scalar(gammas_.size());
        return (Scalar(1) + gammas_.array().square()).sum() / (count * count);
    }

    /// y = A*u for stacked u of length 2*N*I. Fixed summation order over i.
    Vector<Scalar> apply(const Eigen::Ref<const Vector<Scalar>>& u) const {
        check_stacked(u.size());
        const Eigen::Index block = 2 * horizon_;
        const Scalar inv_count = Scalar(1) / Scalar(gammas_.size());
        Vector<Scalar> y = Vector<Scalar>::Zero(horizon_);
        for (Eigen::Index i = 0; i < gammas_.size(); ++i) {
            const auto ui = u.segment(i * block, block);
            for (Eigen::Index n = 0; n < horizon_; ++n)
                y[n] += ui[charge_index(n)] + gammas_[i] * ui[discharge_index(n)];
        }
        return y * inv_count;
    }

    /// u = A^T * y for y of length N.
    Vector<Scalar> apply_adjoint(const Eigen::Ref<const Vector<Scalar>>& y) const {
        if (y.size() != horizon_) throw std::invalid_argument("adjoint input must have length N");
        const Eigen::Index block = 2 * horizon_;
        const Scalar inv_count = Scalar(1) / Scalar(gammas_.size());
        Vector<Scalar> u(stacked_size());
        for (Eigen::Index i = 0; i < gammas_.size(); ++i) {
            for (Eigen::Index n = 0; n < horizon_; ++n) {
                u[i * block + charge_index(n)] = y[n] * inv_count;
                u[i * block + discharge_index(n)] = gammas_[i] * y[n] * inv_count;
            }
        }
        return u;
    }

private:
    void check_stacked(Eigen::Index size) const {
        if (size != stacked_size())
            throw std::invalid_argument("stacked control vector has wrong length");
    }

    Vector<Scalar> gammas_;
    Eigen::Index horizon_{0};
};

/// Trailing average of the mean net consumption: slot n of the result is the
/// mean of w_bar over [n-N+1, n], for n in [k, k+N-1]. Missing history below
/// index 0 is padded with w_bar(0) so the receding-horizon loop can start at
/// k = 0. w_bar must cover indices [0, k+N-1].
template <typename Scalar>
Vector<Scalar> reference_trajectory(const Eigen::Ref<const Vector<Scalar>>& w_bar, Eigen::Index k,
                                    Eigen::Index horizon) {
    if (horizon < 1) throw std::invalid_argument("horizon must be >= 1");
    if (w_bar.size() < k + horizon)
        throw std::invalid_argument("mean net consumption must cover the horizon window");
    Vector<Scalar> zeta(horizon);
    for (Eigen::Index slot = 0; slot < horizon; ++slot) {
        const Eigen::Index n = k + slot;
        Scalar acc = 0;
        for (Eigen::Index j = n - horizon + 1; j <= n; ++j) acc += w_bar[std::max<Eigen::Index>(j, 0)];
        zeta[slot] = acc / Scalar(horizon);
    }
    return zeta;
}

/// Weighted mixed norm: sum_i sigma_i * ||u_i||_p over the I groups of u,
/// with p in {1, 2}.
template <typename Scalar>
Scalar mixed_norm(const Eigen::Ref<const Vector<Scalar>>& u,
                  const Eigen::Ref<const Vector<Scalar>>& sigma, int p) {
    if (p != 1 && p != 2) throw std::invalid_argument("mixed norm supports p in {1, 2}");
    const Eigen::Index groups = sigma.size();
    if (groups < 1 || u.size() % groups != 0)
        throw std::invalid_argument("stacked vector does not split into sigma.size() groups");
    const Eigen::Index block = u.size() / groups;
    Scalar total = 0;
    for (Eigen::Index i = 0; i < groups; ++i) {
        const auto ui = u.segment(i * block, block);
        total += sigma[i] * (p == 1 ? ui.template lpNorm<1>() : ui.norm());
    }
    return total;
}

/// The group-sparse peak-shaving objective data: quadratic tracking of the
/// residual b = zeta_bar - w_bar through the coupling operator, plus the
/// kappa-weighted mixed-norm regularizer.
template <typename Scalar = double>
struct PeakShavingProblem {
    CouplingOperator<Scalar> coupling;
    Vector<Scalar> b;         ///< zeta_bar - w_bar, length N
    Vector<Scalar> zeta_bar;  ///< reference trajectory, length N
    Vector<Scalar> w_bar;     ///< mean net consumption over the horizon window, length N
    Scalar kappa{0};          ///< regularization trade-off, >= 0
    Vector<Scalar> sigma;     ///< per-subsystem weights, >= 0
    int p{2};                 ///< group norm, 1 or 2

    Eigen::Index horizon() const { return coupling.horizon(); }
    Eigen::Index subsystem_count() const { return coupling.subsystem_count(); }

    /// sigma-tilde: the weights actually multiplying the group norms.
    Vector<Scalar> scaled_weights() const { return kappa * sigma; }

    void validate() const {
        if (b.size() != horizon() || zeta_bar.size() != horizon() || w_bar.size() != horizon())
            throw std::invalid_argument("b, zeta_bar, w_bar must have length N");
        if (sigma.size() != subsystem_count())
            throw std::invalid_argument("sigma must have one weight per subsystem");
        if (kappa < Scalar(0) || (sigma.size() > 0 && sigma.minCoeff() < Scalar(0)))
            throw std::invalid_argument("kappa and sigma must be nonnegative");
        if (p != 1 && p != 2) throw std::invalid_argument("p must be 1 or 2");
        if (!b.isApprox(zeta_bar - w_bar))
            throw std::invalid_argument("b must equal zeta_bar - w_bar");
    }
};

/// (1/N)*||A*u - b||^2 + sum_i kappa*sigma_i*||u_i||_p.
template <typename Scalar>
Scalar objective_value(const PeakShavingProblem<Scalar>& problem,
                       const Eigen::Ref<const Vector<Scalar>>& u) {
    const Vector<Scalar> residual = problem.coupling.apply(u) - problem.b;
    const Scalar tracking = residual.squaredNorm() / Scalar(problem.horizon());
    const Vector<Scalar> weights = problem.scaled_weights();
    return tracking + mixed_norm<Scalar>(u, weights, problem.p);
}

/// Average demand trajectory that results from stacked controls u on top of
/// the mean net consumption window: z_bar = w_bar + A*u.
template <typename Scalar>
Vector<Scalar> aggregate_demand(const CouplingOperator<Scalar>& coupling,
                                const Eigen::Ref<const Vector<Scalar>>& u,
                                const Eigen::Ref<const Vector<Scalar>>& w_bar_window) {
    if (w_bar_window.size() != coupling.horizon())
        throw std::invalid_argument("w_bar window must have length N");
    return w_bar_window + coupling.apply(u);
}

/// Mean net consumption across subsystems for time indices [0, length).
template <typename Scalar>
Vector<Scalar> mean_consumption(const GridScenario<Scalar>& scenario, Eigen::Index length) {
    if (scenario.profile_length() < length)
        throw std::invalid_argument("profiles shorter than requested window");
    Vector<Scalar> w_bar = Vector<Scalar>::Zero(length);
    for (const auto& profile : scenario.profiles) w_bar += profile.head(length);
    return w_bar / Scalar(scenario.size());
}

/// Assembles the peak-shaving problem for the horizon window starting at
/// step k of the scenario timeline.
template <typename Scalar>
PeakShavingProblem<Scalar> build_problem(const GridScenario<Scalar>& scenario, Eigen::Index k,
                                         Eigen::Index horizon, Scalar kappa, Vector<Scalar> sigma,
                                         int p) {
    if (scenario.profile_length() < k + horizon)
        throw std::invalid_argument("profiles do not cover the horizon window");
    PeakShavingProblem<Scalar> problem;
    Vector<Scalar> gammas(scenario.size());
    for (Eigen::Index i = 0; i < scenario.size(); ++i) gammas[i] = scenario.subsystems[i].gamma;
    problem.coupling = CouplingOperator<Scalar>(std::move(gammas), horizon);
    const Vector<Scalar> w_bar_all = mean_consumption(scenario, k + horizon);
    problem.zeta_bar = reference_trajectory<Scalar>(w_bar_all, k, horizon);
    problem.w_bar = w_bar_all.segment(k, horizon);
    problem.b = problem.zeta_bar - problem.w_bar;
    problem.kappa = kappa;
    problem.sigma = std::move(sigma);
    problem.p = p;
    problem.validate();
    return problem;
}

}  // namespace sparsegrid
