#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sparsegrid/model.hpp"

namespace sparsegrid {

enum class QpStatus { solved, max_iter, infeasible };

/// Half-space representation {y : G*y <= h}. Bounds are stored as rows.
template <typename Scalar = double>
struct Polytope {
    Matrix<Scalar> G;
    Vector<Scalar> h;
    std::string layout;  ///< note on the variable layout, for diagnostics

    Eigen::Index dim() const { return G.cols(); }
    Eigen::Index rows() const { return G.rows(); }

    Scalar max_violation(const Eigen::Ref<const Vector<Scalar>>& y) const {
        if (rows() == 0) return Scalar(0);
        return std::max(Scalar(0), (G * y - h).maxCoeff());
    }

    bool contains(const Eigen::Ref<const Vector<Scalar>>& y, Scalar tol) const {
        return max_violation(y) <= tol;
    }
};

/// min 1/2 y'Hy + g'y over a polytope. H must be symmetric positive
/// semidefinite with H + G'G positive definite (every flat direction of H
/// pinned by a constraint row); all QPs assembled here satisfy that.
template <typename Scalar = double>
struct DenseQP {
    Matrix<Scalar> H;
    Vector<Scalar> g;
    Polytope<Scalar> constraints;
};

template <typename Scalar = double>
struct QpSolution {
    Vector<Scalar> y;
    Vector<Scalar> dual;  ///< multipliers of G*y <= h, one per row
    Scalar kkt_residual{std::numeric_limits<Scalar>::infinity()};
    int iterations{0};
    QpStatus status{QpStatus::max_iter};
};

struct QpOptions {
    double tol = 1e-8;
    int max_iter = 20000;
    double penalty = 1.0;      ///< fixed splitting penalty
    double relaxation = 1.6;   ///< over-relaxation factor in (0, 2)
    int check_interval = 10;   ///< KKT evaluation cadence
};

/// Operator-splitting QP solver with a cached factorization. The geometry G
/// is fixed at construction; the right-hand side h and the linear term g may
/// change between solves, which keeps repeated proximal solves cheap. Iterates
/// alternate a linear solve of (H + penalty*G'G) with a projection onto the
/// constraint slabs; duals are carried across solves as warm starts.
template <typename Scalar = double>
class QpWorkspace {
public:
    QpWorkspace(Matrix<Scalar> H, const Polytope<Scalar>& polytope, QpOptions opts = {})
        : H_(std::move(H)), opts_(opts) {
        const Eigen::Index n = H_.cols();
        if (H_.rows() != n || polytope.G.cols() != n)
            throw std::invalid_argument("QP dimensions disagree");
        if (!H_.isApprox(H_.transpose(), Scalar(1e-12)))
            throw std::invalid_argument("H must be symmetric");

        // Split off all-zero rows; they constrain nothing but decide
        // feasibility by sign of h.
        std::vector<Eigen::Index> live;
        for (Eigen::Index r = 0; r < polytope.G.rows(); ++r) {
            const Scalar norm = polytope.G.row(r).norm();
            if (norm > Scalar(0))
                live.push_back(r);
            else
                zero_rows_.push_back(r);
        }
        live_rows_ = live;
        const auto m = static_cast<Eigen::Index>(live.size());
        G_scaled_.resize(m, n);
        row_scale_.resize(m);
        for (Eigen::Index r = 0; r < m; ++r) {
            row_scale_[r] = polytope.G.row(live[r]).norm();
            G_scaled_.row(r) = polytope.G.row(live[r]) / row_scale_[r];
        }
        gram_ = H_ + Scalar(opts_.penalty) * (G_scaled_.transpose() * G_scaled_).eval();
        llt_.compute(gram_);
        if (llt_.info() != Eigen::Success)
            throw std::invalid_argument("H + penalty*G'G is not positive definite");
        total_rows_ = polytope.G.rows();
        update_rhs(polytope.h);
        reset();
    }

    /// Swap in a new right-hand side for the same geometry.
    void update_rhs(const Eigen::Ref<const Vector<Scalar>>& h) {
        if (h.size() != total_rows_) throw std::invalid_argument("rhs size mismatch");
        h_full_ = h;
        h_scaled_.resize(live_rows_.size());
        for (std::size_t r = 0; r < live_rows_.size(); ++r)
            h_scaled_[static_cast<Eigen::Index>(r)] = h[live_rows_[r]] / row_scale_[static_cast<Eigen::Index>(r)];
    }

    void reset() {
        y_ = Vector<Scalar>::Zero(H_.cols());
        z_ = Vector<Scalar>::Zero(G_scaled_.rows());
        w_ = Vector<Scalar>::Zero(G_scaled_.rows());
        if (G_scaled_.rows() > 0) z_ = (G_scaled_ * y_).cwiseMin(h_scaled_);
    }

    /// Solves with the stored warm state (previous solution and duals).
    QpSolution<Scalar> solve(const Eigen::Ref<const Vector<Scalar>>& g) {
        return solve_impl(g);
    }

    /// Solves starting from the given primal point (duals kept warm).
    QpSolution<Scalar> solve(const Eigen::Ref<const Vector<Scalar>>& g,
                             const Eigen::Ref<const Vector<Scalar>>& warm_start) {
        if (warm_start.size() != H_.cols()) throw std::invalid_argument("warm start size mismatch");
        y_ = warm_start;
        return solve_impl(g);
    }

    const QpOptions& options() const { return opts_; }

private:
    QpSolution<Scalar> solve_impl(const Eigen::Ref<const Vector<Scalar>>& g) {
        QpSolution<Scalar> sol;
        // Zero geometry rows are satisfied for every y or for none.
        for (const Eigen::Index r : zero_rows_) {
            if (h_full_[r] < Scalar(0)) {
                sol.status = QpStatus::infeasible;
                sol.y = y_;
                sol.dual = Vector<Scalar>::Zero(total_rows_);
                return sol;
            }
        }
        const Scalar sigma = Scalar(opts_.penalty);
        const Scalar alpha = Scalar(opts_.relaxation);
        const Eigen::Index m = G_scaled_.rows();
        const Scalar h_scale = m > 0 ? std::max(Scalar(1), h_scaled_.template lpNorm<Eigen::Infinity>())
                                     : Scalar(1);
        Vector<Scalar> gy(m), relaxed(m), shifted(m);
        int iter = 0;
        while (iter < opts_.max_iter) {
            ++iter;
            if (m > 0) {
                y_ = llt_.solve(-g + sigma * (G_scaled_.transpose() * (z_ - w_)));
                gy.noalias() = G_scaled_ * y_;
                relaxed = alpha * gy + (Scalar(1) - alpha) * z_;
                shifted = relaxed + w_;
                z_ = shifted.cwiseMin(h_scaled_);
                w_ = shifted - z_;
            } else {
                y_ = llt_.solve(-g);
            }
            if (iter % opts_.check_interval == 0 || iter == opts_.max_iter || m == 0) {
                const Scalar kkt = kkt_residual(g);
                if (kkt <= Scalar(opts_.tol)) {
                    sol.status = QpStatus::solved;
                    sol.kkt_residual = kkt;
                    break;
                }
                // An empty feasible set makes the duals grow without bound
                // while the primal residual stalls.
                if (iter > 500 && w_.size() > 0 &&
                    w_.template lpNorm<Eigen::Infinity>() > Scalar(1e9) * h_scale) {
                    sol.status = QpStatus::infeasible;
                    sol.kkt_residual = kkt;
                    break;
                }
            }
        }
        if (sol.status == QpStatus::max_iter) sol.kkt_residual = kkt_residual(g);
        sol.y = y_;
        sol.iterations = iter;
        sol.dual = Vector<Scalar>::Zero(total_rows_);
        for (std::size_t r = 0; r < live_rows_.size(); ++r) {
            const auto rr = static_cast<Eigen::Index>(r);
            sol.dual[live_rows_[r]] = sigma * w_[rr] / row_scale_[rr];
        }
        return sol;
    }

    /// Max of stationarity, primal feasibility, complementarity and dual-sign
    /// residuals of the original (unscaled) problem.
    Scalar kkt_residual(const Eigen::Ref<const Vector<Scalar>>& g) const {
        const Eigen::Index m = G_scaled_.rows();
        Vector<Scalar> nu_scaled = Scalar(opts_.penalty) * w_;
        Scalar r_stat;
        if (m > 0)
            r_stat = (H_ * y_ + g + G_scaled_.transpose() * nu_scaled)
                         .template lpNorm<Eigen::Infinity>();
        else
            r_stat = (H_ * y_ + g).template lpNorm<Eigen::Infinity>();
        Scalar r_prim = 0, r_comp = 0, r_sign = 0;
        if (m > 0) {
            const Vector<Scalar> slack = G_scaled_ * y_ - h_scaled_;
            for (Eigen::Index r = 0; r < m; ++r) {
                r_prim = std::max(r_prim, row_scale_[r] * std::max(Scalar(0), slack[r]));
                r_comp = std::max(r_comp, std::abs(nu_scaled[r] * slack[r]));
                r_sign = std::max(r_sign, -nu_scaled[r] / row_scale_[r]);
            }
        }
        return std::max({r_stat, r_prim, r_comp, r_sign});
    }

    Matrix<Scalar> H_;
    Matrix<Scalar> G_scaled_;
    Matrix<Scalar> gram_;
    Vector<Scalar> row_scale_;
    Vector<Scalar> h_scaled_;
    Vector<Scalar> h_full_;
    Eigen::LLT<Matrix<Scalar>> llt_;
    std::vector<Eigen::Index> live_rows_;
    std::vector<Eigen::Index> zero_rows_;
    Eigen::Index total_rows_{0};
    Vector<Scalar> y_, z_, w_;
    QpOptions opts_;
};

/// One-shot strictly convex QP solve; see QpWorkspace for the method.
template <typename Scalar>
QpSolution<Scalar> solve_qp(const DenseQP<Scalar>& qp,
                            const Vector<Scalar>* warm_start = nullptr, Scalar tol = Scalar(1e-8),
                            int max_iter = 20000) {
    QpOptions opts;
    opts.tol = static_cast<double>(tol);
    opts.max_iter = max_iter;
    QpWorkspace<Scalar> ws(qp.H, qp.constraints, opts);
    if (warm_start) return ws.solve(qp.g, *warm_start);
    return ws.solve(qp.g);
}

/// Euclidean projection onto a polytope: solve_qp with H = I, g = -point.
template <typename Scalar>
Vector<Scalar> project_polytope(const Eigen::Ref<const Vector<Scalar>>& point,
                                const Polytope<Scalar>& polytope, Scalar tol = Scalar(1e-8),
                                int max_iter = 20000) {
    DenseQP<Scalar> qp;
    qp.H = Matrix<Scalar>::Identity(point.size(), point.size());
    qp.g = -point;
    qp.constraints = polytope;
    const QpSolution<Scalar> sol = solve_qp<Scalar>(qp, nullptr, tol, max_iter);
    if (sol.status == QpStatus::infeasible)
        throw std::invalid_argument("cannot project onto an empty polytope");
    return sol.y;
}

/// Right-hand side of build_polytope_U for a new initial SoC. The geometry
/// does not depend on soc0, so receding-horizon code only swaps this vector.
template <typename Scalar>
Vector<Scalar> build_polytope_rhs_U(const SubsystemParams<Scalar>& params, Scalar soc0,
                                    Eigen::Index horizon, bool constrain_terminal = true) {
    if (horizon < 1) throw std::invalid_argument("horizon must be >= 1");
    if (soc0 < Scalar(0) || soc0 > params.capacity)
        throw std::invalid_argument("initial SoC must lie in [0, capacity]");
    const Eigen::Index n_soc = horizon - 1 + (constrain_terminal ? 1 : 0);
    Vector<Scalar> h(5 * horizon + 2 * n_soc);
    Eigen::Index r = 0;
    for (Eigen::Index n = 0; n < horizon; ++n) {
        h[r++] = Scalar(0);            // u- <= 0
        h[r++] = -params.u_min;        // u- >= u_min
        h[r++] = params.u_max;         // u+ <= u_max
        h[r++] = Scalar(0);            // u+ >= 0
        h[r++] = Scalar(1);            // ratio
    }
    Scalar alpha_j = Scalar(1);
    for (Eigen::Index j = 1; j <= n_soc; ++j) {
        alpha_j *= params.alpha;
        h[r++] = params.capacity - alpha_j * soc0;  // x(k+j) <= C
        h[r++] = alpha_j * soc0;                    // x(k+j) >= 0
    }
    return h;
}

/// Builds the feasible control set of one subsystem over an N-step horizon in
/// the 2N stacked control variables, with the SoC chain eliminated through
/// the affine expansion x(k+j) = alpha^j*x0 + T*sum alpha^(j-1-l)*(beta*u+(l) + u-(l)).
/// Per step: discharge box (2 rows), charge box (2 rows) and the ratio row
/// u-(n)/u_min + u+(n)/u_max <= 1 (a zero bound drops its term and the box
/// rows pin that input to zero). SoC bounds cover x(k+1..k+N-1), plus x(k+N)
/// when constrain_terminal is set; x(k) = x0 is data, not a constraint row.
template <typename Scalar>
Polytope<Scalar> build_polytope_U(const SubsystemParams<Scalar>& params, Scalar soc0,
                                  Eigen::Index horizon, Scalar T, bool constrain_terminal = true) {
    const Eigen::Index n_soc = horizon - 1 + (constrain_terminal ? 1 : 0);
    Polytope<Scalar> poly;
    poly.h = build_polytope_rhs_U(params, soc0, horizon, constrain_terminal);
    poly.G = Matrix<Scalar>::Zero(poly.h.size(), 2 * horizon);
    poly.layout = "stacked (charge, discharge) pairs over " + std::to_string(horizon) + " steps";

    Eigen::Index r = 0;
    for (Eigen::Index n = 0; n < horizon; ++n) {
        poly.G(r++, discharge_index(n)) = Scalar(1);   // u- <= 0
        poly.G(r++, discharge_index(n)) = Scalar(-1);  // u- >= u_min
        poly.G(r++, charge_index(n)) = Scalar(1);      // u+ <= u_max
        poly.G(r++, charge_index(n)) = Scalar(-1);     // u+ >= 0
        if (params.u_max > Scalar(0)) poly.G(r, charge_index(n)) = Scalar(1) / params.u_max;
        if (params.u_min < Scalar(0)) poly.G(r, discharge_index(n)) = Scalar(1) / params.u_min;
        ++r;
    }

    // Convolution coefficients of the eliminated SoC chain.
    for (Eigen::Index j = 1; j <= n_soc; ++j) {
        for (Eigen::Index l = 0; l < j; ++l) {
            const Scalar decay =
                Scalar(std::pow(static_cast<double>(params.alpha), static_cast<double>(j - 1 - l)));
            poly.G(r, charge_index(l)) = T * decay * params.beta;
            poly.G(r, discharge_index(l)) = T * decay;
            poly.G(r + 1, charge_index(l)) = -T * decay * params.beta;
            poly.G(r + 1, discharge_index(l)) = -T * decay;
        }
        r += 2;
    }
    return poly;
}

/// Feasible sets for every subsystem of a scenario at the given SoC vector.
template <typename Scalar>
std::vector<Polytope<Scalar>> build_polytopes_U(const GridScenario<Scalar>& scenario,
                                                const Eigen::Ref<const Vector<Scalar>>& soc,
                                                Eigen::Index horizon,
                                                bool constrain_terminal = true) {
    if (soc.size() != scenario.size()) throw std::invalid_argument("one SoC per subsystem required");
    std::vector<Polytope<Scalar>> sets;
    sets.reserve(static_cast<std::size_t>(scenario.size()));
    for (Eigen::Index i = 0; i < scenario.size(); ++i)
        sets.push_back(build_polytope_U<Scalar>(scenario.subsystems[i], soc[i], horizon, scenario.T,
                                                constrain_terminal));
    return sets;
}

}  // namespace sparsegrid
