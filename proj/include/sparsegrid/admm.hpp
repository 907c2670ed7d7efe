#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "sparsegrid/parallel.hpp"
#include "sparsegrid/problem.hpp"
#include "sparsegrid/qpcore.hpp"

namespace sparsegrid {

/// Placement of the multiplier update: `paper` updates lambda inside the
/// parallel step against the stale consensus iterate, `standard` after the
/// consensus step against the fresh one.
enum class DualUpdateOrder { paper, standard };

enum class AdmmStatus { converged, max_iter };

template <typename Scalar = double>
struct AdmmConfig {
    Scalar rho0{1};                ///< initial dual step size, > 0
    Scalar eps{Scalar(1e-4)};      ///< stop tolerance on both residuals, > 0
    Scalar eta{2};                 ///< step-size rescale factor, > 1
    Scalar mu{10};                 ///< residual imbalance trigger, > 1
    int max_iter{5000};
    Scalar inner_tol{Scalar(1e-6)};  ///< local-solver fixed-point tolerance
    int inner_max_iter{500};
    DualUpdateOrder dual_update_order{DualUpdateOrder::paper};
    QpOptions qp{};                ///< local QP subproblem options
    int threads{1};                ///< workers for the parallel step (0 = all)
    bool record_trace{false};      ///< keep per-iteration objective trace
    bool track_feasibility{false}; ///< record worst constraint violation over all u iterates

    void validate() const {
        if (!(rho0 > Scalar(0)) || !(eps > Scalar(0)) || !(eta > Scalar(1)) || !(mu > Scalar(1)))
            throw std::invalid_argument("admm config requires rho0, eps > 0 and eta, mu > 1");
        if (max_iter < 1 || inner_max_iter < 1)
            throw std::invalid_argument("iteration limits must be >= 1");
    }
};

/// Stacked iterates of one solve; u, v, lambda are block-partitioned into I
/// groups of 2N.
template <typename Scalar = double>
struct AdmmState {
    Vector<Scalar> u;
    Vector<Scalar> v;
    Vector<Scalar> lambda;
    Scalar rho{1};
    int iteration{0};
};

template <typename Scalar = double>
struct Residuals {
    Scalar r_pri{0};
    Scalar r_dual{0};
};

/// Per-iteration message volume of the coordinator exchange: every subsystem
/// uploads its fresh control and multiplier blocks (4N floats) and receives
/// the consensus block plus the step size back (2N+1 floats).
struct CommsLedger {
    std::int64_t floats_up_per_iter{0};
    std::int64_t floats_down_per_iter{0};
    std::int64_t iterations{0};
    std::int64_t subsystems{0};

    std::int64_t total_floats_up() const { return floats_up_per_iter * subsystems * iterations; }
    std::int64_t total_floats_down() const { return floats_down_per_iter * subsystems * iterations; }
};

template <typename Scalar = double>
struct TraceRow {
    int iteration{0};
    Scalar r_pri{0};
    Scalar r_dual{0};
    Scalar rho{0};
    Scalar objective{0};
    Scalar augmented_lagrangian{0};
};

template <typename Scalar = double>
struct AdmmResult {
    Vector<Scalar> u;
    Vector<Scalar> v;
    Vector<Scalar> lambda;
    Scalar rho_final{0};
    int iterations{0};
    AdmmStatus status{AdmmStatus::max_iter};
    std::vector<Residuals<Scalar>> residual_history;
    std::vector<TraceRow<Scalar>> trace;
    CommsLedger ledger;
    int local_failures{0};  ///< local solves that hit their iteration cap
    Scalar max_membership_violation{0};
};

/// Group shrinkage S_a(x) = max(1 - a/||x||_2, 0) * x, with S_a(0) = 0.
template <typename Derived>
Vector<typename Derived::Scalar> soft_threshold(typename Derived::Scalar a,
                                                const Eigen::MatrixBase<Derived>& x) {
    using Scalar = typename Derived::Scalar;
    if (a < Scalar(0)) throw std::invalid_argument("shrinkage parameter must be >= 0");
    const Scalar norm = x.norm();
    if (norm <= a) return Vector<Scalar>::Zero(x.size());
    return ((Scalar(1) - a / norm) * x).eval();
}

/// lambda' = lambda + rho * (v_old - u_new).
template <typename Scalar>
Vector<Scalar> dual_update(const Eigen::Ref<const Vector<Scalar>>& lambda, Scalar rho,
                           const Eigen::Ref<const Vector<Scalar>>& v_old,
                           const Eigen::Ref<const Vector<Scalar>>& u_new) {
    return lambda + rho * (v_old - u_new);
}

/// r_pri = rho*||u - v||, r_dual = rho*||v - v_old||; both step-size scaled.
template <typename Scalar>
Residuals<Scalar> residuals(const Eigen::Ref<const Vector<Scalar>>& u_new,
                            const Eigen::Ref<const Vector<Scalar>>& v_new,
                            const Eigen::Ref<const Vector<Scalar>>& v_old, Scalar rho) {
    return {rho * (u_new - v_new).norm(), rho * (v_new - v_old).norm()};
}

/// Residual-balancing step-size rule; on the (measure-zero) double trigger
/// the increase wins so the update is deterministic.
template <typename Scalar>
Scalar adapt_rho(Scalar rho, const Residuals<Scalar>& res, Scalar eta, Scalar mu) {
    if (!(eta > Scalar(1)) || !(mu > Scalar(1)))
        throw std::invalid_argument("adapt_rho requires eta, mu > 1");
    if (res.r_pri >= mu * res.r_dual) return rho * eta;
    if (res.r_dual >= mu * res.r_pri) return rho / eta;
    return rho;
}

/// Exact minimizer of (1/N)*||A*v - b||^2 + (rho/2)*||v - u + lambda/rho||^2.
/// Uses A*A^T = c*I and the matrix-inversion identity, so the cost is O(N*I)
/// and no 2NI x 2NI system is ever formed.
template <typename Scalar>
Vector<Scalar> consensus_update(const PeakShavingProblem<Scalar>& problem,
                                const Eigen::Ref<const Vector<Scalar>>& u_new,
                                const Eigen::Ref<const Vector<Scalar>>& lambda, Scalar rho) {
    if (!(rho > Scalar(0))) throw std::invalid_argument("rho must be positive");
    const Scalar a = Scalar(2) / Scalar(problem.horizon());
    const Scalar c = problem.coupling.gram_scale();
    Vector<Scalar> q = a * problem.coupling.apply_adjoint(problem.b);
    q -= lambda;
    q += rho * u_new;
    const Vector<Scalar> correction =
        problem.coupling.apply_adjoint(problem.coupling.apply(q));
    return (q - (a / (rho + a * c)) * correction) / rho;
}

/// Proximal machinery of one subsystem: the feasible set, a projection
/// workspace, an l1-epigraph workspace and the inner-loop warm state. The
/// polytope geometry is fixed; only its right-hand side moves between
/// receding-horizon steps, so factorizations are built once.
template <typename Scalar = double>
class LocalSolver {
public:
    LocalSolver(Polytope<Scalar> u_set, QpOptions qp_opts)
        : u_set_(std::move(u_set)), qp_opts_(qp_opts) {}

    const Polytope<Scalar>& feasible_set() const { return u_set_; }

    void update_rhs(const Eigen::Ref<const Vector<Scalar>>& h) {
        if (h.size() != u_set_.h.size()) throw std::invalid_argument("rhs size mismatch");
        u_set_.h = h;
        if (proj_ws_) proj_ws_->update_rhs(h);
        if (epi_ws_) epi_ws_->update_rhs(lifted_rhs());
    }

    /// Euclidean projection onto the feasible set, warm-started.
    Vector<Scalar> project(const Eigen::Ref<const Vector<Scalar>>& point, bool* converged = nullptr) {
        QpSolution<Scalar> sol = proj_ws().solve(-point);
        if (sol.status == QpStatus::infeasible)
            throw std::invalid_argument("local feasible set is empty");
        if (converged) *converged = (sol.status == QpStatus::solved);
        return std::move(sol.y);
    }

    /// argmin (sigma_t/rho)*||u||_1 + 1/2*||u - target||^2 over the feasible
    /// set, by lifting |u_j| <= s_j into 2N auxiliary variables and solving
    /// the resulting QP. target = lambda/rho + v.
    Vector<Scalar> prox_l1(const Eigen::Ref<const Vector<Scalar>>& target, Scalar sigma_t,
                           Scalar rho, bool* converged = nullptr) {
        if (!(rho > Scalar(0))) throw std::invalid_argument("rho must be positive");
        if (sigma_t == Scalar(0)) return project(target, converged);
        const Eigen::Index dim = u_set_.dim();
        Vector<Scalar> g(2 * dim);
        g.head(dim) = -target;
        g.tail(dim).setConstant(sigma_t / rho);
        QpSolution<Scalar> sol = epi_ws().solve(g);
        if (sol.status == QpStatus::infeasible)
            throw std::invalid_argument("local feasible set is empty");
        if (converged) *converged = (sol.status == QpStatus::solved);
        return sol.y.head(dim).eval();
    }

    /// argmin (sigma_t/rho)*||u||_2 + 1/2*||u - target||^2 over the feasible
    /// set via the inner splitting: group soft-threshold, projection, dual
    /// update, run at the fixed step size rho until the fixed point is
    /// reached to inner_tol. target = v + lambda/rho; u_prev seeds the first
    /// call, later calls continue from the carried warm state.
    Vector<Scalar> prox_group(const Eigen::Ref<const Vector<Scalar>>& u_prev,
                              const Eigen::Ref<const Vector<Scalar>>& v_i,
                              const Eigen::Ref<const Vector<Scalar>>& lambda_i, Scalar sigma_t,
                              Scalar rho, Scalar inner_tol, int inner_max_iter,
                              bool* converged = nullptr) {
        if (!(rho > Scalar(0))) throw std::invalid_argument("rho must be positive");
        const Vector<Scalar> target = v_i + lambda_i / rho;
        if (sigma_t == Scalar(0)) return project(target, converged);
        const Eigen::Index dim = u_set_.dim();
        if (inner_s_.size() != dim) {
            inner_s_ = u_prev;
            inner_xi_ = Vector<Scalar>::Zero(dim);
        }
        Vector<Scalar> u = u_prev;
        bool all_proj_ok = true;
        bool reached = false;
        for (int j = 0; j < inner_max_iter; ++j) {
            const Vector<Scalar> s_old = inner_s_;
            inner_s_ = soft_threshold<>(sigma_t / rho, (u + inner_xi_ / rho).eval());
            bool proj_ok = true;
            u = project((Scalar(0.5) * (target + inner_s_ - inner_xi_ / rho)).eval(), &proj_ok);
            all_proj_ok = all_proj_ok && proj_ok;
            inner_xi_ += rho * (u - inner_s_);
            const Scalar r_pri = (u - inner_s_).norm();
            const Scalar r_dual = rho * (inner_s_ - s_old).norm();
            if (r_pri <= inner_tol && r_dual <= inner_tol) {
                reached = true;
                break;
            }
        }
        if (converged) *converged = reached && all_proj_ok;
        return u;
    }

    void reset_warm() {
        if (proj_ws_) proj_ws_->reset();
        if (epi_ws_) epi_ws_->reset();
        inner_s_.resize(0);
        inner_xi_.resize(0);
    }

private:
    QpWorkspace<Scalar>& proj_ws() {
        if (!proj_ws_) {
            const Eigen::Index dim = u_set_.dim();
            proj_ws_.emplace(Matrix<Scalar>::Identity(dim, dim), u_set_, qp_opts_);
        }
        return *proj_ws_;
    }

    QpWorkspace<Scalar>& epi_ws() {
        if (!epi_ws_) {
            const Eigen::Index dim = u_set_.dim();
            const Eigen::Index rows = u_set_.rows();
            Matrix<Scalar> H = Matrix<Scalar>::Zero(2 * dim, 2 * dim);
            H.topLeftCorner(dim, dim).setIdentity();
            Polytope<Scalar> lifted;
            lifted.G = Matrix<Scalar>::Zero(rows + 2 * dim, 2 * dim);
            lifted.G.topLeftCorner(rows, dim) = u_set_.G;
            lifted.G.block(rows, 0, dim, dim).setIdentity();
            lifted.G.block(rows, dim, dim, dim) = -Matrix<Scalar>::Identity(dim, dim);
            lifted.G.block(rows + dim, 0, dim, dim) = -Matrix<Scalar>::Identity(dim, dim);
            lifted.G.block(rows + dim, dim, dim, dim) = -Matrix<Scalar>::Identity(dim, dim);
            lifted.h = lifted_rhs();
            lifted.layout = u_set_.layout + " + |u| epigraph";
            epi_ws_.emplace(std::move(H), lifted, qp_opts_);
        }
        return *epi_ws_;
    }

    Vector<Scalar> lifted_rhs() const {
        Vector<Scalar> h(u_set_.rows() + 2 * u_set_.dim());
        h.head(u_set_.rows()) = u_set_.h;
        h.tail(2 * u_set_.dim()).setZero();
        return h;
    }

    Polytope<Scalar> u_set_;
    QpOptions qp_opts_;
    std::optional<QpWorkspace<Scalar>> proj_ws_;
    std::optional<QpWorkspace<Scalar>> epi_ws_;
    Vector<Scalar> inner_s_, inner_xi_;
};

/// One-shot l1 local update; target = lambda/rho + v.
template <typename Scalar>
Vector<Scalar> local_update_p1(const Eigen::Ref<const Vector<Scalar>>& target, Scalar sigma_t,
                               Scalar rho, const Polytope<Scalar>& u_set, QpOptions qp = {}) {
    LocalSolver<Scalar> local(u_set, qp);
    return local.prox_l1(target, sigma_t, rho);
}

/// One-shot group-norm local update.
template <typename Scalar>
Vector<Scalar> local_update_p2(const Eigen::Ref<const Vector<Scalar>>& u_prev,
                               const Eigen::Ref<const Vector<Scalar>>& v_i,
                               const Eigen::Ref<const Vector<Scalar>>& lambda_i, Scalar sigma_t,
                               Scalar rho, const Polytope<Scalar>& u_set, Scalar inner_tol,
                               int inner_max_iter, QpOptions qp = {}, bool* converged = nullptr) {
    LocalSolver<Scalar> local(u_set, qp);
    return local.prox_group(u_prev, v_i, lambda_i, sigma_t, rho, inner_tol, inner_max_iter,
                            converged);
}

/// Consensus splitting over the subsystems: parallel proximal updates against
/// the feasible sets, a closed-form coupling update at the coordinator,
/// step-size-scaled residuals for the stop test and residual balancing for
/// the step size. Keeps all per-subsystem factorizations and warm states
/// alive between solves so a receding-horizon loop pays setup cost once.
template <typename Scalar = double>
class AdmmSolver {
public:
    AdmmSolver(const std::vector<Polytope<Scalar>>& feasible_sets, AdmmConfig<Scalar> config)
        : cfg_(config) {
        cfg_.validate();
        if (feasible_sets.empty()) throw std::invalid_argument("need at least one subsystem");
        locals_.reserve(feasible_sets.size());
        for (const auto& s : feasible_sets) locals_.emplace_back(s, cfg_.qp);
    }

    Eigen::Index subsystem_count() const { return static_cast<Eigen::Index>(locals_.size()); }

    LocalSolver<Scalar>& local(Eigen::Index i) { return locals_[static_cast<std::size_t>(i)]; }

    void update_polytope_rhs(Eigen::Index i, const Eigen::Ref<const Vector<Scalar>>& h) {
        locals_[static_cast<std::size_t>(i)].update_rhs(h);
    }

    AdmmResult<Scalar> solve(const PeakShavingProblem<Scalar>& problem,
                             const AdmmState<Scalar>& init) {
        problem.validate();
        const Eigen::Index count = subsystem_count();
        const Eigen::Index horizon = problem.horizon();
        const Eigen::Index block = 2 * horizon;
        const Eigen::Index total = block * count;
        if (problem.subsystem_count() != count)
            throw std::invalid_argument("problem and solver disagree on subsystem count");
        if (init.u.size() != total || init.v.size() != total || init.lambda.size() != total)
            throw std::invalid_argument("initial iterates have wrong size");

        Vector<Scalar> u = init.u;
        Vector<Scalar> v = init.v;
        Vector<Scalar> lambda = init.lambda;
        Scalar rho = init.rho > Scalar(0) ? init.rho : cfg_.rho0;
        const Vector<Scalar> sigma_t = problem.scaled_weights();

        AdmmResult<Scalar> result;
        result.status = AdmmStatus::max_iter;
        std::vector<int> failures(static_cast<std::size_t>(count), 0);
        std::vector<Scalar> violations(static_cast<std::size_t>(count), Scalar(0));

        Vector<Scalar> v_old(total);
        for (int m = 0; m < cfg_.max_iter; ++m) {
            v_old = v;
            parallel_for(0, count, cfg_.threads, [&](Eigen::Index i) {
                auto& local = locals_[static_cast<std::size_t>(i)];
                const auto vi = v.segment(i * block, block);
                const auto li = lambda.segment(i * block, block);
                bool ok = true;
                Vector<Scalar> ui;
                if (problem.p == 1) {
                    const Vector<Scalar> target = li / rho + vi;
                    ui = local.prox_l1(target, sigma_t[i], rho, &ok);
                } else {
                    ui = local.prox_group(u.segment(i * block, block), vi, li, sigma_t[i], rho,
                                          cfg_.inner_tol, cfg_.inner_max_iter, &ok);
                }
                if (!ok) ++failures[static_cast<std::size_t>(i)];
                if (cfg_.track_feasibility) {
                    violations[static_cast<std::size_t>(i)] =
                        std::max(violations[static_cast<std::size_t>(i)],
                                 local.feasible_set().max_violation(ui));
                }
                u.segment(i * block, block) = ui;
                if (cfg_.dual_update_order == DualUpdateOrder::paper)
                    lambda.segment(i * block, block) = li + rho * (vi - ui);
            });

            v = consensus_update<Scalar>(problem, u, lambda, rho);
            if (cfg_.dual_update_order == DualUpdateOrder::standard) lambda += rho * (v - u);

            const Residuals<Scalar> res = residuals<Scalar>(u, v, v_old, rho);
            result.residual_history.push_back(res);
            result.iterations = m + 1;
            if (cfg_.record_trace) {
                TraceRow<Scalar> row;
                row.iteration = m;
                row.r_pri = res.r_pri;
                row.r_dual = res.r_dual;
                row.rho = rho;
                row.objective = objective_value<Scalar>(problem, u);
                const Vector<Scalar> gap = v - u;
                row.augmented_lagrangian =
                    (problem.coupling.apply(v) - problem.b).squaredNorm() / Scalar(horizon) +
                    mixed_norm<Scalar>(u, sigma_t, problem.p) + lambda.dot(gap) +
                    Scalar(0.5) * rho * gap.squaredNorm();
                result.trace.push_back(row);
            }
            if (res.r_pri <= cfg_.eps && res.r_dual <= cfg_.eps) {
                result.status = AdmmStatus::converged;
                break;
            }
            rho = adapt_rho<Scalar>(rho, res, cfg_.eta, cfg_.mu);
        }

        result.u = std::move(u);
        result.v = std::move(v);
        result.lambda = std::move(lambda);
        result.rho_final = rho;
        for (const int f : failures) result.local_failures += f;
        for (const Scalar viol : violations)
            result.max_membership_violation = std::max(result.max_membership_violation, viol);
        result.ledger.floats_up_per_iter = 4 * horizon;
        result.ledger.floats_down_per_iter = 2 * horizon + 1;
        result.ledger.subsystems = count;
        result.ledger.iterations = result.iterations;
        return result;
    }

private:
    AdmmConfig<Scalar> cfg_;
    std::vector<LocalSolver<Scalar>> locals_;
};

/// Zero-initialized iterates at the configured step size.
template <typename Scalar>
AdmmState<Scalar> make_cold_state(Eigen::Index subsystems, Eigen::Index horizon, Scalar rho0) {
    AdmmState<Scalar> s;
    s.u = Vector<Scalar>::Zero(2 * horizon * subsystems);
    s.v = s.u;
    s.lambda = s.u;
    s.rho = rho0;
    return s;
}

/// One-shot solve; builds the per-subsystem machinery and discards it.
template <typename Scalar>
AdmmResult<Scalar> admm_solve(const PeakShavingProblem<Scalar>& problem,
                              const std::vector<Polytope<Scalar>>& feasible_sets,
                              const AdmmConfig<Scalar>& config, const AdmmState<Scalar>& init) {
    AdmmSolver<Scalar> solver(feasible_sets, config);
    return solver.solve(problem, init);
}

}  // namespace sparsegrid
