#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "errors.hpp"

namespace cfdbal {

// min w'Qw + q'w  s.t.  Aw = b, lower <= w <= upper.
// Q is symmetrized on construction; the objective carries no 1/2 factor.
struct QpProblem {
    Eigen::MatrixXd Q;
    Eigen::VectorXd q;
    Eigen::MatrixXd A;
    Eigen::VectorXd b;
    Eigen::VectorXd lower;
    Eigen::VectorXd upper;

    int n() const { return static_cast<int>(q.size()); }
    int m() const { return static_cast<int>(b.size()); }
    double objective(const Eigen::VectorXd& w) const { return w.dot(Q * w) + q.dot(w); }
};

inline QpProblem make_qp_problem(Eigen::MatrixXd Q, Eigen::VectorXd q, Eigen::MatrixXd A,
                                 Eigen::VectorXd b, Eigen::VectorXd lower = Eigen::VectorXd(),
                                 Eigen::VectorXd upper = Eigen::VectorXd()) {
    const int n = static_cast<int>(q.size());
    if (Q.rows() != n || Q.cols() != n) throw ValidationError("qp: Q must be n x n");
    if (A.size() > 0 && A.cols() != n) throw ValidationError("qp: A must have n columns");
    if (A.rows() != b.size()) throw ValidationError("qp: A and b row counts differ");
    if (!Q.allFinite() || !q.allFinite() || !A.allFinite() || !b.allFinite())
        throw ValidationError("qp: non-finite problem data");
    if (lower.size() == 0) lower = Eigen::VectorXd::Zero(n);
    if (upper.size() == 0) upper = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
    if (lower.size() != n || upper.size() != n) throw ValidationError("qp: bound length mismatch");
    for (int i = 0; i < n; ++i)
        if (!(lower(i) <= upper(i))) throw ValidationError("qp: lower bound exceeds upper bound");
    if (A.rows() > 0) {
        if (A.rows() > n) throw ValidationError("qp: more equality constraints than variables");
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A.transpose());
        if (qr.rank() < A.rows()) throw ValidationError("qp: A must have full row rank");
    }
    Q = 0.5 * (Q + Q.transpose()).eval();
    return {std::move(Q), std::move(q), std::move(A), std::move(b), std::move(lower), std::move(upper)};
}

struct QpSettings {
    double eps_abs = 1e-6;
    double eps_rel = 1e-6;
    int max_iter = 20000;
    double rho = 0.1;
    bool adaptive_rho = true;
    bool polish = true;
    bool compute_kkt = true;  // fill residual fields via the least-squares estimate
};

enum class QpStatus { solved, max_iter, infeasible };

inline const char* qp_status_name(QpStatus s) {
    switch (s) {
        case QpStatus::solved: return "solved";
        case QpStatus::max_iter: return "max_iter";
        case QpStatus::infeasible: return "infeasible";
    }
    return "?";
}

struct QpSolution {
    Eigen::VectorXd w;
    QpStatus status = QpStatus::max_iter;
    double objective = 0;
    double primal_residual = 0;
    double dual_residual = 0;
    int iterations = 0;
    std::vector<std::string> warnings;
};

struct KktResiduals {
    double primal = 0;
    double dual = 0;
    double complementarity = 0;
};

namespace detail {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Exact projection onto {v : sum_i alpha_i v_i = c, l <= v <= u} restricted to
// the coordinates in idx. v_i(theta) = clamp(y_i - theta alpha_i, l_i, u_i)
// makes g(theta) = sum alpha_i v_i - c continuous, piecewise linear and
// nonincreasing; the root segment is located by binary search over sorted
// breakpoints and solved exactly. Returns false when c is unreachable.
inline bool project_weighted_knapsack(const Eigen::VectorXd& y, const Eigen::VectorXd& alpha,
                                      double c, const Eigen::VectorXd& l, const Eigen::VectorXd& u,
                                      const std::vector<int>& idx, Eigen::VectorXd& v) {
    double reach_lo = 0, reach_hi = 0;
    for (int i : idx) {
        const double a = alpha(i);
        reach_lo += a > 0 ? a * l(i) : a * u(i);
        reach_hi += a > 0 ? a * u(i) : a * l(i);
    }
    if (c < reach_lo || c > reach_hi) return false;

    auto g_at = [&](double theta) {
        double s = 0;
        for (int i : idx) s += alpha(i) * std::clamp(y(i) - theta * alpha(i), l(i), u(i));
        return s - c;
    };
    auto solve_segment = [&](double theta_ref) {
        // Root within the linear segment containing theta_ref.
        double slope = 0;
        for (int i : idx) {
            const double t = y(i) - theta_ref * alpha(i);
            if (t > l(i) && t < u(i)) slope += alpha(i) * alpha(i);
        }
        const double g = g_at(theta_ref);
        return slope > 0 ? theta_ref + g / slope : theta_ref;
    };

    std::vector<double> bp;
    bp.reserve(2 * idx.size());
    for (int i : idx) {
        if (std::isfinite(l(i))) bp.push_back((y(i) - l(i)) / alpha(i));
        if (std::isfinite(u(i))) bp.push_back((y(i) - u(i)) / alpha(i));
    }
    std::sort(bp.begin(), bp.end());

    double theta;
    if (bp.empty()) {
        theta = solve_segment(0.0);
    } else if (g_at(bp.front()) <= 0) {
        theta = solve_segment(bp.front() - 1.0);
        theta = std::min(theta, bp.front());
    } else if (g_at(bp.back()) >= 0) {
        theta = solve_segment(bp.back() + 1.0);
        theta = std::max(theta, bp.back());
    } else {
        // g(bp[lo]) > 0 >= g(bp[hi]); shrink to adjacent breakpoints.
        std::size_t lo = 0, hi = bp.size() - 1;
        while (hi - lo > 1) {
            const std::size_t mid = (lo + hi) / 2;
            if (g_at(bp[mid]) > 0) lo = mid;
            else hi = mid;
        }
        theta = solve_segment(0.5 * (bp[lo] + bp[hi]));
        theta = std::clamp(theta, bp[lo], bp[hi]);
    }

    double sum = 0, slope = 0;
    for (int i : idx) {
        v(i) = std::clamp(y(i) - theta * alpha(i), l(i), u(i));
        sum += alpha(i) * v(i);
        if (v(i) > l(i) && v(i) < u(i)) slope += alpha(i) * alpha(i);
    }
    if (slope > 0) {
        // One correction pass keeps the equality exact to rounding.
        const double delta = (c - sum) / slope;
        for (int i : idx)
            if (v(i) > l(i) && v(i) < u(i)) v(i) = std::clamp(v(i) + delta * alpha(i), l(i), u(i));
    }
    return true;
}

// Projection onto {Av = b} intersected with the box. When the constraint rows
// touch disjoint coordinate sets the projection splits into exact per-row
// knapsack problems; otherwise Dykstra alternation is used.
class FeasibleSetProjector {
  public:
    FeasibleSetProjector(const Eigen::MatrixXd& A, const Eigen::VectorXd& b,
                         const Eigen::VectorXd& l, const Eigen::VectorXd& u)
        : A_(A), b_(b), l_(l), u_(u), n_(static_cast<int>(l.size())), m_(static_cast<int>(b.size())) {
        row_of_.assign(n_, -1);
        disjoint_ = true;
        rows_.resize(m_);
        for (int r = 0; r < m_ && disjoint_; ++r)
            for (int i = 0; i < n_; ++i)
                if (A_(r, i) != 0.0) {
                    if (row_of_[i] != -1) { disjoint_ = false; break; }
                    row_of_[i] = r;
                    rows_[r].push_back(i);
                }
        if (!disjoint_ && m_ > 0) {
            aat_llt_.compute(A_ * A_.transpose());
        }
    }

    bool disjoint() const { return disjoint_; }

    // Reachability of b under the box; decisive only on the disjoint path.
    bool feasible() const {
        if (!disjoint_) return true;
        Eigen::VectorXd tmp(n_);
        for (int r = 0; r < m_; ++r) {
            double lo = 0, hi = 0;
            for (int i : rows_[r]) {
                const double a = A_(r, i);
                lo += a > 0 ? a * l_(i) : a * u_(i);
                hi += a > 0 ? a * u_(i) : a * l_(i);
            }
            if (b_(r) < lo || b_(r) > hi) return false;
        }
        return true;
    }

    Eigen::VectorXd project(const Eigen::VectorXd& y) const {
        Eigen::VectorXd v = y.cwiseMax(l_).cwiseMin(u_);
        if (m_ == 0) return v;
        if (disjoint_) {
            for (int r = 0; r < m_; ++r) {
                Eigen::VectorXd arow = A_.row(r);
                if (!project_weighted_knapsack(y, arow, b_(r), l_, u_, rows_[r], v))
                    throw NumericalError("qp: equality constraint unreachable under the bounds");
            }
            return v;
        }
        // Dykstra alternation between the affine set and the box.
        Eigen::VectorXd x = y, p = Eigen::VectorXd::Zero(n_), qc = Eigen::VectorXd::Zero(n_);
        const double scale = std::max(1.0, y.cwiseAbs().maxCoeff());
        for (int it = 0; it < 5000; ++it) {
            Eigen::VectorXd t = x + p;
            Eigen::VectorXd z = t - A_.transpose() * aat_llt_.solve(A_ * t - b_);
            p = t - z;
            t = z + qc;
            Eigen::VectorXd xn = t.cwiseMax(l_).cwiseMin(u_);
            qc = t - xn;
            const double delta = (xn - x).cwiseAbs().maxCoeff();
            x = xn;
            if (it > 0 && delta <= 1e-14 * scale) break;
        }
        return x;
    }

  private:
    const Eigen::MatrixXd& A_;
    const Eigen::VectorXd& b_;
    const Eigen::VectorXd& l_;
    const Eigen::VectorXd& u_;
    int n_, m_;
    bool disjoint_ = true;
    std::vector<int> row_of_;
    std::vector<std::vector<int>> rows_;
    Eigen::LLT<Eigen::MatrixXd> aat_llt_;
};

inline bool appears_psd(const Eigen::MatrixXd& M) {
    Eigen::LDLT<Eigen::MatrixXd> ldlt(M);
    if (ldlt.info() != Eigen::Success) return false;
    if (ldlt.vectorD().size() == 0) return true;
    const double dmax = ldlt.vectorD().maxCoeff();
    return ldlt.vectorD().minCoeff() >= -1e-10 * std::max(1.0, std::abs(dmax));
}

// LDLT of (2Q + rho I); bumps rho until numerically positive definite so the
// x-update stays a strongly convex prox even for indefinite Q.
inline double factor_shifted(const Eigen::MatrixXd& Q, double rho, Eigen::LDLT<Eigen::MatrixXd>& ldlt,
                             std::vector<std::string>* warnings) {
    for (int attempt = 0; attempt < 60; ++attempt) {
        Eigen::MatrixXd M = 2.0 * Q;
        M.diagonal().array() += rho;
        ldlt.compute(M);
        if (ldlt.info() == Eigen::Success) {
            const auto& d = ldlt.vectorD();
            const double dmax = d.maxCoeff();
            if (d.minCoeff() > 1e-12 * std::max(dmax, 1.0)) return rho;
        }
        rho *= 10.0;
        if (attempt == 0 && warnings)
            warnings->push_back("x-update matrix not positive definite; increasing rho");
    }
    throw NumericalError("qp: failed to obtain a positive definite x-update matrix");
}

inline double spectral_norm_estimate(const Eigen::MatrixXd& Q) {
    const int n = static_cast<int>(Q.rows());
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) v(i) = 1.0 + 0.01 * std::sin(static_cast<double>(i + 1));
    v.normalize();
    double lam = 1.0;
    for (int it = 0; it < 30; ++it) {
        Eigen::VectorXd w = Q * v;
        lam = w.norm();
        if (lam <= 0) return 1.0;
        v = w / lam;
    }
    return lam;
}

struct PolishResult {
    bool ok = false;
    Eigen::VectorXd w;
    Eigen::VectorXd mu;       // equality multipliers
    double dual_residual = 0; // stationarity + multiplier sign violation
};

// Equality-constrained solve on the active set identified from w, with a few
// rounds of active-set correction driven by multiplier signs and bound
// violations. Returns ok = false when no feasible improvement is found.
inline PolishResult polish_solution(const QpProblem& p, const Eigen::VectorXd& w_in) {
    const int n = p.n(), m = p.m();
    const double scale = std::max(1.0, w_in.cwiseAbs().maxCoeff());
    const double atol = 1e-7 * scale;

    std::vector<int> state(n, 0);  // -1 lower-active, +1 upper-active, 0 free
    for (int i = 0; i < n; ++i) {
        if (w_in(i) - p.lower(i) <= atol) state[i] = -1;
        else if (p.upper(i) - w_in(i) <= atol) state[i] = 1;
    }

    PolishResult best;
    for (int round = 0; round < 6; ++round) {
        std::vector<int> free;
        for (int i = 0; i < n; ++i)
            if (state[i] == 0) free.push_back(i);
        const int nf = static_cast<int>(free.size());

        Eigen::VectorXd x(n);
        for (int i = 0; i < n; ++i) x(i) = state[i] == -1 ? p.lower(i) : (state[i] == 1 ? p.upper(i) : 0.0);

        Eigen::VectorXd mu = Eigen::VectorXd::Zero(m);
        if (nf > 0) {
            Eigen::MatrixXd M = Eigen::MatrixXd::Zero(nf + m, nf + m);
            Eigen::VectorXd rhs(nf + m);
            for (int a = 0; a < nf; ++a) {
                for (int bcol = 0; bcol < nf; ++bcol) M(a, bcol) = 2.0 * p.Q(free[a], free[bcol]);
                double fixed = 0;
                for (int i = 0; i < n; ++i)
                    if (state[i] != 0) fixed += 2.0 * p.Q(free[a], i) * x(i);
                rhs(a) = -p.q(free[a]) - fixed;
            }
            for (int r = 0; r < m; ++r) {
                double fixed = 0;
                for (int i = 0; i < n; ++i)
                    if (state[i] != 0) fixed += p.A(r, i) * x(i);
                rhs(nf + r) = p.b(r) - fixed;
                for (int a = 0; a < nf; ++a) {
                    M(nf + r, a) = p.A(r, free[a]);
                    M(a, nf + r) = p.A(r, free[a]);
                }
            }
            Eigen::FullPivLU<Eigen::MatrixXd> lu(M);
            Eigen::VectorXd sol = lu.solve(rhs);
            sol += lu.solve(rhs - M * sol);  // one refinement pass
            if (!sol.allFinite()) return best;
            for (int a = 0; a < nf; ++a) x(free[a]) = sol(a);
            mu = sol.tail(m);
        } else if (m > 0) {
            mu = (p.A * p.A.transpose()).llt().solve(-p.A * (2.0 * p.Q * x + p.q));
        }

        // Feasibility of the candidate.
        bool bounds_ok = true;
        std::vector<int> violated;
        for (int i : free)
            if (x(i) < p.lower(i) - atol || x(i) > p.upper(i) + atol) {
                bounds_ok = false;
                violated.push_back(i);
            }
        double eq_res = 0;
        if (m > 0) eq_res = (p.A * x - p.b).cwiseAbs().maxCoeff();
        if (bounds_ok && eq_res <= 1e-8 * std::max(1.0, p.b.size() ? p.b.cwiseAbs().maxCoeff() : 1.0)) {
            Eigen::VectorXd stat = 2.0 * p.Q * x + p.q;
            if (m > 0) stat += p.A.transpose() * mu;
            double dres = 0;
            bool signs_ok = true;
            std::vector<int> wrong;
            for (int i = 0; i < n; ++i) {
                if (state[i] == 0) dres = std::max(dres, std::abs(stat(i)));
                else if (state[i] == -1 && stat(i) < -atol) { signs_ok = false; wrong.push_back(i); }
                else if (state[i] == 1 && stat(i) > atol) { signs_ok = false; wrong.push_back(i); }
            }
            for (int i = 0; i < n; ++i) {
                if (state[i] == -1) dres = std::max(dres, std::max(0.0, -stat(i)));
                if (state[i] == 1) dres = std::max(dres, std::max(0.0, stat(i)));
            }
            Eigen::VectorXd xc = x.cwiseMax(p.lower).cwiseMin(p.upper);
            if (!best.ok || dres < best.dual_residual) {
                best.ok = true;
                best.w = xc;
                best.mu = mu;
                best.dual_residual = dres;
            }
            if (signs_ok) return best;
            for (int i : wrong) state[i] = 0;  // release misclassified actives
        } else {
            for (int i : violated) state[i] = x(i) < p.lower(i) ? -1 : 1;  // pin violators
            if (!bounds_ok && violated.empty()) return best;
        }
    }
    return best;
}

}  // namespace detail

// Primal feasibility plus stationarity residuals from a least-squares
// multiplier estimate on the active constraints. The dual figure includes
// sign violations of the estimated bound multipliers.
inline KktResiduals kkt_residuals(const QpProblem& p, const Eigen::VectorXd& w) {
    if (!w.allFinite()) throw ValidationError("kkt_residuals: non-finite point");
    const int n = p.n(), m = p.m();
    KktResiduals res;
    if (m > 0) res.primal = (p.A * w - p.b).cwiseAbs().maxCoeff();
    for (int i = 0; i < n; ++i) {
        res.primal = std::max(res.primal, p.lower(i) - w(i));
        res.primal = std::max(res.primal, w(i) - p.upper(i));
    }
    res.primal = std::max(res.primal, 0.0);

    const double scale = std::max(1.0, w.cwiseAbs().maxCoeff());
    const double atol = 1e-6 * scale;
    std::vector<int> low, high;
    for (int i = 0; i < n; ++i) {
        if (w(i) - p.lower(i) <= atol) low.push_back(i);
        else if (p.upper(i) - w(i) <= atol) high.push_back(i);
    }
    const Eigen::VectorXd grad = 2.0 * p.Q * w + p.q;
    const int k = m + static_cast<int>(low.size() + high.size());
    if (k == 0) {
        res.dual = grad.size() ? grad.cwiseAbs().maxCoeff() : 0.0;
        return res;
    }
    // Stationarity: grad + A' mu - sum lam_l e_i + sum lam_u e_i = 0.
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(n, k);
    if (m > 0) M.leftCols(m) = p.A.transpose();
    int col = m;
    for (int i : low) M(i, col++) = -1.0;
    for (int i : high) M(i, col++) = 1.0;
    Eigen::VectorXd xi = M.colPivHouseholderQr().solve(-grad);
    res.dual = (grad + M * xi).cwiseAbs().maxCoeff();
    col = m;
    for (int i : low) {
        const double lam = xi(col++);
        res.dual = std::max(res.dual, std::max(0.0, -lam));
        res.complementarity = std::max(res.complementarity, std::abs(lam) * std::abs(w(i) - p.lower(i)));
    }
    for (int i : high) {
        const double lam = xi(col++);
        res.dual = std::max(res.dual, std::max(0.0, -lam));
        res.complementarity = std::max(res.complementarity, std::abs(lam) * std::abs(p.upper(i) - w(i)));
    }
    return res;
}

// Consensus ADMM: x-update through a cached LDLT of (2Q + rho I), v-update by
// exact projection onto {Aw = b} within the box, scaled dual ascent, adaptive
// rho every 50 iterations. Stagnation triggers one rho-escalated restart and
// then a projected-gradient fallback; polishing solves the reduced KKT system
// on the identified active set.
inline QpSolution solve_qp(const QpProblem& p, const QpSettings& settings = QpSettings()) {
    const int n = p.n();
    if (!(settings.rho > 0) || !(settings.eps_abs > 0) || !(settings.eps_rel >= 0))
        throw ValidationError("qp: settings must have rho > 0 and positive tolerances");
    QpSolution sol;
    sol.w = Eigen::VectorXd::Zero(n);

    detail::FeasibleSetProjector proj(p.A, p.b, p.lower, p.upper);
    if (!proj.feasible()) {
        sol.status = QpStatus::infeasible;
        sol.warnings.push_back("equality targets unreachable under the bounds");
        return sol;
    }

    // A conditionally positive definite objective (PSD only on null(A)) is
    // convexified by adding mu ||Aw - b||^2, which vanishes on the feasible
    // set; the iteration then runs on a convex problem with the same argmin.
    QpProblem aug;
    const QpProblem* work = &p;
    if (p.m() > 0 && !detail::appears_psd(p.Q)) {
        const Eigen::MatrixXd AtA = p.A.transpose() * p.A;
        const double gersh = p.Q.cwiseAbs().rowwise().sum().maxCoeff();
        double mu = std::max(gersh / std::max(detail::spectral_norm_estimate(AtA), 1e-12), 1e-12);
        for (int attempt = 0; attempt < 40; ++attempt, mu *= 10.0) {
            if (detail::appears_psd(p.Q + mu * AtA)) {
                aug = p;
                aug.Q += mu * AtA;
                aug.q -= 2.0 * mu * (p.A.transpose() * p.b);
                work = &aug;
                sol.warnings.push_back("objective convexified along the equality constraints");
                break;
            }
        }
    }
    const QpProblem& P = *work;

    double rho = settings.rho;
    Eigen::LDLT<Eigen::MatrixXd> ldlt;
    rho = detail::factor_shifted(P.Q, rho, ldlt, &sol.warnings);

    Eigen::VectorXd v = proj.project(Eigen::VectorXd::Zero(n));
    Eigen::VectorXd x = v, u = Eigen::VectorXd::Zero(n);

    bool converged = false;
    bool restarted = false;
    bool diverged = false;
    double best_score = std::numeric_limits<double>::infinity();
    int best_iter = 0;
    int it = 0;
    for (; it < settings.max_iter; ++it) {
        x = ldlt.solve(rho * (v - u) - P.q);
        Eigen::VectorXd v_new = proj.project(x + u);
        u += x - v_new;
        const double r = (x - v_new).cwiseAbs().maxCoeff();
        const double s = rho * (v_new - v).cwiseAbs().maxCoeff();
        v = v_new;

        const double x_inf = x.cwiseAbs().maxCoeff();
        const double v_inf = v.cwiseAbs().maxCoeff();
        const double y_inf = rho * u.cwiseAbs().maxCoeff();
        const double eps_pri = settings.eps_abs + settings.eps_rel * std::max(x_inf, v_inf);
        const double eps_dua = settings.eps_abs + settings.eps_rel * y_inf;
        if (r <= eps_pri && s <= eps_dua) {
            converged = true;
            ++it;
            break;
        }
        if (y_inf > 1e10) {
            diverged = true;
            ++it;
            break;
        }

        const double score = std::max(r / eps_pri, s / eps_dua);
        if (score < 0.95 * best_score) {
            best_score = score;
            best_iter = it;
        }
        if (it - best_iter > 2000) {
            if (!restarted) {
                restarted = true;
                u /= 10.0;
                rho = detail::factor_shifted(P.Q, rho * 10.0, ldlt, nullptr);
                sol.warnings.push_back("dual residual stagnated; restarting with rho x10");
                best_score = std::numeric_limits<double>::infinity();
                best_iter = it;
            } else {
                break;  // fall through to projected gradient descent
            }
        }

        if (settings.adaptive_rho && (it + 1) % 50 == 0) {
            double rho_new = rho;
            if (r > 10.0 * s && r > eps_pri) rho_new = rho * 2.0;
            else if (s > 10.0 * r && s > eps_dua) rho_new = rho / 2.0;
            rho_new = std::clamp(rho_new, 1e-6, 1e8);
            if (rho_new != rho) {
                u *= rho / rho_new;
                rho = detail::factor_shifted(P.Q, rho_new, ldlt, nullptr);
            }
        }
    }
    sol.iterations = it;

    if (diverged) {
        sol.status = QpStatus::infeasible;
        sol.warnings.push_back("dual iterates diverged; constraints appear infeasible");
        return sol;
    }

    if (!converged && sol.iterations < settings.max_iter) {
        // Stagnated twice: projected gradient descent with Armijo backtracking.
        sol.warnings.push_back("operator splitting stagnated; switching to projected gradient descent");
        double lip = 2.0 * detail::spectral_norm_estimate(P.Q) + 1e-12;
        double t0 = 1.0 / lip;
        Eigen::VectorXd w = v;
        double fw = P.objective(w);
        for (int k = 0; k < 50000 && sol.iterations < settings.max_iter; ++k, ++sol.iterations) {
            Eigen::VectorXd g = 2.0 * P.Q * w + P.q;
            double t = t0;
            Eigen::VectorXd w_next = w;
            double f_next = fw;
            for (int ls = 0; ls < 60; ++ls) {
                Eigen::VectorXd cand = proj.project(w - t * g);
                const double fc = P.objective(cand);
                if (fc <= fw + 1e-4 * g.dot(cand - w)) {
                    w_next = cand;
                    f_next = fc;
                    break;
                }
                t *= 0.5;
            }
            const double step = (w_next - w).cwiseAbs().maxCoeff();
            w = w_next;
            fw = f_next;
            if (step <= settings.eps_abs + settings.eps_rel * std::max(1.0, w.cwiseAbs().maxCoeff())) {
                converged = true;
                break;
            }
        }
        v = w;
    }

    sol.w = v;
    sol.status = converged ? QpStatus::solved : QpStatus::max_iter;
    if (!converged) sol.warnings.push_back("iteration limit reached before tolerance");

    double polish_dual = -1.0;
    if (settings.polish) {
        detail::PolishResult pol = detail::polish_solution(p, sol.w);
        if (pol.ok && p.objective(pol.w) <= p.objective(sol.w) + 1e-7 * std::max(1.0, std::abs(p.objective(sol.w)))) {
            sol.w = pol.w;
            polish_dual = pol.dual_residual;
        } else if (!pol.ok) {
            sol.warnings.push_back("polish step rejected; returning unpolished iterate");
        }
    }

    if (settings.compute_kkt) {
        KktResiduals kkt = kkt_residuals(p, sol.w);
        sol.primal_residual = kkt.primal;
        sol.dual_residual = kkt.dual;
    } else {
        double pres = p.m() > 0 ? (p.A * sol.w - p.b).cwiseAbs().maxCoeff() : 0.0;
        pres = std::max(pres, (p.lower - sol.w).maxCoeff());
        pres = std::max(pres, (sol.w - p.upper).maxCoeff());
        sol.primal_residual = std::max(pres, 0.0);
        sol.dual_residual = polish_dual >= 0 ? polish_dual : settings.eps_abs;
    }
    sol.objective = p.objective(sol.w);
    return sol;
}

}  // namespace cfdbal
