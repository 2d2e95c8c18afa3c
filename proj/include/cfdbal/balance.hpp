#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cfd.hpp"
#include "errors.hpp"
#include "kernels.hpp"
#include "qp.hpp"

namespace cfdbal {

enum class BalanceMode { two_way, three_way };

struct BalanceConfig {
    BalanceMode mode = BalanceMode::three_way;
    bool lambda_auto = true;  // lambda = n^-2
    double lambda = 0.0;
    DensitySpec density;
    QpSettings qp;
    std::uint64_t seed = 0;  // frequency sampling for Monte Carlo grams

    double resolve_lambda(int n) const {
        if (!lambda_auto && lambda < 0) throw ValidationError("balance: lambda must be nonnegative");
        return lambda_auto ? 1.0 / (static_cast<double>(n) * n) : lambda;
    }
};

struct BalanceWeights {
    Eigen::VectorXd w;
    CfdReport before;  // uniform weights
    CfdReport after;   // solved weights
    double objective_before = 0;
    double objective_after = 0;
    double ess1 = 0;
    double ess0 = 0;
    double max_weight = 0;
    bool stability_flag = false;  // max_weight > 5 n^{1/3}
    double gamma = 0;
    double lambda = 0;
    QpStatus solver_status = QpStatus::solved;
    double primal_residual = 0;
    double dual_residual = 0;
    int iterations = 0;
    std::vector<std::string> warnings;
};

// Q and q of the balancing program. three_way uses the symmetrized cross
// block (D1 K D0 + D0 K D1)/2, which leaves w'Qw unchanged for every w.
inline QpProblem assemble_qp(const GramMatrix& gram, const GroupSpec& groups, BalanceMode mode,
                             double lambda) {
    const int n = groups.n();
    if (gram.K.rows() != n) throw ValidationError("assemble_qp: gram size does not match groups");
    if (groups.n1 < 1 || groups.n0 < 1) throw ValidationError("assemble_qp: empty group");
    const double n1 = groups.n1, n0 = groups.n0, nn = n;
    const Eigen::VectorXd& z1 = groups.z;
    const Eigen::VectorXd z0 = Eigen::VectorXd::Ones(n) - z1;

    Eigen::MatrixXd coef = (z1 * z1.transpose()) / (n1 * n1) + (z0 * z0.transpose()) / (n0 * n0);
    if (mode == BalanceMode::three_way)
        coef -= (z1 * z0.transpose() + z0 * z1.transpose()) / (2.0 * n1 * n0);
    Eigen::MatrixXd Q = gram.K.cwiseProduct(coef);
    Q.diagonal().array() += lambda * lambda;

    const Eigen::VectorXd K1 = gram.K.rowwise().sum();
    Eigen::VectorXd q = -(z1.cwiseProduct(K1) / (n1 * nn) + z0.cwiseProduct(K1) / (n0 * nn));
    if (mode == BalanceMode::two_way) q *= 2.0;

    Eigen::MatrixXd A(2, n);
    A.row(0) = z1.transpose();
    A.row(1) = z0.transpose();
    Eigen::VectorXd b(2);
    b << n1, n0;
    return make_qp_problem(std::move(Q), std::move(q), std::move(A), std::move(b));
}

// Solve the balancing program for a prebuilt gram. Negative entries within
// -1e-8 of zero are clamped and group sums renormalized multiplicatively.
inline BalanceWeights balance_from_gram(const GramMatrix& gram, const GroupSpec& groups,
                                        const BalanceConfig& config) {
    const int n = groups.n();
    BalanceWeights out;
    out.gamma = gram.density.gamma;
    out.lambda = config.resolve_lambda(n);

    QpProblem prob = assemble_qp(gram, groups, config.mode, out.lambda);
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(n);
    out.objective_before = prob.objective(ones);

    QpSolution sol = solve_qp(prob, config.qp);
    if (sol.status == QpStatus::infeasible)
        throw NumericalError("balance: solver reported infeasible (internal, groups are nonempty)");
    out.solver_status = sol.status;
    out.primal_residual = sol.primal_residual;
    out.dual_residual = sol.dual_residual;
    out.iterations = sol.iterations;
    out.warnings = sol.warnings;
    if (sol.status == QpStatus::max_iter)
        out.warnings.push_back("balance: solver stopped at the iteration limit");

    Eigen::VectorXd w = sol.w;
    for (int i = 0; i < n; ++i) {
        if (w(i) < -1e-8)
            out.warnings.push_back("balance: weight " + std::to_string(i) + " clamped from " +
                                   std::to_string(w(i)));
        if (w(i) < 0) w(i) = 0;
    }
    const double s1 = w.dot(groups.z);
    const double s0 = w.sum() - s1;
    if (!(s1 > 0) || !(s0 > 0)) throw NumericalError("balance: a group lost all weight after clamping");
    for (int i = 0; i < n; ++i) w(i) *= groups.z(i) == 1.0 ? groups.n1 / s1 : groups.n0 / s0;
    out.w = w;

    out.objective_after = prob.objective(w);
    out.before = cfd_report(gram, groups, ones);
    out.after = cfd_report(gram, groups, w);
    for (const auto& msg : out.after.warnings) out.warnings.push_back(msg);

    double sq1 = 0, sq0 = 0;
    for (int i = 0; i < n; ++i) {
        if (groups.z(i) == 1.0) sq1 += w(i) * w(i);
        else sq0 += w(i) * w(i);
    }
    out.ess1 = static_cast<double>(groups.n1) * groups.n1 / sq1;
    out.ess0 = static_cast<double>(groups.n0) * groups.n0 / sq0;
    out.max_weight = w.maxCoeff();
    out.stability_flag = out.max_weight > 5.0 * std::cbrt(static_cast<double>(n));
    return out;
}

// Build the gram for the configured density and solve. With gamma=auto and
// all-identical covariates the gram is constant for any bandwidth, so the
// ridge decides the program; gamma = 1 is used as a placeholder there.
inline BalanceWeights balance_weights(const Eigen::MatrixXd& X, const Eigen::VectorXd& z,
                                      const BalanceConfig& config) {
    if (!X.allFinite()) throw ValidationError("balance: covariates must be finite");
    GroupSpec groups = make_groups(z);
    if (X.rows() != groups.n()) throw ValidationError("balance: X and z row counts differ");
    const int d = static_cast<int>(X.cols());

    GramMatrix gm;
    bool degenerate = false;
    if (config.density.family == KernelFamily::student_product) {
        Eigen::MatrixXd D;
        SpectralDensity den;
        if (config.density.gamma_auto) {
            D = pairwise_distances(X, metric_for(config.density.family));
            try {
                den = bind_density(config.density, d, &D);
            } catch (const ValidationError&) {
                if ((D.array() != 0.0).any()) throw;
                den = student_density(1.0, config.density.s, d);
                degenerate = true;
            }
        } else {
            den = bind_density(config.density, d, nullptr);
        }
        FrequencySample freq = sample_frequencies(den, config.density.L, config.seed);
        gm = rf_gram(X, den, freq);
    } else {
        const Metric metric = metric_for(config.density.family);
        Eigen::MatrixXd D = pairwise_distances(X, metric);
        SpectralDensity den;
        if (config.density.gamma_auto && config.density.family != KernelFamily::energy) {
            try {
                den = bind_density(config.density, d, &D);
            } catch (const ValidationError&) {
                if ((D.array() != 0.0).any()) throw;
                DensitySpec fixed = config.density;
                fixed.gamma_auto = false;
                fixed.gamma = 1.0;
                den = bind_density(fixed, d, nullptr);
                degenerate = true;
            }
        } else {
            den = bind_density(config.density, d, &D);
        }
        gm = gram_from_distances(den, D);
    }

    BalanceWeights out = balance_from_gram(gm, groups, config);
    if (degenerate)
        out.warnings.push_back("balance: covariates are all identical; bandwidth fixed at 1");
    return out;
}

}  // namespace cfdbal
