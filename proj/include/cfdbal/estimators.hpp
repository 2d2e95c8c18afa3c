#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "cfd.hpp"
#include "errors.hpp"

namespace cfdbal {

// Observed sample. z is the treatment indicator, or the instrument when the
// receipt vector a is present (IV mode, a.size() == 0 otherwise).
struct Dataset {
    Eigen::VectorXd y;
    Eigen::VectorXd z;
    Eigen::VectorXd a;
    Eigen::MatrixXd X;
    int n1 = 0;
    int n0 = 0;

    int n() const { return static_cast<int>(y.size()); }
    int d() const { return static_cast<int>(X.cols()); }
    bool has_receipt() const { return a.size() > 0; }
    GroupSpec groups() const { return {z, n1, n0}; }
};

inline Dataset make_dataset(Eigen::VectorXd y, Eigen::VectorXd z, Eigen::MatrixXd X,
                            Eigen::VectorXd a = Eigen::VectorXd()) {
    Dataset ds;
    const auto n = y.size();
    if (z.size() != n || X.rows() != n) throw ValidationError("dataset: column lengths differ");
    if (a.size() != 0 && a.size() != n) throw ValidationError("dataset: receipt length differs");
    if (!y.allFinite() || !X.allFinite()) throw ValidationError("dataset: non-finite values");
    GroupSpec g = make_groups(z);
    for (int i = 0; i < a.size(); ++i)
        if (a(i) != 0.0 && a(i) != 1.0)
            throw ValidationError("dataset: receipt must be 0 or 1, found " + std::to_string(a(i)) +
                                  " at row " + std::to_string(i));
    ds.y = std::move(y);
    ds.z = std::move(z);
    ds.a = std::move(a);
    ds.X = std::move(X);
    ds.n1 = g.n1;
    ds.n0 = g.n0;
    return ds;
}

inline Dataset subset_rows(const Dataset& data, const std::vector<int>& rows) {
    const int k = static_cast<int>(rows.size());
    Eigen::VectorXd y(k), z(k);
    Eigen::VectorXd a(data.has_receipt() ? k : 0);
    Eigen::MatrixXd X(k, data.d());
    for (int i = 0; i < k; ++i) {
        y(i) = data.y(rows[i]);
        z(i) = data.z(rows[i]);
        if (data.has_receipt()) a(i) = data.a(rows[i]);
        X.row(i) = data.X.row(rows[i]);
    }
    return make_dataset(std::move(y), std::move(z), std::move(X), std::move(a));
}

enum class Estimand { ate, late };

struct Estimate {
    double value = 0;
    Estimand estimand = Estimand::ate;
    double denominator = 1.0;  // late only
};

namespace detail {

inline void check_weights(const Dataset& data, const Eigen::VectorXd& w) {
    if (w.size() != data.n()) throw ValidationError("estimator: weight length mismatch");
    if ((w.array() < 0).any()) throw ValidationError("estimator: negative weights");
    const double s1 = w.dot(data.z);
    const double s0 = w.sum() - s1;
    if (std::abs(s1 - data.n1) > 1e-4 * data.n1 || std::abs(s0 - data.n0) > 1e-4 * data.n0)
        throw ValidationError("estimator: weights do not sum to the group sizes (got " +
                              std::to_string(s1) + ", " + std::to_string(s0) + ")");
}

inline double weighted_mean_difference(const Dataset& data, const Eigen::VectorXd& w,
                                       const Eigen::VectorXd& v) {
    double t1 = 0, t0 = 0;
    for (int i = 0; i < data.n(); ++i) {
        if (data.z(i) == 1.0) t1 += w(i) * v(i);
        else t0 += w(i) * v(i);
    }
    return t1 / data.n1 - t0 / data.n0;
}

}  // namespace detail

inline Estimate ate_weighted(const Dataset& data, const Eigen::VectorXd& w) {
    detail::check_weights(data, w);
    return {detail::weighted_mean_difference(data, w, data.y), Estimand::ate, 1.0};
}

// Wald ratio with the same weights in numerator and denominator.
inline Estimate late_weighted(const Dataset& data, const Eigen::VectorXd& w) {
    if (!data.has_receipt()) throw ValidationError("late: dataset has no receipt column");
    detail::check_weights(data, w);
    const double num = detail::weighted_mean_difference(data, w, data.y);
    const double den = detail::weighted_mean_difference(data, w, data.a);
    if (std::abs(den) <= 1e-6)
        throw NumericalError("late: weak instrument, weighted receipt difference is " +
                             std::to_string(den));
    return {num / den, Estimand::late, den};
}

// Binomial IRLS with intercept; beta(0) is the intercept. Diverging
// coefficients trigger one ridged retry before a separation error.
inline Eigen::VectorXd fit_logistic(const Eigen::MatrixXd& X, const Eigen::VectorXd& z,
                                    int max_iter = 100, double tol = 1e-8) {
    const int n = static_cast<int>(X.rows());
    const int d = static_cast<int>(X.cols());
    if (z.size() != n) throw ValidationError("logistic: X and z row counts differ");
    if (n <= d + 1) throw ValidationError("logistic: need n > d + 1 rows");
    for (int i = 0; i < n; ++i)
        if (z(i) != 0.0 && z(i) != 1.0) throw ValidationError("logistic: response must be 0 or 1");

    Eigen::MatrixXd Xd(n, d + 1);
    Xd.col(0).setOnes();
    Xd.rightCols(d) = X;

    for (double ridge : {0.0, 1e-6}) {
        Eigen::VectorXd beta = Eigen::VectorXd::Zero(d + 1);
        bool diverged = false;
        for (int it = 0; it < max_iter; ++it) {
            Eigen::VectorXd eta = Xd * beta;
            Eigen::VectorXd mu = (1.0 / (1.0 + (-eta.array()).exp())).matrix();
            Eigen::VectorXd wt = mu.array() * (1.0 - mu.array());
            Eigen::MatrixXd H = Xd.transpose() * wt.asDiagonal() * Xd;
            Eigen::VectorXd g = Xd.transpose() * (z - mu);
            if (ridge > 0) {
                H.diagonal().array() += 2.0 * ridge;
                g -= 2.0 * ridge * beta;
            }
            Eigen::VectorXd delta = H.ldlt().solve(g);
            if (!delta.allFinite()) { diverged = true; break; }
            beta += delta;
            if (beta.cwiseAbs().maxCoeff() > 1e3) { diverged = true; break; }
            if (delta.cwiseAbs().maxCoeff() <= tol) return beta;
        }
        if (!diverged) return beta;  // hit max_iter with bounded coefficients
    }
    throw NumericalError("logistic: coefficients diverged (perfect separation)");
}

struct IpwWeights {
    Eigen::VectorXd w;
    Eigen::VectorXd propensity;
    std::vector<std::string> warnings;
};

// Hajek weights: w_i proportional to z_i/e_i + (1-z_i)/(1-e_i), rescaled so
// each group sums to its size. Propensities are clipped to [1e-6, 1-1e-6].
inline IpwWeights ipw_hajek_weights(const Eigen::MatrixXd& X, const Eigen::VectorXd& z) {
    GroupSpec g = make_groups(z);
    const int n = g.n();
    Eigen::VectorXd beta = fit_logistic(X, z);
    IpwWeights out;
    out.propensity.resize(n);
    out.w.resize(n);
    int clipped = 0;
    for (int i = 0; i < n; ++i) {
        double eta = beta(0) + X.row(i).dot(beta.tail(X.cols()));
        double e = 1.0 / (1.0 + std::exp(-eta));
        if (e < 1e-6 || e > 1.0 - 1e-6) {
            e = std::clamp(e, 1e-6, 1.0 - 1e-6);
            ++clipped;
        }
        out.propensity(i) = e;
        out.w(i) = z(i) == 1.0 ? 1.0 / e : 1.0 / (1.0 - e);
    }
    if (clipped > 0)
        out.warnings.push_back("ipw: " + std::to_string(clipped) +
                               " propensities clipped to [1e-6, 1-1e-6]");
    double s1 = 0, s0 = 0;
    for (int i = 0; i < n; ++i) (z(i) == 1.0 ? s1 : s0) += out.w(i);
    for (int i = 0; i < n; ++i) out.w(i) *= z(i) == 1.0 ? g.n1 / s1 : g.n0 / s0;
    return out;
}

}  // namespace cfdbal
