#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "errors.hpp"
#include "kernels.hpp"

namespace cfdbal {

struct GroupSpec {
    Eigen::VectorXd z;  // binary indicators, treated/encouraged = 1
    int n1 = 0;
    int n0 = 0;

    int n() const { return n1 + n0; }
};

inline GroupSpec make_groups(const Eigen::VectorXd& z) {
    GroupSpec g;
    g.z = z;
    for (int i = 0; i < z.size(); ++i) {
        if (z(i) == 1.0) ++g.n1;
        else if (z(i) == 0.0) ++g.n0;
        else throw ValidationError("group indicator must be 0 or 1, found " + std::to_string(z(i)) +
                                   " at row " + std::to_string(i));
    }
    if (g.n1 < 1 || g.n0 < 1) throw ValidationError("both groups must be nonempty");
    return g;
}

// Squared CFD terms between the weighted groups and the full sample.
// cfd1_fn: weighted treated vs full; cfd0_fn: weighted control vs full;
// cfd1_0: weighted treated vs weighted control.
struct CfdReport {
    double cfd1_fn = 0;
    double cfd0_fn = 0;
    double cfd1_0 = 0;
    double total_two_way = 0;    // cfd1_fn + cfd0_fn
    double total_three_way = 0;  // cfd1_fn + cfd0_fn + cfd1_0
    std::vector<std::string> warnings;
};

// a^T Kvv a + b^T Kww b - 2 a^T Kvw b with a, b the weight vectors normalized
// to sum 1. Pass empty weights for uniform.
inline double cfd2_two_sample(const Eigen::MatrixXd& Kvv, const Eigen::MatrixXd& Kww,
                              const Eigen::MatrixXd& Kvw,
                              Eigen::VectorXd weights_v = Eigen::VectorXd(),
                              Eigen::VectorXd weights_w = Eigen::VectorXd()) {
    const auto nv = Kvv.rows();
    const auto nw = Kww.rows();
    if (Kvw.rows() != nv || Kvw.cols() != nw) throw ValidationError("cfd2_two_sample: gram blocks not conformable");
    if (weights_v.size() == 0) weights_v = Eigen::VectorXd::Constant(nv, 1.0);
    if (weights_w.size() == 0) weights_w = Eigen::VectorXd::Constant(nw, 1.0);
    if (weights_v.size() != nv || weights_w.size() != nw)
        throw ValidationError("cfd2_two_sample: weight length mismatch");
    for (const Eigen::VectorXd* w : {&weights_v, &weights_w}) {
        if ((w->array() < 0).any()) throw ValidationError("cfd2_two_sample: negative weights");
        if (!(w->sum() > 0)) throw ValidationError("cfd2_two_sample: weights sum to zero");
    }
    Eigen::VectorXd a = weights_v / weights_v.sum();
    Eigen::VectorXd b = weights_w / weights_w.sum();
    return a.dot(Kvv * a) + b.dot(Kww * b) - 2.0 * a.dot(Kvw * b);
}

inline CfdReport cfd_report(const GramMatrix& gram, const GroupSpec& groups, const Eigen::VectorXd& w) {
    const Eigen::MatrixXd& K = gram.K;
    const int n = groups.n();
    if (K.rows() != n || w.size() != n) throw ValidationError("cfd_report: size mismatch");
    if (groups.n1 < 1 || groups.n0 < 1) throw ValidationError("cfd_report: empty group");
    const double n1 = groups.n1, n0 = groups.n0, nn = n;

    CfdReport rep;
    if ((w.array() < 0).any()) throw ValidationError("cfd_report: negative weights");
    const double s1 = (w.array() * groups.z.array()).sum();
    const double s0 = (w.array() * (1.0 - groups.z.array())).sum();
    if (std::abs(s1 - n1) > 1e-4 * n1 || std::abs(s0 - n0) > 1e-4 * n0)
        rep.warnings.push_back("weights are not normalized to group sizes (sums " + std::to_string(s1) +
                               ", " + std::to_string(s0) + ")");

    Eigen::VectorXd w1 = w.array() * groups.z.array();          // D1 w
    Eigen::VectorXd w0 = w.array() * (1.0 - groups.z.array());  // D0 w
    Eigen::VectorXd K1 = K.rowwise().sum();                     // K * ones
    const double ones_K_ones = K1.sum();
    const double q11 = w1.dot(K * w1);
    const double q00 = w0.dot(K * w0);
    const double q10 = w1.dot(K * w0);

    rep.cfd1_fn = q11 / (n1 * n1) + ones_K_ones / (nn * nn) - 2.0 * w1.dot(K1) / (n1 * nn);
    rep.cfd0_fn = q00 / (n0 * n0) + ones_K_ones / (nn * nn) - 2.0 * w0.dot(K1) / (n0 * nn);
    rep.cfd1_0 = q11 / (n1 * n1) + q00 / (n0 * n0) - 2.0 * q10 / (n1 * n0);
    rep.total_two_way = rep.cfd1_fn + rep.cfd0_fn;
    rep.total_three_way = rep.cfd1_fn + rep.cfd0_fn + rep.cfd1_0;
    return rep;
}

}  // namespace cfdbal
