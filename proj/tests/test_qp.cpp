#include <catch2/catch_amalgamated.hpp>

#include <cfdbal/qp.hpp>

#include "test_util.hpp"

using namespace cfdbal;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

QpProblem simplex_problem(Eigen::MatrixXd Q, Eigen::VectorXd q, double total) {
    const int n = static_cast<int>(q.size());
    Eigen::MatrixXd A = Eigen::MatrixXd::Ones(1, n);
    Eigen::VectorXd b(1);
    b << total;
    return make_qp_problem(std::move(Q), std::move(q), std::move(A), std::move(b));
}

}  // namespace

TEST_CASE("hand-checked instances", "[qp]") {
    SECTION("identity objective on the scaled simplex") {
        auto p = simplex_problem(Eigen::MatrixXd::Identity(2, 2), Eigen::VectorXd::Zero(2), 2.0);
        QpSolution s = solve_qp(p);
        REQUIRE(s.status == QpStatus::solved);
        REQUIRE_THAT(s.w(0), WithinAbs(1.0, 1e-5));
        REQUIRE_THAT(s.w(1), WithinAbs(1.0, 1e-5));
        REQUIRE_THAT(s.objective, WithinAbs(2.0, 1e-5));
    }
    SECTION("anisotropic diagonal tilts the optimum") {
        Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(2, 2);
        Q(0, 0) = 1.0;
        Q(1, 1) = 2.0;
        QpSolution s = solve_qp(simplex_problem(Q, Eigen::VectorXd::Zero(2), 1.0));
        REQUIRE(s.status == QpStatus::solved);
        REQUIRE_THAT(s.w(0), WithinAbs(2.0 / 3.0, 1e-5));
        REQUIRE_THAT(s.w(1), WithinAbs(1.0 / 3.0, 1e-5));
    }
    SECTION("strong linear term pins a coordinate at the vertex") {
        Eigen::VectorXd q(2);
        q << -10.0, 0.0;
        QpSolution s = solve_qp(simplex_problem(Eigen::MatrixXd::Identity(2, 2), q, 1.0));
        REQUIRE(s.status == QpStatus::solved);
        REQUIRE_THAT(s.w(0), WithinAbs(1.0, 1e-5));
        REQUIRE_THAT(s.w(1), WithinAbs(0.0, 1e-5));
        REQUIRE_THAT(s.objective, WithinAbs(-9.0, 1e-5));
    }
    SECTION("fixed dense instance with two equality rows") {
        Eigen::MatrixXd Q(5, 5);
        Q << 1.4701588291980461, -0.34279726385410075, 0.35394326614741506, -1.9944410966131445,
            0.28495723763555347, -0.34279726385410075, 8.201441094244128, -2.3585003694119364,
            0.29915747743627863, 0.30813709867411504, 0.35394326614741506, -2.3585003694119364,
            4.4290664551543451, 0.5796042587389284, 2.5614444866487176, -1.9944410966131445,
            0.29915747743627863, 0.5796042587389284, 5.1330170524375678, 0.22384295790969469,
            0.28495723763555347, 0.30813709867411504, 2.5614444866487176, 0.22384295790969469,
            3.0659220896786956;
        Eigen::VectorXd q(5);
        q << 1.627021508356385, 0.83200580975837468, -0.25151869659533427, -0.3912236762466772,
            0.44573945729773429;
        Eigen::MatrixXd A(2, 5);
        A.row(0).setOnes();
        A.row(1) << 0.89127794273764371, -1.1746910546752021, -0.10247477585085472,
            -1.2280930954653904, -0.48090458587778706;
        Eigen::VectorXd b(2);
        b << 3.8356768692985419, -1.4820588129134848;
        QpSolution s = solve_qp(make_qp_problem(Q, q, A, b));
        REQUIRE(s.status == QpStatus::solved);
        Eigen::VectorXd expect(5);
        expect << 1.1862154816228911, 0.61254756237527275, 0.39417448465744548,
            1.3241083447605038, 0.31863099588242905;
        for (int i = 0; i < 5; ++i) REQUIRE_THAT(s.w(i), WithinAbs(expect(i), 1e-5));
        REQUIRE_THAT(s.objective, WithinAbs(11.796379930851632, 1e-5));
    }
}

TEST_CASE("agreement with exhaustive active-set enumeration", "[qp]") {
    std::mt19937_64 rng(211);
    std::uniform_real_distribution<double> ub(0.5, 3.0);
    std::uniform_int_distribution<int> un(2, 4);
    int solved = 0;
    for (int rep = 0; rep < 50; ++rep) {
        const int n = un(rng);
        Eigen::MatrixXd Q = testutil::random_psd(rng, n, 0.5);
        Eigen::VectorXd q = testutil::random_matrix(rng, n, 1).col(0);
        Eigen::MatrixXd A = Eigen::MatrixXd::Ones(1, n);
        Eigen::VectorXd b(1);
        b << ub(rng);
        Eigen::VectorXd w_ref;
        const double obj_ref = testutil::active_set_oracle(Q, q, A, b, &w_ref);
        QpSolution s = solve_qp(make_qp_problem(Q, q, A, b));
        REQUIRE(s.status == QpStatus::solved);
        REQUIRE_THAT(s.objective, WithinAbs(obj_ref, 1e-5));
        for (int i = 0; i < n; ++i) REQUIRE_THAT(s.w(i), WithinAbs(w_ref(i), 1e-5));
        ++solved;
    }
    REQUIRE(solved == 50);
}

TEST_CASE("KKT residuals stay small on random instances", "[qp][slowish]") {
    std::mt19937_64 rng(223);
    std::uniform_int_distribution<int> un(3, 30);
    std::uniform_real_distribution<double> ushift(0.0, 1.0);
    for (int rep = 0; rep < 100; ++rep) {
        const int n = un(rng);
        Eigen::MatrixXd Q = testutil::random_psd(rng, n, ushift(rng));
        Eigen::VectorXd q = testutil::random_matrix(rng, n, 1).col(0);
        Eigen::MatrixXd A(2, n);
        A.row(0).setOnes();
        for (int i = 0; i < n; ++i) A(1, i) = i % 2 == 0 ? 1.0 : 0.0;  // subgroup total
        Eigen::VectorXd b(2);
        b << static_cast<double>(n), (n + 1) / 2.0;
        QpSolution s = solve_qp(make_qp_problem(Q, q, A, b));
        REQUIRE(s.status == QpStatus::solved);
        KktResiduals r = kkt_residuals(make_qp_problem(Q, q, A, b), s.w);
        REQUIRE(r.primal <= 1e-5);
        REQUIRE(r.dual <= 1e-5);
        REQUIRE(r.complementarity <= 1e-5);
    }
}

TEST_CASE("solver invariants", "[qp]") {
    std::mt19937_64 rng(227);
    const int n = 12;
    Eigen::MatrixXd Q = testutil::random_psd(rng, n, 0.2);
    Eigen::VectorXd q = testutil::random_matrix(rng, n, 1).col(0);
    Eigen::MatrixXd A = Eigen::MatrixXd::Ones(1, n);
    Eigen::VectorXd b(1);
    b << 4.0;
    QpProblem p = make_qp_problem(Q, q, A, b);
    QpSolution s = solve_qp(p);
    REQUIRE(s.status == QpStatus::solved);

    SECTION("positive rescaling keeps the argmin") {
        const double c = 7.3;
        QpSolution sc = solve_qp(make_qp_problem(c * Q, c * q, A, b));
        REQUIRE(sc.status == QpStatus::solved);
        for (int i = 0; i < n; ++i) REQUIRE_THAT(sc.w(i), WithinAbs(s.w(i), 1e-6));
        REQUIRE_THAT(sc.objective, WithinAbs(c * s.objective, 1e-5 * c));
    }
    SECTION("repeat solves are bit-identical") {
        QpSolution s2 = solve_qp(p);
        REQUIRE(s2.w == s.w);
        REQUIRE(s2.iterations == s.iterations);
    }
    SECTION("no fabricated feasible point does better") {
        std::uniform_real_distribution<double> uy(0.0, 2.0);
        for (int rep = 0; rep < 100; ++rep) {
            Eigen::VectorXd y(n);
            for (int i = 0; i < n; ++i) y(i) = uy(rng);
            Eigen::VectorXd wf = testutil::project_feasible(A, b, y);
            if ((A * wf - b).cwiseAbs().maxCoeff() > 1e-10) continue;
            REQUIRE(s.objective <= p.objective(wf) + 1e-6);
        }
    }
    SECTION("feasibility of the reported solution") {
        REQUIRE((A * s.w - b).cwiseAbs().maxCoeff() <= 1e-6);
        REQUIRE(s.w.minCoeff() >= -1e-9);
    }
}

TEST_CASE("infeasible problems are certified", "[qp]") {
    SECTION("equality target above the reachable box sum") {
        Eigen::VectorXd b(1);
        b << 10.0;
        auto p = make_qp_problem(Eigen::MatrixXd::Identity(3, 3), Eigen::VectorXd::Zero(3),
                                 Eigen::MatrixXd::Ones(1, 3), b, Eigen::VectorXd::Zero(3),
                                 Eigen::VectorXd::Ones(3));
        QpSolution s = solve_qp(p);
        REQUIRE(s.status == QpStatus::infeasible);
        REQUIRE_FALSE(s.warnings.empty());
    }
    SECTION("negative target with nonnegative weights") {
        Eigen::VectorXd b(1);
        b << -1.0;
        auto p = make_qp_problem(Eigen::MatrixXd::Identity(3, 3), Eigen::VectorXd::Zero(3),
                                 Eigen::MatrixXd::Ones(1, 3), b);
        REQUIRE(solve_qp(p).status == QpStatus::infeasible);
    }
}

TEST_CASE("residual reporting", "[qp]") {
    auto p = simplex_problem(Eigen::MatrixXd::Identity(2, 2), Eigen::VectorXd::Zero(2), 2.0);
    SECTION("exact optimum has tiny residuals") {
        Eigen::VectorXd w(2);
        w << 1.0, 1.0;
        KktResiduals r = kkt_residuals(p, w);
        REQUIRE_THAT(r.primal, WithinAbs(0.0, 1e-12));
        REQUIRE_THAT(r.dual, WithinAbs(0.0, 1e-12));
        REQUIRE_THAT(r.complementarity, WithinAbs(0.0, 1e-12));
    }
    SECTION("equality violation shows up in the primal residual") {
        Eigen::VectorXd w(2);
        w << 1.0, 1.25;
        REQUIRE_THAT(kkt_residuals(p, w).primal, WithinAbs(0.25, 1e-12));
    }
    SECTION("bound violation shows up in the primal residual") {
        Eigen::VectorXd w(2);
        w << 2.3, -0.3;
        REQUIRE_THAT(kkt_residuals(p, w).primal, WithinAbs(0.3, 1e-12));
    }
    SECTION("non-finite points are rejected") {
        Eigen::VectorXd w(2);
        w << std::numeric_limits<double>::quiet_NaN(), 1.0;
        REQUIRE_THROWS_AS(kkt_residuals(p, w), ValidationError);
    }
}

TEST_CASE("problem validation", "[qp]") {
    Eigen::MatrixXd I2 = Eigen::MatrixXd::Identity(2, 2);
    Eigen::VectorXd z2 = Eigen::VectorXd::Zero(2);
    Eigen::MatrixXd A = Eigen::MatrixXd::Ones(1, 2);
    Eigen::VectorXd b1 = Eigen::VectorXd::Ones(1);

    REQUIRE_THROWS_WITH(make_qp_problem(Eigen::MatrixXd::Identity(3, 3), z2, A, b1),
                        ContainsSubstring("n x n"));
    REQUIRE_THROWS_WITH(make_qp_problem(I2, z2, Eigen::MatrixXd::Ones(1, 3), b1),
                        ContainsSubstring("columns"));
    REQUIRE_THROWS_WITH(make_qp_problem(I2, z2, A, Eigen::VectorXd::Ones(2)),
                        ContainsSubstring("row counts"));
    Eigen::MatrixXd bad = I2;
    bad(0, 1) = std::numeric_limits<double>::infinity();
    REQUIRE_THROWS_WITH(make_qp_problem(bad, z2, A, b1), ContainsSubstring("non-finite"));
    Eigen::MatrixXd dup(2, 2);
    dup << 1, 1, 1, 1;
    REQUIRE_THROWS_WITH(make_qp_problem(I2, z2, dup, Eigen::VectorXd::Ones(2)),
                        ContainsSubstring("full row rank"));
    Eigen::VectorXd lo = Eigen::VectorXd::Ones(2), hi = Eigen::VectorXd::Zero(2);
    REQUIRE_THROWS_AS(make_qp_problem(I2, z2, A, b1, lo, hi), ValidationError);
    REQUIRE_THROWS_AS(make_qp_problem(I2, z2, A, b1, Eigen::VectorXd::Zero(3)), ValidationError);

    SECTION("asymmetric quadratic terms are symmetrized") {
        Eigen::MatrixXd Qa(2, 2);
        Qa << 1.0, 0.8, 0.2, 1.0;
        QpProblem p = make_qp_problem(Qa, z2, A, b1);
        REQUIRE(p.Q(0, 1) == p.Q(1, 0));
        REQUIRE_THAT(p.Q(0, 1), WithinAbs(0.5, 1e-15));
    }
    SECTION("settings validation") {
        QpProblem p = make_qp_problem(I2, z2, A, b1);
        QpSettings bad_rho;
        bad_rho.rho = 0.0;
        REQUIRE_THROWS_AS(solve_qp(p, bad_rho), ValidationError);
        QpSettings bad_eps;
        bad_eps.eps_abs = -1e-6;
        REQUIRE_THROWS_AS(solve_qp(p, bad_eps), ValidationError);
    }
    SECTION("iteration cap reports max_iter") {
        std::mt19937_64 rng(229);
        Eigen::MatrixXd Q = testutil::random_psd(rng, 8, 0.1);
        Eigen::VectorXd q = testutil::random_matrix(rng, 8, 1).col(0);
        QpSettings tight;
        tight.max_iter = 1;
        tight.polish = false;
        tight.adaptive_rho = false;
        QpSolution s = solve_qp(simplex_problem(Q, q, 3.0), tight);
        REQUIRE(s.status == QpStatus::max_iter);
        REQUIRE(s.w.allFinite());
    }
}
