#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "estimators.hpp"
#include "inference.hpp"
#include "parallel.hpp"
#include "random.hpp"

namespace cfdbal {

enum class Propensity { linear, nonlinear };

inline const char* propensity_name(Propensity p) {
    return p == Propensity::linear ? "linear" : "nonlinear";
}

inline double expit(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Latent quantities kept for oracle checks; never visible to estimators.
struct Latents {
    Eigen::VectorXd U, L1, L2, A0, A1, e;
};

// X ~ N(0, I_10); Z ~ Bernoulli(e(X)); potential receipts A(z) from the
// threshold L1 -+ |U|/2, so A(1) >= A(0) always; Y(a) = a(1 + L2) - L2/2 + eps_a.
inline std::pair<Dataset, Latents> generate_dataset(Propensity prop, int n, std::uint64_t seed) {
    if (n < 2) throw ValidationError("generate_dataset: n must be at least 2");
    constexpr int d = 10;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    Eigen::MatrixXd X(n, d);
    Eigen::VectorXd y(n), z(n), a(n);
    Latents lat;
    lat.U.resize(n);
    lat.L1.resize(n);
    lat.L2.resize(n);
    lat.A0.resize(n);
    lat.A1.resize(n);
    lat.e.resize(n);

    for (int i = 0; i < n; ++i) {
        double s_first = 0, s_last = 0, s_abs_first = 0;
        for (int j = 0; j < d; ++j) {
            const double x = normal(rng);
            X(i, j) = x;
            if (j < 5) {
                s_first += x;
                s_abs_first += std::abs(x);
            } else {
                s_last += x;
            }
        }
        const double U = normal(rng);
        const double uz = unif(rng);
        const double eps0 = normal(rng);
        const double eps1 = normal(rng);

        const double e = prop == Propensity::linear
                             ? expit(0.15 * (s_first + s_last))
                             : expit(0.25 * s_abs_first + 0.25 * s_last - 2.25);
        const double L1 = -0.01 - 0.5 * s_first + 0.5 * s_last;
        const double L2 = s_first - 0.5 * s_last - U;
        const double A0 = L1 - 0.5 * std::abs(U) >= 0.0 ? 1.0 : 0.0;
        const double A1 = L1 + 0.5 * std::abs(U) >= 0.0 ? 1.0 : 0.0;
        const double Z = uz < e ? 1.0 : 0.0;
        const double A = Z == 1.0 ? A1 : A0;
        const double Y = A * (1.0 + L2) - 0.5 * L2 + (A == 1.0 ? eps1 : eps0);

        z(i) = Z;
        a(i) = A;
        y(i) = Y;
        lat.U(i) = U;
        lat.L1(i) = L1;
        lat.L2(i) = L2;
        lat.A0(i) = A0;
        lat.A1(i) = A1;
        lat.e(i) = e;
    }
    return {make_dataset(std::move(y), std::move(z), std::move(X), std::move(a)), std::move(lat)};
}

struct OracleResult {
    double value = 0;
    double se = 0;
    double complier_fraction = 0;
    long long M = 0;
};

// A Monte Carlo unit reduced to what the complier mean needs.
struct OracleDraw {
    double L1;
    double absU;
    double one_plus_L2;
};

// E[1 + L2 | A(1) > A(0)] over M draws from an injectable unit sampler.
template <typename Sampler>
OracleResult oracle_late_generic(long long M, std::uint64_t seed, Sampler sample) {
    if (M < 1000000) throw ValidationError("oracle: M must be at least 1e6");
    std::mt19937_64 rng(seed);
    long long count = 0;
    double sum = 0, sumsq = 0;
    for (long long m = 0; m < M; ++m) {
        const OracleDraw dr = sample(rng);
        const bool complier = dr.L1 + 0.5 * dr.absU >= 0.0 && dr.L1 - 0.5 * dr.absU < 0.0;
        if (complier) {
            ++count;
            sum += dr.one_plus_L2;
            sumsq += dr.one_plus_L2 * dr.one_plus_L2;
        }
    }
    OracleResult out;
    out.M = M;
    out.complier_fraction = static_cast<double>(count) / static_cast<double>(M);
    if (out.complier_fraction < 1e-3)
        throw NumericalError("oracle: degenerate scenario, complier fraction " +
                             std::to_string(out.complier_fraction));
    out.value = sum / static_cast<double>(count);
    const double var = (sumsq - static_cast<double>(count) * out.value * out.value) /
                       static_cast<double>(count - 1);
    out.se = std::sqrt(std::max(var, 0.0) / static_cast<double>(count));
    return out;
}

// The estimand depends only on (X, U); the propensity model is irrelevant.
inline OracleResult oracle_late(Propensity, long long M, std::uint64_t seed) {
    std::normal_distribution<double> normal(0.0, 1.0);
    return oracle_late_generic(M, seed, [normal](std::mt19937_64& rng) mutable {
        double s_first = 0, s_last = 0;
        for (int j = 0; j < 5; ++j) s_first += normal(rng);
        for (int j = 0; j < 5; ++j) s_last += normal(rng);
        const double U = normal(rng);
        OracleDraw dr;
        dr.L1 = -0.01 - 0.5 * s_first + 0.5 * s_last;
        dr.absU = std::abs(U);
        dr.one_plus_L2 = 1.0 + s_first - 0.5 * s_last - U;
        return dr;
    });
}

struct MethodSpec {
    enum class Kind { cfd, ipw, constant };
    std::string label;
    Kind kind = Kind::cfd;
    DensitySpec density;       // cfd only
    double constant_value = 0; // constant only
};

// "ipw", "constant(value=...)", or any density spec (cfd estimator).
inline MethodSpec parse_method_spec(const std::string& text) {
    MethodSpec m;
    m.label = text;
    if (text == "ipw") {
        m.kind = MethodSpec::Kind::ipw;
        return m;
    }
    if (text.rfind("constant(", 0) == 0 && text.back() == ')') {
        const std::string inner = text.substr(9, text.size() - 10);
        if (inner.rfind("value=", 0) != 0)
            throw ValidationError("method spec: constant requires value=<real>");
        try {
            m.constant_value = std::stod(inner.substr(6));
        } catch (const std::exception&) {
            throw ValidationError("method spec: bad constant value in '" + text + "'");
        }
        m.kind = MethodSpec::Kind::constant;
        return m;
    }
    m.kind = MethodSpec::Kind::cfd;
    m.density = parse_density_spec(text);
    return m;
}

struct StudyConfig {
    Propensity propensity = Propensity::nonlinear;
    int n = 400;
    int R = 200;
    std::vector<MethodSpec> methods;
    Estimand estimand = Estimand::late;
    BalanceMode mode = BalanceMode::three_way;
    bool lambda_auto = true;
    double lambda = 0;
    QpSettings qp;
    int B_s = 200;  // subsample draws per replication; 0 disables
    int B = 200;    // bootstrap draws per replication; 0 disables
    double alpha = 0.05;
    int b = 0;           // 0 selects round(2.5 sqrt(n))
    bool b_auto = false; // per-replication minimum-volatility selection instead
    long long oracle_M = 10000000;
    std::uint64_t seed = 1;
    int threads = 1;

    int resolve_b() const { return b > 0 ? b : static_cast<int>(std::lround(2.5 * std::sqrt(n))); }
};

struct MethodSummary {
    MethodSpec spec;
    int R_used = 0;
    int failures = 0;
    std::vector<std::string> failure_messages;
    std::vector<double> estimates;
    std::vector<double> ss_lower, ss_upper, boot_lower, boot_upper;
    double bias = std::numeric_limits<double>::quiet_NaN();
    double ese = std::numeric_limits<double>::quiet_NaN();
    double coverage_ss = std::numeric_limits<double>::quiet_NaN();
    double coverage_boot = std::numeric_limits<double>::quiet_NaN();
    double length_ss = std::numeric_limits<double>::quiet_NaN();
    double length_boot = std::numeric_limits<double>::quiet_NaN();
};

struct StudyResult {
    StudyConfig config;
    OracleResult oracle;
    std::vector<MethodSummary> methods;
    std::vector<std::string> warnings;
};

namespace detail {

inline std::unique_ptr<EstimatorPipeline> make_pipeline(const MethodSpec& m, const Dataset& data,
                                                        const StudyConfig& cfg) {
    switch (m.kind) {
        case MethodSpec::Kind::cfd: {
            BalanceConfig bc;
            bc.mode = cfg.mode;
            bc.lambda_auto = cfg.lambda_auto;
            bc.lambda = cfg.lambda;
            bc.density = m.density;
            bc.qp = cfg.qp;
            bc.qp.compute_kkt = false;
            return std::make_unique<CfdPipeline>(data, bc, cfg.estimand);
        }
        case MethodSpec::Kind::ipw:
            return std::make_unique<IpwPipeline>(cfg.estimand);
        case MethodSpec::Kind::constant: {
            const double c = m.constant_value;
            return std::make_unique<FunctionPipeline>(
                [c](const Dataset&, const std::vector<int>&, std::uint64_t) { return c; });
        }
    }
    throw ValidationError("unknown method kind");
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline double sd_of(const std::vector<double>& v) {
    const double m = mean_of(v);
    double ss = 0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace detail

// Full replication study: generate, estimate with every method, wrap both CI
// types around each estimate, and aggregate bias/ESE/coverage/length against
// the Monte Carlo oracle. Failed replications are excluded and counted; more
// than 5% failures for any method aborts the study.
inline StudyResult run_study(const StudyConfig& config) {
    if (config.n < 20) throw ValidationError("study: n must be at least 20");
    if (config.R < 1) throw ValidationError("study: R must be at least 1");
    if (config.methods.empty()) throw ValidationError("study: no methods configured");
    const int R = config.R;
    const int M = static_cast<int>(config.methods.size());
    const int b_eff = config.resolve_b();

    StudyResult out;
    out.config = config;
    out.oracle = oracle_late(config.propensity, config.oracle_M, derive_seed(config.seed, 5, 0));

    struct Cell {
        bool ok = false;
        double est = 0;
        double ssl = 0, ssu = 0, bl = 0, bu = 0;
        std::string error;
    };
    std::vector<std::vector<Cell>> cells(M, std::vector<Cell>(R));

    parallel_for(R, config.threads, [&](int r) {
        Dataset data = generate_dataset(config.propensity, config.n,
                                        derive_seed(config.seed, 11, static_cast<std::uint64_t>(r)))
                           .first;
        for (int m = 0; m < M; ++m) {
            Cell& cell = cells[m][r];
            try {
                auto pipeline = detail::make_pipeline(config.methods[m], data, config);
                const std::uint64_t salt = 1000ULL + static_cast<std::uint64_t>(m) * 16ULL;
                cell.est = pipeline->estimate(data, derive_seed(config.seed, salt + 1, r));
                if (config.B_s > 0) {
                    int b_r = b_eff;
                    if (config.b_auto)
                        b_r = select_subsample_size(data, *pipeline, default_subsample_grid(config.n),
                                                    1, config.alpha, config.B_s,
                                                    derive_seed(config.seed, salt + 4, r), 1)
                                  .b;
                    CiResult ss = subsample_ci(data, *pipeline, b_r, config.B_s, config.alpha,
                                               derive_seed(config.seed, salt + 2, r), 1, &cell.est);
                    cell.ssl = ss.lower;
                    cell.ssu = ss.upper;
                }
                if (config.B > 0) {
                    CiResult bt = bootstrap_ci(data, *pipeline, config.B, config.alpha,
                                               derive_seed(config.seed, salt + 3, r), 1, &cell.est);
                    cell.bl = bt.lower;
                    cell.bu = bt.upper;
                }
                cell.ok = true;
            } catch (const std::exception& e) {
                cell.error = e.what();
            }
        }
    });

    for (int m = 0; m < M; ++m) {
        MethodSummary s;
        s.spec = config.methods[m];
        for (int r = 0; r < R; ++r) {
            const Cell& cell = cells[m][r];
            if (!cell.ok) {
                ++s.failures;
                if (s.failure_messages.size() < 5) s.failure_messages.push_back(cell.error);
                continue;
            }
            s.estimates.push_back(cell.est);
            if (config.B_s > 0) {
                s.ss_lower.push_back(cell.ssl);
                s.ss_upper.push_back(cell.ssu);
            }
            if (config.B > 0) {
                s.boot_lower.push_back(cell.bl);
                s.boot_upper.push_back(cell.bu);
            }
        }
        s.R_used = static_cast<int>(s.estimates.size());
        if (s.R_used >= 1) s.bias = detail::mean_of(s.estimates) - out.oracle.value;
        if (s.R_used >= 2) {
            s.ese = detail::sd_of(s.estimates);
        } else {
            out.warnings.push_back("study: ESE undefined for '" + s.spec.label +
                                   "' with fewer than 2 successful replications");
        }
        auto coverage = [&](const std::vector<double>& lo, const std::vector<double>& hi, double& cov,
                            double& len) {
            if (lo.empty()) return;
            int hit = 0;
            double total = 0;
            for (std::size_t i = 0; i < lo.size(); ++i) {
                if (lo[i] <= out.oracle.value && out.oracle.value <= hi[i]) ++hit;
                total += hi[i] - lo[i];
            }
            cov = static_cast<double>(hit) / static_cast<double>(lo.size());
            len = total / static_cast<double>(lo.size());
        };
        coverage(s.ss_lower, s.ss_upper, s.coverage_ss, s.length_ss);
        coverage(s.boot_lower, s.boot_upper, s.coverage_boot, s.length_boot);
        out.methods.push_back(std::move(s));
    }

    std::string broken;
    for (const auto& s : out.methods)
        if (static_cast<double>(s.failures) > 0.05 * R) {
            broken += " '" + s.spec.label + "' failed " + std::to_string(s.failures) + "/" +
                      std::to_string(R) + (s.failure_messages.empty() ? "" : " (" + s.failure_messages.front() + ")") +
                      ";";
        }
    if (!broken.empty()) throw NumericalError("study: failure rate above 5%:" + broken);
    return out;
}

// Table layout: one row per method, bias and ESE scaled by 100, coverages as
// fractions, lengths unscaled. Missing entries print as NA.
inline std::string study_csv(const StudyResult& res) {
    std::ostringstream os;
    os << "method,n,bias_x100,ese_x100,coverage_ss,length_ss,coverage_boot,length_boot,failures\n";
    auto cell = [&](double v, double scale) {
        if (std::isnan(v)) {
            os << "NA";
        } else {
            os << std::setprecision(10) << v * scale;
        }
    };
    for (const auto& s : res.methods) {
        os << s.spec.label << ',' << res.config.n << ',';
        cell(s.bias, 100.0);
        os << ',';
        cell(s.ese, 100.0);
        os << ',';
        cell(s.coverage_ss, 1.0);
        os << ',';
        cell(s.length_ss, 1.0);
        os << ',';
        cell(s.coverage_boot, 1.0);
        os << ',';
        cell(s.length_boot, 1.0);
        os << ',' << s.failures << '\n';
    }
    return os.str();
}

}  // namespace cfdbal
