#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "errors.hpp"

namespace cfdbal {

enum class KernelFamily { gaussian, cauchy_product, student_product, isotropic_matern, energy };

enum class Metric { squared_l2, l1 };

inline const char* family_name(KernelFamily f) {
    switch (f) {
        case KernelFamily::gaussian: return "gaussian";
        case KernelFamily::cauchy_product: return "cauchy_product";
        case KernelFamily::student_product: return "student_product";
        case KernelFamily::isotropic_matern: return "isotropic_matern";
        case KernelFamily::energy: return "energy";
    }
    return "?";
}

// l1 for the Cauchy product kernel, squared l2 for everything else.
inline Metric metric_for(KernelFamily f) {
    return f == KernelFamily::cauchy_product ? Metric::l1 : Metric::squared_l2;
}

// Spectral density of a translation-invariant kernel. gamma is the
// length-scale; s carries the per-coordinate exponents for student_product
// and the scalar exponent for isotropic_matern (where nu = s - d/2).
struct SpectralDensity {
    KernelFamily family;
    double gamma = 1.0;
    Eigen::VectorXd s;
    int d = 0;

    double nu() const { return s(0) - 0.5 * d; }
};

inline SpectralDensity gaussian_density(double gamma, int d) {
    if (!(gamma > 0)) throw ValidationError("gaussian: gamma must be positive");
    if (d < 1) throw ValidationError("gaussian: dimension must be >= 1");
    return {KernelFamily::gaussian, gamma, Eigen::VectorXd(), d};
}

inline SpectralDensity cauchy_density(double gamma, int d) {
    if (!(gamma > 0)) throw ValidationError("cauchy_product: gamma must be positive");
    if (d < 1) throw ValidationError("cauchy_product: dimension must be >= 1");
    return {KernelFamily::cauchy_product, gamma, Eigen::VectorXd(), d};
}

inline SpectralDensity student_density(double gamma, const Eigen::VectorXd& s, int d) {
    if (!(gamma > 0)) throw ValidationError("student_product: gamma must be positive");
    if (d < 1) throw ValidationError("student_product: dimension must be >= 1");
    Eigen::VectorXd sv = s;
    if (sv.size() == 1 && d > 1) sv = Eigen::VectorXd::Constant(d, s(0));
    if (sv.size() != d) throw ValidationError("student_product: s must be scalar or length d");
    for (int j = 0; j < d; ++j)
        if (!(sv(j) > 0.5)) throw ValidationError("student_product: each s_j must exceed 1/2");
    return {KernelFamily::student_product, gamma, sv, d};
}

inline SpectralDensity student_density(double gamma, double s, int d) {
    return student_density(gamma, Eigen::VectorXd::Constant(1, s), d);
}

// Parametrized by nu = s - d/2 > 0; stored as s to keep the density form.
inline SpectralDensity matern_density(double gamma, double nu, int d) {
    if (!(gamma > 0)) throw ValidationError("isotropic_matern: gamma must be positive");
    if (d < 1) throw ValidationError("isotropic_matern: dimension must be >= 1");
    if (!(nu > 0)) throw ValidationError("isotropic_matern: nu must be positive");
    return {KernelFamily::isotropic_matern, gamma, Eigen::VectorXd::Constant(1, nu + 0.5 * d), d};
}

inline SpectralDensity energy_density(int d) {
    if (d < 1) throw ValidationError("energy: dimension must be >= 1");
    return {KernelFamily::energy, 1.0, Eigen::VectorXd(), d};
}

struct FrequencySample {
    Eigen::MatrixXd T;  // L x d, rows drawn from the normalized density
    int L = 0;
    std::uint64_t seed = 0;
};

struct GramMatrix {
    Eigen::MatrixXd K;
    enum class Source { closed_form, random_feature } source = Source::closed_form;
    SpectralDensity density;
};

// Full symmetric pairwise distance matrix, zero diagonal. Entries are squared
// l2 or l1 depending on the metric; each pair is computed once and mirrored.
inline Eigen::MatrixXd pairwise_distances(const Eigen::MatrixXd& X, Metric m) {
    const int n = static_cast<int>(X.rows());
    Eigen::MatrixXd D = Eigen::MatrixXd::Zero(n, n);
    for (int i = 1; i < n; ++i) {
        for (int j = 0; j < i; ++j) {
            double dij;
            if (m == Metric::squared_l2)
                dij = (X.row(i) - X.row(j)).squaredNorm();
            else
                dij = (X.row(i) - X.row(j)).cwiseAbs().sum();
            D(i, j) = dij;
            D(j, i) = dij;
        }
    }
    return D;
}

// Lower median of the strict upper triangle of a precomputed distance matrix.
inline double median_from_distances(const Eigen::MatrixXd& D, Metric m) {
    const int n = static_cast<int>(D.rows());
    if (n < 2) throw ValidationError("median heuristic: need at least 2 rows");
    std::vector<double> v;
    v.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
    for (int i = 1; i < n; ++i)
        for (int j = 0; j < i; ++j) v.push_back(D(i, j));
    const std::size_t mid = (v.size() - 1) / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    double med = v[mid];
    if (!(med > 0))
        throw ValidationError("median heuristic: median pairwise distance is zero (degenerate covariates)");
    return m == Metric::squared_l2 ? std::sqrt(med) : med;
}

// gamma^2 = median pairwise squared l2 distance, or gamma = median pairwise
// l1 distance, using the lower median of the n(n-1)/2 pair values.
inline double median_heuristic(const Eigen::MatrixXd& X, Metric m) {
    if (X.rows() < 2) throw ValidationError("median heuristic: need at least 2 rows");
    return median_from_distances(pairwise_distances(X, m), m);
}

// Kernel value from a precomputed distance in metric_for(family) units.
inline double kernel_from_distance(const SpectralDensity& den, double dist) {
    switch (den.family) {
        case KernelFamily::gaussian:
            return std::exp(-dist / (den.gamma * den.gamma));
        case KernelFamily::cauchy_product:
            return std::exp(-dist / den.gamma);
        case KernelFamily::energy:
            return -std::sqrt(dist);
        case KernelFamily::isotropic_matern: {
            const double nu = den.nu();
            const double r = std::sqrt(dist);
            const double z = std::sqrt(2.0 * nu) * r / den.gamma;
            auto half = [&](double target) { return std::abs(nu - target) < 1e-9; };
            if (half(0.5)) return std::exp(-z);
            if (half(1.5)) return (1.0 + z) * std::exp(-z);
            if (half(2.5)) return (1.0 + z + z * z / 3.0) * std::exp(-z);
            if (half(3.5)) return (1.0 + z + 0.4 * z * z + z * z * z / 15.0) * std::exp(-z);
            throw ValidationError("isotropic_matern: closed form shipped only for nu in {1/2, 3/2, 5/2, 7/2}");
        }
        case KernelFamily::student_product:
            throw ValidationError("student_product has no closed form; use random features");
    }
    throw ValidationError("unknown kernel family");
}

inline double kernel_eval(const SpectralDensity& den, const Eigen::VectorXd& x, const Eigen::VectorXd& xp) {
    if (x.size() != xp.size()) throw ValidationError("kernel_eval: dimension mismatch");
    double dist = metric_for(den.family) == Metric::squared_l2 ? (x - xp).squaredNorm()
                                                               : (x - xp).cwiseAbs().sum();
    return kernel_from_distance(den, dist);
}

// Rows T_l drawn i.i.d. from the normalized density. Gaussian coordinates are
// N(0, 2/gamma^2); Cauchy-product coordinates are standard Cauchy / gamma;
// student_product coordinate j is t' / (gamma * sqrt(2 s_j - 1)) with t'
// Student-t on 2 s_j - 1 degrees of freedom.
inline FrequencySample sample_frequencies(const SpectralDensity& den, int L, std::uint64_t seed) {
    if (L <= 0) throw ValidationError("sample_frequencies: L must be positive");
    if (den.family == KernelFamily::energy)
        throw ValidationError(
            "energy: spectral density is improper (omega(t) ~ ||t||^-(d+1)) and cannot be sampled");
    if (den.family == KernelFamily::isotropic_matern)
        throw ValidationError("isotropic_matern: frequency sampling not provided; use the closed form");

    std::mt19937_64 rng(seed);
    Eigen::MatrixXd T(L, den.d);
    if (den.family == KernelFamily::gaussian) {
        std::normal_distribution<double> g(0.0, std::sqrt(2.0) / den.gamma);
        for (int l = 0; l < L; ++l)
            for (int j = 0; j < den.d; ++j) T(l, j) = g(rng);
    } else if (den.family == KernelFamily::cauchy_product) {
        std::cauchy_distribution<double> c(0.0, 1.0 / den.gamma);
        for (int l = 0; l < L; ++l)
            for (int j = 0; j < den.d; ++j) T(l, j) = c(rng);
    } else {
        std::vector<std::student_t_distribution<double>> st;
        std::vector<double> scale(den.d);
        for (int j = 0; j < den.d; ++j) {
            const double df = 2.0 * den.s(j) - 1.0;
            st.emplace_back(df);
            scale[j] = 1.0 / (den.gamma * std::sqrt(df));
        }
        for (int l = 0; l < L; ++l)
            for (int j = 0; j < den.d; ++j) T(l, j) = st[j](rng) * scale[j];
    }
    return {std::move(T), L, seed};
}

// Feature map phi(x) = L^{-1/2} (cos(Tx), sin(Tx)); n x 2L.
inline Eigen::MatrixXd rf_features(const Eigen::MatrixXd& X, const FrequencySample& freq) {
    if (X.cols() != freq.T.cols()) throw ValidationError("rf_features: dimension mismatch between X and T");
    const int n = static_cast<int>(X.rows());
    const int L = freq.L;
    Eigen::MatrixXd proj = X * freq.T.transpose();  // n x L
    Eigen::MatrixXd phi(n, 2 * L);
    const double scale = 1.0 / std::sqrt(static_cast<double>(L));
    phi.leftCols(L) = proj.array().cos() * scale;
    phi.rightCols(L) = proj.array().sin() * scale;
    return phi;
}

// K = Phi Phi^T accumulated over frequency blocks; symmetric and PSD by
// construction, unit diagonal up to rounding.
inline GramMatrix rf_gram(const Eigen::MatrixXd& X, const SpectralDensity& den, const FrequencySample& freq) {
    if (X.cols() != freq.T.cols()) throw ValidationError("rf_gram: dimension mismatch between X and T");
    const int n = static_cast<int>(X.rows());
    const int L = freq.L;
    const int block = 2048;
    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n, n);
    for (int l0 = 0; l0 < L; l0 += block) {
        const int lb = std::min(block, L - l0);
        Eigen::MatrixXd proj = X * freq.T.middleRows(l0, lb).transpose();  // n x lb
        Eigen::MatrixXd c = proj.array().cos();
        Eigen::MatrixXd s = proj.array().sin();
        K.selfadjointView<Eigen::Lower>().rankUpdate(c);
        K.selfadjointView<Eigen::Lower>().rankUpdate(s);
    }
    K /= static_cast<double>(L);
    K.triangularView<Eigen::StrictlyUpper>() = K.transpose();
    K.diagonal().setOnes();  // cos^2 + sin^2 = 1; pins away accumulation dust
    return {std::move(K), GramMatrix::Source::random_feature, den};
}

inline GramMatrix gram_from_distances(const SpectralDensity& den, const Eigen::MatrixXd& D) {
    const int n = static_cast<int>(D.rows());
    Eigen::MatrixXd K(n, n);
    const double diag = den.family == KernelFamily::energy ? 0.0 : 1.0;
    for (int i = 0; i < n; ++i) {
        K(i, i) = diag;
        for (int j = 0; j < i; ++j) {
            const double kij = kernel_from_distance(den, D(i, j));
            K(i, j) = kij;
            K(j, i) = kij;
        }
    }
    return {std::move(K), GramMatrix::Source::closed_form, den};
}

inline GramMatrix gram(const SpectralDensity& den, const Eigen::MatrixXd& X) {
    if (den.family == KernelFamily::student_product)
        throw ValidationError("student_product gram requires a frequency sample");
    if (X.cols() != den.d) throw ValidationError("gram: X dimension does not match the density");
    return gram_from_distances(den, pairwise_distances(X, metric_for(den.family)));
}

inline GramMatrix gram(const SpectralDensity& den, const Eigen::MatrixXd& X, const FrequencySample& freq) {
    return rf_gram(X, den, freq);
}

// Cross gram K[i][j] = k(X_i, Y_j) for closed-form families.
inline Eigen::MatrixXd cross_gram(const SpectralDensity& den, const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) {
    if (X.cols() != Y.cols()) throw ValidationError("cross_gram: dimension mismatch");
    const Metric m = metric_for(den.family);
    Eigen::MatrixXd K(X.rows(), Y.rows());
    for (int i = 0; i < X.rows(); ++i)
        for (int j = 0; j < Y.rows(); ++j) {
            double dij = m == Metric::squared_l2 ? (X.row(i) - Y.row(j)).squaredNorm()
                                                 : (X.row(i) - Y.row(j)).cwiseAbs().sum();
            K(i, j) = kernel_from_distance(den, dij);
        }
    return K;
}

// Parsed density request; bandwidth and dimension are bound against data later.
struct DensitySpec {
    KernelFamily family = KernelFamily::gaussian;
    bool gamma_auto = true;
    double gamma = 0.0;
    double s = 3.0;     // student_product exponent, broadcast per coordinate
    double nu = 2.5;    // isotropic_matern smoothness
    int L = 10000;      // feature count for Monte Carlo grams
    std::string text;   // original spec string, echoed in outputs
};

namespace detail {

inline std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t");
    auto e = s.find_last_not_of(" \t");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

inline double parse_positive(const std::string& key, const std::string& val) {
    std::size_t pos = 0;
    double x = 0;
    try {
        x = std::stod(val, &pos);
    } catch (const std::exception&) {
        throw ValidationError("density spec: bad value for " + key + ": '" + val + "'");
    }
    if (pos != val.size() || !(x > 0))
        throw ValidationError("density spec: " + key + " must be a positive number, got '" + val + "'");
    return x;
}

}  // namespace detail

// Accepted forms: gaussian(gamma=auto), laplacian(gamma=...), student(s=3,L=10000),
// matern(nu=2.5,gamma=auto), energy. Omitted arguments take defaults; gamma
// defaults to auto (median heuristic at bind time).
inline DensitySpec parse_density_spec(const std::string& text) {
    std::string s = detail::trim(text);
    std::string name = s, args;
    auto lp = s.find('(');
    if (lp != std::string::npos) {
        if (s.back() != ')') throw ValidationError("density spec: missing ')' in '" + text + "'");
        name = detail::trim(s.substr(0, lp));
        args = s.substr(lp + 1, s.size() - lp - 2);
    }

    DensitySpec spec;
    spec.text = s;
    if (name == "gaussian") spec.family = KernelFamily::gaussian;
    else if (name == "laplacian") spec.family = KernelFamily::cauchy_product;
    else if (name == "student") spec.family = KernelFamily::student_product;
    else if (name == "matern") spec.family = KernelFamily::isotropic_matern;
    else if (name == "energy") spec.family = KernelFamily::energy;
    else throw ValidationError("density spec: unknown family '" + name + "'");

    std::size_t start = 0;
    while (start < args.size()) {
        auto comma = args.find(',', start);
        std::string kv = args.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
        start = comma == std::string::npos ? args.size() : comma + 1;
        kv = detail::trim(kv);
        if (kv.empty()) continue;
        auto eq = kv.find('=');
        if (eq == std::string::npos) throw ValidationError("density spec: expected key=value, got '" + kv + "'");
        std::string key = detail::trim(kv.substr(0, eq));
        std::string val = detail::trim(kv.substr(eq + 1));
        if (spec.family == KernelFamily::energy)
            throw ValidationError("density spec: energy takes no parameters");
        if (key == "gamma") {
            if (val == "auto") {
                spec.gamma_auto = true;
            } else {
                spec.gamma_auto = false;
                spec.gamma = detail::parse_positive(key, val);
            }
        } else if (key == "s" && spec.family == KernelFamily::student_product) {
            spec.s = detail::parse_positive(key, val);
        } else if (key == "nu" && spec.family == KernelFamily::isotropic_matern) {
            spec.nu = detail::parse_positive(key, val);
        } else if (key == "L" && spec.family == KernelFamily::student_product) {
            double L = detail::parse_positive(key, val);
            if (L != std::floor(L)) throw ValidationError("density spec: L must be an integer");
            spec.L = static_cast<int>(L);
        } else {
            throw ValidationError("density spec: unknown parameter '" + key + "' for family '" + name + "'");
        }
    }
    return spec;
}

// Resolves gamma=auto against a precomputed distance matrix in the family's metric.
inline SpectralDensity bind_density(const DensitySpec& spec, int d, const Eigen::MatrixXd* distances) {
    double gamma = spec.gamma;
    if (spec.family == KernelFamily::energy) return energy_density(d);
    if (spec.gamma_auto) {
        if (!distances) throw ValidationError("density spec: gamma=auto requires data");
        gamma = median_from_distances(*distances, metric_for(spec.family));
    }
    switch (spec.family) {
        case KernelFamily::gaussian: return gaussian_density(gamma, d);
        case KernelFamily::cauchy_product: return cauchy_density(gamma, d);
        case KernelFamily::student_product: return student_density(gamma, spec.s, d);
        case KernelFamily::isotropic_matern: return matern_density(gamma, spec.nu, d);
        case KernelFamily::energy: break;
    }
    return energy_density(d);
}

inline SpectralDensity bind_density(const DensitySpec& spec, const Eigen::MatrixXd& X) {
    const int d = static_cast<int>(X.cols());
    if (spec.family != KernelFamily::energy && spec.gamma_auto) {
        Eigen::MatrixXd D = pairwise_distances(X, metric_for(spec.family));
        return bind_density(spec, d, &D);
    }
    return bind_density(spec, d, nullptr);
}

}  // namespace cfdbal
