#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "balance.hpp"
#include "errors.hpp"
#include "estimators.hpp"
#include "parallel.hpp"
#include "random.hpp"

namespace cfdbal {

// Deterministic map (rows of a parent dataset, seed) -> point estimate. Weight
// construction (bandwidth, gram, QP) happens inside every call, so resampling
// replications recompute the estimator end to end.
class EstimatorPipeline {
  public:
    virtual ~EstimatorPipeline() = default;
    virtual double estimate_rows(const Dataset& parent, const std::vector<int>& rows,
                                 std::uint64_t seed) const = 0;

    double estimate(const Dataset& data, std::uint64_t seed) const {
        std::vector<int> rows(data.n());
        std::iota(rows.begin(), rows.end(), 0);
        return estimate_rows(data, rows, seed);
    }
};

// CFD balancing weights feeding the ATE or LATE estimator. The pipeline is
// prepared against one dataset: pairwise distances in the family metric are
// precomputed once and gathered per row subset, which reproduces a fresh
// per-subset computation exactly (each pair's distance is the same double).
class CfdPipeline : public EstimatorPipeline {
  public:
    CfdPipeline(const Dataset& data, const BalanceConfig& config, Estimand estimand)
        : parent_(&data), config_(config), estimand_(estimand) {
        if (config_.density.family != KernelFamily::student_product)
            distances_ = pairwise_distances(data.X, metric_for(config_.density.family));
    }

    double estimate_rows(const Dataset& parent, const std::vector<int>& rows,
                         std::uint64_t seed) const override {
        Dataset sub = subset_rows(parent, rows);
        BalanceConfig cfg = config_;
        cfg.seed = seed;
        BalanceWeights bw;
        if (&parent == parent_ && config_.density.family != KernelFamily::student_product) {
            const int k = static_cast<int>(rows.size());
            Eigen::MatrixXd D(k, k);
            for (int i = 0; i < k; ++i) {
                D(i, i) = 0.0;
                for (int j = 0; j < i; ++j) {
                    const double dij = distances_(rows[i], rows[j]);
                    D(i, j) = dij;
                    D(j, i) = dij;
                }
            }
            SpectralDensity den;
            try {
                den = bind_density(cfg.density, sub.d(), &D);
            } catch (const ValidationError&) {
                // Same fallback as balance_weights: identical covariates leave
                // the ridge in charge, any fixed bandwidth gives a flat gram.
                if ((D.array() != 0.0).any() || !cfg.density.gamma_auto) throw;
                DensitySpec fixed = cfg.density;
                fixed.gamma_auto = false;
                fixed.gamma = 1.0;
                den = bind_density(fixed, sub.d(), nullptr);
            }
            GramMatrix gm = gram_from_distances(den, D);
            bw = balance_from_gram(gm, sub.groups(), cfg);
        } else {
            bw = balance_weights(sub.X, sub.z, cfg);
        }
        return estimand_ == Estimand::ate ? ate_weighted(sub, bw.w).value
                                          : late_weighted(sub, bw.w).value;
    }

  private:
    const Dataset* parent_;
    BalanceConfig config_;
    Estimand estimand_;
    Eigen::MatrixXd distances_;
};

// Logistic-regression Hajek weights feeding the same estimators.
class IpwPipeline : public EstimatorPipeline {
  public:
    explicit IpwPipeline(Estimand estimand) : estimand_(estimand) {}

    double estimate_rows(const Dataset& parent, const std::vector<int>& rows,
                         std::uint64_t) const override {
        Dataset sub = subset_rows(parent, rows);
        IpwWeights ipw = ipw_hajek_weights(sub.X, sub.z);
        return estimand_ == Estimand::ate ? ate_weighted(sub, ipw.w).value
                                          : late_weighted(sub, ipw.w).value;
    }

  private:
    Estimand estimand_;
};

// Uniform weights: plain difference of group means, or its Wald ratio.
class UniformPipeline : public EstimatorPipeline {
  public:
    explicit UniformPipeline(Estimand estimand) : estimand_(estimand) {}

    double estimate_rows(const Dataset& parent, const std::vector<int>& rows,
                         std::uint64_t) const override {
        Dataset sub = subset_rows(parent, rows);
        Eigen::VectorXd w = Eigen::VectorXd::Ones(sub.n());
        return estimand_ == Estimand::ate ? ate_weighted(sub, w).value : late_weighted(sub, w).value;
    }

  private:
    Estimand estimand_;
};

class FunctionPipeline : public EstimatorPipeline {
  public:
    using Fn = std::function<double(const Dataset&, const std::vector<int>&, std::uint64_t)>;
    explicit FunctionPipeline(Fn fn) : fn_(std::move(fn)) {}

    double estimate_rows(const Dataset& parent, const std::vector<int>& rows,
                         std::uint64_t seed) const override {
        return fn_(parent, rows, seed);
    }

  private:
    Fn fn_;
};

enum class CiMethod { subsampling, bootstrap };

struct CiResult {
    double point = 0;
    double lower = 0;
    double upper = 0;
    CiMethod method = CiMethod::subsampling;
    double alpha = 0.05;
    int b = 0;            // subsample size (subsampling only)
    int replications = 0; // draws used
    std::vector<double> replication_estimates;
    std::vector<std::string> warnings;
};

namespace detail {

constexpr std::uint64_t kSaltFull = 101;
constexpr std::uint64_t kSaltDraw = 202;
constexpr std::uint64_t kSaltPipe = 303;
constexpr std::uint64_t kSaltGrid = 404;

// Type-1 empirical quantile: the ceil(p B)-th order statistic.
inline double quantile_type1(std::vector<double> v, double p) {
    const int B = static_cast<int>(v.size());
    int k = static_cast<int>(std::ceil(p * B - 1e-9));
    k = std::clamp(k, 1, B);
    std::nth_element(v.begin(), v.begin() + (k - 1), v.end());
    return v[k - 1];
}

inline bool groups_present(const Dataset& data, const std::vector<int>& rows) {
    bool any1 = false, any0 = false;
    for (int r : rows) {
        if (data.z(r) == 1.0) any1 = true;
        else any0 = true;
        if (any1 && any0) return true;
    }
    return false;
}

// One resampling replication: redraw until the subsample carries both groups
// and the pipeline succeeds, within the retry budget.
template <typename DrawFn>
double replicate(const Dataset& data, const EstimatorPipeline& pipeline, DrawFn draw,
                 std::mt19937_64& rng, std::uint64_t pipe_seed, int max_retries, int& retries) {
    for (int attempt = 0; attempt <= max_retries; ++attempt) {
        std::vector<int> rows = draw(rng);
        if (!groups_present(data, rows)) {
            ++retries;
            continue;
        }
        try {
            return pipeline.estimate_rows(data, rows, pipe_seed);
        } catch (const std::exception&) {
            ++retries;
        }
    }
    throw NumericalError("resampling: replication still degenerate after " +
                         std::to_string(max_retries) + " retries");
}

}  // namespace detail

// Subsampling CI at the sqrt(n) rate: r_k = sqrt(b) (tau_k - tau_n), interval
// [tau_n - Q_{1-a/2}(r)/sqrt(n), tau_n - Q_{a/2}(r)/sqrt(n)].
inline CiResult subsample_ci(const Dataset& data, const EstimatorPipeline& pipeline, int b, int B_s,
                             double alpha, std::uint64_t seed, int threads = 1,
                             const double* precomputed_point = nullptr) {
    const int n = data.n();
    if (b < 2 || b >= n) throw ValidationError("subsampling: b must satisfy 2 <= b < n");
    if (B_s < 2) throw ValidationError("subsampling: need at least 2 replications");
    if (!(alpha > 0 && alpha < 1)) throw ValidationError("subsampling: alpha must be in (0,1)");

    CiResult out;
    out.method = CiMethod::subsampling;
    out.alpha = alpha;
    out.b = b;
    out.replications = B_s;
    out.point = precomputed_point ? *precomputed_point
                                  : pipeline.estimate(data, derive_seed(seed, detail::kSaltFull, 0));

    std::vector<double> est(B_s);
    std::vector<int> retries(B_s, 0);
    parallel_for(B_s, threads, [&](int k) {
        std::mt19937_64 rng(derive_seed(seed, detail::kSaltDraw, k));
        auto draw = [&](std::mt19937_64& r) { return sample_without_replacement(n, b, r); };
        est[k] = detail::replicate(data, pipeline, draw, rng,
                                   derive_seed(seed, detail::kSaltPipe, k), 100, retries[k]);
    });
    int total_retries = std::accumulate(retries.begin(), retries.end(), 0);
    if (total_retries > 0)
        out.warnings.push_back("subsampling: " + std::to_string(total_retries) + " draws redrawn");

    std::vector<double> r(B_s);
    const double sb = std::sqrt(static_cast<double>(b));
    for (int k = 0; k < B_s; ++k) r[k] = sb * (est[k] - out.point);
    const double sn = std::sqrt(static_cast<double>(n));
    out.lower = out.point - detail::quantile_type1(r, 1.0 - alpha / 2.0) / sn;
    out.upper = out.point - detail::quantile_type1(r, alpha / 2.0) / sn;
    out.replication_estimates = std::move(est);
    return out;
}

// Percentile bootstrap; implemented exactly so its undercoverage for the
// balancing estimator can be demonstrated against subsampling.
inline CiResult bootstrap_ci(const Dataset& data, const EstimatorPipeline& pipeline, int B,
                             double alpha, std::uint64_t seed, int threads = 1,
                             const double* precomputed_point = nullptr) {
    const int n = data.n();
    if (B < 100) throw ValidationError("bootstrap: need B >= 100");
    if (!(alpha > 0 && alpha < 1)) throw ValidationError("bootstrap: alpha must be in (0,1)");

    CiResult out;
    out.method = CiMethod::bootstrap;
    out.alpha = alpha;
    out.replications = B;
    out.point = precomputed_point ? *precomputed_point
                                  : pipeline.estimate(data, derive_seed(seed, detail::kSaltFull, 0));

    std::vector<double> est(B);
    std::vector<int> retries(B, 0);
    parallel_for(B, threads, [&](int k) {
        std::mt19937_64 rng(derive_seed(seed, detail::kSaltDraw, k));
        auto draw = [&](std::mt19937_64& r) { return sample_with_replacement(n, n, r); };
        est[k] = detail::replicate(data, pipeline, draw, rng,
                                   derive_seed(seed, detail::kSaltPipe, k), 100, retries[k]);
    });
    int total_retries = std::accumulate(retries.begin(), retries.end(), 0);
    if (total_retries > 0)
        out.warnings.push_back("bootstrap: " + std::to_string(total_retries) + " draws redrawn");

    out.lower = detail::quantile_type1(est, alpha / 2.0);
    out.upper = detail::quantile_type1(est, 1.0 - alpha / 2.0);
    out.replication_estimates = std::move(est);
    return out;
}

struct SubsampleSelection {
    int b = 0;
    std::vector<int> grid;
    std::vector<double> lower;       // CI endpoints per grid point
    std::vector<double> upper;
    std::vector<double> volatility;  // NaN outside the window interior
};

inline std::vector<int> default_subsample_grid(int n) {
    std::vector<int> grid;
    for (double g = 0.45; g < 0.851; g += 0.05) {
        int b = static_cast<int>(std::lround(std::pow(static_cast<double>(n), g)));
        b = std::clamp(b, 2, n - 1);
        if (grid.empty() || b > grid.back()) grid.push_back(b);
    }
    return grid;
}

// Minimum-volatility rule: for each interior grid point, sum the sample
// standard deviations of the lower and upper endpoints over the surrounding
// window; pick the b with the smallest total, ties to the smaller b.
inline SubsampleSelection select_subsample_size(const Dataset& data, const EstimatorPipeline& pipeline,
                                                const std::vector<int>& grid, int window, double alpha,
                                                int B_s, std::uint64_t seed, int threads = 1) {
    const int n = data.n();
    if (window < 1) throw ValidationError("subsample selection: window must be >= 1");
    const int G = static_cast<int>(grid.size());
    if (G < 2 * window + 1)
        throw ValidationError("subsample selection: grid shorter than 2*window + 1");
    for (int i = 0; i < G; ++i) {
        if (grid[i] < 2 || grid[i] >= n) throw ValidationError("subsample selection: grid point outside [2, n-1]");
        if (i > 0 && grid[i] <= grid[i - 1]) throw ValidationError("subsample selection: grid must be strictly increasing");
    }

    SubsampleSelection sel;
    sel.grid = grid;
    sel.lower.resize(G);
    sel.upper.resize(G);
    sel.volatility.assign(G, std::numeric_limits<double>::quiet_NaN());
    const double point = pipeline.estimate(data, derive_seed(seed, detail::kSaltFull, 0));
    for (int i = 0; i < G; ++i) {
        CiResult ci = subsample_ci(data, pipeline, grid[i], B_s, alpha,
                                   derive_seed(seed, detail::kSaltGrid, static_cast<std::uint64_t>(grid[i])),
                                   threads, &point);
        sel.lower[i] = ci.lower;
        sel.upper[i] = ci.upper;
    }

    auto sd = [](const std::vector<double>& v, int from, int to) {
        const int k = to - from + 1;
        double mean = 0;
        for (int i = from; i <= to; ++i) mean += v[i];
        mean /= k;
        double ss = 0;
        for (int i = from; i <= to; ++i) ss += (v[i] - mean) * (v[i] - mean);
        return std::sqrt(ss / (k - 1));
    };
    int best = -1;
    for (int i = window; i < G - window; ++i) {
        sel.volatility[i] = sd(sel.lower, i - window, i + window) + sd(sel.upper, i - window, i + window);
        if (best == -1 || sel.volatility[i] < sel.volatility[best]) best = i;
    }
    sel.b = grid[best];
    return sel;
}

}  // namespace cfdbal
