#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "balance.hpp"
#include "csv.hpp"
#include "inference.hpp"
#include "sim.hpp"

namespace cfdbal {

inline constexpr const char* kVersion = "0.1.0";

using json = nlohmann::json;

struct InferenceSettings {
    std::string ci = "both";  // none | subsampling | bootstrap | both
    double alpha = 0.05;
    int subsample_size = 0;   // 0 = minimum-volatility selection
    int replications = 500;   // subsample and bootstrap draws
};

// Everything a weights/estimate/kernel-check run needs; serializes to the
// config-file schema and is echoed verbatim into every output.
struct RunConfig {
    std::string csv;
    ColumnSpec columns;
    std::string weights_source = "cfd";  // cfd | ipw | uniform
    Estimand estimand = Estimand::ate;
    std::string density = "gaussian(gamma=auto)";
    BalanceMode mode = BalanceMode::three_way;
    bool lambda_auto = true;
    double lambda = 0.0;
    InferenceSettings inference;
    QpSettings qp;
    std::uint64_t seed = 0;
    int threads = 1;
};

namespace detail {

inline const char* mode_name(BalanceMode m) {
    return m == BalanceMode::three_way ? "three_way" : "two_way";
}

inline BalanceMode parse_mode(const std::string& s) {
    if (s == "three_way") return BalanceMode::three_way;
    if (s == "two_way") return BalanceMode::two_way;
    throw ValidationError("config: mode must be three_way or two_way, got '" + s + "'");
}

inline const char* estimand_name(Estimand e) { return e == Estimand::ate ? "ate" : "late"; }

inline Estimand parse_estimand(const std::string& s) {
    if (s == "ate") return Estimand::ate;
    if (s == "late") return Estimand::late;
    throw ValidationError("config: estimand must be ate or late, got '" + s + "'");
}

inline void check_ci_choice(const std::string& s) {
    if (s != "none" && s != "subsampling" && s != "bootstrap" && s != "both")
        throw ValidationError("config: ci must be none|subsampling|bootstrap|both, got '" + s + "'");
}

inline void check_weights_source(const std::string& s) {
    if (s != "cfd" && s != "ipw" && s != "uniform")
        throw ValidationError("config: weights must be cfd|ipw|uniform, got '" + s + "'");
}

inline void reject_unknown_keys(const json& j, const std::vector<std::string>& known,
                                const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw ValidationError("config: unknown key '" + it.key() + "' in " + where);
}

inline json cfd_report_json(const CfdReport& r) {
    return json{{"cfd1_fn", r.cfd1_fn},
                {"cfd0_fn", r.cfd0_fn},
                {"cfd1_0", r.cfd1_0},
                {"total_two_way", r.total_two_way},
                {"total_three_way", r.total_three_way}};
}

inline json qp_json(const QpSettings& qp) {
    return json{{"eps_abs", qp.eps_abs},
                {"eps_rel", qp.eps_rel},
                {"max_iter", qp.max_iter},
                {"rho", qp.rho},
                {"adaptive_rho", qp.adaptive_rho},
                {"polish", qp.polish}};
}

inline QpSettings parse_qp(const json& j) {
    QpSettings qp;
    reject_unknown_keys(j, {"eps_abs", "eps_rel", "max_iter", "rho", "adaptive_rho", "polish"}, "qp");
    if (j.contains("eps_abs")) qp.eps_abs = j.at("eps_abs").get<double>();
    if (j.contains("eps_rel")) qp.eps_rel = j.at("eps_rel").get<double>();
    if (j.contains("max_iter")) qp.max_iter = j.at("max_iter").get<int>();
    if (j.contains("rho")) qp.rho = j.at("rho").get<double>();
    if (j.contains("adaptive_rho")) qp.adaptive_rho = j.at("adaptive_rho").get<bool>();
    if (j.contains("polish")) qp.polish = j.at("polish").get<bool>();
    return qp;
}

}  // namespace detail

inline json run_config_json(const RunConfig& c) {
    json cols{{"outcome", c.columns.outcome},
              {"treatment", c.columns.treatment},
              {"covariates", c.columns.covariates},
              {"continuous", c.columns.continuous}};
    if (!c.columns.receipt.empty()) cols["receipt"] = c.columns.receipt;
    json inf{{"ci", c.inference.ci},
             {"alpha", c.inference.alpha},
             {"replications", c.inference.replications}};
    inf["subsample_size"] =
        c.inference.subsample_size > 0 ? json(c.inference.subsample_size) : json("auto");
    json out{{"csv", c.csv},
             {"columns", cols},
             {"weights", c.weights_source},
             {"estimand", detail::estimand_name(c.estimand)},
             {"density", c.density},
             {"mode", detail::mode_name(c.mode)},
             {"inference", inf},
             {"qp", detail::qp_json(c.qp)},
             {"seed", c.seed},
             {"threads", c.threads}};
    out["lambda"] = c.lambda_auto ? json("auto") : json(c.lambda);
    return out;
}

inline RunConfig parse_run_config(const json& j) {
    RunConfig c;
    detail::reject_unknown_keys(j,
                                {"csv", "columns", "weights", "estimand", "density", "mode",
                                 "lambda", "inference", "qp", "seed", "threads"},
                                "config");
    if (j.contains("csv")) c.csv = j.at("csv").get<std::string>();
    if (j.contains("columns")) {
        const json& cols = j.at("columns");
        detail::reject_unknown_keys(cols, {"outcome", "treatment", "receipt", "covariates", "continuous"},
                                    "columns");
        if (cols.contains("outcome")) c.columns.outcome = cols.at("outcome").get<std::string>();
        if (cols.contains("treatment")) c.columns.treatment = cols.at("treatment").get<std::string>();
        if (cols.contains("receipt")) c.columns.receipt = cols.at("receipt").get<std::string>();
        if (cols.contains("covariates"))
            c.columns.covariates = cols.at("covariates").get<std::vector<std::string>>();
        if (cols.contains("continuous"))
            c.columns.continuous = cols.at("continuous").get<std::vector<std::string>>();
    }
    if (j.contains("weights")) {
        c.weights_source = j.at("weights").get<std::string>();
        detail::check_weights_source(c.weights_source);
    }
    if (j.contains("estimand")) c.estimand = detail::parse_estimand(j.at("estimand").get<std::string>());
    if (j.contains("density")) c.density = j.at("density").get<std::string>();
    if (j.contains("mode")) c.mode = detail::parse_mode(j.at("mode").get<std::string>());
    if (j.contains("lambda")) {
        if (j.at("lambda").is_string()) {
            if (j.at("lambda").get<std::string>() != "auto")
                throw ValidationError("config: lambda must be \"auto\" or a number");
            c.lambda_auto = true;
        } else {
            c.lambda_auto = false;
            c.lambda = j.at("lambda").get<double>();
        }
    }
    if (j.contains("inference")) {
        const json& inf = j.at("inference");
        detail::reject_unknown_keys(inf, {"ci", "alpha", "subsample_size", "replications"}, "inference");
        if (inf.contains("ci")) {
            c.inference.ci = inf.at("ci").get<std::string>();
            detail::check_ci_choice(c.inference.ci);
        }
        if (inf.contains("alpha")) c.inference.alpha = inf.at("alpha").get<double>();
        if (inf.contains("subsample_size")) {
            if (inf.at("subsample_size").is_string()) {
                if (inf.at("subsample_size").get<std::string>() != "auto")
                    throw ValidationError("config: subsample_size must be \"auto\" or an integer");
                c.inference.subsample_size = 0;
            } else {
                c.inference.subsample_size = inf.at("subsample_size").get<int>();
            }
        }
        if (inf.contains("replications")) c.inference.replications = inf.at("replications").get<int>();
    }
    if (j.contains("qp")) c.qp = detail::parse_qp(j.at("qp"));
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("threads")) c.threads = j.at("threads").get<int>();
    return c;
}

namespace detail {

inline json balance_json(const BalanceWeights& bw) {
    return json{{"cfd_before", cfd_report_json(bw.before)},
                {"cfd_after", cfd_report_json(bw.after)},
                {"objective_before", bw.objective_before},
                {"objective_after", bw.objective_after},
                {"ess_treated", bw.ess1},
                {"ess_control", bw.ess0},
                {"max_weight", bw.max_weight},
                {"stability_flag", bw.stability_flag},
                {"gamma", bw.gamma},
                {"lambda", bw.lambda},
                {"solver_status", qp_status_name(bw.solver_status)},
                {"primal_residual", bw.primal_residual},
                {"dual_residual", bw.dual_residual},
                {"iterations", bw.iterations},
                {"warnings", bw.warnings}};
}

inline json scaling_json(const std::vector<ScaleInfo>& scaling) {
    json arr = json::array();
    for (const auto& s : scaling) arr.push_back({{"column", s.column}, {"min", s.min}, {"max", s.max}});
    return arr;
}

inline json ci_json(const CiResult& ci, bool include_replicates) {
    json out{{"point", ci.point},
             {"lower", ci.lower},
             {"upper", ci.upper},
             {"alpha", ci.alpha},
             {"method", ci.method == CiMethod::subsampling ? "subsampling" : "bootstrap"},
             {"replications", ci.replications},
             {"warnings", ci.warnings}};
    if (ci.method == CiMethod::subsampling) out["b"] = ci.b;
    if (include_replicates) out["replication_estimates"] = ci.replication_estimates;
    return out;
}

struct PreparedRun {
    IngestResult ingest;
    BalanceConfig balance;  // cfd source only
};

inline PreparedRun prepare(const RunConfig& c, bool need_outcome) {
    if (c.csv.empty()) throw ValidationError("config: csv path required");
    ColumnSpec cols = c.columns;
    if (!need_outcome) cols.outcome.clear();
    if (need_outcome && cols.outcome.empty())
        throw ValidationError("config: outcome column required");
    if (c.estimand == Estimand::late && cols.receipt.empty() && need_outcome)
        throw ValidationError("config: estimand late requires a receipt column");
    PreparedRun p{ingest_csv(c.csv, cols), {}};
    p.balance.mode = c.mode;
    p.balance.lambda_auto = c.lambda_auto;
    p.balance.lambda = c.lambda;
    p.balance.density = parse_density_spec(c.density);
    p.balance.qp = c.qp;
    p.balance.seed = derive_seed(c.seed, kSaltFull, 0);
    return p;
}

}  // namespace detail

struct WeightsOutput {
    json report;
    std::string weights_csv;
};

// `weights`: solve for the requested weights on the full sample and emit a
// (row_id, weight) table alongside the diagnostics.
inline WeightsOutput run_weights(const RunConfig& config) {
    detail::PreparedRun p = detail::prepare(config, /*need_outcome=*/false);
    const Dataset& ds = p.ingest.data;

    Eigen::VectorXd w;
    json diagnostics;
    std::vector<std::string> warnings = p.ingest.warnings;
    if (config.weights_source == "cfd") {
        BalanceWeights bw = balance_weights(ds.X, ds.z, p.balance);
        w = bw.w;
        diagnostics["balance"] = detail::balance_json(bw);
    } else if (config.weights_source == "ipw") {
        IpwWeights ipw = ipw_hajek_weights(ds.X, ds.z);
        w = ipw.w;
        diagnostics["ipw"] = json{{"propensity_min", ipw.propensity.minCoeff()},
                                  {"propensity_max", ipw.propensity.maxCoeff()},
                                  {"warnings", ipw.warnings}};
        warnings.insert(warnings.end(), ipw.warnings.begin(), ipw.warnings.end());
    } else {
        w = Eigen::VectorXd::Ones(ds.n());
        diagnostics["uniform"] = json::object();
    }

    std::string csv = "row_id,weight\n";
    char buf[64];
    for (int i = 0; i < ds.n(); ++i) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g\n", i, w(i));
        csv += buf;
    }

    WeightsOutput out;
    out.report = json{{"version", kVersion},
                      {"command", "weights"},
                      {"config", run_config_json(config)},
                      {"data", json{{"n", ds.n()},
                                    {"n_treated", ds.n1},
                                    {"n_control", ds.n0},
                                    {"d", ds.d()},
                                    {"scaling", detail::scaling_json(p.ingest.scaling)}}},
                      {"diagnostics", diagnostics},
                      {"warnings", warnings}};
    out.weights_csv = std::move(csv);
    return out;
}

// `estimate`: point estimate plus the requested confidence intervals. The
// full-sample point is computed once and shared with every CI so repeated
// solves agree bit for bit.
inline json run_estimate(const RunConfig& config) {
    detail::PreparedRun p = detail::prepare(config, /*need_outcome=*/true);
    const Dataset& ds = p.ingest.data;
    if (config.estimand == Estimand::late && !ds.has_receipt())
        throw ValidationError("config: estimand late requires a receipt column");

    std::unique_ptr<EstimatorPipeline> pipeline;
    json diagnostics;
    std::vector<std::string> warnings = p.ingest.warnings;
    double point = 0;
    double denominator = 1.0;
    if (config.weights_source == "cfd") {
        pipeline = std::make_unique<CfdPipeline>(ds, p.balance, config.estimand);
        BalanceWeights bw = balance_weights(ds.X, ds.z, p.balance);
        Estimate est = config.estimand == Estimand::ate ? ate_weighted(ds, bw.w)
                                                        : late_weighted(ds, bw.w);
        point = est.value;
        denominator = est.denominator;
        diagnostics["balance"] = detail::balance_json(bw);
        warnings.insert(warnings.end(), bw.warnings.begin(), bw.warnings.end());
    } else if (config.weights_source == "ipw") {
        pipeline = std::make_unique<IpwPipeline>(config.estimand);
        IpwWeights ipw = ipw_hajek_weights(ds.X, ds.z);
        Estimate est = config.estimand == Estimand::ate ? ate_weighted(ds, ipw.w)
                                                        : late_weighted(ds, ipw.w);
        point = est.value;
        denominator = est.denominator;
        diagnostics["ipw"] = json{{"propensity_min", ipw.propensity.minCoeff()},
                                  {"propensity_max", ipw.propensity.maxCoeff()},
                                  {"warnings", ipw.warnings}};
        warnings.insert(warnings.end(), ipw.warnings.begin(), ipw.warnings.end());
    } else {
        pipeline = std::make_unique<UniformPipeline>(config.estimand);
        Eigen::VectorXd ones = Eigen::VectorXd::Ones(ds.n());
        Estimate est = config.estimand == Estimand::ate ? ate_weighted(ds, ones)
                                                        : late_weighted(ds, ones);
        point = est.value;
        denominator = est.denominator;
    }

    json result{{"estimate", point}, {"estimand", detail::estimand_name(config.estimand)}};
    if (config.estimand == Estimand::late) result["first_stage"] = denominator;

    const InferenceSettings& inf = config.inference;
    const bool want_ss = inf.ci == "subsampling" || inf.ci == "both";
    const bool want_boot = inf.ci == "bootstrap" || inf.ci == "both";
    if (want_ss) {
        int b = inf.subsample_size;
        std::uint64_t ci_seed = config.seed;
        if (b <= 0) {
            SubsampleSelection sel =
                select_subsample_size(ds, *pipeline, default_subsample_grid(ds.n()), 1, inf.alpha,
                                      inf.replications, config.seed, config.threads);
            b = sel.b;
            ci_seed = derive_seed(config.seed, detail::kSaltGrid, static_cast<std::uint64_t>(b));
            result["subsample_selection"] = json{{"b", sel.b},
                                                 {"grid", sel.grid},
                                                 {"lower", sel.lower},
                                                 {"upper", sel.upper},
                                                 {"volatility", sel.volatility}};
        }
        CiResult ci = subsample_ci(ds, *pipeline, b, inf.replications, inf.alpha, ci_seed,
                                   config.threads, &point);
        result["ci_subsampling"] = detail::ci_json(ci, false);
        warnings.insert(warnings.end(), ci.warnings.begin(), ci.warnings.end());
    }
    if (want_boot) {
        CiResult ci = bootstrap_ci(ds, *pipeline, inf.replications, inf.alpha, config.seed,
                                   config.threads, &point);
        result["ci_bootstrap"] = detail::ci_json(ci, false);
        warnings.insert(warnings.end(), ci.warnings.begin(), ci.warnings.end());
    }

    return json{{"version", kVersion},
                {"command", "estimate"},
                {"config", run_config_json(config)},
                {"data", json{{"n", ds.n()},
                              {"n_treated", ds.n1},
                              {"n_control", ds.n0},
                              {"d", ds.d()},
                              {"scaling", detail::scaling_json(p.ingest.scaling)}}},
                {"result", result},
                {"diagnostics", diagnostics},
                {"warnings", warnings}};
}

// `kernel-check`: gram diagnostics for the configured density on the CSV's
// covariates. Eigenvalues are computed on at most `max_rows` rows.
inline json kernel_check(const RunConfig& config, int max_rows = 2000) {
    if (config.csv.empty()) throw ValidationError("config: csv path required");
    auto [X, scaling] = ingest_covariates(config.csv, config.columns.covariates,
                                          config.columns.continuous);
    std::vector<std::string> warnings;
    Eigen::MatrixXd Xu = X;
    if (X.rows() > max_rows) {
        Xu = X.topRows(max_rows);
        warnings.push_back("kernel-check: diagnostics computed on the first " +
                           std::to_string(max_rows) + " of " + std::to_string(X.rows()) + " rows");
    }

    DensitySpec spec = parse_density_spec(config.density);
    GramMatrix gm;
    if (spec.family == KernelFamily::student_product) {
        SpectralDensity den = bind_density(spec, static_cast<int>(Xu.cols()), nullptr);
        FrequencySample freq = sample_frequencies(den, spec.L, derive_seed(config.seed, detail::kSaltFull, 0));
        gm = gram(den, Xu, freq);
    } else {
        gm = gram(bind_density(spec, Xu), Xu);
    }

    const int n = static_cast<int>(gm.K.rows());
    double asym = 0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < i; ++j) asym = std::max(asym, std::abs(gm.K(i, j) - gm.K(j, i)));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gm.K, Eigen::EigenvaluesOnly);
    const double min_eig = es.eigenvalues().minCoeff();
    const double max_eig = es.eigenvalues().maxCoeff();
    const bool cpd_family = gm.density.family == KernelFamily::energy;
    const bool psd_ok = cpd_family || min_eig >= -1e-8 * std::max(1.0, max_eig);

    json diag{{"family", family_name(gm.density.family)},
              {"gamma", gm.density.gamma},
              {"source", gm.source == GramMatrix::Source::closed_form ? "closed_form" : "random_feature"},
              {"rows_used", n},
              {"diag_min", gm.K.diagonal().minCoeff()},
              {"diag_max", gm.K.diagonal().maxCoeff()},
              {"max_asymmetry", asym},
              {"min_eigenvalue", min_eig},
              {"max_eigenvalue", max_eig},
              {"psd_ok", psd_ok}};
    if (gm.source == GramMatrix::Source::random_feature) diag["feature_count"] = spec.L;
    if (cpd_family)
        warnings.push_back("kernel-check: energy is conditionally positive definite; "
                           "negative eigenvalues are expected");

    return json{{"version", kVersion},
                {"command", "kernel-check"},
                {"config", run_config_json(config)},
                {"data", json{{"n", X.rows()}, {"d", X.cols()}, {"scaling", detail::scaling_json(scaling)}}},
                {"result", diag},
                {"warnings", warnings}};
}

// Study config serialization, mirroring the simulate flags.
inline json study_config_json(const StudyConfig& c) {
    std::vector<std::string> methods;
    for (const auto& m : c.methods) methods.push_back(m.label);
    json out{{"scenario", propensity_name(c.propensity)},
             {"n", c.n},
             {"reps", c.R},
             {"methods", methods},
             {"estimand", detail::estimand_name(c.estimand)},
             {"mode", detail::mode_name(c.mode)},
             {"subsample_draws", c.B_s},
             {"bootstrap_draws", c.B},
             {"alpha", c.alpha},
             {"subsample_size", c.b_auto ? json("auto") : json(c.b)},
             {"oracle_draws", c.oracle_M},
             {"qp", detail::qp_json(c.qp)},
             {"seed", c.seed},
             {"threads", c.threads}};
    out["lambda"] = c.lambda_auto ? json("auto") : json(c.lambda);
    return out;
}

inline StudyConfig parse_study_config(const json& j) {
    StudyConfig c;
    detail::reject_unknown_keys(j,
                                {"scenario", "n", "reps", "methods", "estimand", "mode", "lambda",
                                 "subsample_draws", "bootstrap_draws", "alpha", "subsample_size",
                                 "oracle_draws", "qp", "seed", "threads"},
                                "study config");
    if (j.contains("scenario")) {
        const std::string s = j.at("scenario").get<std::string>();
        if (s == "linear") c.propensity = Propensity::linear;
        else if (s == "nonlinear") c.propensity = Propensity::nonlinear;
        else throw ValidationError("config: scenario must be linear or nonlinear, got '" + s + "'");
    }
    if (j.contains("n")) c.n = j.at("n").get<int>();
    if (j.contains("reps")) c.R = j.at("reps").get<int>();
    if (j.contains("methods"))
        for (const auto& m : j.at("methods").get<std::vector<std::string>>())
            c.methods.push_back(parse_method_spec(m));
    if (j.contains("estimand")) c.estimand = detail::parse_estimand(j.at("estimand").get<std::string>());
    if (j.contains("mode")) c.mode = detail::parse_mode(j.at("mode").get<std::string>());
    if (j.contains("lambda")) {
        if (j.at("lambda").is_string()) {
            if (j.at("lambda").get<std::string>() != "auto")
                throw ValidationError("config: lambda must be \"auto\" or a number");
            c.lambda_auto = true;
        } else {
            c.lambda_auto = false;
            c.lambda = j.at("lambda").get<double>();
        }
    }
    if (j.contains("subsample_draws")) c.B_s = j.at("subsample_draws").get<int>();
    if (j.contains("bootstrap_draws")) c.B = j.at("bootstrap_draws").get<int>();
    if (j.contains("alpha")) c.alpha = j.at("alpha").get<double>();
    if (j.contains("subsample_size")) {
        if (j.at("subsample_size").is_string()) {
            if (j.at("subsample_size").get<std::string>() != "auto")
                throw ValidationError("config: subsample_size must be \"auto\" or an integer");
            c.b_auto = true;
            c.b = 0;
        } else {
            c.b = j.at("subsample_size").get<int>();
        }
    }
    if (j.contains("oracle_draws")) c.oracle_M = j.at("oracle_draws").get<long long>();
    if (j.contains("qp")) c.qp = detail::parse_qp(j.at("qp"));
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("threads")) c.threads = j.at("threads").get<int>();
    return c;
}

inline json study_json(const StudyResult& res) {
    json methods = json::array();
    for (const auto& m : res.methods) {
        methods.push_back(json{{"method", m.spec.label},
                               {"replications_used", m.R_used},
                               {"failures", m.failures},
                               {"failure_messages", m.failure_messages},
                               {"bias", m.bias},
                               {"ese", m.ese},
                               {"coverage_ss", m.coverage_ss},
                               {"coverage_boot", m.coverage_boot},
                               {"length_ss", m.length_ss},
                               {"length_boot", m.length_boot},
                               {"estimates", m.estimates},
                               {"ss_lower", m.ss_lower},
                               {"ss_upper", m.ss_upper},
                               {"boot_lower", m.boot_lower},
                               {"boot_upper", m.boot_upper}});
    }
    return json{{"version", kVersion},
                {"command", "simulate"},
                {"config", study_config_json(res.config)},
                {"oracle", json{{"value", res.oracle.value},
                                {"se", res.oracle.se},
                                {"complier_fraction", res.oracle.complier_fraction},
                                {"draws", res.oracle.M}}},
                {"methods", methods},
                {"warnings", res.warnings}};
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path);
    if (!out) throw ValidationError("cannot open '" + path + "' for writing");
    out << content;
    if (!out) throw ValidationError("write failed for '" + path + "'");
}

inline json error_json(const std::string& type, const std::string& message) {
    return json{{"error", json{{"type", type}, {"message", message}}}};
}

}  // namespace cfdbal
