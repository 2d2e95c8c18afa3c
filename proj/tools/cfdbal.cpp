// Command-line front end: weights, estimate, simulate, kernel-check.
// Exit codes: 0 success, 2 validation error, 3 numerical failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <cfdbal/cfdbal.hpp>

namespace {

using cfdbal::json;

// Values staged by CLI11; only flags the user actually passed override the
// config file, so `--config run.json --alpha 0.1` keeps everything else.
struct CliState {
    std::string config_path;
    std::string out_path;
    std::uint64_t seed = 0;
    int threads = 1;

    std::string csv;
    std::string outcome, treatment, receipt;
    std::vector<std::string> covariates, continuous;
    std::string weights = "cfd";
    std::string estimand = "ate";
    std::string density = "gaussian(gamma=auto)";
    std::string mode = "three_way";
    std::string lambda = "auto";
    std::string ci = "both";
    double alpha = 0.05;
    std::string subsample_size = "auto";
    int replications = 500;
    double qp_eps = 1e-6;
    int qp_max_iter = 20000;
    bool qp_polish = true;

    std::string scenario = "nonlinear";
    int n = 400;
    int reps = 200;
    std::vector<std::string> methods;
    int subsample_draws = 200;
    int bootstrap_draws = 200;
    long long oracle_draws = 10000000;
};

void add_common(CLI::App* cmd, CliState& st) {
    cmd->add_option("--config", st.config_path, "JSON config file; explicit flags override it");
    cmd->add_option("--out", st.out_path, "output path");
    cmd->add_option("--seed", st.seed, "master RNG seed");
    cmd->add_option("--threads", st.threads, "worker threads (0 = hardware)");
}

void add_data_columns(CLI::App* cmd, CliState& st) {
    cmd->add_option("--csv", st.csv, "input CSV (header, comma-delimited)");
    cmd->add_option("--outcome", st.outcome, "outcome column");
    cmd->add_option("--treatment", st.treatment, "treatment or instrument column");
    cmd->add_option("--receipt", st.receipt, "treatment-receipt column (IV mode)");
    cmd->add_option("--covariates", st.covariates, "covariate columns")->delimiter(',');
    cmd->add_option("--continuous", st.continuous, "continuous covariates, scaled to [0,1]")
        ->delimiter(',');
}

void add_model_flags(CLI::App* cmd, CliState& st) {
    cmd->add_option("--weights", st.weights, "cfd|ipw|uniform");
    cmd->add_option("--density", st.density, "density spec, e.g. gaussian(gamma=auto)");
    cmd->add_option("--mode", st.mode, "three_way|two_way");
    cmd->add_option("--lambda", st.lambda, "ridge level: auto (n^-2) or a number");
    cmd->add_option("--qp-eps", st.qp_eps, "ADMM absolute/relative tolerance");
    cmd->add_option("--qp-max-iter", st.qp_max_iter, "ADMM iteration cap");
    cmd->add_option("--qp-polish", st.qp_polish, "polish the solution on the active set");
}

double parse_lambda_value(const std::string& s) {
    std::size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        throw cfdbal::ValidationError("--lambda must be 'auto' or a number, got '" + s + "'");
    }
    if (pos != s.size())
        throw cfdbal::ValidationError("--lambda must be 'auto' or a number, got '" + s + "'");
    return v;
}

int parse_subsample_size(const std::string& s) {
    std::size_t pos = 0;
    int v = 0;
    try {
        v = std::stoi(s, &pos);
    } catch (const std::exception&) {
        throw cfdbal::ValidationError("--subsample-size must be 'auto' or an integer, got '" + s + "'");
    }
    if (pos != s.size() || v < 2)
        throw cfdbal::ValidationError("--subsample-size must be 'auto' or an integer >= 2, got '" + s + "'");
    return v;
}

json load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw cfdbal::ValidationError("cannot open config file '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw cfdbal::ValidationError("config file '" + path + "': " + e.what());
    }
    return j;
}

bool passed(const CLI::App* cmd, const std::string& name) {
    const CLI::Option* opt = cmd->get_option_no_throw(name);
    return opt != nullptr && opt->count() > 0;
}

cfdbal::RunConfig build_run_config(const CLI::App* cmd, const CliState& st) {
    cfdbal::RunConfig c;
    if (!st.config_path.empty()) {
        json j = load_config_file(st.config_path);
        if (j.contains("command")) j = j.at("config");  // accept a previous output as config
        c = cfdbal::parse_run_config(j);
    }
    if (passed(cmd, "--csv")) c.csv = st.csv;
    if (passed(cmd, "--outcome")) c.columns.outcome = st.outcome;
    if (passed(cmd, "--treatment")) c.columns.treatment = st.treatment;
    if (passed(cmd, "--receipt")) c.columns.receipt = st.receipt;
    if (passed(cmd, "--covariates")) c.columns.covariates = st.covariates;
    if (passed(cmd, "--continuous")) c.columns.continuous = st.continuous;
    if (passed(cmd, "--weights")) {
        cfdbal::detail::check_weights_source(st.weights);
        c.weights_source = st.weights;
    }
    if (passed(cmd, "--estimand")) c.estimand = cfdbal::detail::parse_estimand(st.estimand);
    if (passed(cmd, "--density")) c.density = st.density;
    if (passed(cmd, "--mode")) c.mode = cfdbal::detail::parse_mode(st.mode);
    if (passed(cmd, "--lambda")) {
        if (st.lambda == "auto") {
            c.lambda_auto = true;
        } else {
            c.lambda_auto = false;
            c.lambda = parse_lambda_value(st.lambda);
        }
    }
    if (passed(cmd, "--ci")) {
        cfdbal::detail::check_ci_choice(st.ci);
        c.inference.ci = st.ci;
    }
    if (passed(cmd, "--alpha")) c.inference.alpha = st.alpha;
    if (passed(cmd, "--subsample-size"))
        c.inference.subsample_size = st.subsample_size == "auto" ? 0 : parse_subsample_size(st.subsample_size);
    if (passed(cmd, "--replications")) c.inference.replications = st.replications;
    if (passed(cmd, "--qp-eps")) {
        c.qp.eps_abs = st.qp_eps;
        c.qp.eps_rel = st.qp_eps;
    }
    if (passed(cmd, "--qp-max-iter")) c.qp.max_iter = st.qp_max_iter;
    if (passed(cmd, "--qp-polish")) c.qp.polish = st.qp_polish;
    if (passed(cmd, "--seed")) c.seed = st.seed;
    if (passed(cmd, "--threads")) c.threads = st.threads;
    return c;
}

cfdbal::StudyConfig build_study_config(const CLI::App* cmd, const CliState& st) {
    cfdbal::StudyConfig c;
    if (!st.config_path.empty()) {
        json j = load_config_file(st.config_path);
        if (j.contains("command")) j = j.at("config");
        c = cfdbal::parse_study_config(j);
    }
    if (passed(cmd, "--scenario")) {
        if (st.scenario == "linear") c.propensity = cfdbal::Propensity::linear;
        else if (st.scenario == "nonlinear") c.propensity = cfdbal::Propensity::nonlinear;
        else throw cfdbal::ValidationError("--scenario must be linear or nonlinear");
    }
    if (passed(cmd, "--n")) c.n = st.n;
    if (passed(cmd, "--reps")) c.R = st.reps;
    if (passed(cmd, "--methods")) {
        c.methods.clear();
        for (const auto& m : st.methods) c.methods.push_back(cfdbal::parse_method_spec(m));
    }
    if (c.methods.empty())
        for (const auto& m : {"gaussian(gamma=auto)", "ipw"})
            c.methods.push_back(cfdbal::parse_method_spec(m));
    if (passed(cmd, "--estimand")) c.estimand = cfdbal::detail::parse_estimand(st.estimand);
    if (passed(cmd, "--mode")) c.mode = cfdbal::detail::parse_mode(st.mode);
    if (passed(cmd, "--lambda")) {
        if (st.lambda == "auto") {
            c.lambda_auto = true;
        } else {
            c.lambda_auto = false;
            c.lambda = parse_lambda_value(st.lambda);
        }
    }
    if (passed(cmd, "--alpha")) c.alpha = st.alpha;
    if (passed(cmd, "--subsample-draws")) c.B_s = st.subsample_draws;
    if (passed(cmd, "--bootstrap-draws")) c.B = st.bootstrap_draws;
    if (passed(cmd, "--subsample-size")) {
        if (st.subsample_size == "auto") {
            c.b_auto = true;
            c.b = 0;
        } else {
            c.b_auto = false;
            c.b = parse_subsample_size(st.subsample_size);
        }
    }
    if (passed(cmd, "--oracle-draws")) c.oracle_M = st.oracle_draws;
    if (passed(cmd, "--qp-eps")) {
        c.qp.eps_abs = st.qp_eps;
        c.qp.eps_rel = st.qp_eps;
    }
    if (passed(cmd, "--qp-max-iter")) c.qp.max_iter = st.qp_max_iter;
    if (passed(cmd, "--qp-polish")) c.qp.polish = st.qp_polish;
    if (passed(cmd, "--seed")) c.seed = st.seed;
    if (passed(cmd, "--threads")) c.threads = st.threads;
    return c;
}

void emit(const json& report, const std::string& out_path) {
    if (out_path.empty()) {
        std::cout << report.dump(2) << std::endl;
    } else {
        cfdbal::write_text_file(out_path, report.dump(2) + "\n");
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"characteristic-function-distance balancing weights and treatment-effect estimation"};
    app.require_subcommand(1);

    CliState st;

    CLI::App* w = app.add_subcommand("weights", "solve balancing weights and write a weight table");
    add_common(w, st);
    add_data_columns(w, st);
    add_model_flags(w, st);

    CLI::App* e = app.add_subcommand("estimate", "point estimate with confidence intervals");
    add_common(e, st);
    add_data_columns(e, st);
    add_model_flags(e, st);
    e->add_option("--estimand", st.estimand, "ate|late");
    e->add_option("--ci", st.ci, "none|subsampling|bootstrap|both");
    e->add_option("--alpha", st.alpha, "CI level is 1 - alpha");
    e->add_option("--subsample-size", st.subsample_size, "auto (minimum volatility) or an integer");
    e->add_option("--replications", st.replications, "subsample and bootstrap draws");

    CLI::App* s = app.add_subcommand("simulate", "replication study with oracle comparison");
    add_common(s, st);
    s->add_option("--scenario", st.scenario, "linear|nonlinear propensity");
    s->add_option("--n", st.n, "sample size per replication");
    s->add_option("--reps", st.reps, "number of replications");
    s->add_option("--methods", st.methods,
                  "density specs plus ipw / constant(value=..); comma-separated")
        ->delimiter(',');
    s->add_option("--estimand", st.estimand, "ate|late");
    s->add_option("--mode", st.mode, "three_way|two_way");
    s->add_option("--lambda", st.lambda, "ridge level: auto (n^-2) or a number");
    s->add_option("--alpha", st.alpha, "CI level is 1 - alpha");
    s->add_option("--subsample-draws", st.subsample_draws, "subsample CI draws per replication (0 off)");
    s->add_option("--bootstrap-draws", st.bootstrap_draws, "bootstrap CI draws per replication (0 off)");
    s->add_option("--subsample-size", st.subsample_size,
                  "fixed b, or auto for per-replication selection (default round(2.5 sqrt(n)))");
    s->add_option("--oracle-draws", st.oracle_draws, "Monte Carlo draws for the oracle LATE");
    s->add_option("--qp-eps", st.qp_eps, "ADMM absolute/relative tolerance");
    s->add_option("--qp-max-iter", st.qp_max_iter, "ADMM iteration cap");
    s->add_option("--qp-polish", st.qp_polish, "polish the solution on the active set");

    CLI::App* k = app.add_subcommand("kernel-check", "gram matrix diagnostics for a density spec");
    add_common(k, st);
    add_data_columns(k, st);
    k->add_option("--density", st.density, "density spec, e.g. gaussian(gamma=auto)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : 2;
    }

    try {
        if (w->parsed()) {
            cfdbal::RunConfig cfg = build_run_config(w, st);
            cfdbal::WeightsOutput out = cfdbal::run_weights(cfg);
            const std::string path = st.out_path.empty() ? "weights.csv" : st.out_path;
            cfdbal::write_text_file(path, out.weights_csv);
            out.report["weights_csv"] = path;
            std::cout << out.report.dump(2) << std::endl;
        } else if (e->parsed()) {
            cfdbal::RunConfig cfg = build_run_config(e, st);
            emit(cfdbal::run_estimate(cfg), st.out_path);
        } else if (k->parsed()) {
            cfdbal::RunConfig cfg = build_run_config(k, st);
            emit(cfdbal::kernel_check(cfg), st.out_path);
        } else if (s->parsed()) {
            cfdbal::StudyConfig cfg = build_study_config(s, st);
            const std::string dir = st.out_path.empty() ? "." : st.out_path;
            std::error_code ec;
            std::filesystem::create_directories(dir, ec);
            if (ec) throw cfdbal::ValidationError("cannot create output directory '" + dir + "'");
            cfdbal::StudyResult res = cfdbal::run_study(cfg);
            cfdbal::write_text_file(dir + "/study.csv", cfdbal::study_csv(res));
            cfdbal::write_text_file(dir + "/study.json", cfdbal::study_json(res).dump(2) + "\n");
            std::cout << cfdbal::study_csv(res);
        }
    } catch (const cfdbal::ValidationError& err) {
        std::cout << cfdbal::error_json("validation", err.what()).dump(2) << std::endl;
        return 2;
    } catch (const cfdbal::NumericalError& err) {
        std::cout << cfdbal::error_json("numerical", err.what()).dump(2) << std::endl;
        return 3;
    } catch (const std::exception& err) {
        std::cout << cfdbal::error_json("internal", err.what()).dump(2) << std::endl;
        return 3;
    }
    return 0;
}
