#pragma once

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "estimators.hpp"

namespace cfdbal {

// Column roles for ingestion. receipt is optional (IV mode when present);
// outcome may be empty for commands that only need weights or diagnostics.
// Covariates listed in `continuous` are min-max scaled; the rest must be 0/1.
struct ColumnSpec {
    std::string outcome;
    std::string treatment;
    std::string receipt;
    std::vector<std::string> covariates;
    std::vector<std::string> continuous;
};

struct ScaleInfo {
    std::string column;
    double min = 0;
    double max = 1;
};

struct IngestResult {
    Dataset data;
    std::vector<ScaleInfo> scaling;
    std::vector<std::string> warnings;
};

namespace detail {

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

inline std::string trim_ws(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r");
    auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream is(line);
    while (std::getline(is, field, ',')) out.push_back(trim_ws(field));
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

inline CsvTable read_csv_table(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("csv: cannot open '" + path + "'");
    CsvTable t;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (trim_ws(line).empty()) continue;
        auto fields = split_csv_line(line);
        if (first) {
            t.header = fields;
            first = false;
        } else {
            t.rows.push_back(std::move(fields));
        }
    }
    if (first) throw ValidationError("csv: '" + path + "' has no header row");
    if (t.rows.empty()) throw ValidationError("csv: '" + path + "' has no data rows");
    return t;
}

inline int column_index(const CsvTable& t, const std::string& name) {
    for (std::size_t j = 0; j < t.header.size(); ++j)
        if (t.header[j] == name) return static_cast<int>(j);
    throw ValidationError("csv: column '" + name + "' not found in header");
}

inline double parse_cell(const std::string& cell, const std::string& column, int row) {
    std::size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(cell, &pos);
    } catch (const std::exception&) {
        throw ValidationError("csv: cannot parse '" + cell + "' in column '" + column + "', row " +
                              std::to_string(row));
    }
    if (pos != cell.size())
        throw ValidationError("csv: trailing characters in '" + cell + "', column '" + column +
                              "', row " + std::to_string(row));
    return v;
}

// Extracts one named column as doubles, reporting missing cells by row.
inline std::vector<double> extract_column(const CsvTable& t, const std::string& name) {
    const int j = column_index(t, name);
    std::vector<double> out;
    out.reserve(t.rows.size());
    std::vector<int> missing;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& row = t.rows[r];
        if (row.size() != t.header.size())
            throw ValidationError("csv: row " + std::to_string(r + 1) + " has " +
                                  std::to_string(row.size()) + " fields, header has " +
                                  std::to_string(t.header.size()));
        if (row[j].empty() || row[j] == "NA" || row[j] == "nan") {
            missing.push_back(static_cast<int>(r + 1));
            out.push_back(0);
            continue;
        }
        out.push_back(parse_cell(row[j], name, static_cast<int>(r + 1)));
    }
    if (!missing.empty()) {
        std::string rows;
        for (std::size_t i = 0; i < missing.size() && i < 10; ++i)
            rows += (i ? ", " : "") + std::to_string(missing[i]);
        if (missing.size() > 10) rows += ", ...";
        throw ValidationError("csv: missing values in column '" + name + "' at rows " + rows);
    }
    return out;
}

inline void require_binary(const std::vector<double>& v, const std::string& name) {
    for (std::size_t r = 0; r < v.size(); ++r)
        if (v[r] != 0.0 && v[r] != 1.0)
            throw ValidationError("csv: column '" + name + "' must be binary, found " +
                                  std::to_string(v[r]) + " at row " + std::to_string(r + 1));
}

}  // namespace detail

namespace detail {

// Covariate matrix with in-sample min-max scaling of the declared continuous
// columns. Returns the scaling parameters needed to reproduce the matrix.
inline std::pair<Eigen::MatrixXd, std::vector<ScaleInfo>> covariate_matrix(
    const CsvTable& t, const std::vector<std::string>& covariates,
    const std::vector<std::string>& continuous) {
    if (covariates.empty()) throw ValidationError("csv: no covariate columns given");
    std::set<std::string> cont(continuous.begin(), continuous.end());
    for (const auto& c : continuous)
        if (std::find(covariates.begin(), covariates.end(), c) == covariates.end())
            throw ValidationError("csv: continuous column '" + c + "' is not a covariate");

    const int n = static_cast<int>(t.rows.size());
    const int d = static_cast<int>(covariates.size());
    Eigen::MatrixXd X(n, d);
    std::vector<ScaleInfo> scaling;
    for (int j = 0; j < d; ++j) {
        auto col = detail::extract_column(t, covariates[j]);
        if (cont.count(covariates[j])) {
            double lo = col[0], hi = col[0];
            for (double v : col) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            if (!(hi > lo))
                throw ValidationError("csv: continuous column '" + covariates[j] +
                                      "' is constant; cannot scale to [0,1]");
            for (int i = 0; i < n; ++i) X(i, j) = (col[i] - lo) / (hi - lo);
            scaling.push_back({covariates[j], lo, hi});
        } else {
            detail::require_binary(col, covariates[j]);
            for (int i = 0; i < n; ++i) X(i, j) = col[i];
        }
    }
    return {std::move(X), std::move(scaling)};
}

}  // namespace detail

inline std::pair<Eigen::MatrixXd, std::vector<ScaleInfo>> ingest_covariates(
    const std::string& path, const std::vector<std::string>& covariates,
    const std::vector<std::string>& continuous) {
    detail::CsvTable t = detail::read_csv_table(path);
    return detail::covariate_matrix(t, covariates, continuous);
}

inline IngestResult ingest_csv(const std::string& path, const ColumnSpec& spec) {
    std::vector<std::string> names = spec.covariates;
    if (!spec.outcome.empty()) names.push_back(spec.outcome);
    names.push_back(spec.treatment);
    if (!spec.receipt.empty()) names.push_back(spec.receipt);
    std::set<std::string> uniq(names.begin(), names.end());
    if (uniq.size() != names.size()) throw ValidationError("csv: column roles must name distinct columns");
    if (spec.treatment.empty()) throw ValidationError("csv: treatment/instrument column required");

    detail::CsvTable t = detail::read_csv_table(path);
    const int n = static_cast<int>(t.rows.size());

    auto [X, scaling] = detail::covariate_matrix(t, spec.covariates, spec.continuous);

    Eigen::VectorXd y = Eigen::VectorXd::Zero(n);
    if (!spec.outcome.empty()) {
        auto col = detail::extract_column(t, spec.outcome);
        for (int i = 0; i < n; ++i) y(i) = col[i];
    }
    auto zc = detail::extract_column(t, spec.treatment);
    detail::require_binary(zc, spec.treatment);
    Eigen::VectorXd z(n);
    for (int i = 0; i < n; ++i) z(i) = zc[i];

    Eigen::VectorXd a;
    if (!spec.receipt.empty()) {
        auto ac = detail::extract_column(t, spec.receipt);
        detail::require_binary(ac, spec.receipt);
        a.resize(n);
        for (int i = 0; i < n; ++i) a(i) = ac[i];
    }

    IngestResult out{make_dataset(std::move(y), std::move(z), std::move(X), std::move(a)),
                     std::move(scaling),
                     {}};
    return out;
}

}  // namespace cfdbal
