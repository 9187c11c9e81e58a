#include "vci/estimators.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace vci::est {

namespace {

constexpr double kZ95 = 1.959963984540054;

std::string cell_name(const std::vector<int>& x) {
  std::string s = "[";
  for (size_t i = 0; i < x.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(x[i]);
  }
  return s + "]";
}

// Column means and a normal band from per-record contribution rows.
// `sample_variance` divides by n-1 (plain mean of noisy predictions);
// otherwise the population variance of the rows is used, the standard
// plug-in for an influence-style estimator.
EstimateReport finalize(const std::string& kind, const Eigen::MatrixXd& rows,
                        bool sample_variance) {
  const Eigen::Index n = rows.rows(), d = rows.cols();
  EstimateReport r;
  r.kind = kind;
  r.n = static_cast<int>(n);
  r.psi.resize(d);
  r.se.resize(d);
  r.ci_lo.resize(d);
  r.ci_hi.resize(d);
  r.degenerate = n < 2;
  for (Eigen::Index j = 0; j < d; ++j) {
    CompensatedSum sum;
    for (Eigen::Index i = 0; i < n; ++i) sum.add(rows(i, j));
    const double mean = sum.value() / static_cast<double>(n);
    r.psi[j] = mean;
    double se = 0.0;
    if (!r.degenerate) {
      CompensatedSum sq;
      for (Eigen::Index i = 0; i < n; ++i) {
        double dev = rows(i, j) - mean;
        sq.add(dev * dev);
      }
      const double denom =
          sample_variance ? static_cast<double>(n - 1) : static_cast<double>(n);
      se = std::sqrt(sq.value() / denom / static_cast<double>(n));
    }
    r.se[j] = se;
    r.ci_lo[j] = mean - kZ95 * se;
    r.ci_hi[j] = mean + kZ95 * se;
  }
  return r;
}

// Per-record contributions w_k (y_k - m_k) + m_k, optionally restricted to
// a subset of record indices.
Eigen::MatrixXd robust_rows(const bench::Dataset& data,
                            const Eigen::MatrixXd& m,
                            const bench::Treatment& alpha,
                            const models::PropensityModel& propensity,
                            const std::vector<int>* subset) {
  if (!alpha.is_categorical()) {
    throw EstimatorError(
        "robust estimator requires a categorical target treatment");
  }
  if (data.n() == 0) throw EstimatorError("estimator input is empty");
  if (m.rows() != data.n() || m.cols() != data.outcome_dim()) {
    throw EstimatorError(
        "prediction matrix is " + std::to_string(m.rows()) + "x" +
        std::to_string(m.cols()) + ", expected " + std::to_string(data.n()) +
        "x" + std::to_string(data.outcome_dim()));
  }
  const size_t n =
      subset ? subset->size() : static_cast<size_t>(data.n());
  Eigen::MatrixXd rows(static_cast<Eigen::Index>(n), m.cols());
  for (size_t i = 0; i < n; ++i) {
    const int k = subset ? (*subset)[i] : static_cast<int>(i);
    const auto& s = data.samples[static_cast<size_t>(k)];
    if (!s.t.is_categorical()) {
      throw EstimatorError(
          "robust estimator requires categorical observed treatments");
    }
    const double e = propensity.prob(s.x, alpha.level);
    if (!(e > 0.0)) {
      throw EstimatorError("propensity of the target treatment is zero at x=" +
                           cell_name(s.x));
    }
    const double w = s.t.level == alpha.level ? 1.0 / e : 0.0;
    rows.row(static_cast<Eigen::Index>(i)) =
        w * (s.y.transpose() - m.row(k)) + m.row(k);
  }
  return rows;
}

}  // namespace

nlohmann::json EstimateReport::to_json() const {
  auto vec = [](const Eigen::VectorXd& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
  };
  nlohmann::json j;
  j["kind"] = kind;
  j["n"] = n;
  j["degenerate"] = degenerate;
  j["psi"] = vec(psi);
  j["se"] = vec(se);
  j["ci_lo"] = vec(ci_lo);
  j["ci_hi"] = vec(ci_hi);
  return j;
}

EstimateReport EstimateReport::from_json(const nlohmann::json& j) {
  EstimateReport r;
  try {
    r.kind = j.at("kind").get<std::string>();
    r.n = j.at("n").get<int>();
    r.degenerate = j.at("degenerate").get<bool>();
    auto vec = [&](const char* key) {
      auto v = j.at(key).get<std::vector<double>>();
      return Eigen::Map<const Eigen::VectorXd>(v.data(),
                                               static_cast<Eigen::Index>(v.size()))
          .eval();
    };
    r.psi = vec("psi");
    r.se = vec("se");
    r.ci_lo = vec("ci_lo");
    r.ci_hi = vec("ci_hi");
  } catch (const nlohmann::json::exception& e) {
    throw EstimatorError(std::string("estimate report: ") + e.what());
  }
  if (r.se.size() != r.psi.size() || r.ci_lo.size() != r.psi.size() ||
      r.ci_hi.size() != r.psi.size()) {
    throw EstimatorError("estimate report: component count mismatch");
  }
  return r;
}

std::string EstimateReport::to_csv() const {
  std::ostringstream out;
  out << "dim,psi,se,ci_lo,ci_hi\n";
  char buf[160];
  for (Eigen::Index j = 0; j < psi.size(); ++j) {
    std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,%.17g\n",
                  static_cast<long long>(j), psi[j], se[j], ci_lo[j],
                  ci_hi[j]);
    out << buf;
  }
  return out.str();
}

EstimateReport robust_ate(const bench::Dataset& data, const Eigen::MatrixXd& m,
                          const bench::Treatment& alpha,
                          const models::PropensityModel& propensity) {
  return finalize("robust", robust_rows(data, m, alpha, propensity, nullptr),
                  false);
}

EstimateReport plug_in_mean(const Eigen::MatrixXd& m) {
  if (m.rows() == 0) throw EstimatorError("estimator input is empty");
  return finalize("plug_in", m, true);
}

EstimateReport robust_ate_covariate(const bench::Dataset& data,
                                    const Eigen::MatrixXd& m,
                                    const bench::Treatment& alpha,
                                    const models::PropensityModel& propensity,
                                    const std::vector<int>& x_cell) {
  std::vector<int> subset;
  for (int k = 0; k < data.n(); ++k) {
    if (data.samples[static_cast<size_t>(k)].x == x_cell) subset.push_back(k);
  }
  if (subset.empty()) {
    throw EstimatorError("no records in covariate cell " + cell_name(x_cell));
  }
  return finalize("robust", robust_rows(data, m, alpha, propensity, &subset),
                  false);
}

std::vector<CovariateEstimate> robust_ate_by_covariate(
    const bench::Dataset& data, const Eigen::MatrixXd& m,
    const bench::Treatment& alpha,
    const models::PropensityModel& propensity) {
  if (data.n() == 0) throw EstimatorError("estimator input is empty");
  std::map<std::vector<int>, std::vector<int>> cells;
  for (int k = 0; k < data.n(); ++k) {
    cells[data.samples[static_cast<size_t>(k)].x].push_back(k);
  }
  std::vector<CovariateEstimate> out;
  out.reserve(cells.size());
  for (const auto& [x, subset] : cells) {
    CovariateEstimate c;
    c.x = x;
    c.weight =
        static_cast<double>(subset.size()) / static_cast<double>(data.n());
    c.report = finalize(
        "robust", robust_rows(data, m, alpha, propensity, &subset), false);
    out.push_back(std::move(c));
  }
  return out;
}

Eigen::VectorXd aggregate_cells(const std::vector<CovariateEstimate>& cells) {
  if (cells.empty()) throw EstimatorError("no covariate cells to aggregate");
  const Eigen::Index d = cells.front().report.psi.size();
  Eigen::VectorXd out(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    CompensatedSum sum;
    for (const auto& c : cells) {
      if (c.report.psi.size() != d) {
        throw EstimatorError("covariate cells disagree on component count");
      }
      sum.add(c.weight * c.report.psi[j]);
    }
    out[j] = sum.value();
  }
  return out;
}

void write_predictions(const std::string& path, const Eigen::MatrixXd& m) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw EstimatorError("cannot open '" + path + "' for writing");
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> row(static_cast<size_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      row[static_cast<size_t>(j)] = m(i, j);
    }
    nlohmann::json obj;
    obj["index"] = static_cast<int>(i);
    obj["m"] = row;
    f << obj.dump() << '\n';
  }
  f.close();
  if (!f) throw EstimatorError("failed writing '" + path + "'");
}

Eigen::MatrixXd read_predictions(const std::string& path, int n, int d) {
  std::ifstream f(path);
  if (!f) throw EstimatorError("cannot open '" + path + "'");
  Eigen::MatrixXd m(n, d);
  std::vector<char> seen(static_cast<size_t>(n), 0);
  std::string line;
  int line_no = 0;
  int count = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    int idx = -1;
    std::vector<double> row;
    try {
      auto j = nlohmann::json::parse(line);
      idx = j.at("index").get<int>();
      row = j.at("m").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      throw EstimatorError("predictions line " + std::to_string(line_no) +
                           ": " + e.what());
    }
    if (idx < 0 || idx >= n) {
      throw EstimatorError("predictions line " + std::to_string(line_no) +
                           ": index " + std::to_string(idx) +
                           " outside 0.." + std::to_string(n - 1));
    }
    if (seen[static_cast<size_t>(idx)]) {
      throw EstimatorError("predictions line " + std::to_string(line_no) +
                           ": duplicate index " + std::to_string(idx));
    }
    if (static_cast<int>(row.size()) != d) {
      throw EstimatorError("predictions line " + std::to_string(line_no) +
                           ": expected " + std::to_string(d) + " values, got " +
                           std::to_string(row.size()));
    }
    seen[static_cast<size_t>(idx)] = 1;
    ++count;
    for (int j = 0; j < d; ++j) m(idx, j) = row[static_cast<size_t>(j)];
  }
  if (count != n) {
    throw EstimatorError("predictions cover " + std::to_string(count) +
                         " of " + std::to_string(n) + " records");
  }
  return m;
}

}  // namespace vci::est
