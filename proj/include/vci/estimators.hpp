#pragma once

#include <Eigen/Core>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vci/dataset.hpp"
#include "vci/models_data.hpp"

namespace vci::est {

class EstimatorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Neumaier-compensated running sum; the covariate-cell decomposition is
// asserted to reproduce the pooled estimate to 1e-12, which plain
// accumulation does not reliably deliver.
class CompensatedSum {
 public:
  void add(double v) {
    double t = s_ + v;
    if (std::abs(s_) >= std::abs(v)) {
      c_ += (s_ - t) + v;
    } else {
      c_ += (v - t) + s_;
    }
    s_ = t;
  }
  double value() const { return s_ + c_; }

 private:
  double s_ = 0.0;
  double c_ = 0.0;
};

// Point estimate of an interventional mean with a per-component normal
// confidence band.
struct EstimateReport {
  std::string kind;  // "robust" | "plug_in"
  int n = 0;
  Eigen::VectorXd psi;    // estimate per outcome component
  Eigen::VectorXd se;     // standard error of the estimate per component
  Eigen::VectorXd ci_lo;  // 95% band
  Eigen::VectorXd ci_hi;
  bool degenerate = false;  // variance was not estimable (n < 2)

  nlohmann::json to_json() const;
  static EstimateReport from_json(const nlohmann::json& j);

  // One row per outcome component: dim,psi,se,ci_lo,ci_hi.
  std::string to_csv() const;
};

// Correction-term estimator of E[Y' | do(T' = alpha)]: each record
// contributes w_k (y_k - m_k) + m_k with w_k = I(t_k = alpha) / e(alpha|x_k),
// the model prediction m_k debiased by reweighted residuals of the records
// actually treated at alpha. The standard error comes from the empirical
// variance of those per-record contributions.
EstimateReport robust_ate(const bench::Dataset& data, const Eigen::MatrixXd& m,
                          const bench::Treatment& alpha,
                          const models::PropensityModel& propensity);

// Mean of the model predictions with a sample-variance confidence band; the
// uncorrected baseline the robust estimator is compared against.
EstimateReport plug_in_mean(const Eigen::MatrixXd& m);

// The robust estimator restricted to records with covariates exactly x_cell.
EstimateReport robust_ate_covariate(const bench::Dataset& data,
                                    const Eigen::MatrixXd& m,
                                    const bench::Treatment& alpha,
                                    const models::PropensityModel& propensity,
                                    const std::vector<int>& x_cell);

struct CovariateEstimate {
  std::vector<int> x;
  double weight = 0.0;  // empirical cell probability n_c / n
  EstimateReport report;
};

// One estimate per covariate cell present in the data, sorted by cell.
std::vector<CovariateEstimate> robust_ate_by_covariate(
    const bench::Dataset& data, const Eigen::MatrixXd& m,
    const bench::Treatment& alpha, const models::PropensityModel& propensity);

// Cell-probability-weighted combination of per-cell estimates; reproduces
// the pooled estimate exactly up to summation order.
Eigen::VectorXd aggregate_cells(const std::vector<CovariateEstimate>& cells);

// Predictions JSONL: one object per line, {"index": k, "m": [..]}. Indices
// must cover 0..n-1 exactly once; d is validated against each row.
void write_predictions(const std::string& path, const Eigen::MatrixXd& m);
Eigen::MatrixXd read_predictions(const std::string& path, int n, int d);

}  // namespace vci::est
