#pragma once

#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "vci/dataset.hpp"
#include "vci/models.hpp"
#include "vci/scm.hpp"
#include "vci/tensor.hpp"

namespace vci::models {

// ---- empirical outcome density -------------------------------------------------

// Stratified Gaussian fit of p(y | x, t) for categorical treatments: one
// diagonal Gaussian per (x, t) cell, smoothed by a shared bandwidth so
// single-count cells stay usable. Log densities are exact under the fitted
// family; nothing here is learned by gradient descent.
class EmpiricalOutcomeModel {
 public:
  struct Stratum {
    Eigen::VectorXd mean;
    Eigen::VectorXd var;  // population variance, floored
    long count = 0;
  };

  // h = bandwidth_scale x pooled per-dimension std of the outcomes.
  static EmpiricalOutcomeModel fit(const bench::Dataset& data,
                                   double bandwidth_scale = 0.1,
                                   double var_floor = 1e-6);

  double log_lik(const Eigen::VectorXd& y, const std::vector<int>& x,
                 int t_level) const;

  const Stratum& stratum(const std::vector<int>& x, int t_level) const;
  bool has_stratum(const std::vector<int>& x, int t_level) const;
  double bandwidth() const { return bandwidth_; }
  void set_bandwidth(double h) { bandwidth_ = h; }
  int outcome_dim() const { return outcome_dim_; }
  size_t stratum_count() const { return strata_.size(); }

  // Per-stratum conditional distribution over observed t' given x, for
  // sampling counterfactual queries that match the data's treatment law.
  const std::map<std::vector<int>, std::vector<double>>& t_prime_counts()
      const {
    return t_counts_;
  }

  nlohmann::json to_json() const;
  static EmpiricalOutcomeModel from_json(const nlohmann::json& j);

 private:
  static std::vector<int> key(const std::vector<int>& x, int t_level);
  std::map<std::vector<int>, Stratum> strata_;
  std::map<std::vector<int>, std::vector<double>> t_counts_;  // x -> counts
  double bandwidth_ = 0.0;
  double var_floor_ = 1e-6;
  int outcome_dim_ = 0;
  int treatment_levels_ = 0;
};

// Mean log density of a batch of outcome nodes under the empirical model,
// differentiable with respect to the outcomes. Means and precisions enter
// as constants.
template <typename Scalar>
TRef<Scalar> empirical_log_lik_node(Tape<Scalar>& tp,
                                    const EmpiricalOutcomeModel& model,
                                    TRef<Scalar> y,
                                    const CovariateBatch& x,
                                    const std::vector<int>& t_levels) {
  Eigen::Index n = y.value().rows();
  Eigen::Index d = y.value().cols();
  if (static_cast<Eigen::Index>(t_levels.size()) != n) {
    throw ModelError("empirical_log_lik: treatment batch size mismatch");
  }
  Mat<Scalar> mu(n, d), w(n, d);
  double const_total = 0.0;
  const double h2 = model.bandwidth() * model.bandwidth();
  std::vector<int> xi(x.slots.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    for (size_t s = 0; s < x.slots.size(); ++s) {
      xi[s] = x.slots[s][static_cast<size_t>(i)];
    }
    const auto& st = model.stratum(xi, t_levels[static_cast<size_t>(i)]);
    for (Eigen::Index j = 0; j < d; ++j) {
      double v = st.var[j] + h2;
      mu(i, j) = static_cast<Scalar>(st.mean[j]);
      w(i, j) = static_cast<Scalar>(1.0 / v);
      const_total += -0.5 * std::log(2.0 * std::numbers::pi * v);
    }
  }
  auto diff = core::sub(y, core::make_constant<Scalar>(tp, mu));
  auto quad = core::hadamard(core::square(diff),
                             core::make_constant<Scalar>(tp, w));
  auto node = core::scale(core::sum_all(quad),
                          Scalar(-0.5) / static_cast<Scalar>(n));
  return core::add_scalar(node,
                          static_cast<Scalar>(const_total / static_cast<double>(n)));
}

// ---- propensity table ------------------------------------------------------------

// Smoothed treatment-frequency table e(t | x) for categorical treatments:
// (count + lambda) / (total + lambda * levels), floored at eps_pos and
// renormalized so inverse weights stay bounded.
class PropensityModel {
 public:
  static PropensityModel fit(const bench::Dataset& data, int levels,
                             double lambda = 1.0, double eps_pos = 0.01);

  // Exact table from a generator's treatment law over every covariate cell.
  static PropensityModel exact(const bench::Scm& scm);

  double prob(const std::vector<int>& x, int t_level) const;
  const std::vector<double>& row(const std::vector<int>& x) const;
  int levels() const { return levels_; }
  size_t cell_count() const { return table_.size(); }

  nlohmann::json to_json() const;
  static PropensityModel from_json(const nlohmann::json& j);

 private:
  std::map<std::vector<int>, std::vector<double>> table_;
  int levels_ = 0;
  double lambda_ = 1.0;
  double eps_pos_ = 0.01;
};

}  // namespace vci::models
