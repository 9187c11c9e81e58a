#pragma once

#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "vci/dataset.hpp"
#include "vci/models.hpp"
#include "vci/scm.hpp"

namespace vci::eval {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- prediction plumbing -----------------------------------------------------

// Counterfactual predictor over a batch of records: maps (outcomes, factual
// treatments, covariates, queried treatments) to predicted outcomes, one row
// per record. Metrics are written against this interface so that oracles and
// hand-built reference predictors can stand in for a trained model.
using CfPredictor = std::function<Eigen::MatrixXd(
    const Eigen::MatrixXd& y, const std::vector<bench::Treatment>& t,
    const models::CovariateBatch& x,
    const std::vector<bench::Treatment>& t_query)>;

// Latent-mean readout over a batch: one row of encoder means per record.
using EncoderFn = std::function<Eigen::MatrixXd(
    const Eigen::MatrixXd& y, const std::vector<bench::Treatment>& t,
    const models::CovariateBatch& x)>;

// The wrappers capture the model by reference; they are views, not owners.
template <typename Scalar>
CfPredictor model_predictor(const models::VciModel<Scalar>& m) {
  return [&m](const Eigen::MatrixXd& y, const std::vector<bench::Treatment>& t,
              const models::CovariateBatch& x,
              const std::vector<bench::Treatment>& t_query) {
    auto tb = models::TreatmentBatch<Scalar>::from_samples(t);
    auto qb = models::TreatmentBatch<Scalar>::from_samples(t_query);
    models::Mat<Scalar> yin = y.cast<Scalar>();
    models::Mat<Scalar> out = models::counterfactual_eval(m, yin, tb, x, qb);
    return Eigen::MatrixXd(out.template cast<double>());
  };
}

template <typename Scalar>
EncoderFn model_encoder(const models::VciModel<Scalar>& m) {
  return [&m](const Eigen::MatrixXd& y, const std::vector<bench::Treatment>& t,
              const models::CovariateBatch& x) {
    auto tb = models::TreatmentBatch<Scalar>::from_samples(t);
    models::Mat<Scalar> yin = y.cast<Scalar>();
    models::Mat<Scalar> mu = models::encode_eval(m, yin, tb, x);
    return Eigen::MatrixXd(mu.template cast<double>());
  };
}

// Image side length recorded in dataset metadata; 0 when the data has no
// attribute oracle.
int blob_resolution(const nlohmann::json& meta);

// ---- counterfactual error metrics --------------------------------------------

struct CounterfactualErrors {
  // Mean over records of the per-record mean squared component error
  // against the generator's counterfactual ground truth.
  double mse = 0.0;
  // Mean absolute error of the moment readout per attribute; present only
  // for image data with at least one readable prediction.
  std::map<std::string, double> attribute_mae;
  int n = 0;
  // Predictions whose attribute readout failed (no mass or non-finite);
  // excluded from the MAEs, never from the MSE.
  int unreadable = 0;

  nlohmann::json to_json() const;
};

// `predictions` holds one row per evaluated record, in `subset` order when a
// subset is given and dataset order otherwise.
CounterfactualErrors counterfactual_errors(
    const Eigen::MatrixXd& predictions, const bench::Dataset& data,
    const std::vector<int>* subset = nullptr);

CounterfactualErrors counterfactual_errors(
    const CfPredictor& predict, const bench::Dataset& data,
    const std::vector<int>* subset = nullptr);

template <typename Scalar>
CounterfactualErrors counterfactual_errors(
    const models::VciModel<Scalar>& m, const bench::Dataset& data,
    const std::vector<int>* subset = nullptr) {
  return counterfactual_errors(model_predictor(m), data, subset);
}

// ---- group-mean R^2 -----------------------------------------------------------

struct StratumR2 {
  std::string key;  // covariate levels and queried treatment
  int n = 0;        // records in the stratum
  double r2 = 0.0;
};

struct GroupR2Result {
  double mean_r2 = 0.0;
  std::vector<StratumR2> strata;  // sorted by key

  nlohmann::json to_json() const;
};

// Groups `rows` by (covariates, queried treatment); per stratum computes the
// coefficient of determination of the mean predicted vector against the mean
// true counterfactual vector across outcome components, then averages over
// strata. `components` restricts both vectors to a subset of outcome
// components (at least two).
GroupR2Result group_r2(const Eigen::MatrixXd& predictions,
                       const bench::Dataset& data,
                       const std::vector<int>& rows,
                       const std::vector<int>* components = nullptr);

// ---- oracle consistency / restrictiveness -------------------------------------

// Mean over probe records of the KL divergence between the unit-variance
// encoder posteriors of the factual view (y, t, x) and the generator's
// counterfactual view (y', t', x) of the same latent state. Zero for an
// encoder whose mean ignores the treatment readout of its inputs.
double oracle_consistency_kl(const EncoderFn& encode,
                             const bench::Dataset& data,
                             const std::vector<int>* subset = nullptr);

template <typename Scalar>
double oracle_consistency_kl(const models::VciModel<Scalar>& m,
                             const bench::Dataset& data,
                             const std::vector<int>* subset = nullptr) {
  return oracle_consistency_kl(model_encoder(m), data, subset);
}

// Discrepancy of the treatment readout across paired views of the same
// record. Treatments enter the oracle as point masses and are copied
// through, so the discrepancy is identically zero for well-formed probes;
// the op validates the probe structure and documents the construction.
// Pairs that disagree on the factual treatment are malformed.
double oracle_restrictiveness(
    const bench::Dataset& data,
    const std::vector<std::pair<int, int>>& probe_pairs);

// ---- composition / reversibility / effectiveness ------------------------------

struct AxiomaticMetrics {
  double composition = 0.0;         // one encode/decode cycle at the factual treatment
  double composition_cycled = 0.0;  // after `cycles` applications
  int cycles = 1;
  double reversibility = 0.0;  // t -> t' -> t round trip against the input
  // Mean squared distance between the measured attributes of the
  // counterfactual and the attributes requested by the query.
  double effectiveness = 0.0;
  int n = 0;
  int unreadable = 0;  // counterfactuals excluded from effectiveness

  nlohmann::json to_json() const;
};

// Requires image data (the attribute oracle); throws otherwise.
AxiomaticMetrics axiomatic_metrics(const CfPredictor& predict,
                                   const bench::Dataset& data, int cycles = 10,
                                   const std::vector<int>* subset = nullptr);

template <typename Scalar>
AxiomaticMetrics axiomatic_metrics(const models::VciModel<Scalar>& m,
                                   const bench::Dataset& data, int cycles = 10,
                                   const std::vector<int>* subset = nullptr) {
  return axiomatic_metrics(model_predictor(m), data, cycles, subset);
}

// ---- aggregated report ---------------------------------------------------------

struct MetricsReport {
  std::optional<double> mse;
  std::map<std::string, double> attribute_mae;
  std::optional<double> r2_all;
  std::optional<double> r2_hard;
  std::optional<double> consistency_kl;
  std::optional<double> composition;
  std::optional<double> composition_cycled;
  std::optional<double> reversibility;
  std::optional<double> effectiveness;
  std::map<std::string, MetricsReport> per_seed;

  // Error metrics must be nonnegative and R^2 cannot exceed 1.
  void validate() const;
  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

// ---- exact enumeration verifiers ----------------------------------------------

struct BoundAssignment {
  int x = 0;
  int t = 0;
  int t_prime = 0;
  int y = 0;
  int y_prime = -1;  // -1 when the bound integrates the counterfactual out
};

struct BoundCheckResult {
  double lhs = 0.0;
  double rhs = 0.0;
  double gap = 0.0;  // recorded as lhs - rhs
  BoundAssignment assignment;

  nlohmann::json to_json() const;
};

// Checks, for every positive-probability assignment (x, t, t', y, y'), that
// the exact counterfactual log-likelihood log p(y'|y,x,t,t') dominates the
// sum of the reconstruction term, the covariate-specific likelihood ratio
// and the negated latent-posterior divergence, all enumerated in closed form
// from the tables. Assignments are emitted in lexicographic order.
std::vector<BoundCheckResult> verify_elbo_discrete(
    const bench::DiscreteTables& tables, int support_cap = 8);

// Same enumeration for the observed-likelihood bound that treats the
// counterfactual outcome as a latent variable: LHS = log p(y|x,t), RHS =
// reconstruction term minus the expected counterfactual-prior divergence
// minus the joint latent divergence, per assignment (x, t, t', y).
std::vector<BoundCheckResult> verify_implicit_elbo_discrete(
    const bench::DiscreteTables& tables, int support_cap = 8);

double min_gap(const std::vector<BoundCheckResult>& results);

}  // namespace vci::eval
