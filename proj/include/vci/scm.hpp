#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vci/dataset.hpp"
#include "vci/nn.hpp"
#include "vci/rng.hpp"

namespace vci::bench {

class SpecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Family { linear_gaussian, nonlinear_vector, blob_image, discrete };

std::string family_name(Family f);
Family family_from_name(const std::string& s);

// Declarative description of a synthetic structural causal model. The same
// spec plus the same seeds always materializes the same model and data.
struct ScmSpec {
  Family family = Family::linear_gaussian;
  std::uint64_t param_seed = 1;

  // linear_gaussian / nonlinear_vector
  std::vector<int> covariate_cards;
  int treatment_levels = 0;
  int latent_dim = 0;
  int outcome_dim = 0;
  double latent_noise = 1.0;
  double outcome_noise = 0.0;
  bool identity_maps = false;  // linear_gaussian: A = I, B = 0
  int mix_hidden = 32;         // nonlinear_vector mixing net width

  // blob_image
  int resolution = 16;
  std::array<double, 2> thickness_range{1.6, 2.8};
  std::array<double, 2> intensity_range{0.4, 1.0};
  double jitter_center = 1.5;
  double jitter_anisotropy = 0.3;

  // discrete (all supports small)
  int cards_x = 2;
  int cards_z = 2;
  int cards_t = 2;
  int cards_y = 2;

  void validate() const;  // throws SpecError naming the offending field
  nlohmann::json to_json() const;
  static ScmSpec from_json(const nlohmann::json& j);
};

// Conditional probability tables of a small discrete model, used both as a
// generator backend and for exact enumeration checks. Rows are distributions.
struct DiscreteTables {
  Eigen::VectorXd px;                    // kx
  Eigen::MatrixXd pz_x;                  // kx x kz
  Eigen::MatrixXd pt_x;                  // kx x kt
  std::vector<Eigen::MatrixXd> py_zt;    // [z](t, y)

  int kx() const { return static_cast<int>(px.size()); }
  int kz() const { return static_cast<int>(pz_x.cols()); }
  int kt() const { return static_cast<int>(pt_x.cols()); }
  int ky() const {
    return py_zt.empty() ? 0 : static_cast<int>(py_zt[0].cols());
  }

  // p(y | x, t) marginalizing the latent.
  Eigen::VectorXd outcome_given_xt(int x, int t) const;
  // p(z | y, t, x) by Bayes' rule over the latent support.
  Eigen::VectorXd latent_posterior(int x, int t, int y) const;
};

// Every row drawn from a flat Dirichlet, so all entries are strictly
// positive and every assignment has positive probability.
DiscreteTables random_discrete_tables(int kx, int kz, int kt, int ky,
                                      core::Engine& eng);

// ---- blob rendering ----------------------------------------------------------

// Renders a res x res Gaussian bump, normalized so the maximum pixel equals
// `intensity` exactly. `thickness` is the target intensity-weighted RMS
// radius; anisotropy eta redistributes spread between axes while preserving
// that radius in the continuum.
Eigen::VectorXd render_blob(int res, double thickness, double intensity,
                            double dx, double dy, double eta);

struct BlobAttributes {
  double thickness = 0.0;
  double intensity = 0.0;
};

// Centroid-relative moment readout; throws DataError on an all-zero image.
BlobAttributes blob_attributes(const Eigen::VectorXd& image, int res);

// ---- materialized model ------------------------------------------------------

// Generator with all parameter tables drawn from spec.param_seed. Sampling
// uses one substream per record index, so any record is reproducible in
// isolation and generation order does not matter.
class Scm {
 public:
  explicit Scm(const ScmSpec& spec);

  const ScmSpec& spec() const { return spec_; }

  FullSample sample(std::uint64_t master_seed, std::uint64_t index) const;

  Dataset generate(int n, std::uint64_t master_seed) const;

  // Interventional mean E[Y' | do(T' = alpha)], optionally conditioned on a
  // covariate stratum. Closed form for linear_gaussian and discrete;
  // Monte-Carlo with a reported standard error for the others.
  Eigen::VectorXd true_marginal(const Treatment& alpha,
                                const std::vector<int>* x_filter = nullptr,
                                int mc_draws = 1000000,
                                std::uint64_t mc_seed = 2024,
                                Eigen::VectorXd* se_out = nullptr) const;

  // Assignment law p(t | x) for categorical-treatment families.
  std::vector<double> true_propensity(const std::vector<int>& x) const;

  // Conditional outcome mean E[Y' | z, T' = alpha] for categorical-treatment
  // families; exact oracle predictions for estimator tests.
  Eigen::VectorXd oracle_outcome(const Eigen::VectorXd& z_true,
                                 const Treatment& alpha) const;

  const DiscreteTables& discrete() const;

  bool categorical_treatment() const;
  int treatment_levels() const;
  nlohmann::json dataset_meta(int n, std::uint64_t seed) const;

  // Indices of the k outcome components with the largest absolute gap
  // between the stratum's mean under do(T'=alpha) and its assignment-law
  // average across treatments.
  std::vector<int> hard_components(const Treatment& alpha,
                                   const std::vector<int>& x, int k,
                                   int mc_draws = 200000) const;

 private:
  ScmSpec spec_;

  // linear_gaussian / nonlinear_vector parameters
  std::vector<Eigen::MatrixXd> latent_mean_;   // per slot: latent_dim x card
  std::vector<Eigen::VectorXd> cov_probs_;     // per slot marginal
  std::vector<Eigen::MatrixXd> assign_logits_; // per slot: levels x card
  Eigen::MatrixXd A_;                          // outcome_dim x latent_dim
  Eigen::MatrixXd B_;                          // outcome_dim x levels
  core::Mlp<double> mix_;                      // nonlinear mixing net
  Eigen::MatrixXd effect_;                     // outcome_dim x levels

  DiscreteTables tables_;

  Eigen::VectorXd latent_mean_for(const std::vector<int>& x) const;
  std::vector<double> assignment_probs(const std::vector<int>& x) const;
  Eigen::VectorXd outcome_from_latent(const Eigen::VectorXd& z,
                                      int level) const;
  void check_x(const std::vector<int>& x) const;
};

}  // namespace vci::bench
