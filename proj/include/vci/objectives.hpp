#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "vci/models.hpp"
#include "vci/models_data.hpp"
#include "vci/tensor.hpp"

namespace vci::obj {

using core::Mat;
using core::Tape;
using core::TRef;
using models::BoundDisc;
using models::BoundGenerator;
using models::CovariateBatch;
using models::TreatmentBatch;
using models::VciModel;

class ObjectiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- latent divergence -----------------------------------------------------------

// KL between two unit-variance diagonal Gaussians: half the squared
// distance between the means, averaged over the batch.
template <typename Scalar>
Scalar latent_kl_unit_gaussians_eval(const Mat<Scalar>& mu1,
                                     const Mat<Scalar>& mu2) {
  if (mu1.rows() != mu2.rows() || mu1.cols() != mu2.cols()) {
    throw ObjectiveError("latent kl: mean shape mismatch");
  }
  return static_cast<Scalar>((mu1 - mu2).squaredNorm() /
                             (2.0 * static_cast<double>(mu1.rows())));
}

template <typename Scalar>
TRef<Scalar> latent_kl_unit_gaussians_node(TRef<Scalar> mu1,
                                           TRef<Scalar> mu2) {
  Eigen::Index n = mu1.value().rows();
  auto diff = core::sub(mu1, mu2);
  return core::scale(core::sum_all(core::square(diff)),
                     Scalar(0.5) / static_cast<Scalar>(n));
}

// ---- configuration ---------------------------------------------------------------

// How the counterfactual's gradient reaches the encoder through the
// divergence term's second argument.
enum class Detach {
  target_copy,     // frozen copy of the encoding path; input grads flow
  fully_attached,  // live encoder on both sides
  detach_yprime,   // like target_copy, but y' decodes a blocked latent
};

inline std::string detach_name(Detach d) {
  switch (d) {
    case Detach::target_copy: return "target_copy";
    case Detach::fully_attached: return "fully_attached";
    case Detach::detach_yprime: return "detach_yprime";
  }
  throw ObjectiveError("unknown detach mode");
}

inline Detach detach_from_name(const std::string& s) {
  if (s == "target_copy") return Detach::target_copy;
  if (s == "fully_attached") return Detach::fully_attached;
  if (s == "detach_yprime") return Detach::detach_yprime;
  throw ObjectiveError("unknown detach mode '" + s + "'");
}

// Which density scores the counterfactual outcome.
enum class CfTerm { empirical, adversarial };

inline std::string cf_term_name(CfTerm c) {
  return c == CfTerm::empirical ? "empirical" : "adversarial";
}

inline CfTerm cf_term_from_name(const std::string& s) {
  if (s == "empirical") return CfTerm::empirical;
  if (s == "adversarial") return CfTerm::adversarial;
  throw ObjectiveError("unknown counterfactual term '" + s + "'");
}

struct LossWeights {
  double cf = 1.0;
  double kl = 0.03;
};

// Ablations share one architecture and differ only in the objective.
enum class Ablation { vci, hae, hae_a, sae };

inline std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::vci: return "vci";
    case Ablation::hae: return "hae";
    case Ablation::hae_a: return "hae_a";
    case Ablation::sae: return "sae";
  }
  throw ObjectiveError("unknown ablation");
}

inline Ablation ablation_from_name(const std::string& s) {
  if (s == "vci") return Ablation::vci;
  if (s == "hae") return Ablation::hae;
  if (s == "hae_a") return Ablation::hae_a;
  if (s == "sae") return Ablation::sae;
  throw ObjectiveError("unknown ablation '" + s + "'");
}

inline LossWeights ablation_weights(Ablation a) {
  switch (a) {
    case Ablation::vci: return {1.0, 0.03};
    case Ablation::hae: return {0.0, 0.0};
    case Ablation::hae_a: return {0.0, 0.03};
    case Ablation::sae: return {1.0, 0.0};
  }
  throw ObjectiveError("unknown ablation");
}

// The sae ablation replaces the likelihood objective with a squared-error
// one; the others reuse the variational objective with reweighted terms.
inline bool ablation_uses_squared_error(Ablation a) {
  return a == Ablation::sae;
}

// ---- batch plumbing ---------------------------------------------------------------

template <typename Scalar>
std::vector<char> same_treatment(const TreatmentBatch<Scalar>& a,
                                 const TreatmentBatch<Scalar>& b) {
  if (a.categorical != b.categorical || a.n() != b.n()) {
    throw ObjectiveError("treatment batches are not comparable");
  }
  std::vector<char> same(static_cast<size_t>(a.n()));
  for (int i = 0; i < a.n(); ++i) {
    if (a.categorical) {
      same[static_cast<size_t>(i)] =
          a.levels[static_cast<size_t>(i)] == b.levels[static_cast<size_t>(i)];
    } else {
      same[static_cast<size_t>(i)] = a.attrs.row(i) == b.attrs.row(i);
    }
  }
  return same;
}

// ---- the compound objective ----------------------------------------------------------

struct VciLossConfig {
  LossWeights weights;
  Detach detach = Detach::target_copy;
  CfTerm cf_term = CfTerm::empirical;
};

template <typename Scalar>
struct VciLossNodes {
  TRef<Scalar> total{nullptr, -1};
  TRef<Scalar> recon{nullptr, -1};
  TRef<Scalar> cf{nullptr, -1};
  TRef<Scalar> kl{nullptr, -1};
  TRef<Scalar> y_prime{nullptr, -1};  // counterfactual outcome means
  TRef<Scalar> mu{nullptr, -1};       // live latent means

  bool has_cf() const { return cf.id >= 0; }
  bool has_kl() const { return kl.id >= 0; }
};

struct LossBreakdown {
  double recon = 0.0;
  double cf = 0.0;
  double kl = 0.0;
  double total = 0.0;
};

template <typename Scalar>
LossBreakdown breakdown(const VciLossNodes<Scalar>& n) {
  LossBreakdown b;
  b.total = static_cast<double>(n.total.value()(0, 0));
  b.recon = static_cast<double>(n.recon.value()(0, 0));
  if (n.has_cf()) b.cf = static_cast<double>(n.cf.value()(0, 0));
  if (n.has_kl()) b.kl = static_cast<double>(n.kl.value()(0, 0));
  return b;
}

namespace detail {

// Rows whose query matches the factual treatment keep the factual outcome;
// consistency makes the factual and counterfactual posteriors coincide
// there, so the divergence contributes exactly zero for those rows.
template <typename Scalar>
TRef<Scalar> mix_rows(Tape<Scalar>& tp, const Mat<Scalar>& y,
                      TRef<Scalar> y_prime, const std::vector<char>& same) {
  Eigen::Index n = y.rows(), d = y.cols();
  Mat<Scalar> keep = Mat<Scalar>::Zero(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (same[static_cast<size_t>(i)]) keep.row(i).setOnes();
  }
  Mat<Scalar> swap = Mat<Scalar>::Ones(n, d) - keep;
  Mat<Scalar> kept_vals = (keep.array() * y.array()).matrix();
  auto swapped = core::hadamard(core::make_constant<Scalar>(tp, swap), y_prime);
  return core::add(core::make_constant<Scalar>(tp, kept_vals), swapped);
}

}  // namespace detail

// Builds the full objective on the tape:
//   total = -recon + weights.cf * (-cf) + weights.kl * kl
// where recon is the decoder log likelihood of the factual outcome at the
// sampled latent, cf scores the constructed counterfactual under the chosen
// support term, and kl is the divergence between the factual posterior and
// the posterior the counterfactual pair induces. Terms with zero weight are
// not built. The caller supplies the latent noise so runs are reproducible
// and the loss is a deterministic function of its inputs.
template <typename Scalar>
VciLossNodes<Scalar> vci_loss(Tape<Scalar>& tp, VciModel<Scalar>& live,
                              BoundGenerator<Scalar>& bg,
                              std::type_identity_t<VciModel<Scalar>>* target,
                              const Mat<Scalar>& y,
                              const TreatmentBatch<Scalar>& t,
                              const TreatmentBatch<Scalar>& t_prime,
                              const CovariateBatch& x, const Mat<Scalar>& eps,
                              const VciLossConfig& cfg,
                              const models::EmpiricalOutcomeModel* phat,
                              std::type_identity_t<BoundDisc<Scalar>>* disc_binding) {
  if (eps.rows() != y.rows() || eps.cols() != live.cfg.latent_dim) {
    throw ObjectiveError("latent noise shape does not match the batch");
  }
  const bool needs_target =
      cfg.detach != Detach::fully_attached && cfg.weights.kl != 0.0;
  if (needs_target && target == nullptr) {
    throw ObjectiveError(detach_name(cfg.detach) +
                         " needs a frozen target copy for the divergence");
  }

  VciLossNodes<Scalar> out;
  auto y_node = core::make_constant<Scalar>(tp, y);

  // Factual path.
  out.mu = models::encode_node(tp, live, bg, y_node, t, x, true);
  auto z = core::add(out.mu, core::make_constant<Scalar>(tp, eps));
  auto recon_mean = models::decode_mean_node(tp, live, bg, z, t, true);
  auto log_sigma = models::log_sigma_node(tp, live, bg);
  out.recon =
      models::gaussian_log_lik_node<Scalar>(tp, recon_mean, y, log_sigma);

  // Counterfactual construction from the deterministic latent mean.
  auto cf_latent = cfg.detach == Detach::detach_yprime
                       ? core::stop_gradient(out.mu)
                       : out.mu;
  out.y_prime = models::decode_mean_node(tp, live, bg, cf_latent, t_prime, true);

  auto total = core::neg(out.recon);

  if (cfg.weights.cf != 0.0) {
    if (cfg.cf_term == CfTerm::empirical) {
      if (phat == nullptr) {
        throw ObjectiveError("empirical counterfactual term needs a density");
      }
      if (!t_prime.categorical) {
        throw ObjectiveError(
            "empirical counterfactual term needs categorical treatments");
      }
      out.cf = models::empirical_log_lik_node<Scalar>(tp, *phat, out.y_prime,
                                                      x, t_prime.levels);
    } else {
      if (disc_binding == nullptr) {
        throw ObjectiveError(
            "adversarial counterfactual term needs a discriminator binding");
      }
      auto logit = models::disc_logit_node(tp, live, *disc_binding,
                                           out.y_prime, t_prime, x, false);
      out.cf = models::gen_score_node<Scalar>(logit);
    }
    total = core::add(total,
                      core::scale(core::neg(out.cf),
                                  static_cast<Scalar>(cfg.weights.cf)));
  }

  if (cfg.weights.kl != 0.0) {
    auto same = same_treatment(t, t_prime);
    auto y_mix = detail::mix_rows(tp, y, out.y_prime, same);
    TRef<Scalar> mu2{nullptr, -1};
    TRef<Scalar> mu_anchor{nullptr, -1};
    if (cfg.detach == Detach::fully_attached) {
      mu_anchor = out.mu;
      mu2 = models::encode_node(tp, live, bg, y_mix, t_prime, x, true);
    } else {
      // The frozen copy evaluates both posteriors. Its parameters take no
      // gradient and the factual side reads constant data, so the divergence
      // reaches the generator only through the constructed counterfactual.
      models::BoundGenerator<Scalar> bg_target;
      mu_anchor =
          models::encode_node(tp, *target, bg_target, y_node, t, x, false);
      mu2 = models::encode_node(tp, *target, bg_target, y_mix, t_prime, x,
                                false);
    }
    out.kl = latent_kl_unit_gaussians_node(mu_anchor, mu2);
    total = core::add(
        total, core::scale(out.kl, static_cast<Scalar>(cfg.weights.kl)));
  }

  out.total = total;
  return out;
}

// Squared-error objective for the sae ablation: mean over the batch of the
// summed squared reconstruction error, minus the weighted counterfactual
// score. Shares every architectural path with the variational objective.
template <typename Scalar>
VciLossNodes<Scalar> sae_loss(Tape<Scalar>& tp, VciModel<Scalar>& live,
                              BoundGenerator<Scalar>& bg,
                              const Mat<Scalar>& y,
                              const TreatmentBatch<Scalar>& t,
                              const TreatmentBatch<Scalar>& t_prime,
                              const CovariateBatch& x, const Mat<Scalar>& eps,
                              double omega_cf, CfTerm cf_term,
                              const models::EmpiricalOutcomeModel* phat,
                              std::type_identity_t<BoundDisc<Scalar>>* disc_binding) {
  if (eps.rows() != y.rows() || eps.cols() != live.cfg.latent_dim) {
    throw ObjectiveError("latent noise shape does not match the batch");
  }
  VciLossNodes<Scalar> out;
  auto y_node = core::make_constant<Scalar>(tp, y);
  out.mu = models::encode_node(tp, live, bg, y_node, t, x, true);
  auto z = core::add(out.mu, core::make_constant<Scalar>(tp, eps));
  auto recon_mean = models::decode_mean_node(tp, live, bg, z, t, true);
  Eigen::Index n = y.rows();
  auto err = core::sub(recon_mean, y_node);
  out.recon = core::scale(core::sum_all(core::square(err)),
                          Scalar(1) / static_cast<Scalar>(n));
  out.y_prime = models::decode_mean_node(tp, live, bg, out.mu, t_prime, true);

  auto total = out.recon;
  if (omega_cf != 0.0) {
    if (cf_term == CfTerm::empirical) {
      if (phat == nullptr) {
        throw ObjectiveError("empirical counterfactual term needs a density");
      }
      if (!t_prime.categorical) {
        throw ObjectiveError(
            "empirical counterfactual term needs categorical treatments");
      }
      out.cf = models::empirical_log_lik_node<Scalar>(tp, *phat, out.y_prime,
                                                      x, t_prime.levels);
    } else {
      if (disc_binding == nullptr) {
        throw ObjectiveError(
            "adversarial counterfactual term needs a discriminator binding");
      }
      auto logit = models::disc_logit_node(tp, live, *disc_binding,
                                           out.y_prime, t_prime, x, false);
      out.cf = models::gen_score_node<Scalar>(logit);
    }
    total = core::add(total, core::scale(core::neg(out.cf),
                                         static_cast<Scalar>(omega_cf)));
  }
  out.total = total;
  return out;
}

}  // namespace vci::obj
