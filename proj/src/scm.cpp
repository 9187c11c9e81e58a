#include "vci/scm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace vci::bench {

using core::Engine;

std::string family_name(Family f) {
  switch (f) {
    case Family::linear_gaussian: return "linear_gaussian";
    case Family::nonlinear_vector: return "nonlinear_vector";
    case Family::blob_image: return "blob_image";
    case Family::discrete: return "discrete";
  }
  throw SpecError("unknown family");
}

Family family_from_name(const std::string& s) {
  if (s == "linear_gaussian") return Family::linear_gaussian;
  if (s == "nonlinear_vector") return Family::nonlinear_vector;
  if (s == "blob_image") return Family::blob_image;
  if (s == "discrete") return Family::discrete;
  throw SpecError("family: unknown value '" + s + "'");
}

void ScmSpec::validate() const {
  auto fail = [](const std::string& msg) { throw SpecError(msg); };
  switch (family) {
    case Family::linear_gaussian:
    case Family::nonlinear_vector: {
      if (treatment_levels < 2) fail("treatment_levels: must be at least 2");
      if (latent_dim < 1) fail("latent_dim: must be at least 1");
      if (outcome_dim < 1) fail("outcome_dim: must be at least 1");
      if (latent_noise < 0) fail("latent_noise: must be nonnegative");
      if (outcome_noise < 0) fail("outcome_noise: must be nonnegative");
      for (int c : covariate_cards) {
        if (c < 1) fail("covariate_cards: every cardinality must be positive");
      }
      if (identity_maps && family == Family::linear_gaussian &&
          outcome_dim != latent_dim) {
        fail("identity_maps: requires outcome_dim == latent_dim");
      }
      if (family == Family::nonlinear_vector && mix_hidden < 1) {
        fail("mix_hidden: must be at least 1");
      }
      break;
    }
    case Family::blob_image: {
      if (resolution < 4) fail("resolution: must be at least 4");
      if (thickness_range[0] <= 0) {
        fail("thickness_range: lower bound must be positive");
      }
      if (thickness_range[1] < thickness_range[0]) {
        fail("thickness_range: upper bound below lower bound");
      }
      if (intensity_range[0] <= 0) {
        fail("intensity_range: lower bound must be positive");
      }
      if (intensity_range[1] < intensity_range[0]) {
        fail("intensity_range: upper bound below lower bound");
      }
      if (intensity_range[1] > 1.0) {
        fail("intensity_range: upper bound must not exceed 1 (pixel scale)");
      }
      if (jitter_center < 0 || jitter_center > resolution / 4.0) {
        fail("jitter_center: must be in [0, resolution/4]");
      }
      if (jitter_anisotropy < 0 || jitter_anisotropy > 0.9) {
        fail("jitter_anisotropy: must be in [0, 0.9]");
      }
      if (thickness_range[1] > resolution / 4.0) {
        fail("thickness_range: upper bound too large for the resolution");
      }
      break;
    }
    case Family::discrete: {
      auto check = [&](int v, const char* name) {
        if (v < 1 || v > 16) {
          fail(std::string(name) + ": support size must be in [1, 16]");
        }
      };
      check(cards_x, "cards_x");
      check(cards_z, "cards_z");
      check(cards_t, "cards_t");
      check(cards_y, "cards_y");
      break;
    }
  }
}

nlohmann::json ScmSpec::to_json() const {
  nlohmann::json j;
  j["family"] = family_name(family);
  j["param_seed"] = param_seed;
  switch (family) {
    case Family::linear_gaussian:
    case Family::nonlinear_vector:
      j["covariate_cards"] = covariate_cards;
      j["treatment_levels"] = treatment_levels;
      j["latent_dim"] = latent_dim;
      j["outcome_dim"] = outcome_dim;
      j["latent_noise"] = latent_noise;
      j["outcome_noise"] = outcome_noise;
      if (family == Family::linear_gaussian) j["identity_maps"] = identity_maps;
      if (family == Family::nonlinear_vector) j["mix_hidden"] = mix_hidden;
      break;
    case Family::blob_image:
      j["resolution"] = resolution;
      j["thickness_range"] = thickness_range;
      j["intensity_range"] = intensity_range;
      j["jitter_center"] = jitter_center;
      j["jitter_anisotropy"] = jitter_anisotropy;
      break;
    case Family::discrete:
      j["cards_x"] = cards_x;
      j["cards_z"] = cards_z;
      j["cards_t"] = cards_t;
      j["cards_y"] = cards_y;
      break;
  }
  return j;
}

ScmSpec ScmSpec::from_json(const nlohmann::json& j) {
  ScmSpec s;
  if (!j.contains("family")) throw SpecError("family: missing");
  s.family = family_from_name(j.at("family").get<std::string>());
  auto get = [&](const char* key, auto& into) {
    if (j.contains(key)) into = j.at(key).get<std::decay_t<decltype(into)>>();
  };
  get("param_seed", s.param_seed);
  get("covariate_cards", s.covariate_cards);
  get("treatment_levels", s.treatment_levels);
  get("latent_dim", s.latent_dim);
  get("outcome_dim", s.outcome_dim);
  get("latent_noise", s.latent_noise);
  get("outcome_noise", s.outcome_noise);
  get("identity_maps", s.identity_maps);
  get("mix_hidden", s.mix_hidden);
  get("resolution", s.resolution);
  get("jitter_center", s.jitter_center);
  get("jitter_anisotropy", s.jitter_anisotropy);
  if (j.contains("thickness_range")) {
    auto v = j.at("thickness_range").get<std::vector<double>>();
    if (v.size() != 2) throw SpecError("thickness_range: expected [lo, hi]");
    s.thickness_range = {v[0], v[1]};
  }
  if (j.contains("intensity_range")) {
    auto v = j.at("intensity_range").get<std::vector<double>>();
    if (v.size() != 2) throw SpecError("intensity_range: expected [lo, hi]");
    s.intensity_range = {v[0], v[1]};
  }
  get("cards_x", s.cards_x);
  get("cards_z", s.cards_z);
  get("cards_t", s.cards_t);
  get("cards_y", s.cards_y);
  s.validate();
  return s;
}

// ---- discrete tables ---------------------------------------------------------

Eigen::VectorXd DiscreteTables::outcome_given_xt(int x, int t) const {
  Eigen::VectorXd p = Eigen::VectorXd::Zero(ky());
  for (int z = 0; z < kz(); ++z) {
    p += pz_x(x, z) * py_zt[z].row(t).transpose();
  }
  return p;
}

Eigen::VectorXd DiscreteTables::latent_posterior(int x, int t, int y) const {
  Eigen::VectorXd p(kz());
  for (int z = 0; z < kz(); ++z) p[z] = pz_x(x, z) * py_zt[z](t, y);
  double total = p.sum();
  if (total <= 0.0) {
    throw SpecError("latent posterior undefined: p(y|x,t) has zero mass");
  }
  return p / total;
}

namespace {

Eigen::VectorXd dirichlet_flat(int k, Engine& eng) {
  Eigen::VectorXd v(k);
  for (int i = 0; i < k; ++i) {
    double u = core::draw_uniform(eng, 0.0, 1.0);
    v[i] = -std::log(1.0 - u);
  }
  return v / v.sum();
}

}  // namespace

DiscreteTables random_discrete_tables(int kx, int kz, int kt, int ky,
                                      Engine& eng) {
  DiscreteTables t;
  t.px = dirichlet_flat(kx, eng);
  t.pz_x.resize(kx, kz);
  for (int x = 0; x < kx; ++x) t.pz_x.row(x) = dirichlet_flat(kz, eng).transpose();
  t.pt_x.resize(kx, kt);
  for (int x = 0; x < kx; ++x) t.pt_x.row(x) = dirichlet_flat(kt, eng).transpose();
  t.py_zt.resize(kz);
  for (int z = 0; z < kz; ++z) {
    t.py_zt[z].resize(kt, ky);
    for (int tt = 0; tt < kt; ++tt) {
      t.py_zt[z].row(tt) = dirichlet_flat(ky, eng).transpose();
    }
  }
  return t;
}

// ---- blob rendering ----------------------------------------------------------

Eigen::VectorXd render_blob(int res, double thickness, double intensity,
                            double dx, double dy, double eta) {
  if (thickness <= 0.0) throw SpecError("render_blob: thickness must be positive");
  double sigma = thickness / std::sqrt(2.0);
  double sx = sigma * std::sqrt(1.0 + eta);
  double sy = sigma * std::sqrt(1.0 - eta);
  double cx = (res - 1) / 2.0 + dx;
  double cy = (res - 1) / 2.0 + dy;
  Eigen::VectorXd img(res * res);
  double peak = 0.0;
  for (int i = 0; i < res; ++i) {
    for (int j = 0; j < res; ++j) {
      double gx = (j - cx) / sx;
      double gy = (i - cy) / sy;
      double v = std::exp(-0.5 * (gx * gx + gy * gy));
      img[i * res + j] = v;
      peak = std::max(peak, v);
    }
  }
  // Normalize by the on-grid peak so the brightest pixel reads back the
  // intensity attribute exactly.
  img *= intensity / peak;
  return img;
}

BlobAttributes blob_attributes(const Eigen::VectorXd& image, int res) {
  if (image.size() != static_cast<Eigen::Index>(res) * res) {
    throw DataError("blob_attributes: image size does not match resolution");
  }
  double total = image.sum();
  double peak = image.maxCoeff();
  if (total <= 0.0 || peak <= 0.0) {
    throw DataError("blob_attributes: image has no mass");
  }
  double cx = 0.0, cy = 0.0;
  for (int i = 0; i < res; ++i) {
    for (int j = 0; j < res; ++j) {
      double w = image[i * res + j];
      cx += w * j;
      cy += w * i;
    }
  }
  cx /= total;
  cy /= total;
  double msr = 0.0;
  for (int i = 0; i < res; ++i) {
    for (int j = 0; j < res; ++j) {
      double w = image[i * res + j];
      msr += w * ((j - cx) * (j - cx) + (i - cy) * (i - cy));
    }
  }
  msr /= total;
  BlobAttributes attrs;
  attrs.thickness = std::sqrt(msr);
  attrs.intensity = peak;
  return attrs;
}

// ---- materialized model ------------------------------------------------------

Scm::Scm(const ScmSpec& spec) : spec_(spec) {
  spec_.validate();
  Engine eng = core::make_engine(spec_.param_seed);
  switch (spec_.family) {
    case Family::linear_gaussian:
    case Family::nonlinear_vector: {
      // Fixed draw order per slot: marginal, latent means, assignment logits.
      for (int card : spec_.covariate_cards) {
        cov_probs_.push_back(dirichlet_flat(card, eng));
        Eigen::MatrixXd m(spec_.latent_dim, card);
        for (int c = 0; c < card; ++c) {
          for (int d = 0; d < spec_.latent_dim; ++d) {
            m(d, c) = core::draw_normal(eng);
          }
        }
        latent_mean_.push_back(std::move(m));
        Eigen::MatrixXd logits(spec_.treatment_levels, card);
        for (int c = 0; c < card; ++c) {
          for (int l = 0; l < spec_.treatment_levels; ++l) {
            logits(l, c) = 0.7 * core::draw_normal(eng);
          }
        }
        assign_logits_.push_back(std::move(logits));
      }
      if (spec_.family == Family::linear_gaussian) {
        if (spec_.identity_maps) {
          A_ = Eigen::MatrixXd::Identity(spec_.outcome_dim, spec_.latent_dim);
          B_ = Eigen::MatrixXd::Zero(spec_.outcome_dim,
                                     spec_.treatment_levels);
        } else {
          A_.resize(spec_.outcome_dim, spec_.latent_dim);
          double scale = 1.0 / std::sqrt(static_cast<double>(spec_.latent_dim));
          for (Eigen::Index i = 0; i < A_.rows(); ++i) {
            for (Eigen::Index j = 0; j < A_.cols(); ++j) {
              A_(i, j) = scale * core::draw_normal(eng);
            }
          }
          B_.resize(spec_.outcome_dim, spec_.treatment_levels);
          for (Eigen::Index i = 0; i < B_.rows(); ++i) {
            for (Eigen::Index j = 0; j < B_.cols(); ++j) {
              B_(i, j) = core::draw_normal(eng);
            }
          }
        }
      } else {
        mix_ = core::make_mlp<double>(spec_.latent_dim, {spec_.mix_hidden},
                                      spec_.outcome_dim, core::Act::tanh_fn,
                                      eng);
        effect_.resize(spec_.outcome_dim, spec_.treatment_levels);
        for (Eigen::Index i = 0; i < effect_.rows(); ++i) {
          for (Eigen::Index j = 0; j < effect_.cols(); ++j) {
            effect_(i, j) = core::draw_normal(eng);
          }
        }
      }
      break;
    }
    case Family::blob_image:
      break;
    case Family::discrete:
      tables_ = random_discrete_tables(spec_.cards_x, spec_.cards_z,
                                       spec_.cards_t, spec_.cards_y, eng);
      break;
  }
}

void Scm::check_x(const std::vector<int>& x) const {
  if (x.size() != spec_.covariate_cards.size() &&
      spec_.family != Family::discrete) {
    throw SpecError("covariate vector has wrong length");
  }
  for (size_t s = 0; s < x.size(); ++s) {
    int card = spec_.family == Family::discrete ? spec_.cards_x
                                                : spec_.covariate_cards[s];
    if (x[s] < 0 || x[s] >= card) {
      throw SpecError("covariate index out of range");
    }
  }
}

Eigen::VectorXd Scm::latent_mean_for(const std::vector<int>& x) const {
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(spec_.latent_dim);
  for (size_t s = 0; s < x.size(); ++s) mu += latent_mean_[s].col(x[s]);
  return mu;
}

std::vector<double> Scm::assignment_probs(const std::vector<int>& x) const {
  Eigen::VectorXd logit = Eigen::VectorXd::Zero(spec_.treatment_levels);
  for (size_t s = 0; s < x.size(); ++s) logit += assign_logits_[s].col(x[s]);
  Eigen::VectorXd p = (logit.array() - logit.maxCoeff()).exp();
  p /= p.sum();
  return std::vector<double>(p.data(), p.data() + p.size());
}

Eigen::VectorXd Scm::outcome_from_latent(const Eigen::VectorXd& z,
                                         int level) const {
  if (spec_.family == Family::linear_gaussian) {
    return A_ * z + B_.col(level);
  }
  core::Mat<double> zin(1, z.size());
  zin.row(0) = z.transpose();
  core::Mat<double> out = core::mlp_eval(mix_, zin);
  return out.row(0).transpose() + effect_.col(level);
}

FullSample Scm::sample(std::uint64_t master_seed, std::uint64_t index) const {
  Engine eng = core::make_substream(master_seed, index);
  FullSample s;
  switch (spec_.family) {
    case Family::linear_gaussian:
    case Family::nonlinear_vector: {
      for (const auto& probs : cov_probs_) {
        s.x.push_back(core::draw_categorical(eng, probs));
      }
      auto assign = assignment_probs(s.x);
      int t = core::draw_categorical(eng, assign);
      int tp = core::draw_categorical(eng, assign);
      s.t = Treatment::categorical(t);
      s.t_prime = Treatment::categorical(tp);
      Eigen::VectorXd u(spec_.latent_dim);
      for (int d = 0; d < spec_.latent_dim; ++d) u[d] = core::draw_normal(eng);
      s.z_true = latent_mean_for(s.x) + spec_.latent_noise * u;
      // Outcome-level noise is exogenous to the treatment and shared between
      // the factual and counterfactual outcome, so t_prime == t gives
      // y_prime_true == y exactly.
      Eigen::VectorXd eps = Eigen::VectorXd::Zero(spec_.outcome_dim);
      if (spec_.outcome_noise > 0.0) {
        for (int d = 0; d < spec_.outcome_dim; ++d) {
          eps[d] = spec_.outcome_noise * core::draw_normal(eng);
        }
      }
      s.y = outcome_from_latent(s.z_true, t) + eps;
      s.y_prime_true =
          (tp == t) ? s.y : (outcome_from_latent(s.z_true, tp) + eps).eval();
      break;
    }
    case Family::blob_image: {
      double w = core::draw_uniform(eng, spec_.thickness_range[0],
                                    spec_.thickness_range[1]);
      double a = core::draw_uniform(eng, spec_.intensity_range[0],
                                    spec_.intensity_range[1]);
      double wp = core::draw_uniform(eng, spec_.thickness_range[0],
                                     spec_.thickness_range[1]);
      double ap = core::draw_uniform(eng, spec_.intensity_range[0],
                                     spec_.intensity_range[1]);
      double dx = core::draw_uniform(eng, -spec_.jitter_center,
                                     spec_.jitter_center);
      double dy = core::draw_uniform(eng, -spec_.jitter_center,
                                     spec_.jitter_center);
      double eta = core::draw_uniform(eng, -spec_.jitter_anisotropy,
                                      spec_.jitter_anisotropy);
      Eigen::VectorXd t(2), tp(2);
      t << w, a;
      tp << wp, ap;
      s.t = Treatment::continuous(t);
      s.t_prime = Treatment::continuous(tp);
      s.z_true.resize(3);
      s.z_true << dx, dy, eta;
      s.y = render_blob(spec_.resolution, w, a, dx, dy, eta);
      s.y_prime_true =
          (s.t_prime == s.t)
              ? s.y
              : render_blob(spec_.resolution, wp, ap, dx, dy, eta);
      break;
    }
    case Family::discrete: {
      int x = core::draw_categorical(eng, tables_.px);
      s.x = {x};
      int z = core::draw_categorical(eng, tables_.pz_x.row(x));
      int t = core::draw_categorical(eng, tables_.pt_x.row(x));
      int tp = core::draw_categorical(eng, tables_.pt_x.row(x));
      // One shared uniform drives both outcome draws through the inverse
      // CDF, so equal treatments give equal outcomes exactly.
      double u = core::draw_uniform(eng, 0.0, 1.0);
      auto inv_cdf = [&](int level) {
        double acc = 0.0;
        for (int y = 0; y < tables_.ky(); ++y) {
          acc += tables_.py_zt[z](level, y);
          if (u < acc) return y;
        }
        return tables_.ky() - 1;
      };
      int y = inv_cdf(t);
      int yp = inv_cdf(tp);
      s.t = Treatment::categorical(t);
      s.t_prime = Treatment::categorical(tp);
      s.z_true = Eigen::VectorXd::Zero(1);
      s.z_true[0] = z;
      s.y = Eigen::VectorXd::Zero(tables_.ky());
      s.y[y] = 1.0;
      s.y_prime_true = Eigen::VectorXd::Zero(tables_.ky());
      s.y_prime_true[yp] = 1.0;
      break;
    }
  }
  return s;
}

Dataset Scm::generate(int n, std::uint64_t master_seed) const {
  Dataset ds;
  ds.samples.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    ds.samples.push_back(sample(master_seed, static_cast<std::uint64_t>(i)));
  }
  ds.meta = dataset_meta(n, master_seed);
  return ds;
}

nlohmann::json Scm::dataset_meta(int n, std::uint64_t seed) const {
  nlohmann::json meta;
  meta["spec"] = spec_.to_json();
  meta["seed"] = seed;
  meta["n"] = n;
  meta["family"] = family_name(spec_.family);
  meta["has_ground_truth"] = true;
  switch (spec_.family) {
    case Family::linear_gaussian:
    case Family::nonlinear_vector:
      meta["outcome_dim"] = spec_.outcome_dim;
      meta["covariate_cards"] = spec_.covariate_cards;
      meta["treatment"] = {{"kind", "categorical"},
                           {"levels", spec_.treatment_levels}};
      break;
    case Family::blob_image:
      meta["outcome_dim"] = spec_.resolution * spec_.resolution;
      meta["covariate_cards"] = std::vector<int>{};
      meta["treatment"] = {
          {"kind", "continuous"},
          {"dim", 2},
          {"ranges",
           {{spec_.thickness_range[0], spec_.thickness_range[1]},
            {spec_.intensity_range[0], spec_.intensity_range[1]}}}};
      meta["resolution"] = spec_.resolution;
      break;
    case Family::discrete:
      meta["outcome_dim"] = spec_.cards_y;
      meta["covariate_cards"] = std::vector<int>{spec_.cards_x};
      meta["treatment"] = {{"kind", "categorical"}, {"levels", spec_.cards_t}};
      break;
  }
  return meta;
}

Eigen::VectorXd Scm::true_marginal(const Treatment& alpha,
                                   const std::vector<int>* x_filter,
                                   int mc_draws, std::uint64_t mc_seed,
                                   Eigen::VectorXd* se_out) const {
  if (se_out) se_out->resize(0);
  switch (spec_.family) {
    case Family::linear_gaussian: {
      if (!alpha.is_categorical()) {
        throw SpecError("true_marginal: expected a categorical treatment");
      }
      Eigen::VectorXd ez = Eigen::VectorXd::Zero(spec_.latent_dim);
      if (x_filter) {
        check_x(*x_filter);
        ez = latent_mean_for(*x_filter);
      } else {
        for (size_t slot = 0; slot < latent_mean_.size(); ++slot) {
          ez += latent_mean_[slot] * cov_probs_[slot];
        }
      }
      Eigen::VectorXd out = A_ * ez + B_.col(alpha.level);
      if (se_out) *se_out = Eigen::VectorXd::Zero(spec_.outcome_dim);
      return out;
    }
    case Family::discrete: {
      if (!alpha.is_categorical()) {
        throw SpecError("true_marginal: expected a categorical treatment");
      }
      Eigen::VectorXd p = Eigen::VectorXd::Zero(tables_.ky());
      if (x_filter) {
        check_x(*x_filter);
        p = tables_.outcome_given_xt((*x_filter)[0], alpha.level);
      } else {
        for (int x = 0; x < tables_.kx(); ++x) {
          p += tables_.px[x] * tables_.outcome_given_xt(x, alpha.level);
        }
      }
      if (se_out) *se_out = Eigen::VectorXd::Zero(tables_.ky());
      return p;
    }
    case Family::nonlinear_vector: {
      if (!alpha.is_categorical()) {
        throw SpecError("true_marginal: expected a categorical treatment");
      }
      Engine eng = core::make_engine(mc_seed);
      Eigen::VectorXd mean = Eigen::VectorXd::Zero(spec_.outcome_dim);
      Eigen::VectorXd m2 = Eigen::VectorXd::Zero(spec_.outcome_dim);
      for (int i = 0; i < mc_draws; ++i) {
        std::vector<int> x;
        if (x_filter) {
          x = *x_filter;
        } else {
          for (const auto& probs : cov_probs_) {
            x.push_back(core::draw_categorical(eng, probs));
          }
        }
        Eigen::VectorXd u(spec_.latent_dim);
        for (int d = 0; d < spec_.latent_dim; ++d) {
          u[d] = core::draw_normal(eng);
        }
        Eigen::VectorXd z = latent_mean_for(x) + spec_.latent_noise * u;
        Eigen::VectorXd y = outcome_from_latent(z, alpha.level);
        Eigen::VectorXd delta = y - mean;
        mean += delta / (i + 1);
        m2 += delta.cwiseProduct(y - mean);
      }
      if (se_out && mc_draws > 1) {
        *se_out = (m2 / (mc_draws - 1.0) / mc_draws).cwiseSqrt();
      }
      return mean;
    }
    case Family::blob_image: {
      if (alpha.is_categorical() || alpha.attrs.size() != 2) {
        throw SpecError(
            "true_marginal: blob treatment must be [thickness, intensity]");
      }
      Engine eng = core::make_engine(mc_seed);
      int dim = spec_.resolution * spec_.resolution;
      Eigen::VectorXd mean = Eigen::VectorXd::Zero(dim);
      Eigen::VectorXd m2 = Eigen::VectorXd::Zero(dim);
      for (int i = 0; i < mc_draws; ++i) {
        double dx = core::draw_uniform(eng, -spec_.jitter_center,
                                       spec_.jitter_center);
        double dy = core::draw_uniform(eng, -spec_.jitter_center,
                                       spec_.jitter_center);
        double eta = core::draw_uniform(eng, -spec_.jitter_anisotropy,
                                        spec_.jitter_anisotropy);
        Eigen::VectorXd y = render_blob(spec_.resolution, alpha.attrs[0],
                                        alpha.attrs[1], dx, dy, eta);
        Eigen::VectorXd delta = y - mean;
        mean += delta / (i + 1);
        m2 += delta.cwiseProduct(y - mean);
      }
      if (se_out && mc_draws > 1) {
        *se_out = (m2 / (mc_draws - 1.0) / mc_draws).cwiseSqrt();
      }
      return mean;
    }
  }
  throw SpecError("unreachable");
}

std::vector<double> Scm::true_propensity(const std::vector<int>& x) const {
  switch (spec_.family) {
    case Family::linear_gaussian:
    case Family::nonlinear_vector:
      check_x(x);
      return assignment_probs(x);
    case Family::discrete: {
      check_x(x);
      Eigen::VectorXd row = tables_.pt_x.row(x[0]).transpose();
      return std::vector<double>(row.data(), row.data() + row.size());
    }
    case Family::blob_image:
      throw SpecError(
          "true_propensity: undefined for continuous-treatment families");
  }
  throw SpecError("unreachable");
}

Eigen::VectorXd Scm::oracle_outcome(const Eigen::VectorXd& z_true,
                                    const Treatment& alpha) const {
  switch (spec_.family) {
    case Family::linear_gaussian:
    case Family::nonlinear_vector:
      if (!alpha.is_categorical()) {
        throw SpecError("oracle_outcome: expected a categorical treatment");
      }
      return outcome_from_latent(z_true, alpha.level);
    case Family::discrete: {
      if (!alpha.is_categorical()) {
        throw SpecError("oracle_outcome: expected a categorical treatment");
      }
      int z = static_cast<int>(z_true[0]);
      return tables_.py_zt[z].row(alpha.level).transpose();
    }
    case Family::blob_image: {
      if (alpha.is_categorical() || alpha.attrs.size() != 2) {
        throw SpecError("oracle_outcome: blob treatment must be 2-dim");
      }
      return render_blob(spec_.resolution, alpha.attrs[0], alpha.attrs[1],
                         z_true[0], z_true[1], z_true[2]);
    }
  }
  throw SpecError("unreachable");
}

const DiscreteTables& Scm::discrete() const {
  if (spec_.family != Family::discrete) {
    throw SpecError("discrete tables requested from a non-discrete model");
  }
  return tables_;
}

bool Scm::categorical_treatment() const {
  return spec_.family != Family::blob_image;
}

int Scm::treatment_levels() const {
  if (spec_.family == Family::discrete) return spec_.cards_t;
  if (spec_.family == Family::blob_image) {
    throw SpecError("treatment_levels: continuous treatment");
  }
  return spec_.treatment_levels;
}

std::vector<int> Scm::hard_components(const Treatment& alpha,
                                      const std::vector<int>& x, int k,
                                      int mc_draws) const {
  Eigen::VectorXd target = true_marginal(alpha, &x, mc_draws, 77);
  auto probs = true_propensity(x);
  Eigen::VectorXd baseline = Eigen::VectorXd::Zero(target.size());
  for (int l = 0; l < static_cast<int>(probs.size()); ++l) {
    baseline +=
        probs[l] * true_marginal(Treatment::categorical(l), &x, mc_draws, 77);
  }
  Eigen::VectorXd effect = (target - baseline).cwiseAbs();
  std::vector<int> idx(static_cast<size_t>(effect.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (effect[a] != effect[b]) return effect[a] > effect[b];
    return a < b;
  });
  idx.resize(std::min<size_t>(idx.size(), static_cast<size_t>(k)));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace vci::bench
