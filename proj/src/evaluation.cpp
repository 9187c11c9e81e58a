#include "vci/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "vci/objectives.hpp"

namespace vci::eval {

namespace {

std::vector<int> resolve_rows(const bench::Dataset& data,
                              const std::vector<int>* subset) {
  std::vector<int> rows;
  if (subset) {
    rows = *subset;
    for (int k : rows) {
      if (k < 0 || k >= data.n()) {
        throw EvalError("record index out of range: " + std::to_string(k));
      }
    }
  } else {
    rows.resize(static_cast<size_t>(data.n()));
    std::iota(rows.begin(), rows.end(), 0);
  }
  if (rows.empty()) throw EvalError("evaluation needs at least one record");
  return rows;
}

struct Gathered {
  std::vector<int> rows;
  Eigen::MatrixXd y;
  Eigen::MatrixXd y_prime;  // empty unless every row carries ground truth
  std::vector<bench::Treatment> t;
  std::vector<bench::Treatment> t_prime;
  models::CovariateBatch x;
  int first_missing_truth = -1;
};

Gathered gather(const bench::Dataset& data, const std::vector<int>* subset) {
  Gathered g;
  g.rows = resolve_rows(data, subset);
  const Eigen::Index n = static_cast<Eigen::Index>(g.rows.size());
  const Eigen::Index d = data.outcome_dim();
  g.y.resize(n, d);
  const size_t n_slots = data.samples[static_cast<size_t>(g.rows[0])].x.size();
  g.x.slots.resize(n_slots);
  bool all_truth = true;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& s = data.samples[static_cast<size_t>(g.rows[static_cast<size_t>(i)])];
    if (s.y.size() != d) {
      throw EvalError("record " + std::to_string(g.rows[static_cast<size_t>(i)]) +
                      " has outcome dimension " + std::to_string(s.y.size()) +
                      ", expected " + std::to_string(d));
    }
    if (s.x.size() != n_slots) {
      throw EvalError("covariate vector length mismatch at record " +
                      std::to_string(g.rows[static_cast<size_t>(i)]));
    }
    g.y.row(i) = s.y.transpose();
    g.t.push_back(s.t);
    g.t_prime.push_back(s.t_prime);
    for (size_t j = 0; j < n_slots; ++j) g.x.slots[j].push_back(s.x[j]);
    if (!s.has_truth()) {
      all_truth = false;
      if (g.first_missing_truth < 0) {
        g.first_missing_truth = g.rows[static_cast<size_t>(i)];
      }
    }
  }
  if (all_truth) {
    g.y_prime.resize(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      g.y_prime.row(i) =
          data.samples[static_cast<size_t>(g.rows[static_cast<size_t>(i)])]
              .y_prime_true.transpose();
    }
  }
  return g;
}

double mean_row_msd(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const double d = static_cast<double>(a.cols());
  double acc = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    acc += (a.row(i) - b.row(i)).squaredNorm() / d;
  }
  return acc / static_cast<double>(a.rows());
}

struct Readout {
  bool ok = false;
  bench::BlobAttributes attrs;
};

Readout read_attrs(const Eigen::VectorXd& image, int res) {
  Readout r;
  try {
    r.attrs = bench::blob_attributes(image, res);
  } catch (const bench::DataError&) {
    return r;
  }
  r.ok = std::isfinite(r.attrs.thickness) && std::isfinite(r.attrs.intensity);
  return r;
}

std::string stratum_key(const bench::FullSample& s) {
  std::string k = "x=[";
  for (size_t i = 0; i < s.x.size(); ++i) {
    if (i) k += ',';
    k += std::to_string(s.x[i]);
  }
  k += "]|t'=";
  if (s.t_prime.is_categorical()) {
    k += std::to_string(s.t_prime.level);
  } else {
    k += '(';
    char buf[40];
    for (Eigen::Index i = 0; i < s.t_prime.attrs.size(); ++i) {
      if (i) k += ',';
      std::snprintf(buf, sizeof buf, "%.17g", s.t_prime.attrs[i]);
      k += buf;
    }
    k += ')';
  }
  return k;
}

}  // namespace

int blob_resolution(const nlohmann::json& meta) {
  if (meta.value("family", std::string()) != "blob_image") return 0;
  return meta.value("resolution", 0);
}

// ---- counterfactual error metrics --------------------------------------------

nlohmann::json CounterfactualErrors::to_json() const {
  nlohmann::json j{{"mse", mse}, {"n", n}, {"unreadable", unreadable}};
  if (!attribute_mae.empty()) j["attribute_mae"] = attribute_mae;
  return j;
}

CounterfactualErrors counterfactual_errors(const Eigen::MatrixXd& predictions,
                                           const bench::Dataset& data,
                                           const std::vector<int>* subset) {
  auto rows = resolve_rows(data, subset);
  const Eigen::Index d = data.outcome_dim();
  if (predictions.rows() != static_cast<Eigen::Index>(rows.size()) ||
      predictions.cols() != d) {
    throw EvalError("prediction matrix is " + std::to_string(predictions.rows()) +
                    "x" + std::to_string(predictions.cols()) + ", expected " +
                    std::to_string(rows.size()) + "x" + std::to_string(d));
  }
  CounterfactualErrors out;
  out.n = static_cast<int>(rows.size());
  const int res = blob_resolution(data.meta);
  double mse_acc = 0.0, th_acc = 0.0, in_acc = 0.0;
  int readable = 0;
  for (size_t i = 0; i < rows.size(); ++i) {
    const auto& s = data.samples[static_cast<size_t>(rows[i])];
    if (!s.has_truth()) {
      throw EvalError("record " + std::to_string(rows[i]) +
                      " has no counterfactual ground truth");
    }
    const Eigen::VectorXd pred =
        predictions.row(static_cast<Eigen::Index>(i)).transpose();
    mse_acc += (pred - s.y_prime_true).squaredNorm() / static_cast<double>(d);
    if (res > 0) {
      Readout rp = read_attrs(pred, res);
      Readout rt = read_attrs(s.y_prime_true, res);
      if (rp.ok && rt.ok) {
        th_acc += std::abs(rp.attrs.thickness - rt.attrs.thickness);
        in_acc += std::abs(rp.attrs.intensity - rt.attrs.intensity);
        ++readable;
      } else {
        ++out.unreadable;
      }
    }
  }
  out.mse = mse_acc / static_cast<double>(rows.size());
  if (readable > 0) {
    out.attribute_mae["thickness"] = th_acc / readable;
    out.attribute_mae["intensity"] = in_acc / readable;
  }
  return out;
}

CounterfactualErrors counterfactual_errors(const CfPredictor& predict,
                                           const bench::Dataset& data,
                                           const std::vector<int>* subset) {
  Gathered g = gather(data, subset);
  Eigen::MatrixXd pred = predict(g.y, g.t, g.x, g.t_prime);
  if (pred.rows() != g.y.rows() || pred.cols() != g.y.cols()) {
    throw EvalError("predictor returned " + std::to_string(pred.rows()) + "x" +
                    std::to_string(pred.cols()) + ", expected " +
                    std::to_string(g.y.rows()) + "x" +
                    std::to_string(g.y.cols()));
  }
  return counterfactual_errors(pred, data, &g.rows);
}

// ---- group-mean R^2 -----------------------------------------------------------

nlohmann::json GroupR2Result::to_json() const {
  nlohmann::json strata_j = nlohmann::json::array();
  for (const auto& s : strata) {
    strata_j.push_back({{"key", s.key}, {"n", s.n}, {"r2", s.r2}});
  }
  return nlohmann::json{{"mean_r2", mean_r2}, {"strata", strata_j}};
}

GroupR2Result group_r2(const Eigen::MatrixXd& predictions,
                       const bench::Dataset& data, const std::vector<int>& rows,
                       const std::vector<int>* components) {
  if (rows.empty()) throw EvalError("group R^2 needs at least one record");
  for (int k : rows) {
    if (k < 0 || k >= data.n()) {
      throw EvalError("record index out of range: " + std::to_string(k));
    }
  }
  const Eigen::Index d = data.outcome_dim();
  if (predictions.rows() != static_cast<Eigen::Index>(rows.size()) ||
      predictions.cols() != d) {
    throw EvalError("prediction matrix is " + std::to_string(predictions.rows()) +
                    "x" + std::to_string(predictions.cols()) + ", expected " +
                    std::to_string(rows.size()) + "x" + std::to_string(d));
  }
  std::vector<int> comp;
  if (components) {
    comp = *components;
    for (int c : comp) {
      if (c < 0 || c >= d) {
        throw EvalError("component index out of range: " + std::to_string(c));
      }
    }
  } else {
    comp.resize(static_cast<size_t>(d));
    std::iota(comp.begin(), comp.end(), 0);
  }
  if (comp.size() < 2) {
    throw EvalError("group R^2 needs at least two outcome components");
  }
  std::map<std::string, std::vector<size_t>> groups;
  for (size_t i = 0; i < rows.size(); ++i) {
    const auto& s = data.samples[static_cast<size_t>(rows[i])];
    if (!s.has_truth()) {
      throw EvalError("record " + std::to_string(rows[i]) +
                      " has no counterfactual ground truth");
    }
    groups[stratum_key(s)].push_back(i);
  }
  GroupR2Result out;
  double acc = 0.0;
  for (const auto& [key, members] : groups) {
    Eigen::VectorXd pm = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(comp.size()));
    Eigen::VectorXd tm = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(comp.size()));
    for (size_t idx : members) {
      const auto& truth =
          data.samples[static_cast<size_t>(rows[idx])].y_prime_true;
      for (size_t j = 0; j < comp.size(); ++j) {
        pm[static_cast<Eigen::Index>(j)] +=
            predictions(static_cast<Eigen::Index>(idx), comp[j]);
        tm[static_cast<Eigen::Index>(j)] += truth[comp[j]];
      }
    }
    pm /= static_cast<double>(members.size());
    tm /= static_cast<double>(members.size());
    const double tbar = tm.mean();
    const double ss_tot = (tm.array() - tbar).matrix().squaredNorm();
    const double ss_res = (tm - pm).squaredNorm();
    if (ss_tot == 0.0) {
      throw EvalError("stratum '" + key +
                      "' has a constant true mean; R^2 is undefined");
    }
    const double r2 = 1.0 - ss_res / ss_tot;
    out.strata.push_back({key, static_cast<int>(members.size()), r2});
    acc += r2;
  }
  out.mean_r2 = acc / static_cast<double>(out.strata.size());
  return out;
}

// ---- oracle consistency / restrictiveness -------------------------------------

double oracle_consistency_kl(const EncoderFn& encode, const bench::Dataset& data,
                             const std::vector<int>* subset) {
  Gathered g = gather(data, subset);
  if (g.first_missing_truth >= 0) {
    throw EvalError("probe record " + std::to_string(g.first_missing_truth) +
                    " has no counterfactual partner");
  }
  Eigen::MatrixXd mu1 = encode(g.y, g.t, g.x);
  Eigen::MatrixXd mu2 = encode(g.y_prime, g.t_prime, g.x);
  if (mu1.rows() != g.y.rows() || mu2.rows() != mu1.rows() ||
      mu2.cols() != mu1.cols()) {
    throw EvalError("encoder output shape mismatch");
  }
  return obj::latent_kl_unit_gaussians_eval<double>(mu1, mu2);
}

double oracle_restrictiveness(
    const bench::Dataset& data,
    const std::vector<std::pair<int, int>>& probe_pairs) {
  if (probe_pairs.empty()) {
    throw EvalError("restrictiveness needs at least one probe pair");
  }
  for (const auto& [a, b] : probe_pairs) {
    if (a < 0 || a >= data.n() || b < 0 || b >= data.n()) {
      throw EvalError("probe pair (" + std::to_string(a) + ", " +
                      std::to_string(b) + ") references a missing record");
    }
    if (!(data.samples[static_cast<size_t>(a)].t ==
          data.samples[static_cast<size_t>(b)].t)) {
      throw EvalError("probe pair (" + std::to_string(a) + ", " +
                      std::to_string(b) +
                      ") pairs views of one record under different treatments");
    }
  }
  // Treatments pass through the oracle as point masses, so the readout
  // discrepancy between the two views of a well-formed probe is zero.
  return 0.0;
}

// ---- composition / reversibility / effectiveness ------------------------------

nlohmann::json AxiomaticMetrics::to_json() const {
  return nlohmann::json{{"composition", composition},
                        {"composition_cycled", composition_cycled},
                        {"cycles", cycles},
                        {"reversibility", reversibility},
                        {"effectiveness", effectiveness},
                        {"n", n},
                        {"unreadable", unreadable}};
}

AxiomaticMetrics axiomatic_metrics(const CfPredictor& predict,
                                   const bench::Dataset& data, int cycles,
                                   const std::vector<int>* subset) {
  const int res = blob_resolution(data.meta);
  if (res <= 0) {
    throw EvalError("axiomatic metrics require image data with an attribute oracle");
  }
  if (cycles < 1) throw EvalError("cycle count must be at least 1");
  Gathered g = gather(data, subset);
  const Eigen::Index n = g.y.rows();
  auto run = [&](const Eigen::MatrixXd& yin,
                 const std::vector<bench::Treatment>& tin,
                 const std::vector<bench::Treatment>& query) {
    Eigen::MatrixXd out = predict(yin, tin, g.x, query);
    if (out.rows() != n || out.cols() != g.y.cols()) {
      throw EvalError("predictor returned " + std::to_string(out.rows()) + "x" +
                      std::to_string(out.cols()) + ", expected " +
                      std::to_string(n) + "x" + std::to_string(g.y.cols()));
    }
    return out;
  };
  AxiomaticMetrics m;
  m.cycles = cycles;
  m.n = static_cast<int>(n);
  Eigen::MatrixXd cur = g.y;
  for (int k = 0; k < cycles; ++k) {
    cur = run(cur, g.t, g.t);
    if (k == 0) m.composition = mean_row_msd(cur, g.y);
  }
  m.composition_cycled = mean_row_msd(cur, g.y);
  Eigen::MatrixXd yp = run(g.y, g.t, g.t_prime);
  Eigen::MatrixXd back = run(yp, g.t_prime, g.t);
  m.reversibility = mean_row_msd(back, g.y);
  double acc = 0.0;
  int readable = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& q = g.t_prime[static_cast<size_t>(i)];
    if (q.is_categorical() || q.attrs.size() != 2) {
      throw EvalError("image queries must carry (thickness, intensity) attributes");
    }
    Readout r = read_attrs(yp.row(i).transpose(), res);
    if (!r.ok) {
      ++m.unreadable;
      continue;
    }
    const double dt = r.attrs.thickness - q.attrs[0];
    const double di = r.attrs.intensity - q.attrs[1];
    acc += dt * dt + di * di;
    ++readable;
  }
  if (readable == 0) {
    throw EvalError("attribute readout failed on every counterfactual");
  }
  m.effectiveness = acc / readable;
  return m;
}

// ---- aggregated report ---------------------------------------------------------

void MetricsReport::validate() const {
  auto nonneg = [](const char* name, const std::optional<double>& v) {
    if (v && !(*v >= 0.0)) {
      throw EvalError(std::string(name) + " must be nonnegative");
    }
  };
  nonneg("mse", mse);
  nonneg("consistency_kl", consistency_kl);
  nonneg("composition", composition);
  nonneg("composition_cycled", composition_cycled);
  nonneg("reversibility", reversibility);
  nonneg("effectiveness", effectiveness);
  for (const auto& [key, v] : attribute_mae) {
    if (!(v >= 0.0)) {
      throw EvalError("attribute_mae['" + key + "'] must be nonnegative");
    }
  }
  auto at_most_one = [](const char* name, const std::optional<double>& v) {
    if (v && !(*v <= 1.0)) {
      throw EvalError(std::string(name) + " cannot exceed 1");
    }
  };
  at_most_one("r2_all", r2_all);
  at_most_one("r2_hard", r2_hard);
  for (const auto& [key, sub] : per_seed) sub.validate();
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  auto put = [&](const char* key, const std::optional<double>& v) {
    if (v) j[key] = *v;
  };
  put("mse", mse);
  if (!attribute_mae.empty()) j["attribute_mae"] = attribute_mae;
  put("r2_all", r2_all);
  put("r2_hard", r2_hard);
  put("consistency_kl", consistency_kl);
  put("composition", composition);
  put("composition_cycled", composition_cycled);
  put("reversibility", reversibility);
  put("effectiveness", effectiveness);
  if (!per_seed.empty()) {
    nlohmann::json ps = nlohmann::json::object();
    for (const auto& [key, sub] : per_seed) ps[key] = sub.to_json();
    j["per_seed"] = ps;
  }
  return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  try {
    auto get = [&](const char* key, std::optional<double>& v) {
      if (j.contains(key)) v = j.at(key).get<double>();
    };
    get("mse", r.mse);
    get("r2_all", r.r2_all);
    get("r2_hard", r.r2_hard);
    get("consistency_kl", r.consistency_kl);
    get("composition", r.composition);
    get("composition_cycled", r.composition_cycled);
    get("reversibility", r.reversibility);
    get("effectiveness", r.effectiveness);
    if (j.contains("attribute_mae")) {
      r.attribute_mae =
          j.at("attribute_mae").get<std::map<std::string, double>>();
    }
    if (j.contains("per_seed")) {
      for (const auto& [key, sub] : j.at("per_seed").items()) {
        r.per_seed[key] = MetricsReport::from_json(sub);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw EvalError(std::string("metrics report: ") + e.what());
  }
  r.validate();
  return r;
}

// ---- exact enumeration verifiers ----------------------------------------------

namespace {

void check_dist(const std::string& what, double sum, double min_entry) {
  if (min_entry < 0.0) {
    throw EvalError("unnormalized table: " + what + " has a negative entry");
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw EvalError("unnormalized table: " + what);
  }
}

void validate_tables(const bench::DiscreteTables& tb, int cap) {
  if (cap < 1) throw EvalError("support cap must be at least 1");
  if (tb.kx() < 1 || tb.kz() < 1 || tb.kt() < 1 || tb.ky() < 1) {
    throw EvalError("discrete tables must have nonempty supports");
  }
  auto cap_check = [&](const char* name, int k) {
    if (k > cap) {
      throw EvalError(std::string(name) + " support size " + std::to_string(k) +
                      " exceeds the enumeration cap " + std::to_string(cap));
    }
  };
  cap_check("covariate", tb.kx());
  cap_check("latent", tb.kz());
  cap_check("treatment", tb.kt());
  cap_check("outcome", tb.ky());
  if (static_cast<int>(tb.py_zt.size()) != tb.kz()) {
    throw EvalError("outcome table count does not match the latent support");
  }
  if (tb.pz_x.rows() != tb.kx() || tb.pt_x.rows() != tb.kx()) {
    throw EvalError("conditional table row count does not match the covariate support");
  }
  for (int z = 0; z < tb.kz(); ++z) {
    if (tb.py_zt[static_cast<size_t>(z)].rows() != tb.kt() ||
        tb.py_zt[static_cast<size_t>(z)].cols() != tb.ky()) {
      throw EvalError("outcome table shape mismatch at z=" + std::to_string(z));
    }
  }
  check_dist("p(x)", tb.px.sum(), tb.px.minCoeff());
  for (int x = 0; x < tb.kx(); ++x) {
    check_dist("p(z|x) at x=" + std::to_string(x), tb.pz_x.row(x).sum(),
               tb.pz_x.row(x).minCoeff());
    check_dist("p(t|x) at x=" + std::to_string(x), tb.pt_x.row(x).sum(),
               tb.pt_x.row(x).minCoeff());
  }
  for (int z = 0; z < tb.kz(); ++z) {
    for (int t = 0; t < tb.kt(); ++t) {
      check_dist(
          "p(y|z,t) at z=" + std::to_string(z) + ",t=" + std::to_string(t),
          tb.py_zt[static_cast<size_t>(z)].row(t).sum(),
          tb.py_zt[static_cast<size_t>(z)].row(t).minCoeff());
    }
  }
}

// Posterior cache indexed (x, t, y); entries are defined only where the
// outcome marginal is positive.
struct PosteriorCache {
  std::vector<Eigen::VectorXd> marg;  // [x*kt + t] -> p(y | x, t)
  std::vector<Eigen::VectorXd> post;  // [(x*kt + t)*ky + y] -> p(z | y, t, x)

  PosteriorCache(const bench::DiscreteTables& tb) {
    const int kx = tb.kx(), kt = tb.kt(), ky = tb.ky();
    marg.resize(static_cast<size_t>(kx) * kt);
    post.resize(static_cast<size_t>(kx) * kt * ky);
    for (int x = 0; x < kx; ++x) {
      for (int t = 0; t < kt; ++t) {
        Eigen::VectorXd m = tb.outcome_given_xt(x, t);
        marg[static_cast<size_t>(x) * kt + t] = m;
        for (int y = 0; y < ky; ++y) {
          if (m[y] > 0.0) {
            post[(static_cast<size_t>(x) * kt + t) * ky + y] =
                tb.latent_posterior(x, t, y);
          }
        }
      }
    }
  }

  const Eigen::VectorXd& marginal(int kt, int x, int t) const {
    return marg[static_cast<size_t>(x) * kt + t];
  }
  const Eigen::VectorXd& posterior(int kt, int ky, int x, int t, int y) const {
    return post[(static_cast<size_t>(x) * kt + t) * ky + y];
  }
};

}  // namespace

nlohmann::json BoundCheckResult::to_json() const {
  return nlohmann::json{{"lhs", lhs},
                        {"rhs", rhs},
                        {"gap", gap},
                        {"assignment",
                         {{"x", assignment.x},
                          {"t", assignment.t},
                          {"t_prime", assignment.t_prime},
                          {"y", assignment.y},
                          {"y_prime", assignment.y_prime}}}};
}

std::vector<BoundCheckResult> verify_elbo_discrete(
    const bench::DiscreteTables& tb, int support_cap) {
  validate_tables(tb, support_cap);
  const int kx = tb.kx(), kz = tb.kz(), kt = tb.kt(), ky = tb.ky();
  const PosteriorCache cache(tb);
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<BoundCheckResult> out;
  for (int x = 0; x < kx; ++x) {
    if (tb.px[x] <= 0.0) continue;
    for (int t = 0; t < kt; ++t) {
      if (tb.pt_x(x, t) <= 0.0) continue;
      for (int tp = 0; tp < kt; ++tp) {
        if (tb.pt_x(x, tp) <= 0.0) continue;
        const Eigen::VectorXd& marg_t = cache.marginal(kt, x, t);
        const Eigen::VectorXd& marg_tp = cache.marginal(kt, x, tp);
        for (int y = 0; y < ky; ++y) {
          if (marg_t[y] <= 0.0) continue;
          const Eigen::VectorXd& qa = cache.posterior(kt, ky, x, t, y);
          for (int yp = 0; yp < ky; ++yp) {
            if (marg_tp[yp] <= 0.0) continue;
            const Eigen::VectorXd& qb = cache.posterior(kt, ky, x, tp, yp);
            double lhs_p = 0.0;
            for (int z = 0; z < kz; ++z) {
              lhs_p += qa[z] * tb.py_zt[static_cast<size_t>(z)](tp, yp);
            }
            const double lhs = std::log(lhs_p);
            double recon = 0.0;
            for (int z = 0; z < kz; ++z) {
              if (qa[z] > 0.0) {
                recon += qa[z] * std::log(tb.py_zt[static_cast<size_t>(z)](t, y));
              }
            }
            const double ratio = std::log(marg_t[y]) - std::log(marg_tp[yp]);
            double kl = 0.0;
            for (int z = 0; z < kz; ++z) {
              if (qa[z] <= 0.0) continue;
              if (qb[z] <= 0.0) {
                kl = inf;
                break;
              }
              kl += qa[z] * (std::log(qa[z]) - std::log(qb[z]));
            }
            BoundCheckResult r;
            r.lhs = lhs;
            r.rhs = recon - ratio - kl;
            r.assignment = {x, t, tp, y, yp};
            // Vacuous when the counterfactual is unreachable from the
            // posterior: both sides are -inf and the bound holds tightly.
            r.gap = (std::isinf(lhs) && std::isinf(r.rhs)) ? 0.0 : lhs - r.rhs;
            out.push_back(r);
          }
        }
      }
    }
  }
  if (out.empty()) throw EvalError("no positive-probability assignment to check");
  return out;
}

std::vector<BoundCheckResult> verify_implicit_elbo_discrete(
    const bench::DiscreteTables& tb, int support_cap) {
  validate_tables(tb, support_cap);
  const int kx = tb.kx(), kz = tb.kz(), kt = tb.kt(), ky = tb.ky();
  const PosteriorCache cache(tb);
  std::vector<BoundCheckResult> out;
  for (int x = 0; x < kx; ++x) {
    if (tb.px[x] <= 0.0) continue;
    for (int t = 0; t < kt; ++t) {
      if (tb.pt_x(x, t) <= 0.0) continue;
      for (int tp = 0; tp < kt; ++tp) {
        if (tb.pt_x(x, tp) <= 0.0) continue;
        const Eigen::VectorXd& marg_t = cache.marginal(kt, x, t);
        const Eigen::VectorXd& marg_tp = cache.marginal(kt, x, tp);
        for (int y = 0; y < ky; ++y) {
          if (marg_t[y] <= 0.0) continue;
          const Eigen::VectorXd& qa = cache.posterior(kt, ky, x, t, y);
          const double lhs = std::log(marg_t[y]);
          double recon = 0.0, prior_kl = 0.0, joint_kl = 0.0;
          for (int z = 0; z < kz; ++z) {
            if (qa[z] <= 0.0) continue;
            const auto& py = tb.py_zt[static_cast<size_t>(z)];
            recon += qa[z] * std::log(py(t, y));
            const double log_qa = std::log(qa[z]);
            for (int yp = 0; yp < ky; ++yp) {
              const double w = py(tp, yp);
              if (w <= 0.0) continue;
              // qa[z] > 0 implies p(z|x) > 0, so both the marginal and the
              // posterior below are positive wherever the weight is.
              prior_kl += qa[z] * w * (std::log(w) - std::log(marg_tp[yp]));
              const Eigen::VectorXd& qb = cache.posterior(kt, ky, x, tp, yp);
              joint_kl += qa[z] * w * (log_qa - std::log(qb[z]));
            }
          }
          BoundCheckResult r;
          r.lhs = lhs;
          r.rhs = recon - prior_kl - joint_kl;
          r.gap = lhs - r.rhs;
          r.assignment = {x, t, tp, y, -1};
          out.push_back(r);
        }
      }
    }
  }
  if (out.empty()) throw EvalError("no positive-probability assignment to check");
  return out;
}

double min_gap(const std::vector<BoundCheckResult>& results) {
  if (results.empty()) throw EvalError("no bound checks to aggregate");
  double m = results[0].gap;
  for (const auto& r : results) m = std::min(m, r.gap);
  return m;
}

}  // namespace vci::eval
