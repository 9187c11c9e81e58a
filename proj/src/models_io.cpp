#include "vci/models_data.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace vci::models {

namespace {

std::string x_name(const std::vector<int>& x) {
  std::ostringstream os;
  os << "x=[";
  for (size_t i = 0; i < x.size(); ++i) os << (i ? "," : "") << x[i];
  os << "]";
  return os.str();
}

std::string cell_name(const std::vector<int>& x, int t_level) {
  return x_name(x) + ", t=" + std::to_string(t_level);
}

std::vector<int> effective_cards(const bench::ScmSpec& s) {
  if (s.family == bench::Family::discrete) return {s.cards_x};
  return s.covariate_cards;
}

}  // namespace

// ---- DataShape -----------------------------------------------------------------

DataShape DataShape::from_meta(const nlohmann::json& meta) {
  DataShape s;
  try {
    s.outcome_dim = meta.at("outcome_dim").get<int>();
    s.covariate_cards = meta.at("covariate_cards").get<std::vector<int>>();
    const auto& t = meta.at("treatment");
    std::string kind = t.at("kind").get<std::string>();
    if (kind == "categorical") {
      s.categorical_treatment = true;
      s.treatment_levels = t.at("levels").get<int>();
    } else if (kind == "continuous") {
      s.categorical_treatment = false;
      for (const auto& r : t.at("ranges")) {
        s.t_lo.push_back(r.at(0).get<double>());
        s.t_hi.push_back(r.at(1).get<double>());
      }
    } else {
      throw ModelError("unknown treatment kind '" + kind + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ModelError(std::string("dataset metadata is missing model shape: ") +
                     e.what());
  }
  return s;
}

nlohmann::json data_shape_to_json(const DataShape& s) {
  nlohmann::json j;
  j["outcome_dim"] = s.outcome_dim;
  j["covariate_cards"] = s.covariate_cards;
  if (s.categorical_treatment) {
    j["treatment"] = {{"kind", "categorical"}, {"levels", s.treatment_levels}};
  } else {
    nlohmann::json ranges = nlohmann::json::array();
    for (size_t a = 0; a < s.t_lo.size(); ++a) {
      ranges.push_back({s.t_lo[a], s.t_hi[a]});
    }
    j["treatment"] = {{"kind", "continuous"}, {"ranges", ranges}};
  }
  return j;
}

DataShape data_shape_from_json(const nlohmann::json& j) {
  return DataShape::from_meta(j);
}

nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"latent_dim", c.latent_dim},
          {"hidden_width", c.hidden_width},
          {"enc_depth", c.enc_depth},
          {"dec_depth", c.dec_depth},
          {"disc_depth", c.disc_depth},
          {"disc_width", c.disc_width},
          {"t_embed_dim", c.t_embed_dim},
          {"x_embed_dim", c.x_embed_dim},
          {"n_freq", c.n_freq},
          {"learn_sigma", c.learn_sigma},
          {"leaky_slope", c.leaky_slope},
          {"init_seed", c.init_seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  auto get = [&](const char* key, auto& into) {
    if (j.contains(key)) into = j.at(key).get<std::decay_t<decltype(into)>>();
  };
  get("latent_dim", c.latent_dim);
  get("hidden_width", c.hidden_width);
  get("enc_depth", c.enc_depth);
  get("dec_depth", c.dec_depth);
  get("disc_depth", c.disc_depth);
  get("disc_width", c.disc_width);
  get("t_embed_dim", c.t_embed_dim);
  get("x_embed_dim", c.x_embed_dim);
  get("n_freq", c.n_freq);
  get("learn_sigma", c.learn_sigma);
  get("leaky_slope", c.leaky_slope);
  get("init_seed", c.init_seed);
  return c;
}

// ---- EmpiricalOutcomeModel -------------------------------------------------------

std::vector<int> EmpiricalOutcomeModel::key(const std::vector<int>& x,
                                            int t_level) {
  std::vector<int> k = x;
  k.push_back(t_level);
  return k;
}

EmpiricalOutcomeModel EmpiricalOutcomeModel::fit(const bench::Dataset& data,
                                                 double bandwidth_scale,
                                                 double var_floor) {
  if (data.samples.empty()) {
    throw bench::DataError("cannot fit an outcome model on an empty dataset");
  }
  EmpiricalOutcomeModel m;
  m.var_floor_ = var_floor;
  m.outcome_dim_ = static_cast<int>(data.samples[0].y.size());

  // Two passes: exact means first, then centered second moments, so the
  // stratum statistics do not depend on accumulation order tricks.
  for (const auto& s : data.samples) {
    if (!s.t.is_categorical()) {
      throw bench::DataError(
          "empirical outcome model requires categorical treatments");
    }
    auto k = key(s.x, s.t.level);
    auto& st = m.strata_[k];
    if (st.count == 0) {
      st.mean = Eigen::VectorXd::Zero(m.outcome_dim_);
      st.var = Eigen::VectorXd::Zero(m.outcome_dim_);
    }
    st.mean += s.y;
    st.count += 1;
    m.treatment_levels_ = std::max(m.treatment_levels_, s.t.level + 1);

    auto& tc = m.t_counts_[s.x];
    if (static_cast<size_t>(s.t_prime.level) >= tc.size()) {
      tc.resize(static_cast<size_t>(s.t_prime.level) + 1, 0.0);
    }
    tc[static_cast<size_t>(s.t_prime.level)] += 1.0;
  }
  for (auto& [k, st] : m.strata_) st.mean /= static_cast<double>(st.count);
  for (const auto& s : data.samples) {
    auto& st = m.strata_[key(s.x, s.t.level)];
    st.var += (s.y - st.mean).cwiseAbs2();
  }
  Eigen::VectorXd pooled_mean = Eigen::VectorXd::Zero(m.outcome_dim_);
  for (const auto& s : data.samples) pooled_mean += s.y;
  pooled_mean /= static_cast<double>(data.samples.size());
  double pooled_var = 0.0;
  for (const auto& s : data.samples) {
    pooled_var += (s.y - pooled_mean).squaredNorm();
  }
  pooled_var /= static_cast<double>(data.samples.size()) * m.outcome_dim_;

  for (auto& [k, st] : m.strata_) {
    st.var /= static_cast<double>(st.count);
    st.var = st.var.cwiseMax(var_floor);
  }
  m.bandwidth_ = bandwidth_scale * std::sqrt(pooled_var);
  return m;
}

bool EmpiricalOutcomeModel::has_stratum(const std::vector<int>& x,
                                        int t_level) const {
  return strata_.count(key(x, t_level)) > 0;
}

const EmpiricalOutcomeModel::Stratum& EmpiricalOutcomeModel::stratum(
    const std::vector<int>& x, int t_level) const {
  auto it = strata_.find(key(x, t_level));
  if (it == strata_.end()) {
    throw bench::DataError("empirical outcome model has no stratum for " +
                           cell_name(x, t_level));
  }
  return it->second;
}

double EmpiricalOutcomeModel::log_lik(const Eigen::VectorXd& y,
                                      const std::vector<int>& x,
                                      int t_level) const {
  const Stratum& st = stratum(x, t_level);
  if (y.size() != st.mean.size()) {
    throw bench::DataError("outcome dimension mismatch in log_lik");
  }
  const double h2 = bandwidth_ * bandwidth_;
  double ll = 0.0;
  for (Eigen::Index j = 0; j < y.size(); ++j) {
    double v = st.var[j] + h2;
    double d = y[j] - st.mean[j];
    ll += -0.5 * std::log(2.0 * std::numbers::pi * v) - 0.5 * d * d / v;
  }
  return ll;
}

nlohmann::json EmpiricalOutcomeModel::to_json() const {
  nlohmann::json j;
  j["bandwidth"] = bandwidth_;
  j["var_floor"] = var_floor_;
  j["outcome_dim"] = outcome_dim_;
  j["treatment_levels"] = treatment_levels_;
  nlohmann::json strata = nlohmann::json::array();
  for (const auto& [k, st] : strata_) {
    std::vector<double> mean(st.mean.data(), st.mean.data() + st.mean.size());
    std::vector<double> var(st.var.data(), st.var.data() + st.var.size());
    strata.push_back({{"key", k},
                      {"count", st.count},
                      {"mean", mean},
                      {"var", var}});
  }
  j["strata"] = std::move(strata);
  nlohmann::json tc = nlohmann::json::array();
  for (const auto& [x, counts] : t_counts_) {
    tc.push_back({{"x", x}, {"counts", counts}});
  }
  j["t_prime_counts"] = std::move(tc);
  return j;
}

EmpiricalOutcomeModel EmpiricalOutcomeModel::from_json(
    const nlohmann::json& j) {
  EmpiricalOutcomeModel m;
  m.bandwidth_ = j.at("bandwidth").get<double>();
  m.var_floor_ = j.at("var_floor").get<double>();
  m.outcome_dim_ = j.at("outcome_dim").get<int>();
  m.treatment_levels_ = j.at("treatment_levels").get<int>();
  for (const auto& s : j.at("strata")) {
    Stratum st;
    st.count = s.at("count").get<long>();
    auto mean = s.at("mean").get<std::vector<double>>();
    auto var = s.at("var").get<std::vector<double>>();
    st.mean = Eigen::Map<Eigen::VectorXd>(mean.data(),
                                          static_cast<Eigen::Index>(mean.size()));
    st.var = Eigen::Map<Eigen::VectorXd>(var.data(),
                                         static_cast<Eigen::Index>(var.size()));
    m.strata_[s.at("key").get<std::vector<int>>()] = std::move(st);
  }
  for (const auto& e : j.at("t_prime_counts")) {
    m.t_counts_[e.at("x").get<std::vector<int>>()] =
        e.at("counts").get<std::vector<double>>();
  }
  return m;
}

// ---- PropensityModel ---------------------------------------------------------------

PropensityModel PropensityModel::fit(const bench::Dataset& data, int levels,
                                     double lambda, double eps_pos) {
  if (levels < 1) throw bench::DataError("propensity: levels must be >= 1");
  PropensityModel m;
  m.levels_ = levels;
  m.lambda_ = lambda;
  m.eps_pos_ = eps_pos;
  std::map<std::vector<int>, std::vector<long>> counts;
  for (const auto& s : data.samples) {
    if (!s.t.is_categorical()) {
      throw bench::DataError("propensity model requires categorical treatments");
    }
    if (s.t.level < 0 || s.t.level >= levels) {
      throw bench::DataError("treatment level out of range in propensity fit");
    }
    auto& row = counts[s.x];
    if (row.empty()) row.assign(static_cast<size_t>(levels), 0);
    row[static_cast<size_t>(s.t.level)] += 1;
  }
  for (const auto& [x, row] : counts) {
    long total = 0;
    for (long c : row) total += c;
    std::vector<double> p(static_cast<size_t>(levels));
    double denom = static_cast<double>(total) + lambda * levels;
    double sum = 0.0;
    for (int l = 0; l < levels; ++l) {
      p[static_cast<size_t>(l)] =
          std::max((static_cast<double>(row[static_cast<size_t>(l)]) + lambda) /
                       denom,
                   eps_pos);
      sum += p[static_cast<size_t>(l)];
    }
    for (auto& v : p) v /= sum;
    m.table_[x] = std::move(p);
  }
  return m;
}

PropensityModel PropensityModel::exact(const bench::Scm& scm) {
  if (!scm.categorical_treatment()) {
    throw bench::SpecError(
        "exact propensity is defined only for categorical treatments");
  }
  PropensityModel m;
  m.levels_ = scm.treatment_levels();
  m.lambda_ = 0.0;
  m.eps_pos_ = 0.0;
  std::vector<int> cards = effective_cards(scm.spec());
  std::vector<int> x(cards.size(), 0);
  while (true) {
    m.table_[x] = scm.true_propensity(x);
    size_t slot = 0;
    for (; slot < cards.size(); ++slot) {
      if (++x[slot] < cards[slot]) break;
      x[slot] = 0;
    }
    if (slot == cards.size()) break;
  }
  return m;
}

const std::vector<double>& PropensityModel::row(
    const std::vector<int>& x) const {
  auto it = table_.find(x);
  if (it == table_.end()) {
    throw bench::DataError("propensity model has no cell for " + x_name(x));
  }
  return it->second;
}

double PropensityModel::prob(const std::vector<int>& x, int t_level) const {
  const auto& r = row(x);
  if (t_level < 0 || t_level >= static_cast<int>(r.size())) {
    throw bench::DataError("propensity: treatment level out of range");
  }
  return r[static_cast<size_t>(t_level)];
}

nlohmann::json PropensityModel::to_json() const {
  nlohmann::json j;
  j["levels"] = levels_;
  j["lambda"] = lambda_;
  j["eps_pos"] = eps_pos_;
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& [x, p] : table_) {
    cells.push_back({{"x", x}, {"p", p}});
  }
  j["cells"] = std::move(cells);
  return j;
}

PropensityModel PropensityModel::from_json(const nlohmann::json& j) {
  PropensityModel m;
  m.levels_ = j.at("levels").get<int>();
  m.lambda_ = j.at("lambda").get<double>();
  m.eps_pos_ = j.at("eps_pos").get<double>();
  for (const auto& c : j.at("cells")) {
    m.table_[c.at("x").get<std::vector<int>>()] =
        c.at("p").get<std::vector<double>>();
  }
  return m;
}

}  // namespace vci::models
