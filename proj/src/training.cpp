#include "vci/training.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <thread>

#include "vci/checkpoint.hpp"
#include "vci/nn.hpp"
#include "vci/rng.hpp"

namespace vci::train {

namespace {

namespace fs = std::filesystem;
using core::Mat;
using models::CovariateBatch;
using models::TreatmentBatch;

// RNG channels off the master seed. Every random choice a run makes comes
// from one of these, keyed by epoch where it matters, so a rerun with the
// same seed replays the exact same draws.
enum Stream : std::uint64_t {
  kSplit = 0,
  kInit = 1,
  kShuffle = 2,
  kNoise = 3,
  kQuery = 4,
  kValQuery = 5,
};

std::uint64_t stream_seed(std::uint64_t master, std::uint64_t channel,
                          std::uint64_t epoch) {
  return core::substream_seed(core::substream_seed(master, channel), epoch);
}

// Explicit Fisher-Yates so shuffles do not depend on the standard library's
// std::shuffle implementation.
void fisher_yates(std::vector<int>& v, core::Engine& eng) {
  for (size_t i = v.size(); i > 1; --i) {
    size_t j = static_cast<size_t>(eng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string utc_now() {
  auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text(const std::string& path, const std::string& body) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw TrainError("cannot open '" + path + "' for writing");
  f << body;
  f.close();
  if (!f) throw TrainError("failed writing '" + path + "'");
}

// Per-stratum law of the factual treatment in the training split. Queries
// are drawn from it so that, in empirical mode, every (x, t') a batch asks
// about has a fitted density stratum behind it.
struct QueryLaw {
  bool categorical = true;
  std::map<std::vector<int>, std::vector<double>> by_x;
  std::vector<double> marginal;
  std::vector<double> lo, hi;

  static QueryLaw from_train(const bench::Dataset& data,
                             const std::vector<int>& train,
                             const models::DataShape& shape) {
    QueryLaw law;
    law.categorical = shape.categorical_treatment;
    if (!law.categorical) {
      law.lo = shape.t_lo;
      law.hi = shape.t_hi;
      return law;
    }
    const size_t levels = static_cast<size_t>(shape.treatment_levels);
    law.marginal.assign(levels, 0.0);
    for (int i : train) {
      const auto& s = data.samples[static_cast<size_t>(i)];
      if (!s.t.is_categorical() ||
          s.t.level >= shape.treatment_levels) {
        throw TrainError("record treatment lies outside the declared levels");
      }
      auto& c = law.by_x[s.x];
      if (c.empty()) c.assign(levels, 0.0);
      c[static_cast<size_t>(s.t.level)] += 1.0;
      law.marginal[static_cast<size_t>(s.t.level)] += 1.0;
    }
    return law;
  }

  bench::Treatment draw(core::Engine& eng, const std::vector<int>& x) const {
    if (!categorical) {
      Eigen::VectorXd a(static_cast<Eigen::Index>(lo.size()));
      for (size_t k = 0; k < lo.size(); ++k) {
        a[static_cast<Eigen::Index>(k)] = core::draw_uniform(eng, lo[k], hi[k]);
      }
      return bench::Treatment::continuous(std::move(a));
    }
    auto it = by_x.find(x);
    const std::vector<double>& c = it != by_x.end() ? it->second : marginal;
    return bench::Treatment::categorical(core::draw_categorical(eng, c));
  }
};

struct Batch {
  Mat<float> y;
  TreatmentBatch<float> t;
  TreatmentBatch<float> t_query;
  CovariateBatch x;
  Mat<float> eps;
};

// Assembles rows order[lo..hi). Queries come from `fixed` (aligned with
// positions in `order`) when given, else are drawn from the law, else fall
// back to the records' own stored queries. eps is N(0,1) when a noise
// engine is given and zero otherwise.
Batch gather(const bench::Dataset& data, const std::vector<int>& order,
             size_t lo, size_t hi, int latent_dim, size_t n_slots,
             const QueryLaw* law, core::Engine* query_eng,
             core::Engine* noise_eng,
             const std::vector<bench::Treatment>* fixed) {
  const size_t n = hi - lo;
  const Eigen::Index d = data.outcome_dim();
  Batch b;
  b.y.resize(static_cast<Eigen::Index>(n), d);
  b.x.slots.resize(n_slots);
  std::vector<bench::Treatment> ts, tqs;
  ts.reserve(n);
  tqs.reserve(n);
  for (size_t k = lo; k < hi; ++k) {
    const auto& s = data.samples[static_cast<size_t>(order[k])];
    if (s.x.size() != n_slots) {
      throw TrainError("covariate vector length mismatch at record " +
                       std::to_string(order[k]));
    }
    b.y.row(static_cast<Eigen::Index>(k - lo)) =
        s.y.transpose().cast<float>();
    ts.push_back(s.t);
    for (size_t sl = 0; sl < n_slots; ++sl) {
      b.x.slots[sl].push_back(s.x[sl]);
    }
    if (fixed != nullptr) {
      tqs.push_back((*fixed)[k]);
    } else if (law != nullptr && query_eng != nullptr) {
      tqs.push_back(law->draw(*query_eng, s.x));
    } else {
      tqs.push_back(s.t_prime);
    }
  }
  b.t = TreatmentBatch<float>::from_samples(ts);
  b.t_query = TreatmentBatch<float>::from_samples(tqs);
  if (noise_eng != nullptr) {
    b.eps.resize(static_cast<Eigen::Index>(n), latent_dim);
    for (Eigen::Index i = 0; i < b.eps.rows(); ++i) {
      for (Eigen::Index j = 0; j < b.eps.cols(); ++j) {
        b.eps(i, j) = static_cast<float>(core::draw_normal(*noise_eng));
      }
    }
  } else {
    b.eps = Mat<float>::Zero(static_cast<Eigen::Index>(n), latent_dim);
  }
  return b;
}

struct Means {
  double recon = 0.0;
  double cf = 0.0;
  double kl = 0.0;
  double total = 0.0;
  size_t rows = 0;
};

// Forward-only objective on fixed rows with zero latent noise and fixed
// queries, so the number is comparable across epochs.
Means eval_objective(models::VciModel<float>& model,
                     models::VciModel<float>* target,
                     const bench::Dataset& data, const std::vector<int>& rows,
                     const std::vector<bench::Treatment>& queries,
                     const obj::VciLossConfig& ocfg, bool sae_mode,
                     const models::EmpiricalOutcomeModel* phat,
                     int latent_dim, size_t n_slots) {
  Means m;
  if (rows.empty()) return m;
  const size_t chunk = 512;
  for (size_t lo = 0; lo < rows.size(); lo += chunk) {
    size_t hi = std::min(rows.size(), lo + chunk);
    Batch b = gather(data, rows, lo, hi, latent_dim, n_slots, nullptr, nullptr,
                     nullptr, &queries);
    core::Tape<float> tp;
    models::BoundGenerator<float> bg;
    models::BoundDisc<float> bd;
    auto nodes =
        sae_mode
            ? obj::sae_loss<float>(tp, model, bg, b.y, b.t, b.t_query, b.x,
                                   b.eps, ocfg.weights.cf, ocfg.cf_term, phat,
                                   &bd)
            : obj::vci_loss<float>(tp, model, bg, target, b.y, b.t, b.t_query,
                                   b.x, b.eps, ocfg, phat, &bd);
    auto br = obj::breakdown(nodes);
    double bn = static_cast<double>(hi - lo);
    m.recon += br.recon * bn;
    m.cf += br.cf * bn;
    m.kl += br.kl * bn;
    m.total += br.total * bn;
    m.rows += hi - lo;
  }
  double r = static_cast<double>(m.rows);
  m.recon /= r;
  m.cf /= r;
  m.kl /= r;
  m.total /= r;
  return m;
}

}  // namespace

obj::CfTerm TrainConfig::resolved_cf_term(bool categorical_treatment) const {
  if (cf_term == "auto") {
    return categorical_treatment ? obj::CfTerm::empirical
                                 : obj::CfTerm::adversarial;
  }
  obj::CfTerm c = obj::cf_term_from_name(cf_term);
  if (c == obj::CfTerm::empirical && !categorical_treatment) {
    throw TrainError(
        "empirical counterfactual term requires categorical treatments");
  }
  return c;
}

void TrainConfig::validate() const {
  auto bad = [](const std::string& m) {
    throw TrainError("train config: " + m);
  };
  if (epochs < 1) bad("epochs must be positive");
  if (batch_size < 1) bad("batch size must be positive");
  // A zero learning rate is a legitimate freeze; only sign and NaN are bad.
  if (!(lr >= 0.0) || !(lr_disc >= 0.0)) {
    bad("learning rates must be nonnegative");
  }
  if (!(grad_clip > 0.0)) bad("gradient clip must be positive");
  if (eval_period < 1) bad("eval period must be positive");
  if (target_refresh_epochs < 1) bad("target refresh period must be positive");
  if (!(val_fraction >= 0.0 && val_fraction <= 0.9)) {
    bad("validation fraction must lie in [0, 0.9]");
  }
  if (!(bandwidth_scale > 0.0)) bad("bandwidth scale must be positive");
  if (lr_decay_step < 0) bad("lr decay step must be nonnegative");
  if (!(lr_decay_rate > 0.0 && lr_decay_rate <= 1.0)) {
    bad("lr decay rate must lie in (0, 1]");
  }
  if (cf_term != "auto" && cf_term != "empirical" && cf_term != "adversarial") {
    bad("unknown counterfactual term '" + cf_term + "'");
  }
  if (obj::ablation_uses_squared_error(mode) && omega_kl > 0.0) {
    bad("the squared-error ablation has no divergence term");
  }
  if (arch.latent_dim < 1 || arch.hidden_width < 1 || arch.t_embed_dim < 1 ||
      arch.disc_width < 1) {
    bad("architecture dimensions must be positive");
  }
  if (weight_decay < 0.0) bad("weight decay must be nonnegative");
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j;
  j["mode"] = obj::ablation_name(mode);
  j["omega_cf"] = omega_cf;
  j["omega_kl"] = omega_kl;
  j["cf_term"] = cf_term;
  j["detach"] = obj::detach_name(detach);
  j["target_refresh_epochs"] = target_refresh_epochs;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["lr"] = lr;
  j["lr_disc"] = lr_disc;
  j["weight_decay"] = weight_decay;
  j["lr_decay_step"] = lr_decay_step;
  j["lr_decay_rate"] = lr_decay_rate;
  j["grad_clip"] = grad_clip;
  j["seed"] = seed;
  j["eval_period"] = eval_period;
  j["val_fraction"] = val_fraction;
  j["learn_sigma"] = learn_sigma;
  j["bandwidth_scale"] = bandwidth_scale;
  j["arch"] = models::model_config_to_json(arch);
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.mode = obj::ablation_from_name(j.value("mode", std::string("vci")));
    c.omega_cf = j.value("omega_cf", c.omega_cf);
    c.omega_kl = j.value("omega_kl", c.omega_kl);
    c.cf_term = j.value("cf_term", c.cf_term);
    c.detach =
        obj::detach_from_name(j.value("detach", std::string("target_copy")));
    c.target_refresh_epochs =
        j.value("target_refresh_epochs", c.target_refresh_epochs);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.lr_disc = j.value("lr_disc", c.lr_disc);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.lr_decay_step = j.value("lr_decay_step", c.lr_decay_step);
    c.lr_decay_rate = j.value("lr_decay_rate", c.lr_decay_rate);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.seed = j.value("seed", c.seed);
    c.eval_period = j.value("eval_period", c.eval_period);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.learn_sigma = j.value("learn_sigma", c.learn_sigma);
    c.bandwidth_scale = j.value("bandwidth_scale", c.bandwidth_scale);
    if (j.contains("arch")) {
      c.arch = models::model_config_from_json(j.at("arch"));
    }
  } catch (const nlohmann::json::exception& e) {
    throw TrainError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

double counterfactual_mse(const models::VciModel<float>& model,
                          const bench::Dataset& data,
                          const std::vector<int>& indices) {
  if (indices.empty()) {
    throw TrainError("counterfactual mse needs at least one record");
  }
  const size_t n_slots = model.shape.covariate_cards.size();
  const Eigen::Index d = data.outcome_dim();
  const size_t chunk = 1024;
  double acc = 0.0;
  for (size_t lo = 0; lo < indices.size(); lo += chunk) {
    size_t hi = std::min(indices.size(), lo + chunk);
    size_t n = hi - lo;
    Mat<float> y(static_cast<Eigen::Index>(n), d);
    Eigen::MatrixXd truth(static_cast<Eigen::Index>(n), d);
    CovariateBatch xb;
    xb.slots.resize(n_slots);
    std::vector<bench::Treatment> ts, tqs;
    for (size_t k = lo; k < hi; ++k) {
      const auto& s = data.samples[static_cast<size_t>(indices[k])];
      if (!s.has_truth()) {
        throw TrainError("record " + std::to_string(indices[k]) +
                         " has no counterfactual ground truth");
      }
      y.row(static_cast<Eigen::Index>(k - lo)) = s.y.transpose().cast<float>();
      truth.row(static_cast<Eigen::Index>(k - lo)) = s.y_prime_true.transpose();
      ts.push_back(s.t);
      tqs.push_back(s.t_prime);
      for (size_t sl = 0; sl < n_slots; ++sl) xb.slots[sl].push_back(s.x[sl]);
    }
    Mat<float> pred = models::counterfactual_eval(
        model, y, TreatmentBatch<float>::from_samples(ts), xb,
        TreatmentBatch<float>::from_samples(tqs));
    for (Eigen::Index i = 0; i < pred.rows(); ++i) {
      double se = 0.0;
      for (Eigen::Index j = 0; j < d; ++j) {
        double diff = static_cast<double>(pred(i, j)) - truth(i, j);
        se += diff * diff;
      }
      acc += se / static_cast<double>(d);
    }
  }
  return acc / static_cast<double>(indices.size());
}

TrainResult train(const bench::Dataset& data, const TrainConfig& cfg,
                  const std::string& run_dir,
                  const std::string& dataset_path) {
  cfg.validate();
  if (data.n() == 0) throw TrainError("training dataset is empty");
  const auto wall_start = std::chrono::steady_clock::now();
  const std::string started_at = utc_now();

  const models::DataShape shape = models::DataShape::from_meta(data.meta);
  const size_t n_slots = shape.covariate_cards.size();
  const obj::CfTerm cf_term =
      cfg.resolved_cf_term(shape.categorical_treatment);
  const obj::LossWeights w = cfg.resolved_weights();
  const bool sae_mode = obj::ablation_uses_squared_error(cfg.mode);
  const bool use_cf = w.cf != 0.0;
  const bool adversarial = use_cf && cf_term == obj::CfTerm::adversarial;
  const bool empirical = use_cf && cf_term == obj::CfTerm::empirical;
  const bool needs_target =
      !sae_mode && w.kl != 0.0 && cfg.detach != obj::Detach::fully_attached;

  // Split. The permutation is its own RNG channel, so the split does not
  // move when training hyperparameters change.
  std::vector<int> perm(static_cast<size_t>(data.n()));
  std::iota(perm.begin(), perm.end(), 0);
  {
    core::Engine eng(stream_seed(cfg.seed, kSplit, 0));
    fisher_yates(perm, eng);
  }
  int n_val = static_cast<int>(std::floor(cfg.val_fraction * data.n()));
  if (n_val >= data.n()) n_val = data.n() - 1;
  std::vector<int> val_rows(perm.begin(), perm.begin() + n_val);
  std::vector<int> train_rows(perm.begin() + n_val, perm.end());
  std::sort(val_rows.begin(), val_rows.end());
  std::sort(train_rows.begin(), train_rows.end());
  if (train_rows.empty()) throw TrainError("training split is empty");

  models::ModelConfig arch = cfg.arch;
  arch.learn_sigma = cfg.learn_sigma;
  arch.init_seed = stream_seed(cfg.seed, kInit, 0);
  auto model = models::make_vci_model<float>(arch, shape);
  auto target = model;
  auto gen_params = model.generator_params();
  auto disc_params = model.discriminator_params();
  core::Adam<float> opt_gen, opt_disc;
  opt_gen.weight_decay = static_cast<float>(cfg.weight_decay);
  opt_disc.weight_decay = static_cast<float>(cfg.weight_decay);

  std::optional<models::EmpiricalOutcomeModel> phat;
  if (empirical) {
    bench::Dataset train_ds;
    train_ds.meta = data.meta;
    train_ds.samples.reserve(train_rows.size());
    for (int i : train_rows) {
      train_ds.samples.push_back(data.samples[static_cast<size_t>(i)]);
    }
    phat = models::EmpiricalOutcomeModel::fit(train_ds, cfg.bandwidth_scale);
  }
  const models::EmpiricalOutcomeModel* phat_p = phat ? &*phat : nullptr;
  const QueryLaw law = QueryLaw::from_train(data, train_rows, shape);

  // Validation queries are drawn once and reused at every evaluation, so
  // the validation objective is comparable across epochs. Rows whose
  // covariate stratum never appears in the training split have no fitted
  // density to score against and are left out of the objective (they still
  // count toward the ground-truth error).
  std::vector<int> val_obj_rows;
  std::vector<bench::Treatment> val_obj_queries;
  int val_rows_skipped = 0;
  {
    core::Engine eng(stream_seed(cfg.seed, kValQuery, 0));
    for (size_t k = 0; k < val_rows.size(); ++k) {
      const auto& s = data.samples[static_cast<size_t>(val_rows[k])];
      if (empirical && law.by_x.find(s.x) == law.by_x.end()) {
        ++val_rows_skipped;
        continue;
      }
      val_obj_rows.push_back(val_rows[k]);
      val_obj_queries.push_back(law.draw(eng, s.x));
    }
  }

  bool val_truth = !val_rows.empty();
  for (int i : val_rows) {
    if (!data.samples[static_cast<size_t>(i)].has_truth()) {
      val_truth = false;
      break;
    }
  }
  const std::string metric_kind = !val_rows.empty()
                                      ? (val_truth ? "val_cf_mse" : "val_total")
                                      : "train_total";

  const obj::VciLossConfig ocfg{w, cfg.detach, cf_term};

  struct EpochRow {
    int epoch = 0;
    double lr = 0.0;
    double recon = 0.0, cf = 0.0, kl = 0.0, total = 0.0;
    double grad_norm = 0.0;
    bool has_val = false;
    Means val;
    double cf_mse = -1.0;
  };
  std::vector<EpochRow> log_rows;

  TrainResult res;
  res.run_dir = run_dir;
  res.used_ground_truth = val_truth;
  res.epochs_run = cfg.epochs;
  double best = std::numeric_limits<double>::infinity();
  fs::create_directories(run_dir);

  auto save_checkpoint = [&](const std::string& name, int epoch,
                             double metric) {
    nlohmann::json meta;
    meta["epoch"] = epoch;
    meta["metric"] = metric;
    meta["metric_kind"] = metric_kind;
    meta["train_config"] = cfg.to_json();
    auto ck = models::model_to_checkpoint(model, std::move(meta));
    core::write_checkpoint(run_dir + "/" + name, ck);
  };

  const double n_train = static_cast<double>(train_rows.size());
  for (int e = 0; e < cfg.epochs; ++e) {
    if (needs_target && e % cfg.target_refresh_epochs == 0) target = model;
    const double decay =
        cfg.lr_decay_step > 0
            ? std::pow(cfg.lr_decay_rate, e / cfg.lr_decay_step)
            : 1.0;
    const float lr_e = static_cast<float>(cfg.lr * decay);
    const float lr_d = static_cast<float>(cfg.lr_disc * decay);

    core::Engine shuffle_eng(stream_seed(cfg.seed, kShuffle,
                                         static_cast<std::uint64_t>(e)));
    fisher_yates(train_rows, shuffle_eng);
    core::Engine noise_eng(stream_seed(cfg.seed, kNoise,
                                       static_cast<std::uint64_t>(e)));
    core::Engine query_eng(stream_seed(cfg.seed, kQuery,
                                       static_cast<std::uint64_t>(e)));

    EpochRow row;
    row.epoch = e;
    row.lr = lr_e;
    int n_batches = 0;
    size_t batch_lo = 0;
    try {
      for (size_t lo = 0; lo < train_rows.size();
           lo += static_cast<size_t>(cfg.batch_size)) {
        batch_lo = lo;
        size_t hi = std::min(train_rows.size(),
                             lo + static_cast<size_t>(cfg.batch_size));
        Batch b = gather(data, train_rows, lo, hi, arch.latent_dim, n_slots,
                         &law, &query_eng, &noise_eng, nullptr);

        core::Tape<float> tp;
        models::BoundGenerator<float> bg;
        models::BoundDisc<float> bd;
        auto nodes =
            sae_mode
                ? obj::sae_loss<float>(tp, model, bg, b.y, b.t, b.t_query, b.x,
                                       b.eps, w.cf, cf_term, phat_p, &bd)
                : obj::vci_loss<float>(tp, model, bg,
                                       needs_target ? &target : nullptr, b.y,
                                       b.t, b.t_query, b.x, b.eps, ocfg,
                                       phat_p, &bd);
        tp.backward(nodes.total.id);
        auto grads = models::generator_grads(tp, bg, model);
        double gn = static_cast<double>(
            core::clip_global_norm(grads, static_cast<float>(cfg.grad_clip)));
        opt_gen.step(gen_params, grads, lr_e);

        if (adversarial) {
          // The discriminator trains on the generator outputs from before
          // the step it just induced; they enter as constants.
          Mat<float> y_fake = nodes.y_prime.value();
          core::Tape<float> td;
          models::BoundDisc<float> bdd;
          auto real = models::disc_logit_node(
              td, model, bdd, core::make_constant<float>(td, b.y), b.t, b.x,
              true);
          auto fake = models::disc_logit_node(
              td, model, bdd, core::make_constant<float>(td, y_fake),
              b.t_query, b.x, true);
          auto dl = models::disc_loss_node<float>(real, fake);
          td.backward(dl.id);
          auto dg = models::discriminator_grads(td, bdd, model);
          core::clip_global_norm(dg, static_cast<float>(cfg.grad_clip));
          opt_disc.step(disc_params, dg, lr_d);
        }

        auto br = obj::breakdown(nodes);
        double bn = static_cast<double>(hi - lo);
        row.recon += br.recon * bn;
        row.cf += br.cf * bn;
        row.kl += br.kl * bn;
        row.total += br.total * bn;
        row.grad_norm += gn;
        ++n_batches;
      }
    } catch (const core::TapeError& err) {
      throw TrainError("training diverged at epoch " + std::to_string(e) +
                       ", batch starting at record " +
                       std::to_string(batch_lo) + ": " + err.what());
    } catch (const core::OptimError& err) {
      throw TrainError("training diverged at epoch " + std::to_string(e) +
                       ", batch starting at record " +
                       std::to_string(batch_lo) + ": " + err.what());
    }
    row.recon /= n_train;
    row.cf /= n_train;
    row.kl /= n_train;
    row.total /= n_train;
    row.grad_norm /= std::max(1, n_batches);

    const bool do_eval =
        (e + 1) % cfg.eval_period == 0 || e + 1 == cfg.epochs;
    if (do_eval) {
      EvalPoint pt;
      pt.epoch = e;
      if (!val_rows.empty()) {
        Means vm = eval_objective(model, needs_target ? &target : nullptr,
                                  data, val_obj_rows, val_obj_queries, ocfg,
                                  sae_mode, phat_p, arch.latent_dim, n_slots);
        pt.recon = vm.recon;
        pt.cf = vm.cf;
        pt.kl = vm.kl;
        pt.total = vm.total;
        if (val_truth) pt.cf_mse = counterfactual_mse(model, data, val_rows);
        row.has_val = true;
        row.val = vm;
        row.cf_mse = pt.cf_mse;
      } else {
        pt.recon = row.recon;
        pt.cf = row.cf;
        pt.kl = row.kl;
        pt.total = row.total;
      }
      const double metric = val_truth && !val_rows.empty()
                                ? pt.cf_mse
                                : pt.total;
      res.val_history.push_back(pt);
      res.final_val_metric = metric;
      if (metric < best) {
        best = metric;
        res.best_epoch = e;
        res.best_val_metric = metric;
        save_checkpoint("checkpoint_best.bin", e, metric);
      }
    }
    log_rows.push_back(row);
  }

  save_checkpoint("checkpoint_final.bin", cfg.epochs - 1,
                  res.final_val_metric);

  {
    std::ostringstream csv;
    csv << "epoch,lr,train_recon,train_cf,train_kl,train_total,grad_norm,"
           "val_recon,val_cf,val_kl,val_total,val_cf_mse\n";
    for (const auto& r : log_rows) {
      csv << r.epoch << ',' << fmt(r.lr) << ',' << fmt(r.recon) << ','
          << fmt(r.cf) << ',' << fmt(r.kl) << ',' << fmt(r.total) << ','
          << fmt(r.grad_norm) << ',';
      if (r.has_val) {
        csv << fmt(r.val.recon) << ',' << fmt(r.val.cf) << ','
            << fmt(r.val.kl) << ',' << fmt(r.val.total) << ',';
        if (r.cf_mse >= 0.0) csv << fmt(r.cf_mse);
      } else {
        csv << ",,,,";
      }
      csv << '\n';
    }
    write_text(run_dir + "/log.csv", csv.str());
  }

  {
    nlohmann::json m;
    m["metric_kind"] = metric_kind;
    m["best_epoch"] = res.best_epoch;
    m["best_metric"] = res.best_val_metric;
    m["final_metric"] = res.final_val_metric;
    m["epochs"] = cfg.epochs;
    m["n_train"] = static_cast<int>(train_rows.size());
    m["n_val"] = static_cast<int>(val_rows.size());
    m["val_rows_skipped"] = val_rows_skipped;
    m["mode"] = obj::ablation_name(cfg.mode);
    m["cf_term"] = use_cf ? obj::cf_term_name(cf_term) : std::string("none");
    m["detach"] = obj::detach_name(cfg.detach);
    m["omega_cf"] = w.cf;
    m["omega_kl"] = w.kl;
    if (!log_rows.empty()) {
      const auto& last = log_rows.back();
      m["final_train"] = {{"recon", last.recon},
                          {"cf", last.cf},
                          {"kl", last.kl},
                          {"total", last.total}};
    }
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& pt : res.val_history) {
      nlohmann::json h;
      h["epoch"] = pt.epoch;
      h["recon"] = pt.recon;
      h["cf"] = pt.cf;
      h["kl"] = pt.kl;
      h["total"] = pt.total;
      if (pt.cf_mse >= 0.0) h["cf_mse"] = pt.cf_mse;
      hist.push_back(h);
    }
    m["history"] = hist;
    write_text(run_dir + "/metrics.json", m.dump(2) + "\n");
  }

  {
    // The manifest is the one artifact allowed to differ between reruns:
    // timestamps and wall time live here and nowhere else.
    nlohmann::json j;
    j["config"] = cfg.to_json();
    j["dataset_path"] = dataset_path;
    if (!dataset_path.empty()) {
      j["dataset_hash"] = bench::file_hash_hex(dataset_path);
    }
    j["n_records"] = data.n();
    j["started_at"] = started_at;
    j["finished_at"] = utc_now();
    j["wall_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                      wall_start)
            .count();
    write_text(run_dir + "/manifest.json", j.dump(2) + "\n");
  }

  return res;
}

std::vector<SweepRow> ablation_sweep(const bench::Dataset& data,
                                     const TrainConfig& base,
                                     const std::vector<obj::Ablation>& modes,
                                     const std::vector<std::uint64_t>& seeds,
                                     const std::string& out_root, int jobs,
                                     const std::string& dataset_path) {
  if (modes.empty() || seeds.empty()) {
    throw TrainError("ablation sweep needs at least one mode and one seed");
  }
  fs::create_directories(out_root);

  struct Job {
    obj::Ablation mode;
    std::uint64_t seed;
  };
  std::vector<Job> work;
  for (auto m : modes) {
    for (auto s : seeds) work.push_back({m, s});
  }
  std::vector<SweepRow> rows(work.size());
  std::atomic<size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr first_err;

  auto worker = [&]() {
    for (;;) {
      size_t k = next.fetch_add(1);
      if (k >= work.size()) return;
      {
        std::lock_guard<std::mutex> g(err_mu);
        if (first_err) return;
      }
      try {
        TrainConfig c = base;
        c.mode = work[k].mode;
        c.seed = work[k].seed;
        std::string dir = out_root + "/" + obj::ablation_name(c.mode) +
                          "_seed" + std::to_string(c.seed);
        TrainResult r = train(data, c, dir, dataset_path);
        rows[k] = {obj::ablation_name(c.mode), c.seed,        r.best_epoch,
                   r.best_val_metric,          r.final_val_metric, dir};
      } catch (...) {
        std::lock_guard<std::mutex> g(err_mu);
        if (!first_err) first_err = std::current_exception();
        return;
      }
    }
  };

  int nthreads =
      std::max(1, std::min(jobs, static_cast<int>(work.size())));
  if (nthreads == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    threads.reserve(static_cast<size_t>(nthreads));
    for (int i = 0; i < nthreads; ++i) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (first_err) std::rethrow_exception(first_err);

  std::sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    return a.mode != b.mode ? a.mode < b.mode : a.seed < b.seed;
  });

  std::ostringstream csv;
  // The CSV names run directories relative to the sweep root so the file is
  // byte-identical no matter where the sweep lives.
  csv << "mode,seed,best_epoch,best_cf_mse,final_cf_mse,run_dir\n";
  for (const auto& r : rows) {
    csv << r.mode << ',' << r.seed << ',' << r.best_epoch << ','
        << fmt(r.best_cf_mse) << ',' << fmt(r.final_cf_mse) << ','
        << fs::path(r.run_dir).filename().string() << '\n';
  }
  write_text(out_root + "/sweep.csv", csv.str());
  return rows;
}

}  // namespace vci::train
