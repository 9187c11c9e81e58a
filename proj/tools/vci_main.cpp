#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vci/checkpoint.hpp"
#include "vci/dataset.hpp"
#include "vci/estimators.hpp"
#include "vci/evaluation.hpp"
#include "vci/models.hpp"
#include "vci/rng.hpp"
#include "vci/scm.hpp"
#include "vci/training.hpp"

namespace fs = std::filesystem;
using namespace vci;

namespace {

constexpr const char* kVersion = "0.1.0";

class CliError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Relative output paths land under $VCI_OUT_ROOT when it is set; inputs are
// taken as given.
std::string resolve_out(const std::string& path) {
  const char* root = std::getenv("VCI_OUT_ROOT");
  if (root == nullptr || *root == '\0' || fs::path(path).is_absolute()) {
    return path;
  }
  return (fs::path(root) / path).string();
}

void ensure_parent_dir(const std::string& path) {
  fs::path p = fs::path(path).parent_path();
  if (!p.empty()) fs::create_directories(p);
}

void write_text(const std::string& path, const std::string& text) {
  ensure_parent_dir(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CliError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw CliError("write to '" + path + "' failed");
}

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CliError("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw CliError("'" + path + "' is not valid JSON: " + e.what());
  }
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_list(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<int> parse_int_list(const std::string& csv, const char* what) {
  std::vector<int> out;
  for (const auto& tok : split_list(csv)) {
    try {
      size_t pos = 0;
      out.push_back(std::stoi(tok, &pos));
      if (pos != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw CliError(std::string(what) + " '" + tok + "' is not an integer");
    }
  }
  return out;
}

// ---- generate -----------------------------------------------------------------

struct GenerateOpts {
  std::string spec_path;
  int n = 0;
  std::uint64_t seed = 1;
  std::string out;
};

int cmd_generate(const GenerateOpts& o) {
  bench::ScmSpec spec = bench::ScmSpec::from_json(read_json_file(o.spec_path));
  bench::Scm scm(spec);
  bench::Dataset ds = scm.generate(o.n, o.seed);
  std::string out = resolve_out(o.out);
  ensure_parent_dir(out);
  bench::write_dataset(out, ds);
  std::printf("wrote %d records to %s (metadata: %s)\n", ds.n(), out.c_str(),
              bench::metadata_path(out).c_str());
  return 0;
}

// ---- train ----------------------------------------------------------------------

struct TrainOpts {
  std::string config_path;
  std::string data_path;
  std::string out;
  std::string mode;
  int epochs = -1;
  int batch_size = -1;
  double lr = -1.0;
  double omega_cf = -1.0;
  double omega_kl = -1.0;
  int eval_period = -1;
  std::uint64_t seed = 0;
  bool has_seed = false;
  bool has_lr = false;
  bool has_omega_cf = false;
  bool has_omega_kl = false;
};

train::TrainConfig resolve_train_config(const TrainOpts& o) {
  train::TrainConfig cfg;
  if (!o.config_path.empty()) {
    cfg = train::TrainConfig::from_json(read_json_file(o.config_path));
  }
  if (!o.mode.empty()) cfg.mode = obj::ablation_from_name(o.mode);
  if (o.epochs >= 0) cfg.epochs = o.epochs;
  if (o.batch_size >= 0) cfg.batch_size = o.batch_size;
  if (o.has_lr) cfg.lr = o.lr;
  if (o.has_omega_cf) cfg.omega_cf = o.omega_cf;
  if (o.has_omega_kl) cfg.omega_kl = o.omega_kl;
  if (o.eval_period >= 0) cfg.eval_period = o.eval_period;
  if (o.has_seed) cfg.seed = o.seed;
  cfg.validate();
  return cfg;
}

int cmd_train(const TrainOpts& o) {
  train::TrainConfig cfg = resolve_train_config(o);
  bench::Dataset ds = bench::read_dataset(o.data_path);
  std::string run_dir = resolve_out(o.out);
  fs::create_directories(run_dir);

  // The manifest exists from the moment the run starts; a crash leaves it in
  // the "running" state with the config and dataset hash already recorded.
  nlohmann::json pre;
  pre["tool_version"] = kVersion;
  pre["status"] = "running";
  pre["config"] = cfg.to_json();
  pre["dataset_path"] = o.data_path;
  pre["dataset_hash"] = bench::file_hash_hex(o.data_path);
  write_text(run_dir + "/manifest.json", pre.dump(2) + "\n");

  train::TrainResult res = train::train(ds, cfg, run_dir, o.data_path);

  nlohmann::json man = read_json_file(run_dir + "/manifest.json");
  man["tool_version"] = kVersion;
  man["status"] = "complete";
  man["outputs"] = {"checkpoint_best.bin", "checkpoint_final.bin", "log.csv",
                    "metrics.json", "manifest.json"};
  write_text(run_dir + "/manifest.json", man.dump(2) + "\n");

  std::printf("trained %d epochs; best epoch %d (metric %s); run dir %s\n",
              res.epochs_run, res.best_epoch, fmt(res.best_val_metric).c_str(),
              run_dir.c_str());
  return 0;
}

// ---- evaluate -------------------------------------------------------------------

struct EvaluateOpts {
  std::string data_path;
  std::string checkpoint;
  std::string predictor = "model";
  std::string metrics;
  std::string out;
  int cycles = 10;
  int checks = 100;
  std::uint64_t seed = 1;
  int support_cap = 4;
  double gap_tol = 1e-9;
};

const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names = {
      "cf_mse", "r2", "consistency_kl", "axiomatic", "verify_elbo",
      "verify_implicit_elbo"};
  return names;
}

std::string joined_metric_names() {
  std::string s;
  for (const auto& n : metric_names()) {
    if (!s.empty()) s += ", ";
    s += n;
  }
  return s;
}

// Random tables with every support drawn at or below the cap; the outcome
// keeps at least two values so the checked likelihoods are not all 1.
bench::DiscreteTables random_capped_tables(core::Engine& eng, int cap) {
  auto size = [&](std::uint64_t lo) {
    return static_cast<int>(lo + eng() % static_cast<std::uint64_t>(
                                     cap - static_cast<int>(lo) + 1));
  };
  int kx = size(1), kz = size(1), kt = size(1), ky = size(2);
  return bench::random_discrete_tables(kx, kz, kt, ky, eng);
}

nlohmann::json run_bound_checks(bool implicit, int checks, std::uint64_t seed,
                                int cap, double tol, bool* all_ok) {
  core::Engine eng = core::make_engine(seed);
  int passed = 0;
  std::int64_t assignments = 0;
  double worst = std::numeric_limits<double>::infinity();
  for (int i = 0; i < checks; ++i) {
    bench::DiscreteTables tb = random_capped_tables(eng, cap);
    auto results = implicit ? eval::verify_implicit_elbo_discrete(tb, cap)
                            : eval::verify_elbo_discrete(tb, cap);
    double g = eval::min_gap(results);
    worst = std::min(worst, g);
    assignments += static_cast<std::int64_t>(results.size());
    if (g >= -tol) ++passed;
  }
  if (passed < checks) *all_ok = false;
  nlohmann::json block;
  block["checks"] = checks;
  block["passed"] = passed;
  block["min_gap"] = worst;
  block["assignments"] = assignments;
  block["support_cap"] = cap;
  std::printf("%s %d/%d bound checks passed (min gap %s over %lld assignments)\n",
              implicit ? "verify_implicit_elbo" : "verify_elbo", passed, checks,
              fmt(worst).c_str(), static_cast<long long>(assignments));
  return block;
}

int cmd_evaluate(const EvaluateOpts& o) {
  std::vector<std::string> requested = split_list(o.metrics);
  if (requested.empty()) {
    throw CliError("no metrics requested; valid metrics: " +
                   joined_metric_names());
  }
  std::set<std::string> want;
  for (const auto& name : requested) {
    if (std::find(metric_names().begin(), metric_names().end(), name) ==
        metric_names().end()) {
      throw CliError("unknown metric '" + name +
                     "'; valid metrics: " + joined_metric_names());
    }
    want.insert(name);
  }
  if (o.predictor != "model" && o.predictor != "oracle") {
    throw CliError("unknown predictor '" + o.predictor +
                   "'; valid predictors: model, oracle");
  }

  const bool need_data = want.count("cf_mse") || want.count("r2") ||
                         want.count("consistency_kl") ||
                         want.count("axiomatic");
  const bool oracle = o.predictor == "oracle";
  if (oracle && (want.count("consistency_kl") || want.count("axiomatic"))) {
    throw CliError(
        "predictor 'oracle' replays the dataset's ground truth and supports "
        "only cf_mse and r2");
  }

  eval::MetricsReport report;
  bench::Dataset ds;
  models::VciModel<float> model;
  bool have_model = false;

  if (need_data) {
    if (o.data_path.empty()) {
      throw CliError("the requested metrics need --data");
    }
    ds = bench::read_dataset(o.data_path);
    if (!oracle) {
      if (o.checkpoint.empty()) {
        throw CliError("the requested metrics need --checkpoint (or --predictor oracle)");
      }
      model = models::model_from_checkpoint<float>(
          core::read_checkpoint(o.checkpoint));
      have_model = true;
    }
  }

  if (want.count("cf_mse") || want.count("r2")) {
    Eigen::MatrixXd pred;
    if (oracle) {
      pred.resize(ds.n(), ds.outcome_dim());
      for (int i = 0; i < ds.n(); ++i) {
        const auto& s = ds.samples[static_cast<size_t>(i)];
        if (!s.has_truth()) {
          throw CliError("record " + std::to_string(i) +
                         " has no counterfactual ground truth to replay");
        }
        pred.row(i) = s.y_prime_true.transpose();
      }
    } else {
      Eigen::MatrixXd y(ds.n(), ds.outcome_dim());
      std::vector<bench::Treatment> t, q;
      for (int i = 0; i < ds.n(); ++i) {
        const auto& s = ds.samples[static_cast<size_t>(i)];
        y.row(i) = s.y.transpose();
        t.push_back(s.t);
        q.push_back(s.t_prime);
      }
      auto x = models::CovariateBatch::from_samples(
          ds.samples, ds.samples.empty() ? 0 : ds.samples[0].x.size());
      pred = eval::model_predictor(model)(y, t, x, q);
    }
    if (want.count("cf_mse")) {
      auto errs = eval::counterfactual_errors(pred, ds);
      report.mse = errs.mse;
      report.attribute_mae = errs.attribute_mae;
      std::printf("cf_mse %s\n", fmt(errs.mse).c_str());
    }
    if (want.count("r2")) {
      std::vector<int> rows(static_cast<size_t>(ds.n()));
      std::iota(rows.begin(), rows.end(), 0);
      report.r2_all = eval::group_r2(pred, ds, rows).mean_r2;
      std::printf("r2 %s\n", fmt(*report.r2_all).c_str());
    }
  }
  if (want.count("consistency_kl")) {
    report.consistency_kl = eval::oracle_consistency_kl(model, ds);
    std::printf("consistency_kl %s\n", fmt(*report.consistency_kl).c_str());
  }
  if (want.count("axiomatic")) {
    auto ax = eval::axiomatic_metrics(model, ds, o.cycles);
    report.composition = ax.composition;
    report.composition_cycled = ax.composition_cycled;
    report.reversibility = ax.reversibility;
    report.effectiveness = ax.effectiveness;
    std::printf("composition %s reversibility %s effectiveness %s\n",
                fmt(ax.composition).c_str(), fmt(ax.reversibility).c_str(),
                fmt(ax.effectiveness).c_str());
  }
  report.validate();

  bool all_ok = true;
  nlohmann::json out_json = report.to_json();
  out_json["tool_version"] = kVersion;
  if (have_model || oracle) out_json["predictor"] = o.predictor;
  if (want.count("verify_elbo")) {
    out_json["verify_elbo"] = run_bound_checks(false, o.checks, o.seed,
                                               o.support_cap, o.gap_tol,
                                               &all_ok);
  }
  if (want.count("verify_implicit_elbo")) {
    out_json["verify_implicit_elbo"] = run_bound_checks(
        true, o.checks, o.seed, o.support_cap, o.gap_tol, &all_ok);
  }

  std::string out = resolve_out(o.out);
  write_text(out, out_json.dump(2) + "\n");
  std::printf("report written to %s\n", out.c_str());
  return all_ok ? 0 : 1;
}

// ---- estimate -------------------------------------------------------------------

struct EstimateOpts {
  std::string data_path;
  std::string checkpoint;
  std::string predictions;
  std::string propensity = "fitted";
  std::string covariate;
  int alpha = -1;
  std::string out;
};

std::string csv_rows(const est::EstimateReport& r) {
  std::string s;
  for (Eigen::Index i = 0; i < r.psi.size(); ++i) {
    s += r.kind + "," + std::to_string(i) + "," + fmt(r.psi[i]) + "," +
         fmt(r.se[i]) + "," + fmt(r.ci_lo[i]) + "," + fmt(r.ci_hi[i]) + "\n";
  }
  return s;
}

int cmd_estimate(const EstimateOpts& o) {
  bench::Dataset ds = bench::read_dataset(o.data_path);
  const auto& tmeta = ds.meta.at("treatment");
  if (tmeta.value("kind", std::string()) != "categorical") {
    throw CliError("estimation requires a categorical treatment");
  }
  const int levels = tmeta.at("levels").get<int>();
  if (o.alpha < 0 || o.alpha >= levels) {
    throw CliError("treatment level " + std::to_string(o.alpha) +
                   " is outside the support [0, " + std::to_string(levels) +
                   ")");
  }
  bench::Treatment alpha = bench::Treatment::categorical(o.alpha);

  Eigen::MatrixXd m;
  if (!o.predictions.empty()) {
    m = est::read_predictions(o.predictions, ds.n(), ds.outcome_dim());
  } else if (!o.checkpoint.empty()) {
    auto model = models::model_from_checkpoint<float>(
        core::read_checkpoint(o.checkpoint));
    Eigen::MatrixXd y(ds.n(), ds.outcome_dim());
    std::vector<bench::Treatment> t, q;
    for (int i = 0; i < ds.n(); ++i) {
      const auto& s = ds.samples[static_cast<size_t>(i)];
      y.row(i) = s.y.transpose();
      t.push_back(s.t);
      q.push_back(alpha);
    }
    auto x = models::CovariateBatch::from_samples(
        ds.samples, ds.samples.empty() ? 0 : ds.samples[0].x.size());
    m = eval::model_predictor(model)(y, t, x, q);
  } else {
    throw CliError("estimation needs --checkpoint or --predictions");
  }

  models::PropensityModel prop;
  if (o.propensity == "fitted") {
    prop = models::PropensityModel::fit(ds, levels);
  } else if (o.propensity == "exact") {
    if (!ds.meta.contains("spec")) {
      throw CliError("exact propensity needs generator metadata in the dataset");
    }
    bench::Scm scm(bench::ScmSpec::from_json(ds.meta.at("spec")));
    prop = models::PropensityModel::exact(scm);
  } else {
    throw CliError("unknown propensity '" + o.propensity +
                   "'; valid choices: fitted, exact");
  }

  nlohmann::json out_json;
  out_json["tool_version"] = kVersion;
  out_json["alpha"] = o.alpha;
  out_json["n"] = ds.n();
  out_json["propensity"] = o.propensity;

  std::string csv = "kind,dim,psi,se,ci_lo,ci_hi\n";
  double agg_gap = -1.0;

  if (!o.covariate.empty()) {
    std::vector<int> cell = parse_int_list(o.covariate, "covariate level");
    est::EstimateReport robust =
        est::robust_ate_covariate(ds, m, alpha, prop, cell);
    std::vector<Eigen::Index> members;
    for (int i = 0; i < ds.n(); ++i) {
      if (ds.samples[static_cast<size_t>(i)].x == cell) members.push_back(i);
    }
    Eigen::MatrixXd sub(static_cast<Eigen::Index>(members.size()), m.cols());
    for (size_t k = 0; k < members.size(); ++k) {
      sub.row(static_cast<Eigen::Index>(k)) = m.row(members[k]);
    }
    est::EstimateReport plug = est::plug_in_mean(sub);
    out_json["covariate"] = cell;
    out_json["robust"] = robust.to_json();
    out_json["plug_in"] = plug.to_json();
    csv += csv_rows(robust) + csv_rows(plug);
  } else {
    est::EstimateReport robust = est::robust_ate(ds, m, alpha, prop);
    est::EstimateReport plug = est::plug_in_mean(m);
    auto cells = est::robust_ate_by_covariate(ds, m, alpha, prop);
    Eigen::VectorXd recombined = est::aggregate_cells(cells);
    agg_gap = (recombined - robust.psi).cwiseAbs().maxCoeff();
    out_json["robust"] = robust.to_json();
    out_json["plug_in"] = plug.to_json();
    out_json["aggregation_gap"] = agg_gap;
    csv += csv_rows(robust) + csv_rows(plug);

    std::string cells_csv = "cell,weight,n,dim,psi,se,ci_lo,ci_hi\n";
    for (const auto& c : cells) {
      std::string key;
      for (size_t k = 0; k < c.x.size(); ++k) {
        if (k > 0) key += ';';
        key += std::to_string(c.x[k]);
      }
      for (Eigen::Index i = 0; i < c.report.psi.size(); ++i) {
        cells_csv += key + "," + fmt(c.weight) + "," +
                     std::to_string(c.report.n) + "," + std::to_string(i) +
                     "," + fmt(c.report.psi[i]) + "," + fmt(c.report.se[i]) +
                     "," + fmt(c.report.ci_lo[i]) + "," +
                     fmt(c.report.ci_hi[i]) + "\n";
      }
    }
    std::string out_dir = resolve_out(o.out);
    write_text(out_dir + "/cells.csv", cells_csv);
  }

  std::string out_dir = resolve_out(o.out);
  write_text(out_dir + "/report.json", out_json.dump(2) + "\n");
  write_text(out_dir + "/report.csv", csv);
  std::printf("estimates written to %s\n", out_dir.c_str());

  if (agg_gap > 1e-12) {
    std::fprintf(stderr,
                 "vci: covariate cells recombine to the pooled estimate with "
                 "gap %s (tolerance 1e-12)\n",
                 fmt(agg_gap).c_str());
    return 1;
  }
  return 0;
}

// ---- ablate ---------------------------------------------------------------------

struct AblateOpts {
  std::string config_path;
  std::string data_path;
  std::string modes;
  std::string seeds;
  std::string out;
  int jobs = 1;
  int epochs = -1;
  int batch_size = -1;
  int eval_period = -1;
};

int cmd_ablate(const AblateOpts& o) {
  train::TrainConfig base;
  if (!o.config_path.empty()) {
    base = train::TrainConfig::from_json(read_json_file(o.config_path));
  }
  if (o.epochs >= 0) base.epochs = o.epochs;
  if (o.batch_size >= 0) base.batch_size = o.batch_size;
  if (o.eval_period >= 0) base.eval_period = o.eval_period;
  base.validate();

  std::vector<obj::Ablation> modes;
  for (const auto& name : split_list(o.modes)) {
    modes.push_back(obj::ablation_from_name(name));
  }
  std::vector<std::uint64_t> seeds;
  for (const auto& tok : split_list(o.seeds)) {
    try {
      size_t pos = 0;
      seeds.push_back(std::stoull(tok, &pos));
      if (pos != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw CliError("seed '" + tok + "' is not an unsigned integer");
    }
  }

  bench::Dataset ds = bench::read_dataset(o.data_path);
  std::string out_root = resolve_out(o.out);
  auto rows = train::ablation_sweep(ds, base, modes, seeds, out_root, o.jobs,
                                    o.data_path);

  // One row per evaluation epoch per run, assembled from each run's summary.
  std::string curves = "mode,seed,epoch,recon,cf,kl,total,cf_mse\n";
  for (const auto& r : rows) {
    nlohmann::json metrics = read_json_file(r.run_dir + "/metrics.json");
    for (const auto& h : metrics.at("history")) {
      curves += r.mode + "," + std::to_string(r.seed) + "," +
                std::to_string(h.at("epoch").get<int>()) + "," +
                fmt(h.at("recon").get<double>()) + "," +
                fmt(h.at("cf").get<double>()) + "," +
                fmt(h.at("kl").get<double>()) + "," +
                fmt(h.at("total").get<double>()) + ",";
      if (h.contains("cf_mse")) curves += fmt(h.at("cf_mse").get<double>());
      curves += "\n";
    }
  }
  write_text(out_root + "/curves.csv", curves);

  std::map<std::string, std::pair<double, int>> by_mode;
  for (const auto& r : rows) {
    by_mode[r.mode].first += r.best_cf_mse;
    by_mode[r.mode].second += 1;
  }
  std::printf("%d runs under %s\n", static_cast<int>(rows.size()),
              out_root.c_str());
  for (const auto& [mode, acc] : by_mode) {
    std::printf("  %s mean best cf_mse %s over %d seeds\n", mode.c_str(),
                fmt(acc.first / acc.second).c_str(), acc.second);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "counterfactual generative modeling laboratory: synthetic benchmarks, "
      "variational training, effect estimators, and exact bound checks"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  app.footer(
      "Relative output paths are placed under $VCI_OUT_ROOT when it is set.");

  int rc = 0;

  GenerateOpts gen;
  auto* g = app.add_subcommand("generate",
                               "sample a synthetic dataset from a generator "
                               "spec, with ground-truth counterfactuals");
  g->add_option("--spec", gen.spec_path, "generator spec JSON file")
      ->required();
  g->add_option("--n", gen.n, "number of records")->required();
  g->add_option("--seed", gen.seed, "sampling seed (default 1)");
  g->add_option("--out", gen.out, "output dataset path (JSONL)")->required();
  g->callback([&] { rc = cmd_generate(gen); });

  TrainOpts tr;
  auto* t = app.add_subcommand(
      "train", "train a model on a dataset and write a reproducible run");
  t->add_option("--config", tr.config_path,
                "training config JSON; flags override file values");
  t->add_option("--data", tr.data_path, "dataset path")->required();
  t->add_option("--out", tr.out, "run directory")->required();
  t->add_option("--mode", tr.mode, "objective: vci, hae, hae_a, sae");
  t->add_option("--epochs", tr.epochs, "training epochs");
  t->add_option("--batch-size", tr.batch_size, "minibatch size");
  auto* lr_opt = t->add_option("--lr", tr.lr, "learning rate");
  auto* ocf_opt = t->add_option("--omega-cf", tr.omega_cf,
                                "counterfactual term weight");
  auto* okl_opt = t->add_option("--omega-kl", tr.omega_kl,
                                "latent divergence weight");
  t->add_option("--eval-period", tr.eval_period, "epochs between evaluations");
  auto* seed_opt = t->add_option("--seed", tr.seed, "training seed");
  t->callback([&] {
    tr.has_lr = lr_opt->count() > 0;
    tr.has_omega_cf = ocf_opt->count() > 0;
    tr.has_omega_kl = okl_opt->count() > 0;
    tr.has_seed = seed_opt->count() > 0;
    rc = cmd_train(tr);
  });

  EvaluateOpts ev;
  auto* e = app.add_subcommand("evaluate",
                               "score a checkpoint on a dataset, or run "
                               "exact bound checks on random generators");
  e->add_option("--data", ev.data_path, "dataset path");
  e->add_option("--checkpoint", ev.checkpoint, "model checkpoint");
  e->add_option("--predictor", ev.predictor,
                "model (default) or oracle (replay ground truth)");
  e->add_option("--metrics", ev.metrics,
                "comma list: " + joined_metric_names())
      ->required();
  e->add_option("--out", ev.out, "report JSON path")->required();
  e->add_option("--cycles", ev.cycles,
                "encode/decode applications for the cycled composition");
  e->add_option("--checks", ev.checks, "bound checks to run (default 100)");
  e->add_option("--seed", ev.seed, "bound-check seed (default 1)");
  e->add_option("--support-cap", ev.support_cap,
                "largest support per variable in bound checks (default 4)");
  e->add_option("--gap-tol", ev.gap_tol,
                "allowed negative slack per bound check (default 1e-9)");
  e->callback([&] { rc = cmd_evaluate(ev); });

  EstimateOpts es;
  auto* s = app.add_subcommand("estimate",
                               "interventional-mean estimates with "
                               "confidence bands, robust and plug-in");
  s->add_option("--data", es.data_path, "dataset path")->required();
  s->add_option("--checkpoint", es.checkpoint,
                "model checkpoint for counterfactual predictions");
  s->add_option("--predictions", es.predictions,
                "predictions JSONL (alternative to --checkpoint)");
  s->add_option("--alpha", es.alpha, "treatment level to intervene on")
      ->required();
  s->add_option("--propensity", es.propensity,
                "fitted (default) or exact (from generator metadata)");
  s->add_option("--covariate", es.covariate,
                "comma list of covariate levels restricting the estimate");
  s->add_option("--out", es.out, "output directory")->required();
  s->callback([&] { rc = cmd_estimate(es); });

  AblateOpts ab;
  auto* a = app.add_subcommand(
      "ablate", "train objective variants across seeds and tabulate curves");
  a->add_option("--config", ab.config_path, "base training config JSON");
  a->add_option("--data", ab.data_path, "dataset path")->required();
  a->add_option("--modes", ab.modes, "comma list of objectives")->required();
  a->add_option("--seeds", ab.seeds, "comma list of training seeds")
      ->required();
  a->add_option("--out", ab.out, "sweep output directory")->required();
  a->add_option("--jobs", ab.jobs, "worker threads (default 1)");
  a->add_option("--epochs", ab.epochs, "override training epochs");
  a->add_option("--batch-size", ab.batch_size, "override minibatch size");
  a->add_option("--eval-period", ab.eval_period,
                "override epochs between evaluations");
  a->callback([&] { rc = cmd_ablate(ab); });

  try {
    CLI11_PARSE(app, argc, argv);
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "vci: %s\n", ex.what());
    return 1;
  }
  return rc;
}
