#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "vci/checkpoint.hpp"
#include "vci/dataset.hpp"
#include "vci/estimators.hpp"
#include "vci/evaluation.hpp"
#include "vci/scm.hpp"

namespace fs = std::filesystem;
using namespace vci;
using nlohmann::json;

namespace {

std::string cli_bin() {
  if (const char* env = std::getenv("VCI_BIN")) return env;
  return VCI_BIN_PATH;
}

struct Run {
  int rc = -1;
  std::string out;
};

// Spawns the real binary through the shell, capturing stdout and stderr
// together. `env` is prepended verbatim (e.g. "VCI_OUT_ROOT=/tmp/x").
Run cli(const std::string& args, const std::string& env = "VCI_OUT_ROOT=") {
  std::string cmd = env + " " + cli_bin() + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  Run r;
  char buf[4096];
  size_t got;
  while ((got = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, got);
  int status = pclose(pipe);
  r.rc = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "vci_cli_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  REQUIRE(out.good());
  out << text;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json jread(const fs::path& path) { return json::parse(slurp(path)); }

int count_lines(const std::string& text) {
  return static_cast<int>(std::count(text.begin(), text.end(), '\n'));
}

const char* kBlobSpec = R"({"family": "blob_image", "param_seed": 8})";
const char* kLinearSpec =
    R"({"family": "linear_gaussian", "param_seed": 11, "covariate_cards": [3],
        "treatment_levels": 4, "latent_dim": 5, "outcome_dim": 8,
        "latent_noise": 1.0})";
const char* kTinyConfig =
    R"({"epochs": 2, "batch_size": 32, "eval_period": 1, "seed": 3,
        "arch": {"latent_dim": 4, "hidden_width": 12, "enc_depth": 1,
                 "dec_depth": 1, "disc_depth": 1, "disc_width": 8,
                 "t_embed_dim": 4, "x_embed_dim": 3, "n_freq": 2}})";

}  // namespace

TEST_CASE("generate writes a deterministic dataset with sidecar metadata") {
  fs::path dir = fresh_dir("generate");
  write_file(dir / "spec.json", kBlobSpec);

  auto a = cli("generate --spec " + (dir / "spec.json").string() +
               " --n 24 --seed 5 --out " + (dir / "a.jsonl").string());
  REQUIRE_MESSAGE(a.rc == 0, a.out);
  auto b = cli("generate --spec " + (dir / "spec.json").string() +
               " --n 24 --seed 5 --out " + (dir / "b.jsonl").string());
  REQUIRE(b.rc == 0);

  CHECK(slurp(dir / "a.jsonl") == slurp(dir / "b.jsonl"));
  CHECK(slurp(dir / "a.meta.json") == slurp(dir / "b.meta.json"));
  CHECK(count_lines(slurp(dir / "a.jsonl")) == 24);
  CHECK(jread(dir / "a.meta.json").at("family") == "blob_image");

  bench::Dataset ds = bench::read_dataset((dir / "a.jsonl").string());
  CHECK(ds.n() == 24);
  CHECK(ds.outcome_dim() == 256);

  SUBCASE("an unknown family names the offending field") {
    write_file(dir / "bad.json", R"({"family": "warp_core"})");
    auto r = cli("generate --spec " + (dir / "bad.json").string() +
                 " --n 4 --out " + (dir / "bad.jsonl").string());
    CHECK(r.rc != 0);
    CHECK(r.out.find("family") != std::string::npos);
  }
  SUBCASE("a missing spec file fails") {
    auto r = cli("generate --spec " + (dir / "absent.json").string() +
                 " --n 4 --out " + (dir / "x.jsonl").string());
    CHECK(r.rc != 0);
  }
}

TEST_CASE("flag overrides beat config file values and lr zero freezes weights") {
  fs::path dir = fresh_dir("train_overrides");
  write_file(dir / "spec.json", kBlobSpec);
  write_file(dir / "cfg.json", kTinyConfig);
  std::string data = (dir / "d.jsonl").string();
  REQUIRE(cli("generate --spec " + (dir / "spec.json").string() +
              " --n 64 --seed 2 --out " + data)
              .rc == 0);

  auto r = cli("train --config " + (dir / "cfg.json").string() + " --data " +
               data + " --out " + (dir / "run").string() +
               " --mode hae --epochs 1 --lr 0");
  REQUIRE_MESSAGE(r.rc == 0, r.out);

  // With a zero learning rate nothing moves: the best checkpoint (saved at
  // the first evaluation) and the final one hold identical tensors.
  auto best = core::read_checkpoint((dir / "run/checkpoint_best.bin").string());
  auto fin = core::read_checkpoint((dir / "run/checkpoint_final.bin").string());
  REQUIRE(best.tensors.size() == fin.tensors.size());
  for (size_t i = 0; i < best.tensors.size(); ++i) {
    CHECK(best.tensors[i].name == fin.tensors[i].name);
    CHECK(best.tensors[i].data == fin.tensors[i].data);
  }

  json man = jread(dir / "run/manifest.json");
  CHECK(man.at("status") == "complete");
  CHECK(man.at("tool_version").get<std::string>() != "");
  CHECK(man.at("dataset_hash") == bench::file_hash_hex(data));
  CHECK(man.at("config").at("mode") == "hae");
  CHECK(man.at("config").at("epochs") == 1);
  CHECK(jread(dir / "run/metrics.json").at("epochs") == 1);
  CHECK(count_lines(slurp(dir / "run/log.csv")) == 2);  // header + one epoch

  SUBCASE("a missing dataset fails") {
    auto bad = cli("train --data " + (dir / "absent.jsonl").string() +
                   " --out " + (dir / "run2").string());
    CHECK(bad.rc != 0);
  }
}

TEST_CASE("identical runs produce identical artifacts") {
  fs::path dir = fresh_dir("determinism");
  write_file(dir / "spec.json", kBlobSpec);
  write_file(dir / "cfg.json", kTinyConfig);
  std::string data = (dir / "d.jsonl").string();
  REQUIRE(cli("generate --spec " + (dir / "spec.json").string() +
              " --n 64 --seed 2 --out " + data)
              .rc == 0);

  std::string train_args = " --config " + (dir / "cfg.json").string() +
                           " --data " + data + " --epochs 1";
  REQUIRE(cli("train" + train_args + " --out " + (dir / "r1").string()).rc == 0);
  REQUIRE(cli("train" + train_args + " --out " + (dir / "r2").string()).rc == 0);
  for (const char* f :
       {"checkpoint_best.bin", "checkpoint_final.bin", "log.csv",
        "metrics.json"}) {
    CAPTURE(f);
    CHECK(slurp(dir / "r1" / f) == slurp(dir / "r2" / f));
  }

  SUBCASE("a parallel sweep is as deterministic as a serial rerun") {
    std::string ablate_args = " --config " + (dir / "cfg.json").string() +
                              " --data " + data +
                              " --modes vci,hae --seeds 1,2 --epochs 1";
    auto s1 = cli("ablate" + ablate_args + " --jobs 2 --out " +
                  (dir / "s1").string());
    REQUIRE_MESSAGE(s1.rc == 0, s1.out);
    auto s2 = cli("ablate" + ablate_args + " --jobs 1 --out " +
                  (dir / "s2").string());
    REQUIRE(s2.rc == 0);
    CHECK(slurp(dir / "s1/sweep.csv") == slurp(dir / "s2/sweep.csv"));
    CHECK(slurp(dir / "s1/curves.csv") == slurp(dir / "s2/curves.csv"));
    CHECK(count_lines(slurp(dir / "s1/sweep.csv")) == 5);   // header + 4 runs
    CHECK(count_lines(slurp(dir / "s1/curves.csv")) == 5);  // one eval each
  }
}

TEST_CASE("evaluate replays oracles, verifies bounds, and scores checkpoints") {
  fs::path dir = fresh_dir("evaluate");
  write_file(dir / "spec.json", kBlobSpec);
  write_file(dir / "cfg.json", kTinyConfig);
  std::string data = (dir / "d.jsonl").string();
  REQUIRE(cli("generate --spec " + (dir / "spec.json").string() +
              " --n 48 --seed 7 --out " + data)
              .rc == 0);

  SUBCASE("oracle replay is a perfect predictor") {
    auto r = cli("evaluate --data " + data +
                 " --predictor oracle --metrics cf_mse,r2 --out " +
                 (dir / "oracle.json").string());
    REQUIRE_MESSAGE(r.rc == 0, r.out);
    json rep = jread(dir / "oracle.json");
    CHECK(rep.at("mse").get<double>() == 0.0);
    CHECK(rep.at("r2_all").get<double>() == 1.0);
  }
  SUBCASE("bound checks pass without any checkpoint") {
    auto r = cli(
        "evaluate --metrics verify_elbo,verify_implicit_elbo --checks 5 "
        "--seed 9 --out " +
        (dir / "verify.json").string());
    REQUIRE_MESSAGE(r.rc == 0, r.out);
    json rep = jread(dir / "verify.json");
    CHECK(rep.at("verify_elbo").at("passed") == 5);
    CHECK(rep.at("verify_implicit_elbo").at("passed") == 5);
    CHECK(rep.at("verify_elbo").at("min_gap").get<double>() >= -1e-9);
  }
  SUBCASE("a trained checkpoint gets a full readable report") {
    REQUIRE(cli("train --config " + (dir / "cfg.json").string() + " --data " +
                data + " --out " + (dir / "run").string() + " --epochs 1")
                .rc == 0);
    auto r = cli("evaluate --data " + data + " --checkpoint " +
                 (dir / "run/checkpoint_best.bin").string() +
                 " --metrics cf_mse,r2,consistency_kl,axiomatic --cycles 3 "
                 "--out " +
                 (dir / "model.json").string());
    REQUIRE_MESSAGE(r.rc == 0, r.out);
    auto rep = eval::MetricsReport::from_json(jread(dir / "model.json"));
    REQUIRE(rep.mse.has_value());
    CHECK(*rep.mse > 0.0);
    CHECK(rep.consistency_kl.has_value());
    CHECK(rep.composition.has_value());
    CHECK(rep.effectiveness.has_value());
  }
  SUBCASE("metric and predictor misuse is rejected") {
    auto bad = cli("evaluate --metrics warp --out " + (dir / "x.json").string());
    CHECK(bad.rc != 0);
    CHECK(bad.out.find("verify_elbo") != std::string::npos);

    auto mixed = cli("evaluate --data " + data +
                     " --predictor oracle --metrics consistency_kl --out " +
                     (dir / "y.json").string());
    CHECK(mixed.rc != 0);
    CHECK(mixed.out.find("oracle") != std::string::npos);
  }
}

TEST_CASE("estimate emits both estimators and their covariate decomposition") {
  fs::path dir = fresh_dir("estimate");
  write_file(dir / "spec.json", kLinearSpec);
  std::string data = (dir / "d.jsonl").string();
  REQUIRE(cli("generate --spec " + (dir / "spec.json").string() +
              " --n 240 --seed 6 --out " + data)
              .rc == 0);

  // Oracle predictions for the intervention: the generator's conditional
  // outcome mean at the true latent state.
  bench::Dataset ds = bench::read_dataset(data);
  bench::Scm scm(bench::ScmSpec::from_json(ds.meta.at("spec")));
  bench::Treatment alpha = bench::Treatment::categorical(1);
  Eigen::MatrixXd m(ds.n(), ds.outcome_dim());
  for (int i = 0; i < ds.n(); ++i) {
    Eigen::VectorXd row = scm.oracle_outcome(
        ds.samples[static_cast<size_t>(i)].z_true, alpha);
    for (int j = 0; j < ds.outcome_dim(); ++j) m(i, j) = row[j];
  }
  est::write_predictions((dir / "m.jsonl").string(), m);

  auto r = cli("estimate --data " + data + " --predictions " +
               (dir / "m.jsonl").string() + " --alpha 1 --propensity exact "
               "--out " +
               (dir / "est").string());
  REQUIRE_MESSAGE(r.rc == 0, r.out);

  json rep = jread(dir / "est/report.json");
  CHECK(rep.at("robust").at("psi").size() == 8);
  CHECK(rep.at("plug_in").at("psi").size() == 8);
  CHECK(rep.at("aggregation_gap").get<double>() <= 1e-12);
  // header + 8 robust rows + 8 plug-in rows
  CHECK(count_lines(slurp(dir / "est/report.csv")) == 17);
  // 3 covariate cells x 8 components
  CHECK(count_lines(slurp(dir / "est/cells.csv")) == 25);

  SUBCASE("a level outside the assignment's support is rejected") {
    auto bad = cli("estimate --data " + data + " --predictions " +
                   (dir / "m.jsonl").string() + " --alpha 9 --out " +
                   (dir / "bad").string());
    CHECK(bad.rc != 0);
    CHECK(bad.out.find("outside the support") != std::string::npos);
  }
  SUBCASE("predictions or a checkpoint are required") {
    auto bad = cli("estimate --data " + data + " --alpha 1 --out " +
                   (dir / "bad2").string());
    CHECK(bad.rc != 0);
  }
}

TEST_CASE("a single-stratum conditional estimate equals the marginal one") {
  fs::path dir = fresh_dir("estimate_single");
  write_file(dir / "spec.json",
             R"({"family": "linear_gaussian", "param_seed": 11,
                 "covariate_cards": [1], "treatment_levels": 4,
                 "latent_dim": 5, "outcome_dim": 8, "latent_noise": 1.0})");
  std::string data = (dir / "d.jsonl").string();
  REQUIRE(cli("generate --spec " + (dir / "spec.json").string() +
              " --n 200 --seed 6 --out " + data)
              .rc == 0);

  bench::Dataset ds = bench::read_dataset(data);
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(ds.n(), ds.outcome_dim());
  for (int i = 0; i < ds.n(); ++i) {
    for (int j = 0; j < ds.outcome_dim(); ++j) {
      m(i, j) = ds.samples[static_cast<size_t>(i)].y[j];
    }
  }
  est::write_predictions((dir / "m.jsonl").string(), m);

  std::string base = "estimate --data " + data + " --predictions " +
                     (dir / "m.jsonl").string() + " --alpha 2 ";
  REQUIRE(cli(base + "--out " + (dir / "marginal").string()).rc == 0);
  REQUIRE(cli(base + "--covariate 0 --out " + (dir / "cond").string()).rc == 0);

  json marg = jread(dir / "marginal/report.json").at("robust");
  json cond = jread(dir / "cond/report.json").at("robust");
  REQUIRE(marg.at("psi").size() == cond.at("psi").size());
  for (size_t j = 0; j < marg.at("psi").size(); ++j) {
    CHECK(cond.at("psi")[j].get<double>() ==
          doctest::Approx(marg.at("psi")[j].get<double>()).epsilon(1e-12));
  }
}

TEST_CASE("the output root env var relocates relative outputs") {
  fs::path dir = fresh_dir("out_root");
  write_file(dir / "spec.json", kBlobSpec);
  auto r = cli("generate --spec " + (dir / "spec.json").string() +
                   " --n 4 --seed 1 --out nested/d.jsonl",
               "VCI_OUT_ROOT=" + dir.string());
  REQUIRE_MESSAGE(r.rc == 0, r.out);
  CHECK(fs::exists(dir / "nested/d.jsonl"));
  CHECK(fs::exists(dir / "nested/d.meta.json"));
}
