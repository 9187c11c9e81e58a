#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vci/dataset.hpp"
#include "vci/models.hpp"
#include "vci/objectives.hpp"

namespace vci::train {

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Everything a run needs beyond the dataset itself. Serializes to JSON with
// defaults filled in, so configs written by one build reproduce on another.
struct TrainConfig {
  obj::Ablation mode = obj::Ablation::vci;
  double omega_cf = -1.0;  // negative: use the ablation preset
  double omega_kl = -1.0;
  std::string cf_term = "auto";  // auto | empirical | adversarial
  obj::Detach detach = obj::Detach::target_copy;
  int target_refresh_epochs = 1;

  int epochs = 60;
  int batch_size = 128;
  double lr = 3e-4;
  double lr_disc = 3e-4;
  double weight_decay = 4e-7;
  int lr_decay_step = 0;  // 0 disables the staircase decay
  double lr_decay_rate = 0.5;
  double grad_clip = 100.0;
  std::uint64_t seed = 1;
  int eval_period = 5;
  double val_fraction = 0.2;
  bool learn_sigma = false;
  double bandwidth_scale = 0.1;

  models::ModelConfig arch;

  obj::LossWeights resolved_weights() const {
    obj::LossWeights w = obj::ablation_weights(mode);
    if (omega_cf >= 0.0) w.cf = omega_cf;
    if (omega_kl >= 0.0) w.kl = omega_kl;
    return w;
  }

  obj::CfTerm resolved_cf_term(bool categorical_treatment) const;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// One evaluation row; mirrored into log.csv.
struct EvalPoint {
  int epoch = 0;
  double recon = 0.0;
  double cf = 0.0;
  double kl = 0.0;
  double total = 0.0;
  double cf_mse = -1.0;  // -1 when the dataset carries no ground truth
};

struct TrainResult {
  std::string run_dir;
  int epochs_run = 0;
  int best_epoch = -1;
  double best_val_metric = 0.0;
  double final_val_metric = 0.0;
  bool used_ground_truth = false;
  std::vector<EvalPoint> val_history;
};

// Trains on the dataset and writes into run_dir:
//   checkpoint_best.bin / checkpoint_final.bin  model weights
//   log.csv                                     per-epoch losses and metrics
//   metrics.json                                summary (deterministic)
//   manifest.json                               config, dataset hash, timing
// Every artifact except manifest.json is byte-identical across reruns with
// the same inputs.
TrainResult train(const bench::Dataset& data, const TrainConfig& cfg,
                  const std::string& run_dir,
                  const std::string& dataset_path = "");

// Counterfactual mean squared error against ground truth: per record the
// squared error is averaged over outcome dimensions, then averaged over
// records.
double counterfactual_mse(const models::VciModel<float>& model,
                          const bench::Dataset& data,
                          const std::vector<int>& indices);

struct SweepRow {
  std::string mode;
  std::uint64_t seed = 0;
  int best_epoch = -1;
  double best_cf_mse = 0.0;
  double final_cf_mse = 0.0;
  std::string run_dir;
};

// Trains mode x seed combinations (optionally in parallel) under out_root
// and writes sweep.csv with one row per run, sorted by (mode, seed).
std::vector<SweepRow> ablation_sweep(const bench::Dataset& data,
                                     const TrainConfig& base,
                                     const std::vector<obj::Ablation>& modes,
                                     const std::vector<std::uint64_t>& seeds,
                                     const std::string& out_root, int jobs = 1,
                                     const std::string& dataset_path = "");

}  // namespace vci::train
