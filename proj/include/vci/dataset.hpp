#pragma once

#include <Eigen/Core>

#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace vci::bench {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Treatment value: a categorical level index, or a continuous attribute
// vector. Exactly one representation is active.
struct Treatment {
  int level = -1;
  Eigen::VectorXd attrs;

  bool is_categorical() const { return level >= 0; }

  static Treatment categorical(int l) {
    Treatment t;
    t.level = l;
    return t;
  }
  static Treatment continuous(Eigen::VectorXd a) {
    Treatment t;
    t.attrs = std::move(a);
    return t;
  }

  bool operator==(const Treatment& o) const {
    if (is_categorical() != o.is_categorical()) return false;
    if (is_categorical()) return level == o.level;
    return attrs.size() == o.attrs.size() && attrs == o.attrs;
  }
};

// One record: factual pair, counterfactual query, and (for synthetic data)
// the generator's ground truth. t_prime == t implies y_prime_true == y
// exactly; generators enforce this by sharing all exogenous noise between
// the factual and counterfactual outcome.
struct FullSample {
  std::vector<int> x;
  Treatment t;
  Treatment t_prime;
  Eigen::VectorXd y;
  Eigen::VectorXd y_prime_true;  // size 0 when unavailable
  Eigen::VectorXd z_true;        // size 0 when unavailable

  bool has_truth() const { return y_prime_true.size() > 0; }
};

struct Dataset {
  std::vector<FullSample> samples;
  nlohmann::json meta;

  int n() const { return static_cast<int>(samples.size()); }
  int outcome_dim() const {
    return samples.empty() ? meta.value("outcome_dim", 0)
                           : static_cast<int>(samples[0].y.size());
  }
};

// One JSON object per line (keys: x, t, t_prime, y, and when available
// z_true, y_prime_true) plus a sidecar metadata JSON at metadata_path(path).
void write_dataset(const std::string& path, const Dataset& ds);

// Loads samples and, when require_meta, the sidecar metadata. Parse errors
// report the offending line number.
Dataset read_dataset(const std::string& path, bool require_meta = true);

std::string metadata_path(const std::string& dataset_path);

// FNV-1a 64-bit content hash of a file, as fixed-width hex.
std::string file_hash_hex(const std::string& path);

nlohmann::json treatment_to_json(const Treatment& t);
Treatment treatment_from_json(const nlohmann::json& j);

}  // namespace vci::bench
