#include "vci/dataset.hpp"

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace vci::bench {

namespace {

nlohmann::json vector_to_json(const Eigen::VectorXd& v) {
  nlohmann::json arr = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

Eigen::VectorXd vector_from_json(const nlohmann::json& j) {
  Eigen::VectorXd v(j.size());
  for (size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  return v;
}

}  // namespace

nlohmann::json treatment_to_json(const Treatment& t) {
  if (t.is_categorical()) return t.level;
  return vector_to_json(t.attrs);
}

Treatment treatment_from_json(const nlohmann::json& j) {
  if (j.is_number_integer()) return Treatment::categorical(j.get<int>());
  if (j.is_array()) return Treatment::continuous(vector_from_json(j));
  throw DataError("treatment must be an integer level or an attribute array");
}

std::string metadata_path(const std::string& dataset_path) {
  const std::string suffix = ".jsonl";
  if (dataset_path.size() > suffix.size() &&
      dataset_path.compare(dataset_path.size() - suffix.size(), suffix.size(),
                           suffix) == 0) {
    return dataset_path.substr(0, dataset_path.size() - suffix.size()) +
           ".meta.json";
  }
  return dataset_path + ".meta.json";
}

void write_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  for (const auto& s : ds.samples) {
    nlohmann::json row;
    row["x"] = s.x;
    row["t"] = treatment_to_json(s.t);
    row["t_prime"] = treatment_to_json(s.t_prime);
    row["y"] = vector_to_json(s.y);
    if (s.z_true.size() > 0) row["z_true"] = vector_to_json(s.z_true);
    if (s.y_prime_true.size() > 0) {
      row["y_prime_true"] = vector_to_json(s.y_prime_true);
    }
    out << row.dump() << "\n";
  }
  if (!out) throw DataError("write failed for '" + path + "'");

  std::ofstream meta(metadata_path(path), std::ios::trunc);
  if (!meta) {
    throw DataError("cannot open '" + metadata_path(path) + "' for writing");
  }
  meta << ds.meta.dump(2) << "\n";
}

Dataset read_dataset(const std::string& path, bool require_meta) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset '" + path + "'");
  Dataset ds;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json row;
    try {
      row = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError("parse error at line " + std::to_string(line_no) +
                      " of '" + path + "': " + e.what());
    }
    try {
      FullSample s;
      s.x = row.at("x").get<std::vector<int>>();
      s.t = treatment_from_json(row.at("t"));
      s.t_prime = treatment_from_json(row.at("t_prime"));
      s.y = vector_from_json(row.at("y"));
      if (row.contains("z_true")) s.z_true = vector_from_json(row["z_true"]);
      if (row.contains("y_prime_true")) {
        s.y_prime_true = vector_from_json(row["y_prime_true"]);
      }
      if (!s.y.allFinite()) {
        throw DataError("non-finite outcome");
      }
      ds.samples.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("invalid record at line " + std::to_string(line_no) +
                      " of '" + path + "': " + e.what());
    }
  }

  std::ifstream meta(metadata_path(path));
  if (meta) {
    try {
      meta >> ds.meta;
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError("invalid metadata JSON '" + metadata_path(path) +
                      "': " + e.what());
    }
  } else if (require_meta) {
    throw DataError("missing metadata sidecar '" + metadata_path(path) + "'");
  }
  return ds;
}

std::string file_hash_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot hash missing file '" + path + "'");
  std::uint64_t h = 1469598103934665603ull;
  char buf[4096];
  while (in) {
    in.read(buf, sizeof(buf));
    std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace vci::bench
