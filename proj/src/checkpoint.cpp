#include "vci/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace vci::core {

namespace {

constexpr char kMagic[8] = {'V', 'C', 'C', 'K', 'P', 'T', '0', '1'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian; big-endian hosts need a "
              "byte-swapping reader");

}  // namespace

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["format"] = "vci-checkpoint";
  manifest["version"] = 1;
  manifest["meta"] = ckpt.meta;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : ckpt.tensors) {
    if (static_cast<std::int64_t>(t.data.size()) != t.rows * t.cols) {
      throw CheckpointError("tensor '" + t.name + "' has " +
                            std::to_string(t.data.size()) +
                            " entries but shape " + std::to_string(t.rows) +
                            "x" + std::to_string(t.cols));
    }
    tensors.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}});
  }
  manifest["tensors"] = tensors;
  std::string mbytes = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open '" + path + "' for writing");
  out.write(kMagic, sizeof(kMagic));
  std::uint64_t mlen = mbytes.size();
  out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  out.write(mbytes.data(), static_cast<std::streamsize>(mbytes.size()));
  for (const auto& t : ckpt.tensors) {
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  }
  if (!out) throw CheckpointError("write failed for '" + path + "'");
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, "VCCKPT", 6) != 0) {
    throw CheckpointError("'" + path + "' is not a checkpoint file");
  }
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("unsupported checkpoint version '" +
                          std::string(magic + 6, 2) + "' in '" + path + "'");
  }
  std::uint64_t mlen = 0;
  in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  if (!in) throw CheckpointError("truncated checkpoint header in '" + path + "'");
  std::string mbytes(mlen, '\0');
  in.read(mbytes.data(), static_cast<std::streamsize>(mlen));
  if (!in) throw CheckpointError("truncated manifest in '" + path + "'");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mbytes);
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError("invalid manifest JSON in '" + path +
                          "': " + e.what());
  }
  if (!manifest.contains("version") || manifest["version"] != 1) {
    throw CheckpointError("unsupported manifest version in '" + path + "'");
  }
  Checkpoint ckpt;
  ckpt.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& entry : manifest.at("tensors")) {
    TensorBlob t;
    t.name = entry.at("name").get<std::string>();
    t.rows = entry.at("shape").at(0).get<std::int64_t>();
    t.cols = entry.at("shape").at(1).get<std::int64_t>();
    if (t.rows < 0 || t.cols < 0) {
      throw CheckpointError("negative tensor shape in '" + path + "'");
    }
    t.data.resize(static_cast<size_t>(t.rows * t.cols));
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!in) {
      throw CheckpointError("truncated payload for tensor '" + t.name +
                            "' in '" + path + "'");
    }
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

}  // namespace vci::core
