#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace vci::core {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One named row-major float32 tensor inside a checkpoint.
struct TensorBlob {
  std::string name;
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<float> data;  // rows * cols entries, row-major
};

struct Checkpoint {
  nlohmann::json meta;             // caller-owned manifest section
  std::vector<TensorBlob> tensors; // payload order
};

// File layout: 8-byte magic "VCCKPT01", u64 little-endian manifest length,
// manifest JSON (UTF-8), then each tensor's float32 little-endian payload in
// manifest order. The manifest records name and shape per tensor plus the
// caller's meta block.
void write_checkpoint(const std::string& path, const Checkpoint& ckpt);

Checkpoint read_checkpoint(const std::string& path);

}  // namespace vci::core
