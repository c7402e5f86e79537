#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "maskjepa/tensor.hpp"

namespace mjepa {

inline constexpr int kCheckpointFormatVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
};

// On-disk layout: <dir>/manifest.json holds {format_version, meta, tensors:[{name,
// dtype, shape, offset, length, crc32}]}; <dir>/tensors.bin is the concatenation
// of little-endian float32 blobs in manifest order.
struct CheckpointBlob {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& dir, const CheckpointBlob& blob);
CheckpointBlob read_checkpoint(const std::filesystem::path& dir);

// fnmatch-style glob.
bool glob_match(const std::string& pattern, const std::string& name);

}  // namespace mjepa
