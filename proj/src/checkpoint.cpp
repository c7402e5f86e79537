#include "maskjepa/checkpoint.hpp"

#include <fnmatch.h>
#include <zlib.h>

#include <bit>
#include <fstream>
#include <iterator>
#include <set>

namespace mjepa {

namespace fs = std::filesystem;

namespace {

void encode_le(const Tensor<float>& t, std::vector<unsigned char>& out) {
  for (float v : t.data()) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<unsigned char>((bits >> (8 * b)) & 0xFFu));
  }
}

std::uint32_t crc_of(const unsigned char* data, std::size_t len) {
  return static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), data, static_cast<uInt>(len)));
}

}  // namespace

const NamedTensor* CheckpointBlob::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

bool glob_match(const std::string& pattern, const std::string& name) {
  return ::fnmatch(pattern.c_str(), name.c_str(), 0) == 0;
}

void write_checkpoint(const fs::path& dir, const CheckpointBlob& blob) {
  fs::create_directories(dir);
  std::vector<unsigned char> bytes;
  nlohmann::json table = nlohmann::json::array();
  std::set<std::string> seen;
  for (const auto& nt : blob.tensors) {
    if (!seen.insert(nt.name).second) throw CheckpointError("checkpoint: duplicate tensor name " + nt.name);
    const std::size_t offset = bytes.size();
    encode_le(nt.tensor, bytes);
    const std::size_t length = bytes.size() - offset;
    table.push_back({{"name", nt.name},
                     {"dtype", "float32"},
                     {"shape", nt.tensor.shape()},
                     {"offset", offset},
                     {"length", length},
                     {"crc32", crc_of(bytes.data() + offset, length)}});
  }
  nlohmann::json manifest = {{"format_version", kCheckpointFormatVersion}, {"meta", blob.meta}, {"tensors", table}};

  std::ofstream bin(dir / "tensors.bin", std::ios::binary | std::ios::trunc);
  bin.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!bin) throw CheckpointError("checkpoint: failed writing " + (dir / "tensors.bin").string());
  std::ofstream man(dir / "manifest.json", std::ios::trunc);
  man << manifest.dump(2) << '\n';
  if (!man) throw CheckpointError("checkpoint: failed writing " + (dir / "manifest.json").string());
}

CheckpointBlob read_checkpoint(const fs::path& dir) {
  std::ifstream man(dir / "manifest.json");
  if (!man) throw CheckpointError("checkpoint: cannot open " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(man);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint: malformed manifest.json: " + std::string(e.what()));
  }
  const int version = manifest.value("format_version", -1);
  if (version != kCheckpointFormatVersion) {
    throw CheckpointError("checkpoint: unsupported format_version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointFormatVersion) + ")");
  }

  std::ifstream bin(dir / "tensors.bin", std::ios::binary);
  if (!bin) throw CheckpointError("checkpoint: cannot open " + (dir / "tensors.bin").string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  CheckpointBlob blob;
  blob.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& entry : manifest.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    if (entry.at("dtype").get<std::string>() != "float32") {
      throw CheckpointError("checkpoint: tensor " + name + " has unsupported dtype");
    }
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto length = entry.at("length").get<std::size_t>();
    if (length != shape_numel(shape) * 4) {
      throw CheckpointError("checkpoint: tensor " + name + " length " + std::to_string(length) +
                            " does not match shape " + shape_str(shape));
    }
    if (offset + length > bytes.size()) {
      throw CheckpointError("checkpoint: tensors.bin truncated: tensor " + name + " needs bytes [" +
                            std::to_string(offset) + ", " + std::to_string(offset + length) + ") but file has " +
                            std::to_string(bytes.size()));
    }
    if (crc_of(bytes.data() + offset, length) != entry.at("crc32").get<std::uint32_t>()) {
      throw CheckpointError("checkpoint: checksum mismatch for tensor " + name);
    }
    Tensor<float> t(shape);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[offset + 4 * i + b]) << (8 * b);
      t[i] = std::bit_cast<float>(bits);
    }
    blob.tensors.push_back({name, std::move(t)});
  }
  return blob;
}

}  // namespace mjepa
