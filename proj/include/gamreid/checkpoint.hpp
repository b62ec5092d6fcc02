#pragma once

// Checkpoint file:
//   "GAMC" | u8 version | u64 config length | config text |
//   u64 tensor count | { u32 name length | name | GAMT tensor }*

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gamreid/backbone.hpp"
#include "gamreid/tensor_io.hpp"

namespace gamreid {

inline constexpr std::array<char, 4> kCheckpointMagic{'G', 'A', 'M', 'C'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct CheckpointData {
  std::string config_text;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }

  const Tensor& at(const std::string& name) const {
    const Tensor* t = find(name);
    require(t != nullptr, ErrorKind::integrity, "checkpoint has no tensor '" + name + "'");
    return *t;
  }

  template <std::floating_point T>
  void add(const std::string& name, const BasicTensor<T>& t) {
    std::vector<double> data(t.data().begin(), t.data().end());
    tensors.emplace_back(name, Tensor(t.shape(), std::move(data)));
  }
};

inline void write_checkpoint(std::ostream& os, const CheckpointData& ckpt) {
  os.write(kCheckpointMagic.data(), 4);
  os.put(static_cast<char>(kCheckpointVersion));
  io::write_u64(os, ckpt.config_text.size());
  os.write(ckpt.config_text.data(), static_cast<std::streamsize>(ckpt.config_text.size()));
  io::write_u64(os, ckpt.tensors.size());
  for (const auto& [name, t] : ckpt.tensors) {
    io::write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, t);
  }
}

inline CheckpointData read_checkpoint(std::istream& is) {
  std::array<char, 4> magic;
  io::read_exact(is, magic.data(), 4, "checkpoint magic");
  require(magic == kCheckpointMagic, ErrorKind::format, "bad checkpoint magic (expected GAMC)");
  const auto version = io::read_u8(is, "checkpoint version");
  require(version == kCheckpointVersion, ErrorKind::format,
          "unsupported checkpoint version " + std::to_string(version));
  CheckpointData ckpt;
  const auto config_len = io::read_u64(is, "config length");
  require(config_len < (1ULL << 24), ErrorKind::format, "implausible config block length");
  ckpt.config_text.resize(config_len);
  io::read_exact(is, ckpt.config_text.data(), config_len, "config block");
  const auto count = io::read_u64(is, "tensor count");
  require(count < (1ULL << 20), ErrorKind::format, "implausible tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = io::read_u32(is, "tensor name length");
    require(len < 4096, ErrorKind::format, "implausible tensor name length");
    std::string name(len, '\0');
    io::read_exact(is, name.data(), len, "tensor name");
    ckpt.tensors.emplace_back(std::move(name), read_tensor<double>(is));
  }
  return ckpt;
}

/// Writes through a temporary file and renames it into place, so an
/// interrupted write never replaces a complete checkpoint.
inline void save_checkpoint(const std::filesystem::path& path, const CheckpointData& ckpt) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    require(static_cast<bool>(os), ErrorKind::io, "cannot open " + tmp.string() + " for writing");
    write_checkpoint(os, ckpt);
    os.flush();
    require(static_cast<bool>(os), ErrorKind::io, "write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  require(!ec, ErrorKind::io, "cannot move checkpoint into place: " + ec.message());
}

inline CheckpointData load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::io, "cannot open " + path.string());
  return read_checkpoint(is);
}

inline constexpr const char* kModelPrefix = "model.";

template <std::floating_point T>
void store_model(CheckpointData& ckpt, Backbone<T>& model) {
  model.visit([&](const std::string& name, BasicTensor<T>& t, Slot) { ckpt.add(kModelPrefix + name, t); });
}

/// Copies model tensors out of a checkpoint. Every tensor is validated
/// against the model before anything is written, so a mismatch leaves the
/// model untouched.
template <std::floating_point T>
void restore_model(const CheckpointData& ckpt, Backbone<T>& model) {
  std::vector<std::pair<BasicTensor<T>, const Tensor*>> plan;
  model.visit([&](const std::string& name, BasicTensor<T>& t, Slot) {
    const Tensor* src = ckpt.find(kModelPrefix + name);
    require(src != nullptr, ErrorKind::integrity, "checkpoint lacks model tensor '" + name + "'");
    require(src->shape() == t.shape(), ErrorKind::integrity,
            "checkpoint tensor '" + name + "' has shape " + shape_str(src->shape()) + ", model expects " +
                shape_str(t.shape()));
    plan.emplace_back(t, src);
  });
  std::size_t model_tensors = 0;
  for (const auto& [n, t] : ckpt.tensors)
    if (n.rfind(kModelPrefix, 0) == 0) ++model_tensors;
  require(model_tensors == plan.size(), ErrorKind::integrity,
          "checkpoint holds " + std::to_string(model_tensors) + " model tensors, model has " +
              std::to_string(plan.size()));
  for (auto& [dst, src] : plan)
    for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] = static_cast<T>((*src)[i]);
}

}  // namespace gamreid
