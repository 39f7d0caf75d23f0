#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "gaternet/model.hpp"
#include "gaternet/tensor.hpp"

namespace gaternet {

struct CheckpointMeta {
  std::string phase;
  std::size_t epoch = 0;  // completed epochs
  std::size_t step = 0;   // completed optimizer steps
  std::uint64_t spec_hash = 0;
  std::uint64_t config_hash = 0;
  std::string rng_state;

  bool operator==(const CheckpointMeta&) const = default;
};

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;

  bool operator==(const CheckpointTensor&) const = default;
};

// Named float32 tensors plus a metadata block. Parameters and batchnorm
// buffers use the model's names; optimizer velocities are stored as
// "momentum/<parameter name>".
struct Checkpoint {
  CheckpointMeta meta;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(std::string_view name) const;
  void put(std::string name, const Tensor& tensor);
  void put(std::string name, Shape shape, std::vector<float> data);
};

// File layout (little-endian):
//   "GNCKPT01"                      magic
//   u32 version (1)
//   u64 len + bytes                 metadata, "key=value" lines
//   u64 tensor count
//   per tensor: u64 len + name, u8 dtype (0 = f32), u32 rank,
//               rank x u64 extent, numel x f32 payload
//   u64 FNV-1a of every preceding byte
// A file cut short anywhere fails the length or checksum test.
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes, const std::string& source);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Throws CheckpointError quoting both hashes when the checkpoint was written
// for a different ModelSpec.
void check_spec_hash(const Checkpoint& ckpt, const ModelSpec& spec, const std::string& source);

// Stores every parameter and buffer of the model.
void store_model(const GaterNet<float>& model, Checkpoint& ckpt);

// Copies tensors whose names pass `select` into the model. A selected model
// tensor missing from the checkpoint, or stored with another shape, throws.
void restore_model(const Checkpoint& ckpt, GaterNet<float>& model,
                   const std::function<bool(const std::string&)>& select = {});

}  // namespace gaternet
