#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hat/model.h"
#include "hat/tensor.h"

namespace hat {

enum class DType { F32, F64 };

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

/// In-memory form of the checkpoint container:
///
///   "HATCKPT1"                       8-byte magic
///   u32 length + meta text           canonical sorted `key=value\n` lines
///   u32 record count
///   per record: u32 name length, name, u32 rank, u64 extents[rank],
///               raw little-endian values (f32, or f64 when format.dtype=f64)
///   u64 FNV-1a checksum of every preceding byte
struct CheckpointData {
  DType dtype = DType::F32;
  std::map<std::string, std::string> meta;
  std::vector<NamedArray> arrays;

  const NamedArray* find(std::string_view name) const;
  const std::string& get(const std::string& key) const;
};

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_checkpoint(const CheckpointData& ckpt);
CheckpointData decode_checkpoint(std::span<const std::uint8_t> bytes);
void write_checkpoint(const std::filesystem::path& path, const CheckpointData& ckpt);
CheckpointData read_checkpoint(const std::filesystem::path& path);

template <typename T> constexpr DType dtype_of() { return sizeof(T) == 8 ? DType::F64 : DType::F32; }

// Model parameters plus `model.*` config keys.
template <typename T> CheckpointData model_checkpoint(const HatModel<T>& model);

// Copies stored values into the model's existing parameter tensors. Arrays
// whose names start with one of `ignored_prefixes` are skipped. Throws
// DataError naming the first missing, unknown or mis-shaped path, or the
// first differing config key.
template <typename T>
void load_parameters(HatModel<T>& model, const CheckpointData& ckpt,
                     const std::vector<std::string>& ignored_prefixes = {"adam."});

ModelConfig config_from_checkpoint(const CheckpointData& ckpt);

template <typename T> void save_model(const std::filesystem::path& path, const HatModel<T>& model);
template <typename T> HatModel<T> load_model(const std::filesystem::path& path);

}  // namespace hat
