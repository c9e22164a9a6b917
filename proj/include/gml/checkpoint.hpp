#pragma once

// Versioned little-endian binary checkpoint:
//
//   "GMLC" | u32 version | u64 config hash
//   u32 array count, then per array: u32 name length, name bytes, u32 rank,
//       rank x u32 dims, float32 payload
//   u8 has_queues; when 1: u32 classes, u32 feature dim, then per class
//       u32 capacity, u32 fill, fill x (dim x float32 feature, u64 sample id)
//   u32 length + rng state text
//   u32 length + metadata JSON text

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gml/model.hpp"
#include "gml/queues.hpp"

namespace gml {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ArrayRecord {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

struct QueueState {
  std::uint32_t feature_dim = 0;
  std::vector<std::uint32_t> capacities;
  std::vector<std::vector<QueueEntry>> entries;  // per class, oldest first
};

struct Checkpoint {
  std::uint64_t config_hash = 0;
  std::vector<ArrayRecord> arrays;
  std::optional<QueueState> queues;
  std::string rng_state;
  std::string meta;  // JSON

  const ArrayRecord* find(const std::string& name) const;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
// Throws ValidationError on bad magic, unsupported version, or truncation.
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::uint64_t parse_hash(const std::string& hex);

void store_arrays(Checkpoint& ckpt, const std::vector<NamedTensor>& tensors, const std::string& prefix = "");
// Copies stored values into the (leaf) tensors. Missing arrays and shape
// mismatches throw ValidationError naming the array.
void restore_arrays(const Checkpoint& ckpt, const std::vector<NamedTensor>& tensors, const std::string& prefix = "");

QueueState capture_queues(const ClassQueueSet& queues);
ClassQueueSet rebuild_queues(const QueueState& state);

}  // namespace gml
