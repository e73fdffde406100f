#pragma once

// Binary checkpoint container.
//
//   "AFKT"  u32 version  u32 entry_count
//   per entry: u32 name_len, name bytes (UTF-8), u32 rank, u32 dims[rank],
//              f32 payload[numel] (little-endian)
//   u32 metadata_len, metadata bytes: "key=value\n" lines
//
// All integers are little-endian. Decoding is all-or-nothing.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "affkit/model.hpp"
#include "affkit/numkit/tensor.hpp"

namespace affkit::checkpoint {

inline constexpr char kMagic[4] = {'A', 'F', 'K', 'T'};
inline constexpr std::uint32_t kFormatVersion = 1;

struct Checkpoint {
  std::vector<std::pair<std::string, numkit::Tensor<float>>> entries;
  std::vector<std::pair<std::string, std::string>> metadata;

  void add(std::string name, numkit::Tensor<float> t);
  const numkit::Tensor<float>* find(const std::string& name) const;
  const numkit::Tensor<float>& get(const std::string& name) const;
  void set_meta(const std::string& key, std::string value);
  std::optional<std::string> meta(const std::string& key) const;
  std::string require_meta(const std::string& key) const;
};

std::vector<std::uint8_t> encode(const Checkpoint& ckpt);
Checkpoint decode(std::span<const std::uint8_t> bytes, const std::string& source = "checkpoint");

void save(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load(const std::filesystem::path& path);

/// Model parameters under their own names, the deviation twin under
/// "frozen.<name>", spec fields in metadata.
void store_model(Checkpoint& ckpt, const model::Model<float>& m);
model::Model<float> restore_model(const Checkpoint& ckpt);

void store_norm_stats(Checkpoint& ckpt, const data::NormStats& stats);
std::optional<data::NormStats> restore_norm_stats(const Checkpoint& ckpt);

}  // namespace affkit::checkpoint
