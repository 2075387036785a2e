#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "crest/tensor.hpp"

namespace crest {

// On-disk model container. Layout (all integers and floats little-endian):
//   "CRCK" magic, u32 version, u64 vocab hash,
//   u32 number-entry count,  entries: u32 key length, key bytes, f64 value,
//   u32 string-entry count,  entries: u32 key length, key bytes, u32 value length, value bytes,
//   u32 tensor count,        entries: u32 name length, name bytes, u32 rank,
//                            u32 dims..., f32 data (row-major).
struct Checkpoint {
  std::uint64_t vocab_hash{0};
  std::vector<std::pair<std::string, double>> numbers;
  std::vector<std::pair<std::string, std::string>> strings;
  std::vector<std::pair<std::string, grad::Tensor>> tensors;

  void set_number(const std::string& key, double value);
  void set_string(const std::string& key, std::string value);
  double number(const std::string& key) const;
  std::optional<double> maybe_number(const std::string& key) const;
  const std::string& str(const std::string& key) const;
  const grad::Tensor& tensor(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);

// expected_vocab_hash, when given, must match the stored hash exactly.
Checkpoint load_checkpoint(const std::string& path,
                           std::optional<std::uint64_t> expected_vocab_hash = std::nullopt);

}  // namespace crest
