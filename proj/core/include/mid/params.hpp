#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace mid {

/// Ordered collection of named tensors. Order is insertion order and is part
/// of the contract: checkpoints, hashes and flattened gradients depend on it.
class ParamSet {
 public:
  using Entry = std::pair<std::string, torch::Tensor>;

  ParamSet() = default;

  void add(std::string name, torch::Tensor tensor);

  bool contains(std::string_view name) const;
  const torch::Tensor& at(std::string_view name) const;
  torch::Tensor& at(std::string_view name);

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }
  auto begin() noexcept { return entries_.begin(); }
  auto end() noexcept { return entries_.end(); }

  std::vector<std::string> names() const;
  std::vector<torch::Tensor> tensors() const;
  int64_t numel() const;

  /// Same names, new tensors (count and shapes must match).
  ParamSet with_tensors(const std::vector<torch::Tensor>& tensors) const;
  /// Deep copy detached from any autograd graph.
  ParamSet clone() const;
  /// Deep copy whose tensors are fresh autograd leaves.
  ParamSet as_leaves() const;
  ParamSet to(torch::Dtype dtype) const;
  /// Copies names prefixed with `prefix`, e.g. "encoder.".
  ParamSet prefixed(std::string_view prefix) const;
  /// Entries whose names start with `prefix`, with the prefix stripped.
  ParamSet strip_prefix(std::string_view prefix) const;

  /// Bitwise equality of names, shapes, dtypes and contents.
  bool identical(const ParamSet& other) const;

 private:
  std::vector<Entry> entries_;
};

/// Concatenates flattened tensors into one vector.
torch::Tensor flatten_tensors(const std::vector<torch::Tensor>& tensors);

/// Hex SHA-256 over names, shapes and raw bytes (in order).
std::string hash_params(const ParamSet& params);

/// Hex SHA-256 of arbitrary bytes.
std::string sha256_hex(std::string_view bytes);

/// Deterministic child seed: first 8 bytes of SHA-256("<seed>:<stage>").
uint64_t derive_seed(uint64_t seed, std::string_view stage);

}  // namespace mid
