#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace mid {

struct ImageShape {
  int64_t channels = 1;
  int64_t height = 28;
  int64_t width = 28;

  int64_t numel() const { return channels * height * width; }
  std::vector<int64_t> dims() const { return {channels, height, width}; }
  bool operator==(const ImageShape&) const = default;
};

/// Pixels are always stored as raw/255 in [0,1]; there is no per-dataset
/// mean/std normalization.
struct DatasetSpec {
  std::string name;
  int64_t num_classes = 10;
  ImageShape image_shape;
  std::map<std::string, int64_t> split_sizes;
  std::filesystem::path source_path;

  void validate() const;
};

/// images: float [B,C,H,W] in [0,1]; labels: int64 [B].
struct ImageBatch {
  torch::Tensor images;
  torch::Tensor labels;

  int64_t size() const { return labels.defined() ? labels.size(0) : 0; }
  /// Throws ShapeError / InvalidArgument when a batch invariant is violated.
  void validate(int64_t num_classes) const;
};

/// One split held fully in memory.
class Split {
 public:
  Split() = default;
  Split(torch::Tensor images, torch::Tensor labels);

  int64_t size() const { return labels_.defined() ? labels_.size(0) : 0; }
  const torch::Tensor& images() const { return images_; }
  const torch::Tensor& labels() const { return labels_; }

  ImageBatch batch(const std::vector<int64_t>& indices) const;
  ImageBatch slice(int64_t begin, int64_t end) const;
  /// First `count` samples (or all when count <= 0 or larger than the split).
  Split head(int64_t count) const;
  std::vector<int64_t> class_counts(int64_t num_classes) const;

 private:
  torch::Tensor images_;
  torch::Tensor labels_;
};

class Dataset {
 public:
  Dataset(DatasetSpec spec, Split train, Split test);

  const DatasetSpec& spec() const { return spec_; }
  const Split& train() const { return train_; }
  const Split& test() const { return test_; }

 private:
  DatasetSpec spec_;
  Split train_;
  Split test_;
};

/// Reads `manifest.json` from a dataset directory into a spec.
DatasetSpec read_manifest(const std::filesystem::path& directory);

/// Loads IDX (optionally gzip-compressed) train/test files named by the
/// manifest, verifying SHA-256 checksums and split sizes.
Dataset load_dataset(const DatasetSpec& spec);

/// Class-stratified subset of both splits; fraction 1 returns the input.
Dataset subsample(const Dataset& dataset, double fraction, uint64_t seed);
Split subsample(const Split& split, int64_t num_classes, double fraction, uint64_t seed);

/// Index lists for one pass over `split`. Shuffled with `seed` when requested.
std::vector<std::vector<int64_t>> batch_indices(int64_t size, int64_t batch_size, bool shuffle,
                                                uint64_t seed);

/// Seeded per-epoch batch order for training.
class BatchIterator {
 public:
  BatchIterator(const Split& split, int64_t batch_size, uint64_t seed, bool shuffle = true);

  /// Batches for `epoch`; order depends only on (seed, epoch).
  std::vector<std::vector<int64_t>> epoch(int64_t epoch) const;
  ImageBatch batch(const std::vector<int64_t>& indices) const { return split_->batch(indices); }
  int64_t batches_per_epoch() const;

 private:
  const Split* split_;
  int64_t batch_size_;
  uint64_t seed_;
  bool shuffle_;
};

/// IDX reader helpers, exposed for tests.
torch::Tensor read_idx_images(const std::filesystem::path& path);
torch::Tensor read_idx_labels(const std::filesystem::path& path);
void write_idx_images(const std::filesystem::path& path, const torch::Tensor& images_u8);
void write_idx_labels(const std::filesystem::path& path, const torch::Tensor& labels_u8);

}  // namespace mid
