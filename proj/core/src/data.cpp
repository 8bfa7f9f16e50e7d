#include "mid/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mid/error.hpp"
#include "mid/params.hpp"

namespace mid {

namespace fs = std::filesystem;

void DatasetSpec::validate() const {
  if (num_classes < 2) throw InvalidArgument("dataset '" + name + "': num_classes must be >= 2");
  if (image_shape.channels < 1 || image_shape.height < 1 || image_shape.width < 1)
    throw InvalidArgument("dataset '" + name + "': invalid image shape");
}

void ImageBatch::validate(int64_t num_classes) const {
  if (!images.defined() || !labels.defined()) throw ShapeError("batch: undefined tensors");
  if (images.dim() != 4) throw ShapeError("batch: images must be [B,C,H,W]");
  if (labels.dim() != 1 || labels.size(0) != images.size(0))
    throw ShapeError("batch: labels must be [B] matching images");
  if (images.size(0) < 1) throw ShapeError("batch: empty");
  if (images.min().item<double>() < 0.0 || images.max().item<double>() > 1.0)
    throw InvalidArgument("batch: pixels outside [0,1]");
  if (labels.min().item<int64_t>() < 0 || labels.max().item<int64_t>() >= num_classes)
    throw InvalidArgument("batch: label outside [0, num_classes)");
}

Split::Split(torch::Tensor images, torch::Tensor labels)
    : images_(std::move(images)), labels_(std::move(labels)) {
  if (images_.dim() != 4) throw ShapeError("split: images must be [N,C,H,W]");
  if (labels_.dim() != 1 || labels_.size(0) != images_.size(0))
    throw ShapeError("split: labels must be [N] matching images");
  labels_ = labels_.to(torch::kInt64);
}

ImageBatch Split::batch(const std::vector<int64_t>& indices) const {
  auto idx = torch::tensor(indices, torch::kInt64);
  return {images_.index_select(0, idx), labels_.index_select(0, idx)};
}

ImageBatch Split::slice(int64_t begin, int64_t end) const {
  return {images_.slice(0, begin, end), labels_.slice(0, begin, end)};
}

Split Split::head(int64_t count) const {
  if (count <= 0 || count >= size()) return *this;
  return Split(images_.slice(0, 0, count), labels_.slice(0, 0, count));
}

std::vector<int64_t> Split::class_counts(int64_t num_classes) const {
  std::vector<int64_t> counts(static_cast<std::size_t>(num_classes), 0);
  auto acc = labels_.accessor<int64_t, 1>();
  for (int64_t i = 0; i < acc.size(0); ++i) ++counts.at(static_cast<std::size_t>(acc[i]));
  return counts;
}

Dataset::Dataset(DatasetSpec spec, Split train, Split test)
    : spec_(std::move(spec)), train_(std::move(train)), test_(std::move(test)) {
  spec_.validate();
  spec_.split_sizes["train"] = train_.size();
  spec_.split_sizes["test"] = test_.size();
}

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError(path.string(), "cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// gzread handles both compressed and plain files.
std::string read_maybe_gz(const fs::path& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw IngestionError(path.string(), "cannot open");
  std::string out;
  char buf[1 << 16];
  for (;;) {
    int n = gzread(f, buf, sizeof(buf));
    if (n < 0) {
      gzclose(f);
      throw IngestionError(path.string(), "corrupt compressed stream");
    }
    if (n == 0) break;
    out.append(buf, static_cast<std::size_t>(n));
  }
  gzclose(f);
  return out;
}

uint32_t read_be32(const std::string& bytes, std::size_t offset) {
  return (static_cast<uint32_t>(static_cast<unsigned char>(bytes[offset])) << 24) |
         (static_cast<uint32_t>(static_cast<unsigned char>(bytes[offset + 1])) << 16) |
         (static_cast<uint32_t>(static_cast<unsigned char>(bytes[offset + 2])) << 8) |
         static_cast<uint32_t>(static_cast<unsigned char>(bytes[offset + 3]));
}

void put_be32(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>((v >> 24) & 0xFF));
  out.push_back(static_cast<char>((v >> 16) & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
  out.push_back(static_cast<char>(v & 0xFF));
}

void write_maybe_gz(const fs::path& path, const std::string& bytes) {
  if (path.extension() == ".gz") {
    gzFile f = gzopen(path.c_str(), "wb");
    if (!f) throw IngestionError(path.string(), "cannot create");
    gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
    gzclose(f);
  } else {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IngestionError(path.string(), "cannot create");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
}

}  // namespace

torch::Tensor read_idx_images(const fs::path& path) {
  const std::string bytes = read_maybe_gz(path);
  if (bytes.size() < 16 || read_be32(bytes, 0) != 0x00000803)
    throw IngestionError(path.string(), "not an IDX image file");
  const int64_t n = read_be32(bytes, 4), h = read_be32(bytes, 8), w = read_be32(bytes, 12);
  if (bytes.size() != static_cast<std::size_t>(16 + n * h * w))
    throw IngestionError(path.string(), "truncated image payload");
  auto u8 = torch::empty({n, 1, h, w}, torch::kUInt8);
  std::memcpy(u8.data_ptr(), bytes.data() + 16, static_cast<std::size_t>(n * h * w));
  return u8;
}

torch::Tensor read_idx_labels(const fs::path& path) {
  const std::string bytes = read_maybe_gz(path);
  if (bytes.size() < 8 || read_be32(bytes, 0) != 0x00000801)
    throw IngestionError(path.string(), "not an IDX label file");
  const int64_t n = read_be32(bytes, 4);
  if (bytes.size() != static_cast<std::size_t>(8 + n))
    throw IngestionError(path.string(), "truncated label payload");
  auto u8 = torch::empty({n}, torch::kUInt8);
  std::memcpy(u8.data_ptr(), bytes.data() + 8, static_cast<std::size_t>(n));
  return u8;
}

void write_idx_images(const fs::path& path, const torch::Tensor& images_u8) {
  auto t = images_u8.to(torch::kUInt8).contiguous();
  const int64_t n = t.size(0), h = t.size(-2), w = t.size(-1);
  std::string bytes;
  put_be32(bytes, 0x00000803);
  put_be32(bytes, static_cast<uint32_t>(n));
  put_be32(bytes, static_cast<uint32_t>(h));
  put_be32(bytes, static_cast<uint32_t>(w));
  bytes.append(static_cast<const char*>(t.data_ptr()), static_cast<std::size_t>(n * h * w));
  write_maybe_gz(path, bytes);
}

void write_idx_labels(const fs::path& path, const torch::Tensor& labels_u8) {
  auto t = labels_u8.to(torch::kUInt8).contiguous();
  std::string bytes;
  put_be32(bytes, 0x00000801);
  put_be32(bytes, static_cast<uint32_t>(t.size(0)));
  bytes.append(static_cast<const char*>(t.data_ptr()), static_cast<std::size_t>(t.size(0)));
  write_maybe_gz(path, bytes);
}

DatasetSpec read_manifest(const fs::path& directory) {
  const fs::path manifest = directory / "manifest.json";
  if (!fs::exists(manifest)) throw IngestionError(manifest.string(), "manifest not found");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(manifest));
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(manifest.string(), std::string("invalid JSON: ") + e.what());
  }
  DatasetSpec spec;
  try {
    spec.name = j.at("name").get<std::string>();
    spec.num_classes = j.at("num_classes").get<int64_t>();
    auto shape = j.at("image_shape").get<std::vector<int64_t>>();
    if (shape.size() != 3) throw IngestionError(manifest.string(), "image_shape must have 3 dims");
    spec.image_shape = {shape[0], shape[1], shape[2]};
    for (const auto& [split, entry] : j.at("splits").items())
      spec.split_sizes[split] = entry.at("count").get<int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(manifest.string(), std::string("missing field: ") + e.what());
  }
  spec.source_path = directory;
  spec.validate();
  return spec;
}

namespace {

Split load_split(const DatasetSpec& spec, const nlohmann::json& entry) {
  const fs::path images_path = spec.source_path / entry.at("images").get<std::string>();
  const fs::path labels_path = spec.source_path / entry.at("labels").get<std::string>();
  if (entry.contains("sha256")) {
    for (const auto& [file, digest] : entry.at("sha256").items()) {
      const fs::path p = spec.source_path / file;
      if (sha256_hex(read_file(p)) != digest.get<std::string>())
        throw IngestionError(p.string(), "checksum mismatch");
    }
  }
  auto images = read_idx_images(images_path);
  auto labels = read_idx_labels(labels_path);
  if (images.size(0) != labels.size(0))
    throw IngestionError(labels_path.string(), "label count does not match image count");
  if (entry.contains("count") && images.size(0) != entry.at("count").get<int64_t>())
    throw IngestionError(images_path.string(), "sample count does not match manifest");
  const auto& shape = spec.image_shape;
  if (images.size(2) != shape.height || images.size(3) != shape.width)
    throw IngestionError(images_path.string(), "image size does not match manifest");
  auto pixels = images.to(torch::kFloat32).div_(255.0);
  if (shape.channels != 1) {
    // Multi-channel IDX files store channels as consecutive planes.
    if (images.size(0) % shape.channels != 0)
      throw IngestionError(images_path.string(), "plane count not divisible by channels");
    pixels = pixels.view({-1, shape.channels, shape.height, shape.width});
  }
  auto lbl = labels.to(torch::kInt64);
  if (lbl.size(0) != pixels.size(0))
    throw IngestionError(labels_path.string(), "label count does not match image count");
  if (lbl.max().item<int64_t>() >= spec.num_classes)
    throw IngestionError(labels_path.string(), "label outside [0, num_classes)");
  return Split(pixels, lbl);
}

}  // namespace

Dataset load_dataset(const DatasetSpec& spec) {
  spec.validate();
  const fs::path manifest_path = spec.source_path / "manifest.json";
  if (!fs::exists(spec.source_path))
    throw IngestionError(spec.source_path.string(), "dataset directory not found");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(manifest_path.string(), std::string("invalid JSON: ") + e.what());
  }
  try {
    const auto& splits = manifest.at("splits");
    Split train = load_split(spec, splits.at("train"));
    Split test = load_split(spec, splits.at("test"));
    return Dataset(spec, std::move(train), std::move(test));
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(manifest_path.string(), std::string("malformed splits: ") + e.what());
  }
}

Split subsample(const Split& split, int64_t num_classes, double fraction, uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw InvalidArgument("subsample: fraction must lie in (0, 1]");
  if (fraction == 1.0) return split;
  std::vector<std::vector<int64_t>> by_class(static_cast<std::size_t>(num_classes));
  auto labels = split.labels().accessor<int64_t, 1>();
  for (int64_t i = 0; i < labels.size(0); ++i)
    by_class.at(static_cast<std::size_t>(labels[i])).push_back(i);
  std::mt19937_64 rng(seed);
  std::vector<int64_t> keep;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& members = by_class[c];
    if (members.empty()) continue;
    std::shuffle(members.begin(), members.end(), rng);
    const auto take = static_cast<std::size_t>(
        std::llround(fraction * static_cast<double>(members.size())));
    if (take == 0)
      throw InvalidArgument("subsample: class " + std::to_string(c) + " would be empty");
    keep.insert(keep.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(take));
  }
  std::sort(keep.begin(), keep.end());
  auto b = split.batch(keep);
  return Split(b.images, b.labels);
}

Dataset subsample(const Dataset& dataset, double fraction, uint64_t seed) {
  const auto& spec = dataset.spec();
  return Dataset(spec, subsample(dataset.train(), spec.num_classes, fraction, derive_seed(seed, "train")),
                 subsample(dataset.test(), spec.num_classes, fraction, derive_seed(seed, "test")));
}

std::vector<std::vector<int64_t>> batch_indices(int64_t size, int64_t batch_size, bool shuffle,
                                                uint64_t seed) {
  if (batch_size < 1) throw InvalidArgument("batch size must be >= 1");
  std::vector<int64_t> order(static_cast<std::size_t>(size));
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) {
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<int64_t>> out;
  for (int64_t begin = 0; begin < size; begin += batch_size) {
    const int64_t end = std::min(size, begin + batch_size);
    out.emplace_back(order.begin() + begin, order.begin() + end);
  }
  return out;
}

BatchIterator::BatchIterator(const Split& split, int64_t batch_size, uint64_t seed, bool shuffle)
    : split_(&split), batch_size_(batch_size), seed_(seed), shuffle_(shuffle) {
  if (batch_size < 1) throw InvalidArgument("batch size must be >= 1");
}

std::vector<std::vector<int64_t>> BatchIterator::epoch(int64_t epoch) const {
  return batch_indices(split_->size(), batch_size_, shuffle_,
                       derive_seed(seed_, "epoch" + std::to_string(epoch)));
}

int64_t BatchIterator::batches_per_epoch() const {
  return (split_->size() + batch_size_ - 1) / batch_size_;
}

}  // namespace mid
