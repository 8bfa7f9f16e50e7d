#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "helpers.hpp"
#include "mid/error.hpp"

namespace fs = std::filesystem;
using namespace mid;

namespace {

const Dataset& mnist() {
  static const Dataset dataset = load_dataset(read_manifest(MID_TEST_DATA_DIR));
  return dataset;
}

}  // namespace

TEST(Data, LoadsManifestAndSplits) {
  const auto& d = mnist();
  EXPECT_EQ(d.spec().name, "mnist");
  EXPECT_EQ(d.spec().num_classes, 10);
  EXPECT_EQ(d.train().size(), 4000);
  EXPECT_EQ(d.test().size(), 1000);
  EXPECT_EQ(d.train().images().sizes(), (std::vector<int64_t>{4000, 1, 28, 28}));
  EXPECT_GE(d.train().images().min().item<double>(), 0.0);
  EXPECT_LE(d.train().images().max().item<double>(), 1.0);
  for (auto count : d.test().class_counts(10)) EXPECT_EQ(count, 100);
}

TEST(Data, IdxRoundTrip) {
  auto dir = fixtures::temp_dir("idx");
  auto images = torch::randint(256, {3, 5, 4}, torch::kUInt8);
  auto labels = torch::tensor({1, 0, 9}, torch::kUInt8);
  for (const std::string ext : {"", ".gz"}) {
    write_idx_images(dir / ("img" + ext), images);
    write_idx_labels(dir / ("lbl" + ext), labels);
    EXPECT_TRUE(read_idx_images(dir / ("img" + ext)).equal(images.unsqueeze(1)));
    EXPECT_TRUE(read_idx_labels(dir / ("lbl" + ext)).equal(labels));
  }
}

TEST(Data, ChecksumMismatchIsIngestionError) {
  auto dir = fixtures::temp_dir("corrupt");
  for (const auto& entry : fs::directory_iterator(MID_TEST_DATA_DIR))
    fs::copy(entry.path(), dir / entry.path().filename());
  write_idx_labels(dir / "t10k-labels-idx1-ubyte.gz", torch::zeros({1000}, torch::kUInt8));
  EXPECT_THROW(load_dataset(read_manifest(dir)), IngestionError);
  fs::remove(dir / "train-images-idx3-ubyte.gz");
  EXPECT_THROW(load_dataset(read_manifest(dir)), IngestionError);
  EXPECT_THROW(read_manifest(dir / "nowhere"), IngestionError);
}

TEST(Data, TruncatedIdxIsIngestionError) {
  auto dir = fixtures::temp_dir("trunc");
  std::ofstream(dir / "bad", std::ios::binary) << std::string("\x00\x00\x08\x03\x00", 5);
  EXPECT_THROW(read_idx_images(dir / "bad"), IngestionError);
}

TEST(Data, StratifiedSubsample) {
  const auto& d = mnist();
  auto half = subsample(d, 0.5, 11);
  EXPECT_EQ(half.test().size(), 500);
  for (auto count : half.test().class_counts(10)) EXPECT_EQ(count, 50);
  auto again = subsample(d, 0.5, 11);
  EXPECT_TRUE(half.train().labels().equal(again.train().labels()));
  EXPECT_TRUE(half.train().images().equal(again.train().images()));
  EXPECT_EQ(subsample(d, 1.0, 11).train().size(), 4000);
  EXPECT_THROW(subsample(d, 0.0, 11), InvalidArgument);
  EXPECT_THROW(subsample(d, 1e-5, 11), InvalidArgument);
}

TEST(Data, BatchIteratorCoversEachEpochOnce) {
  Split split(torch::zeros({10, 1, 2, 2}), torch::zeros({10}, torch::kInt64));
  BatchIterator it(split, 3, 5);
  EXPECT_EQ(it.batches_per_epoch(), 4);
  auto first = it.epoch(1);
  std::multiset<int64_t> seen;
  for (const auto& b : first) seen.insert(b.begin(), b.end());
  EXPECT_EQ(seen.size(), 10u);
  EXPECT_EQ(std::set<int64_t>(seen.begin(), seen.end()).size(), 10u);
  EXPECT_EQ(first, it.epoch(1));
  EXPECT_NE(first, it.epoch(2));
}

TEST(Data, BatchValidation) {
  ImageBatch ok{torch::full({2, 1, 2, 2}, 0.5), torch::tensor({0, 1}, torch::kInt64)};
  EXPECT_NO_THROW(ok.validate(2));
  EXPECT_THROW(ok.validate(1), InvalidArgument);
  ImageBatch out_of_range{torch::full({2, 1, 2, 2}, 1.5), ok.labels};
  EXPECT_THROW(out_of_range.validate(2), InvalidArgument);
  ImageBatch misaligned{ok.images, torch::tensor({0}, torch::kInt64)};
  EXPECT_THROW(misaligned.validate(2), ShapeError);
  EXPECT_THROW(Split(torch::zeros({2, 4}), torch::zeros({2})), ShapeError);
}
