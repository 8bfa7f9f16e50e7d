#include <gtest/gtest.h>

#include "mid/error.hpp"
#include "mid/params.hpp"

using mid::ParamSet;

TEST(ParamSet, KeepsInsertionOrderAndRejectsDuplicates) {
  ParamSet p;
  p.add("b", torch::ones({2}));
  p.add("a", torch::zeros({3}));
  EXPECT_EQ(p.names(), (std::vector<std::string>{"b", "a"}));
  EXPECT_EQ(p.numel(), 5);
  EXPECT_THROW(p.add("a", torch::zeros({1})), mid::Error);
  EXPECT_THROW(p.at("missing"), mid::Error);
}

TEST(ParamSet, CloneIsDeepAndDetached) {
  ParamSet p;
  p.add("w", torch::ones({2}, torch::requires_grad()));
  auto c = p.clone();
  EXPECT_FALSE(c.at("w").requires_grad());
  c.at("w").add_(1.0);
  EXPECT_EQ(p.at("w").sum().item<double>(), 2.0);
  EXPECT_TRUE(p.as_leaves().at("w").requires_grad());
}

TEST(ParamSet, PrefixRoundTrip) {
  ParamSet p;
  p.add("conv.weight", torch::ones({1}));
  auto prefixed = p.prefixed("encoder.");
  EXPECT_TRUE(prefixed.contains("encoder.conv.weight"));
  EXPECT_TRUE(prefixed.strip_prefix("encoder.").identical(p));
  EXPECT_TRUE(prefixed.strip_prefix("decoder.").empty());
}

TEST(ParamSet, WithTensorsChecksShapes) {
  ParamSet p;
  p.add("w", torch::ones({2}));
  EXPECT_THROW(p.with_tensors({torch::ones({3})}), mid::Error);
  EXPECT_THROW(p.with_tensors({}), mid::Error);
  EXPECT_EQ(p.with_tensors({torch::full({2}, 3.0)}).at("w")[0].item<double>(), 3.0);
}

TEST(Hashing, ContentSensitiveAndStable) {
  ParamSet p;
  p.add("w", torch::arange(6, torch::kFloat32));
  const auto h = mid::hash_params(p);
  EXPECT_EQ(h.size(), 64u);
  EXPECT_EQ(h, mid::hash_params(p.clone()));
  auto q = p.clone();
  q.at("w")[0] = 1e-7;
  EXPECT_NE(h, mid::hash_params(q));
  ParamSet renamed;
  renamed.add("v", p.at("w"));
  EXPECT_NE(h, mid::hash_params(renamed));
}

TEST(Hashing, Sha256KnownVector) {
  EXPECT_EQ(mid::sha256_hex("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Hashing, DerivedSeedsDependOnStage) {
  EXPECT_EQ(mid::derive_seed(1, "teacher"), mid::derive_seed(1, "teacher"));
  EXPECT_NE(mid::derive_seed(1, "teacher"), mid::derive_seed(1, "meta"));
  EXPECT_NE(mid::derive_seed(1, "teacher"), mid::derive_seed(2, "teacher"));
}

TEST(Flatten, ConcatenatesInOrder) {
  auto flat = mid::flatten_tensors({torch::ones({2, 2}), torch::zeros({1})});
  EXPECT_EQ(flat.numel(), 5);
  EXPECT_EQ(flat[4].item<double>(), 0.0);
}
