#include "mid/params.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstring>
#include <memory>

#include "mid/error.hpp"

namespace mid {

void ParamSet::add(std::string name, torch::Tensor tensor) {
  if (contains(name)) throw InvalidArgument("duplicate parameter '" + name + "'");
  entries_.emplace_back(std::move(name), std::move(tensor));
}

bool ParamSet::contains(std::string_view name) const {
  for (const auto& [key, _] : entries_)
    if (key == name) return true;
  return false;
}

const torch::Tensor& ParamSet::at(std::string_view name) const {
  for (const auto& [key, value] : entries_)
    if (key == name) return value;
  throw InvalidArgument("unknown parameter '" + std::string(name) + "'");
}

torch::Tensor& ParamSet::at(std::string_view name) {
  for (auto& [key, value] : entries_)
    if (key == name) return value;
  throw InvalidArgument("unknown parameter '" + std::string(name) + "'");
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [key, _] : entries_) out.push_back(key);
  return out;
}

std::vector<torch::Tensor> ParamSet::tensors() const {
  std::vector<torch::Tensor> out;
  out.reserve(entries_.size());
  for (const auto& [_, value] : entries_) out.push_back(value);
  return out;
}

int64_t ParamSet::numel() const {
  int64_t total = 0;
  for (const auto& [_, value] : entries_) total += value.numel();
  return total;
}

ParamSet ParamSet::with_tensors(const std::vector<torch::Tensor>& tensors) const {
  if (tensors.size() != entries_.size())
    throw ShapeError("with_tensors: expected " + std::to_string(entries_.size()) +
                     " tensors, got " + std::to_string(tensors.size()));
  ParamSet out;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (!tensors[i].sizes().equals(entries_[i].second.sizes()))
      throw ShapeError("with_tensors: shape mismatch for '" + entries_[i].first + "'");
    out.entries_.emplace_back(entries_[i].first, tensors[i]);
  }
  return out;
}

ParamSet ParamSet::clone() const {
  ParamSet out;
  for (const auto& [key, value] : entries_) out.entries_.emplace_back(key, value.detach().clone());
  return out;
}

ParamSet ParamSet::as_leaves() const {
  ParamSet out;
  for (const auto& [key, value] : entries_)
    out.entries_.emplace_back(key, value.detach().clone().requires_grad_(true));
  return out;
}

ParamSet ParamSet::to(torch::Dtype dtype) const {
  ParamSet out;
  for (const auto& [key, value] : entries_)
    out.entries_.emplace_back(key, value.detach().to(dtype).clone());
  return out;
}

ParamSet ParamSet::prefixed(std::string_view prefix) const {
  ParamSet out;
  for (const auto& [key, value] : entries_)
    out.entries_.emplace_back(std::string(prefix) + key, value);
  return out;
}

ParamSet ParamSet::strip_prefix(std::string_view prefix) const {
  ParamSet out;
  for (const auto& [key, value] : entries_)
    if (key.starts_with(prefix)) out.entries_.emplace_back(key.substr(prefix.size()), value);
  return out;
}

bool ParamSet::identical(const ParamSet& other) const {
  if (size() != other.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& [ka, a] = entries_[i];
    const auto& [kb, b] = other.entries_[i];
    if (ka != kb || a.scalar_type() != b.scalar_type() || !a.sizes().equals(b.sizes()))
      return false;
    if (!torch::equal(a, b)) return false;
  }
  return true;
}

torch::Tensor flatten_tensors(const std::vector<torch::Tensor>& tensors) {
  std::vector<torch::Tensor> flat;
  flat.reserve(tensors.size());
  for (const auto& t : tensors) flat.push_back(t.reshape({-1}));
  return torch::cat(flat);
}

namespace {

struct DigestDeleter {
  void operator()(EVP_MD_CTX* ctx) const { EVP_MD_CTX_free(ctx); }
};

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) { EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr); }
  void update(const void* data, std::size_t size) { EVP_DigestUpdate(ctx_.get(), data, size); }
  void update(std::string_view s) { update(s.data(), s.size()); }
  std::array<unsigned char, 32> digest() {
    std::array<unsigned char, 32> out{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_.get(), out.data(), &len);
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, DigestDeleter> ctx_;
};

std::string to_hex(const std::array<unsigned char, 32>& digest) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(64);
  for (unsigned char c : digest) {
    out.push_back(kHex[c >> 4]);
    out.push_back(kHex[c & 0xF]);
  }
  return out;
}

}  // namespace

std::string hash_params(const ParamSet& params) {
  Sha256 sha;
  for (const auto& [key, value] : params) {
    sha.update(key);
    auto t = value.detach().contiguous().cpu();
    for (auto d : t.sizes()) sha.update(&d, sizeof(d));
    sha.update(std::string_view(c10::toString(t.scalar_type())));
    sha.update(t.data_ptr(), t.numel() * t.element_size());
  }
  return to_hex(sha.digest());
}

std::string sha256_hex(std::string_view bytes) {
  Sha256 sha;
  sha.update(bytes);
  return to_hex(sha.digest());
}

uint64_t derive_seed(uint64_t seed, std::string_view stage) {
  Sha256 sha;
  sha.update(std::to_string(seed) + ":" + std::string(stage));
  auto digest = sha.digest();
  uint64_t out = 0;
  for (int i = 0; i < 8; ++i) out = (out << 8) | digest[i];
  return out;
}

}  // namespace mid
