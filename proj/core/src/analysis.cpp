#include "mid/analysis.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "mid/error.hpp"
#include "mid/evaluation.hpp"

namespace mid {

namespace F = torch::nn::functional;

namespace {

torch::Tensor low_pass_mask(int64_t height, int64_t width, double radius,
                            const torch::TensorOptions& options) {
  auto rows = torch::arange(height, options) - static_cast<double>(height / 2);
  auto cols = torch::arange(width, options) - static_cast<double>(width / 2);
  auto dist = (rows.pow(2).unsqueeze(1) + cols.pow(2).unsqueeze(0)).sqrt();
  return (dist <= radius).to(options.dtype());
}

}  // namespace

FrequencyBands frequency_split(const torch::Tensor& images, double radius) {
  if (images.dim() != 4) throw ShapeError("frequency_split expects [B,C,H,W]");
  if (!(radius >= 0.0)) throw InvalidArgument("frequency radius must be >= 0");
  const auto real = images.dtype() == torch::kFloat64 ? torch::kFloat64 : torch::kFloat32;
  const auto x = images.to(real);
  const std::vector<int64_t> dims = {-2, -1};
  auto spectrum = torch::fft::fftshift(torch::fft::fft2(x), dims);
  auto mask = low_pass_mask(x.size(2), x.size(3), radius, x.options());
  auto back = [&](const torch::Tensor& s) {
    return torch::real(torch::fft::ifft2(torch::fft::ifftshift(s, dims)));
  };
  return {back(spectrum * mask), back(spectrum * (1.0 - mask))};
}

double full_spectrum_radius(int64_t height, int64_t width) {
  const double h = static_cast<double>(height / 2);
  const double w = static_cast<double>(width / 2);
  return std::sqrt(h * h + w * w);
}

std::vector<double> FrequencyCurve::series(const std::string& band,
                                           const std::string& attack) const {
  std::vector<double> out;
  for (double c : cutoffs)
    for (const auto& p : points)
      if (p.cutoff == c && p.band == band && p.attack == attack) out.push_back(p.accuracy);
  return out;
}

FrequencyCurve frequency_robustness_curve(const Classifier& model, const Split& test,
                                          const std::vector<AttackSpec>& specs,
                                          const std::vector<double>& cutoffs, uint64_t seed,
                                          int64_t batch_size) {
  if (specs.empty()) throw InvalidArgument("frequency curve needs at least one attack");
  if (cutoffs.empty()) throw InvalidArgument("frequency curve needs at least one cutoff");
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  const auto target = logits_fn(model);
  FrequencyCurve curve;
  curve.cutoffs = cutoffs;
  std::sort(curve.cutoffs.begin(), curve.cutoffs.end());
  for (const auto& spec : specs) {
    std::mt19937_64 rng(derive_seed(seed, "frequency." + spec.name()));
    std::vector<torch::Tensor> chunks;
    for (int64_t begin = 0; begin < test.size(); begin += batch_size) {
      auto batch = test.slice(begin, std::min(test.size(), begin + batch_size));
      chunks.push_back(
          generate(spec, target, batch, model.head.num_classes(), rng).images.detach());
    }
    const Split attacked(torch::cat(chunks, 0), test.labels());
    for (double cutoff : curve.cutoffs) {
      std::vector<torch::Tensor> low;
      std::vector<torch::Tensor> high;
      for (int64_t begin = 0; begin < attacked.size(); begin += batch_size) {
        auto batch = attacked.slice(begin, std::min(attacked.size(), begin + batch_size));
        auto bands = frequency_split(batch.images, cutoff);
        low.push_back(bands.low);
        high.push_back(bands.high);
      }
      curve.points.push_back({cutoff, "low", spec.name(),
                              accuracy(target, Split(torch::cat(low, 0), test.labels()),
                                       batch_size)});
      curve.points.push_back({cutoff, "high", spec.name(),
                              accuracy(target, Split(torch::cat(high, 0), test.labels()),
                                       batch_size)});
    }
  }
  std::stable_sort(curve.points.begin(), curve.points.end(),
                   [](const auto& a, const auto& b) { return a.cutoff < b.cutoff; });
  return curve;
}

std::string to_csv(const FrequencyCurve& curve) {
  std::ostringstream out;
  out << "R,band,attack,accuracy\n";
  char buffer[64];
  for (const auto& p : curve.points) {
    std::snprintf(buffer, sizeof(buffer), "%g", p.cutoff);
    out << buffer << ',' << p.band << ',' << p.attack << ',';
    std::snprintf(buffer, sizeof(buffer), "%.4f", p.accuracy);
    out << buffer << '\n';
  }
  return out.str();
}

double sparsity_index(const ParamSet& params) {
  torch::NoGradGuard no_grad;
  double total = 0.0;
  for (const auto& [_, t] : params) total += t.to(torch::kFloat64).pow(2).sum().item<double>();
  return total;
}

std::string to_csv(const SparsityTrace& trace) {
  if (trace.epochs.size() != trace.values.size())
    throw ShapeError("sparsity trace: epochs and values differ in length");
  std::ostringstream out;
  out << "epoch,index\n";
  char buffer[64];
  for (std::size_t i = 0; i < trace.values.size(); ++i) {
    std::snprintf(buffer, sizeof(buffer), "%.10g", trace.values[i]);
    out << trace.epochs[i] << ',' << buffer << '\n';
  }
  return out.str();
}

namespace {

std::size_t burn_in_start(std::size_t n, double fraction) {
  if (!(fraction >= 0.0 && fraction <= 1.0))
    throw InvalidArgument("burn-in fraction must be in [0, 1]");
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * n)));
}

}  // namespace

bool sparsity_plateaued(const SparsityTrace& trace, double burn_in_fraction, double tolerance) {
  const auto& v = trace.values;
  if (v.size() < 2) return false;
  for (std::size_t i = burn_in_start(v.size(), burn_in_fraction); i < v.size(); ++i)
    if (std::abs(v[i] - v[i - 1]) >= tolerance * std::abs(v[i - 1])) return false;
  return true;
}

bool sparsity_increasing(const SparsityTrace& trace, double burn_in_fraction) {
  const auto& v = trace.values;
  if (v.size() < 2) return false;
  for (std::size_t i = burn_in_start(v.size(), burn_in_fraction); i < v.size(); ++i)
    if (v[i] < v[i - 1]) return false;
  return true;
}

GradientMap input_gradient_map(const LogitsFn& model, const ImageBatch& batch) {
  auto x = batch.images.detach().clone().requires_grad_(true);
  auto loss = F::cross_entropy(model(x), batch.labels,
                               F::CrossEntropyFuncOptions().reduction(torch::kSum));
  auto grad = torch::autograd::grad({loss}, {x})[0].detach();
  auto flat = grad.flatten(1);
  return {grad, std::get<0>(flat.min(1)), std::get<0>(flat.max(1))};
}

ImageBatch regenerate(const TeacherModel& teacher, const Encoder& student,
                      const ImageBatch& batch) {
  torch::NoGradGuard no_grad;
  return {teacher.decoder().forward(student.forward(batch.images, Mode::Eval), Mode::Eval),
          batch.labels};
}

std::vector<FeatureRow> export_features(const Classifier& model, const Split& split,
                                        const std::vector<AttackSpec>& specs, uint64_t seed,
                                        int64_t batch_size) {
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  const auto target = logits_fn(model);
  std::vector<FeatureRow> rows;
  for (const auto& spec : specs) {
    std::mt19937_64 rng(derive_seed(seed, "features." + spec.name()));
    for (int64_t begin = 0; begin < split.size(); begin += batch_size) {
      auto batch = split.slice(begin, std::min(split.size(), begin + batch_size));
      auto adversarial = generate(spec, target, batch, model.head.num_classes(), rng);
      torch::NoGradGuard no_grad;
      auto features = model.encoder.forward(adversarial.images, Mode::Eval)
                          .flatten(1)
                          .to(torch::kFloat64)
                          .contiguous();
      auto labels = batch.labels.to(torch::kInt64).contiguous();
      const int64_t dim = features.size(1);
      for (int64_t i = 0; i < features.size(0); ++i) {
        FeatureRow row;
        row.sample_id = begin + i;
        row.attack = spec.name();
        row.label = labels[i].item<int64_t>();
        const double* data = features[i].data_ptr<double>();
        row.features.assign(data, data + dim);
        rows.push_back(std::move(row));
      }
    }
  }
  return rows;
}

std::string features_to_csv(const std::vector<FeatureRow>& rows) {
  std::ostringstream out;
  out << "sample_id,attack,label";
  const std::size_t dim = rows.empty() ? 0 : rows.front().features.size();
  for (std::size_t j = 0; j < dim; ++j) out << ",f" << j;
  out << '\n';
  char buffer[64];
  for (const auto& r : rows) {
    if (r.features.size() != dim) throw ShapeError("feature rows differ in dimension");
    out << r.sample_id << ',' << r.attack << ',' << r.label;
    for (double v : r.features) {
      std::snprintf(buffer, sizeof(buffer), "%.8g", v);
      out << ',' << buffer;
    }
    out << '\n';
  }
  return out.str();
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ShapeError("spearman: series differ in length");
  if (x.size() < 2) throw InvalidArgument("spearman needs at least two points");
  auto rx = average_ranks(x);
  auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw NumericError("spearman", "constant series");
  return sxy / std::sqrt(sxx * syy);
}

void write_png(const std::filesystem::path& path, const torch::Tensor& image) {
  if (image.dim() != 2) throw ShapeError("write_png expects [H,W]");
  auto pixels = (image.detach().to(torch::kFloat32).clamp(0.0, 1.0) * 255.0)
                    .round()
                    .to(torch::kUInt8)
                    .contiguous();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(pixels.size(1));
  png.height = static_cast<png_uint_32>(pixels.size(0));
  png.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, pixels.data_ptr<uint8_t>(), 0,
                               nullptr))
    throw Error("cannot write PNG '" + path.string() + "': " + png.message);
}

void write_png_grid(const std::filesystem::path& path, const torch::Tensor& images,
                    int64_t columns) {
  if (images.dim() != 4) throw ShapeError("write_png_grid expects [N,C,H,W]");
  if (columns < 1) throw InvalidArgument("columns must be >= 1");
  const int64_t n = images.size(0), h = images.size(2), w = images.size(3);
  const int64_t cols = std::min(columns, std::max<int64_t>(n, 1));
  const int64_t rows = (n + cols - 1) / cols;
  auto gray = images.detach().to(torch::kFloat32).mean(1);
  auto grid = torch::zeros({std::max<int64_t>(rows, 1) * h, cols * w});
  for (int64_t i = 0; i < n; ++i) {
    const int64_t r = i / cols, c = i % cols;
    grid.slice(0, r * h, (r + 1) * h).slice(1, c * w, (c + 1) * w).copy_(gray[i]);
  }
  write_png(path, grid);
}

}  // namespace mid
