#include "advxl/reduce.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace advxl {

std::string to_string(ReductionStrategy s) {
  switch (s) {
    case ReductionStrategy::none: return "none";
    case ReductionStrategy::random_mask: return "random_mask";
    case ReductionStrategy::block_mask: return "block_mask";
    case ReductionStrategy::resize: return "resize";
  }
  return "?";
}

ReductionStrategy parse_reduction_strategy(const std::string& s) {
  if (s == "none") return ReductionStrategy::none;
  if (s == "random_mask") return ReductionStrategy::random_mask;
  if (s == "block_mask") return ReductionStrategy::block_mask;
  if (s == "resize") return ReductionStrategy::resize;
  throw std::invalid_argument("unknown reduction strategy '" + s +
                              "' (expected none, random_mask, block_mask or resize)");
}

namespace {

int masked_keep_count(int tokens, double mask_ratio) {
  return static_cast<int>(std::lround((1.0 - mask_ratio) * tokens));
}

}  // namespace

void ReductionSpec::validate(int base_resolution) const {
  if (patch_size <= 0) throw std::invalid_argument("reduction: patch_size must be positive");
  if (base_resolution <= 0 || base_resolution % patch_size != 0)
    throw std::invalid_argument("reduction: base resolution must be a positive multiple of patch_size");
  const int grid = base_resolution / patch_size;
  switch (strategy) {
    case ReductionStrategy::none: return;
    case ReductionStrategy::random_mask:
    case ReductionStrategy::block_mask:
      if (!(mask_ratio >= 0.0 && mask_ratio < 1.0))
        throw std::invalid_argument("reduction: mask_ratio must lie in [0, 1)");
      if (kept_token_count(*this, base_resolution) < 1 || grid * grid < 1)
        throw std::invalid_argument("reduction: masking would keep no tokens");
      return;
    case ReductionStrategy::resize:
      if (target_resolution <= 0)
        throw std::invalid_argument("reduction: target_resolution must be positive");
      if (target_resolution % patch_size != 0)
        throw std::invalid_argument("reduction: target_resolution " + std::to_string(target_resolution) +
                                    " is not divisible by patch_size " + std::to_string(patch_size));
      return;
  }
}

int ReductionSpec::input_resolution(int base_resolution) const {
  return strategy == ReductionStrategy::resize ? target_resolution : base_resolution;
}

TokenSelection TokenSelection::full(int grid_h, int grid_w) {
  TokenSelection s;
  s.grid_h = grid_h;
  s.grid_w = grid_w;
  s.kept_indices.resize(static_cast<std::size_t>(grid_h) * grid_w);
  std::iota(s.kept_indices.begin(), s.kept_indices.end(), 0);
  return s;
}

void TokenSelection::validate() const {
  if (grid_h <= 0 || grid_w <= 0) throw std::invalid_argument("token selection: empty grid");
  if (kept_indices.empty()) throw std::invalid_argument("token selection: no tokens kept");
  for (std::size_t i = 0; i < kept_indices.size(); ++i) {
    const int k = kept_indices[i];
    if (k < 0 || k >= grid_h * grid_w)
      throw std::invalid_argument("token selection: index " + std::to_string(k) + " out of range");
    if (i > 0 && kept_indices[i - 1] >= k)
      throw std::invalid_argument("token selection: indices must be unique and ascending");
  }
}

TokenSelection random_mask(int grid_h, int grid_w, double mask_ratio, Rng& rng) {
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0))
    throw std::invalid_argument("random_mask: mask_ratio must lie in [0, 1)");
  const int total = grid_h * grid_w;
  const int keep = masked_keep_count(total, mask_ratio);
  if (keep < 1) throw std::invalid_argument("random_mask: kept token count would be 0");
  TokenSelection s = TokenSelection::full(grid_h, grid_w);
  if (keep == total) return s;
  // Partial Fisher-Yates: the first `keep` slots are a uniform subset.
  auto& idx = s.kept_indices;
  for (int i = 0; i < keep; ++i) {
    const int j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(total - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(keep));
  std::sort(idx.begin(), idx.end());
  return s;
}

int block_side(int grid_dim, double keep_fraction) {
  const int side = static_cast<int>(std::lround(grid_dim * std::sqrt(keep_fraction)));
  return std::clamp(side, 1, grid_dim);
}

TokenSelection block_mask(int grid_h, int grid_w, double keep_fraction, Rng* offset_rng) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0))
    throw std::invalid_argument("block_mask: keep_fraction must lie in (0, 1]");
  const int bh = block_side(grid_h, keep_fraction);
  const int bw = block_side(grid_w, keep_fraction);
  int top = (grid_h - bh) / 2;
  int left = (grid_w - bw) / 2;
  if (offset_rng) {
    top = static_cast<int>(offset_rng->below(static_cast<std::uint64_t>(grid_h - bh + 1)));
    left = static_cast<int>(offset_rng->below(static_cast<std::uint64_t>(grid_w - bw + 1)));
  }
  TokenSelection s;
  s.grid_h = grid_h;
  s.grid_w = grid_w;
  s.kept_indices.reserve(static_cast<std::size_t>(bh) * bw);
  for (int r = top; r < top + bh; ++r)
    for (int c = left; c < left + bw; ++c) s.kept_indices.push_back(r * grid_w + c);
  return s;
}

namespace {

struct AxisWeights {
  std::vector<int> first;              // first source index per output index
  std::vector<std::vector<double>> w;  // normalized weights
};

// Triangle filter with support scaled by max(1, in/out), evaluated at pixel
// centers (half-pixel convention).
AxisWeights axis_weights(int in, int out) {
  AxisWeights aw;
  aw.first.resize(static_cast<std::size_t>(out));
  aw.w.resize(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  const double filter_scale = std::max(1.0, scale);
  const double support = filter_scale;
  for (int o = 0; o < out; ++o) {
    const double center = (o + 0.5) * scale;
    const int lo = std::max(0, static_cast<int>(std::floor(center - support + 0.5)));
    const int hi = std::min(in, static_cast<int>(std::floor(center + support + 0.5)));
    std::vector<double> w;
    double total = 0.0;
    for (int i = lo; i < hi; ++i) {
      const double x = (i + 0.5 - center) / filter_scale;
      const double v = std::max(0.0, 1.0 - std::abs(x));
      w.push_back(v);
      total += v;
    }
    if (total > 0.0)
      for (double& v : w) v /= total;
    aw.first[static_cast<std::size_t>(o)] = lo;
    aw.w[static_cast<std::size_t>(o)] = std::move(w);
  }
  return aw;
}

}  // namespace

template <class Real>
void resize_antialias_bilinear(const Real* src, int channels, int height, int width, int target,
                               Real* dst) {
  if (target <= 0) throw std::invalid_argument("resize: target must be positive");
  if (height <= 0 || width <= 0 || channels <= 0) throw std::invalid_argument("resize: empty image");
  if (height == target && width == target) {
    std::copy(src, src + static_cast<std::size_t>(channels) * height * width, dst);
    return;
  }
  const AxisWeights wx = axis_weights(width, target);
  const AxisWeights wy = axis_weights(height, target);
  std::vector<double> tmp(static_cast<std::size_t>(height) * target);
  for (int c = 0; c < channels; ++c) {
    const Real* plane = src + static_cast<std::size_t>(c) * height * width;
    for (int y = 0; y < height; ++y) {
      for (int ox = 0; ox < target; ++ox) {
        const auto& w = wx.w[static_cast<std::size_t>(ox)];
        const int x0 = wx.first[static_cast<std::size_t>(ox)];
        double acc = 0.0;
        for (std::size_t k = 0; k < w.size(); ++k)
          acc += w[k] * static_cast<double>(plane[y * width + x0 + static_cast<int>(k)]);
        tmp[static_cast<std::size_t>(y) * target + ox] = acc;
      }
    }
    Real* out = dst + static_cast<std::size_t>(c) * target * target;
    for (int oy = 0; oy < target; ++oy) {
      const auto& w = wy.w[static_cast<std::size_t>(oy)];
      const int y0 = wy.first[static_cast<std::size_t>(oy)];
      for (int ox = 0; ox < target; ++ox) {
        double acc = 0.0;
        for (std::size_t k = 0; k < w.size(); ++k)
          acc += w[k] * tmp[static_cast<std::size_t>(y0 + static_cast<int>(k)) * target + ox];
        out[oy * target + ox] = static_cast<Real>(std::clamp(acc, 0.0, 1.0));
      }
    }
  }
}

template <class Real>
ImageBatch<Real> resize_batch(const ImageBatch<Real>& images, int target) {
  ImageBatch<Real> out(images.n, images.channels, target, target);
  for (int i = 0; i < images.n; ++i)
    resize_antialias_bilinear(images.sample(i).data(), images.channels, images.height,
                              images.width, target, out.sample(i).data());
  return out;
}

template void resize_antialias_bilinear<float>(const float*, int, int, int, int, float*);
template void resize_antialias_bilinear<double>(const double*, int, int, int, int, double*);
template ImageBatch<float> resize_batch<float>(const ImageBatch<float>&, int);
template ImageBatch<double> resize_batch<double>(const ImageBatch<double>&, int);

int kept_token_count(const ReductionSpec& spec, int base_resolution) {
  const int grid = base_resolution / spec.patch_size;
  switch (spec.strategy) {
    case ReductionStrategy::none: return grid * grid;
    case ReductionStrategy::random_mask: return masked_keep_count(grid * grid, spec.mask_ratio);
    case ReductionStrategy::block_mask: {
      const double keep = 1.0 - spec.mask_ratio;
      return block_side(grid, keep) * block_side(grid, keep);
    }
    case ReductionStrategy::resize: {
      const int g = spec.target_resolution / spec.patch_size;
      return g * g;
    }
  }
  return grid * grid;
}

double reduction_factor(const ReductionSpec& spec, int base_resolution) {
  if (spec.strategy == ReductionStrategy::resize) {
    const double r = static_cast<double>(spec.target_resolution) / base_resolution;
    return r * r;
  }
  const int grid = base_resolution / spec.patch_size;
  return static_cast<double>(kept_token_count(spec, base_resolution)) / (grid * grid);
}

}  // namespace advxl
