#include "advxl/augment.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

#include "advxl/objectives.hpp"

namespace advxl {

std::string to_string(MixOrder o) { return o == MixOrder::before_attack ? "before_attack" : "after_attack"; }

MixOrder parse_mix_order(const std::string& s) {
  if (s == "before_attack") return MixOrder::before_attack;
  if (s == "after_attack") return MixOrder::after_attack;
  throw std::invalid_argument("unknown mix order '" + s + "' (expected before_attack or after_attack)");
}

void AugmentConfig::validate() const {
  if (randaug_ops < 0) throw std::invalid_argument("augment: randaug ops must be >= 0");
  if (!(randaug_magnitude >= 0.0 && randaug_magnitude <= 10.0))
    throw std::invalid_argument("augment: randaug magnitude must lie in [0, 10]");
  if (!(mixup_alpha >= 0.0) || !(cutmix_alpha >= 0.0))
    throw std::invalid_argument("augment: mixup and cutmix alpha must be >= 0");
  if (!(mix_prob >= 0.0 && mix_prob <= 1.0) || !(switch_prob >= 0.0 && switch_prob <= 1.0))
    throw std::invalid_argument("augment: probabilities must lie in [0, 1]");
  if (!(drop_path >= 0.0 && drop_path < 1.0)) throw std::invalid_argument("augment: drop_path must lie in [0, 1)");
}

double sample_gamma(double shape, Rng& rng) {
  if (!(shape > 0.0)) throw std::invalid_argument("sample_gamma: shape must be > 0");
  if (shape < 1.0) return sample_gamma(shape + 1.0, rng) * std::pow(rng.uniform_open0(), 1.0 / shape);
  const double d = shape - 1.0 / 3.0, c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = rng.normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = rng.uniform_open0();
    if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
  }
}

double sample_beta(double a, double b, Rng& rng) {
  const double x = sample_gamma(a, rng), y = sample_gamma(b, rng);
  return x / (x + y);
}

BatchMix draw_mix(const AugmentConfig& config, int side, Rng& rng) {
  BatchMix mix;
  if (!config.mixes() || rng.uniform() >= config.mix_prob) return mix;
  bool cut = config.cutmix_alpha > 0.0;
  if (cut && config.mixup_alpha > 0.0) cut = rng.uniform() < config.switch_prob;
  if (!cut) {
    mix.kind = BatchMix::Kind::mixup;
    mix.lambda = sample_beta(config.mixup_alpha, config.mixup_alpha, rng);
    return mix;
  }
  mix.kind = BatchMix::Kind::cutmix;
  const double lam = sample_beta(config.cutmix_alpha, config.cutmix_alpha, rng);
  const int cut_side = static_cast<int>(side * std::sqrt(1.0 - lam));
  const int cy = static_cast<int>(rng.below(static_cast<std::uint64_t>(side)));
  const int cx = static_cast<int>(rng.below(static_cast<std::uint64_t>(side)));
  mix.y0 = std::clamp(cy - cut_side / 2, 0, side);
  mix.y1 = std::clamp(cy + cut_side / 2, 0, side);
  mix.x0 = std::clamp(cx - cut_side / 2, 0, side);
  mix.x1 = std::clamp(cx + cut_side / 2, 0, side);
  // the label weight follows the box actually pasted
  mix.lambda = 1.0 - static_cast<double>((mix.y1 - mix.y0) * (mix.x1 - mix.x0)) / (side * side);
  return mix;
}

void apply_mix(const BatchMix& mix, ImageBatch<float>& images) {
  if (!mix.active()) return;
  const ImageBatch<float> src = images;
  const int n = images.n, side = images.height;
  for (int i = 0; i < n; ++i) {
    auto dst = images.sample(i);
    const auto a = src.sample(i), b = src.sample(n - 1 - i);
    if (mix.kind == BatchMix::Kind::mixup) {
      const float lam = static_cast<float>(mix.lambda);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = lam * a[j] + (1.0f - lam) * b[j];
      continue;
    }
    for (int ch = 0; ch < images.channels; ++ch)
      for (int y = mix.y0; y < mix.y1; ++y)
        for (int x = mix.x0; x < mix.x1; ++x) {
          const std::size_t k = (static_cast<std::size_t>(ch) * side + y) * images.width + x;
          dst[k] = b[k];
        }
  }
}

void apply_mix_labels(const BatchMix& mix, TrainBatch& batch) {
  if (!mix.active()) return;
  batch.mix_labels.assign(batch.labels.rbegin(), batch.labels.rend());
  batch.mix_lambda = static_cast<float>(mix.lambda);
}

namespace {

float gray(std::span<const float> img, int plane, std::size_t k) {
  return 0.299f * img[k] + 0.587f * img[plane + k] + 0.114f * img[2 * static_cast<std::size_t>(plane) + k];
}

void clamp01(std::span<float> img) {
  for (float& v : img) v = std::clamp(v, 0.0f, 1.0f);
}

// Nearest-neighbour affine warp about the image center; uncovered pixels take mid-gray.
void warp(std::span<float> img, int channels, int side, double a, double b, double c, double d, double tx,
          double ty) {
  const std::vector<float> src(img.begin(), img.end());
  const double mid = (side - 1) / 2.0;
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const double u = x - mid, v = y - mid;
      const long sx = std::lround(a * u + b * v + tx + mid), sy = std::lround(c * u + d * v + ty + mid);
      const bool inside = sx >= 0 && sx < side && sy >= 0 && sy < side;
      for (int ch = 0; ch < channels; ++ch) {
        const std::size_t plane = static_cast<std::size_t>(ch) * side * side;
        img[plane + static_cast<std::size_t>(y) * side + x] =
            inside ? src[plane + static_cast<std::size_t>(sy) * side + sx] : 0.5f;
      }
    }
}

// out = base + factor * (img - base)
void blend(std::span<float> img, std::span<const float> base, double factor) {
  for (std::size_t k = 0; k < img.size(); ++k)
    img[k] = static_cast<float>(base[k] + factor * (img[k] - base[k]));
  clamp01(img);
}

}  // namespace

void randaug_op(int op, std::span<float> img, int channels, int side, double magnitude, Rng& rng) {
  const double f = magnitude / 10.0;
  const double sign = rng.below(2) ? 1.0 : -1.0;
  const int plane = side * side;
  const std::size_t planes = img.size();
  switch (op) {
    case 0:  // identity
      return;
    case 1: {  // autocontrast
      for (int ch = 0; ch < channels; ++ch) {
        auto p = img.subspan(static_cast<std::size_t>(ch) * plane, static_cast<std::size_t>(plane));
        const auto [lo, hi] = std::minmax_element(p.begin(), p.end());
        const float l = *lo, h = *hi;
        if (h - l > 1e-6f)
          for (float& v : p) v = (v - l) / (h - l);
      }
      return;
    }
    case 2: {  // equalize, 256-level histogram per channel
      for (int ch = 0; ch < channels; ++ch) {
        auto p = img.subspan(static_cast<std::size_t>(ch) * plane, static_cast<std::size_t>(plane));
        std::array<int, 256> hist{};
        for (float v : p) ++hist[static_cast<std::size_t>(std::clamp(std::lround(v * 255.0f), 0L, 255L))];
        std::array<double, 256> cdf{};
        int acc = 0;
        for (int i = 0; i < 256; ++i) cdf[static_cast<std::size_t>(i)] = (acc += hist[static_cast<std::size_t>(i)]);
        const double first = *std::find_if(cdf.begin(), cdf.end(), [](double c) { return c > 0; });
        if (plane - first < 1) continue;
        for (float& v : p) {
          const double c = cdf[static_cast<std::size_t>(std::clamp(std::lround(v * 255.0f), 0L, 255L))];
          v = static_cast<float>((c - first) / (plane - first));
        }
      }
      return;
    }
    case 3: {  // rotate up to 30 degrees
      const double t = sign * f * 30.0 * 3.14159265358979323846 / 180.0;
      warp(img, channels, side, std::cos(t), -std::sin(t), std::sin(t), std::cos(t), 0, 0);
      return;
    }
    case 4: {  // solarize; magnitude 0 leaves every pixel
      const float thr = static_cast<float>(256.0 * (1.0 - f) / 255.0);
      for (float& v : img)
        if (v >= thr) v = 1.0f - v;
      return;
    }
    case 5:  // color (saturation)
    case 7: {  // contrast
      std::vector<float> base(planes);
      if (op == 5 && channels == 3) {
        for (int k = 0; k < plane; ++k)
          for (int ch = 0; ch < 3; ++ch)
            base[static_cast<std::size_t>(ch) * plane + k] = gray(img, plane, static_cast<std::size_t>(k));
      } else {
        double mean = 0.0;
        for (int k = 0; k < plane; ++k)
          mean += channels == 3 ? gray(img, plane, static_cast<std::size_t>(k)) : img[static_cast<std::size_t>(k)];
        std::fill(base.begin(), base.end(), static_cast<float>(mean / plane));
      }
      blend(img, base, 1.0 + 0.9 * f * sign);
      return;
    }
    case 6: {  // posterize to 8 - 4f bits
      const int bits = 8 - static_cast<int>(std::lround(4.0 * f));
      const int mask = ~((1 << (8 - bits)) - 1) & 0xFF;
      for (float& v : img) v = static_cast<float>(static_cast<int>(std::clamp(v, 0.0f, 1.0f) * 255.0f) & mask) / 255.0f;
      return;
    }
    case 8:  // brightness
      blend(img, std::vector<float>(planes, 0.0f), 1.0 + 0.9 * f * sign);
      return;
    case 9: {  // sharpness against a 3x3 smoothing kernel, borders kept
      std::vector<float> base(img.begin(), img.end());
      for (int ch = 0; ch < channels; ++ch)
        for (int y = 1; y + 1 < side; ++y)
          for (int x = 1; x + 1 < side; ++x) {
            double s = 0.0;
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx)
                s += (dy == 0 && dx == 0 ? 5.0 : 1.0) *
                     img[static_cast<std::size_t>(ch) * plane + static_cast<std::size_t>(y + dy) * side + x + dx];
            base[static_cast<std::size_t>(ch) * plane + static_cast<std::size_t>(y) * side + x] =
                static_cast<float>(s / 13.0);
          }
      blend(img, base, 1.0 + 0.9 * f * sign);
      return;
    }
    case 10:  // shear x
      warp(img, channels, side, 1, sign * 0.3 * f, 0, 1, 0, 0);
      return;
    case 11:  // shear y
      warp(img, channels, side, 1, 0, sign * 0.3 * f, 1, 0, 0);
      return;
    case 12:  // translate x by up to 45% of the side
      warp(img, channels, side, 1, 0, 0, 1, sign * 0.45 * f * side, 0);
      return;
    case 13:  // translate y
      warp(img, channels, side, 1, 0, 0, 1, 0, sign * 0.45 * f * side);
      return;
    default:
      throw std::invalid_argument("randaug_op: unknown op " + std::to_string(op));
  }
}

void randaugment(std::span<float> image, int channels, int side, int ops, double magnitude, Rng& rng) {
  for (int k = 0; k < ops; ++k) {
    const int op = static_cast<int>(rng.below(kRandAugOps));
    randaug_op(op, image, channels, side, magnitude, rng);
  }
}

std::vector<float> draw_block_scales(int n, int depth, double rate, Rng& rng) {
  std::vector<float> s(static_cast<std::size_t>(n) * depth, 1.0f);
  for (int i = 0; i < n; ++i)
    for (int l = 0; l < depth; ++l) {
      const double p = depth > 1 ? rate * l / (depth - 1) : rate;
      if (p <= 0.0) continue;
      s[static_cast<std::size_t>(i) * depth + l] = rng.uniform() < p ? 0.0f : static_cast<float>(1.0 / (1.0 - p));
    }
  return s;
}

BatchMix augment_batch(const AugmentConfig& config, TrainBatch& batch, int depth, Rng& rng) {
  ImageBatch<float>& images = batch.images;
  if (config.randaug_ops > 0)
    for (int i = 0; i < images.n; ++i)
      randaugment(images.sample(i), images.channels, images.height, config.randaug_ops, config.randaug_magnitude, rng);
  if (config.drop_path > 0.0) batch.block_scales = draw_block_scales(images.n, depth, config.drop_path, rng);
  const BatchMix mix = draw_mix(config, images.height, rng);
  if (config.mix_order == MixOrder::after_attack) return mix;
  apply_mix(mix, images);
  apply_mix_labels(mix, batch);
  return {};
}

}  // namespace advxl
