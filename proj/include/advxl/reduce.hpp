#pragma once

#include <string>
#include <vector>

#include "advxl/rng.hpp"
#include "advxl/tensor.hpp"

namespace advxl {

enum class ReductionStrategy { none, random_mask, block_mask, resize };

std::string to_string(ReductionStrategy s);
ReductionStrategy parse_reduction_strategy(const std::string& s);

/// How a stage shortens the token sequence.
struct ReductionSpec {
  ReductionStrategy strategy = ReductionStrategy::none;
  double mask_ratio = 0.0;    // random_mask / block_mask
  int target_resolution = 0;  // resize
  int patch_size = 16;
  bool random_block_offset = false;  // ablation variant of block_mask

  /// Validates against the full-resolution image side.
  void validate(int base_resolution) const;
  /// Side length of the images fed to the model.
  int input_resolution(int base_resolution) const;
  bool operator==(const ReductionSpec&) const = default;
};

/// Subset of grid tokens a forward pass keeps.
struct TokenSelection {
  std::vector<int> kept_indices;  // sorted, unique, row-major grid indices
  int grid_h = 0;
  int grid_w = 0;

  static TokenSelection full(int grid_h, int grid_w);
  bool is_full() const { return static_cast<int>(kept_indices.size()) == grid_h * grid_w; }
  int size() const { return static_cast<int>(kept_indices.size()); }
  void validate() const;
  bool operator==(const TokenSelection&) const = default;
};

/// Keeps round((1 - mask_ratio) * grid_h * grid_w) tokens drawn without replacement.
TokenSelection random_mask(int grid_h, int grid_w, double mask_ratio, Rng& rng);

/// Keeps a contiguous block with sides round(dim * sqrt(keep_fraction)),
/// centered unless `offset_rng` is given (then the offset is uniform).
TokenSelection block_mask(int grid_h, int grid_w, double keep_fraction, Rng* offset_rng = nullptr);

/// Side of the centered block for one grid dimension.
int block_side(int grid_dim, double keep_fraction);

/// Anti-aliased bilinear (triangle filter) resample of a C x H x W image to
/// C x target x target. Filter support grows with the downscale factor.
template <class Real>
void resize_antialias_bilinear(const Real* src, int channels, int height, int width, int target,
                               Real* dst);

template <class Real>
ImageBatch<Real> resize_batch(const ImageBatch<Real>& images, int target);

/// Number of tokens a forward pass sees under `spec` at the given base side.
int kept_token_count(const ReductionSpec& spec, int base_resolution);

/// Kept tokens relative to the full-resolution token count.
double reduction_factor(const ReductionSpec& spec, int base_resolution);

}  // namespace advxl
