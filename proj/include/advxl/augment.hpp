#pragma once

#include <span>
#include <string>
#include <vector>

#include "advxl/rng.hpp"
#include "advxl/tensor.hpp"

namespace advxl {

struct TrainBatch;

/// Whether MixUp/CutMix blends the clean batch (the attack then targets the
/// blended images and labels) or the adversarial batch.
enum class MixOrder { before_attack, after_attack };

std::string to_string(MixOrder o);
MixOrder parse_mix_order(const std::string& s);

/// Training-time regularizers. All off by default.
struct AugmentConfig {
  int randaug_ops = 0;             // ops applied per image
  double randaug_magnitude = 9.0;  // 0..10
  double mixup_alpha = 0.0;        // Beta(alpha, alpha); 0 disables
  double cutmix_alpha = 0.0;
  double mix_prob = 1.0;           // chance a batch is mixed at all
  double switch_prob = 0.5;        // CutMix instead of MixUp when both are on
  MixOrder mix_order = MixOrder::before_attack;
  double drop_path = 0.0;          // stochastic depth rate of the last block

  bool mixes() const { return mixup_alpha > 0.0 || cutmix_alpha > 0.0; }
  bool any() const { return randaug_ops > 0 || mixes() || drop_path > 0.0; }
  void validate() const;
  bool operator==(const AugmentConfig&) const = default;
};

/// A batch blend against the reversed batch: sample i is mixed with sample n-1-i.
struct BatchMix {
  enum class Kind { none, mixup, cutmix };
  Kind kind = Kind::none;
  double lambda = 1.0;              // weight of the original sample
  int y0 = 0, y1 = 0, x0 = 0, x1 = 0;  // CutMix box, pasted from the partner

  bool active() const { return kind != Kind::none; }
};

/// Gamma(shape, 1) by Marsaglia-Tsang, built on Rng for portable draws.
double sample_gamma(double shape, Rng& rng);
double sample_beta(double a, double b, Rng& rng);

/// Draws the batch blend (or none) for an image side.
BatchMix draw_mix(const AugmentConfig& config, int side, Rng& rng);

void apply_mix(const BatchMix& mix, ImageBatch<float>& images);

/// Partner labels and weight for the soft cross-entropy target.
void apply_mix_labels(const BatchMix& mix, TrainBatch& batch);

/// Number of RandAugment operations.
inline constexpr int kRandAugOps = 14;

/// Applies operation `op` at `magnitude` (0..10) to one C x side x side image
/// in [0, 1]; signed ops take their direction from `rng`.
void randaug_op(int op, std::span<float> image, int channels, int side, double magnitude, Rng& rng);

/// `ops` uniformly chosen operations in sequence.
void randaugment(std::span<float> image, int channels, int side, int ops, double magnitude, Rng& rng);

/// n x depth residual-branch scales: 0 for a dropped block, 1 / keep
/// otherwise. Block l drops with probability rate * l / (depth - 1).
std::vector<float> draw_block_scales(int n, int depth, double rate, Rng& rng);

/// RandAugment, stochastic depth and (for before_attack) the batch blend.
/// Returns the blend still to apply after the attack, if any.
BatchMix augment_batch(const AugmentConfig& config, TrainBatch& batch, int depth, Rng& rng);

}  // namespace advxl
