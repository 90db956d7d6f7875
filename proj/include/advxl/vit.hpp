#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "advxl/parallel.hpp"
#include "advxl/reduce.hpp"
#include "advxl/tensor.hpp"

namespace advxl {

enum class HeadMode { classifier, projection };

/// Miniature ViT image encoder. `image_size` is the side the position
/// embedding grid currently corresponds to.
struct VitConfig {
  int image_size = 32;
  int patch_size = 4;
  int channels = 3;
  int depth = 2;
  int width = 32;
  int heads = 2;
  double mlp_ratio = 2.0;
  HeadMode head_mode = HeadMode::classifier;
  int num_classes = 10;  // classifier head
  int embed_dim = 32;    // projection head

  int grid() const { return image_size / patch_size; }
  int tokens() const { return grid() * grid(); }
  int patch_dim() const { return channels * patch_size * patch_size; }
  int mlp_hidden() const;
  int output_dim() const { return head_mode == HeadMode::classifier ? num_classes : embed_dim; }
  void validate() const;
  bool operator==(const VitConfig&) const = default;
};

std::string to_string(HeadMode m);
HeadMode parse_head_mode(const std::string& s);

/// Names and shapes of every ViT parameter. Position embeddings are stored as
/// [grid_h, grid_w, width].
ParamLayout vit_layout(const VitConfig& config);

/// Xavier-uniform linear weights, zero biases, unit LayerNorm gains,
/// N(0, 0.02^2) position embeddings.
template <class Real>
ParamStore<Real> init_vit_params(const VitConfig& config, std::uint64_t seed);

/// Learned position-embedding table over a token grid.
template <class Real>
struct PosEmbedGrid {
  int grid_h = 0;
  int grid_w = 0;
  int width = 0;
  std::vector<Real> table;  // (grid_h * grid_w) x width, row-major

  bool operator==(const PosEmbedGrid&) const = default;
};

/// Channel-wise bilinear resampling of the grid (align-corners sampling).
template <class Real>
PosEmbedGrid<Real> interpolate_pos_embed(const PosEmbedGrid<Real>& grid, int new_h, int new_w);

template <class Real>
PosEmbedGrid<Real> extract_pos_embed(const ParamStore<Real>& params);

/// Copies `params` into the layout for `new_config` (which may differ only in
/// image_size), interpolating the position embeddings. Entries outside the
/// ViT layout are carried over unchanged.
template <class Real>
ParamStore<Real> resize_vit_params(const ParamStore<Real>& params, const VitConfig& old_config,
                                   const VitConfig& new_config);

template <class Real>
class VitModel {
 public:
  using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using RowVec = Eigen::Matrix<Real, 1, Eigen::Dynamic>;

  struct BlockTape {
    Mat xhat1, a, qkv, o, xhat2, b, h_pre, g;
    RowVec rstd1, rstd2;
    std::vector<Mat> probs;
  };

  /// Activations of one sample's forward pass, consumed by backward().
  struct Tape {
    std::vector<int> tokens;
    Mat patches;
    std::vector<BlockTape> blocks;
    std::vector<Real> block_scale;  // empty: every residual branch at scale 1
    RowVec pooled, xhat_f, f, z;
    Real rstd_f = Real(0);
    Real z_norm = Real(0);
  };

  explicit VitModel(VitConfig config);

  const VitConfig& config() const { return config_; }

  /// One C x H x W image (H == W == config.image_size). `selection` restricts
  /// the tokens that enter the encoder. Output: logits, or a unit embedding
  /// in projection mode. `block_scale` (depth entries, stochastic depth)
  /// multiplies both residual branches of each block.
  void forward(const ParamStore<Real>& params, std::span<const Real> image,
               const TokenSelection* selection, Tape& tape, std::span<Real> out,
               std::span<const Real> block_scale = {}) const;

  /// Reverse pass for one sample. Parameter gradients are accumulated into
  /// `grad` (skipped when null); input gradients are written to `dimage`
  /// (skipped when empty).
  void backward(const ParamStore<Real>& params, const Tape& tape, std::span<const Real> dout,
                ParamStore<Real>* grad, std::span<Real> dimage) const;

 private:
  void check_params(const ParamStore<Real>& params) const;

  VitConfig config_;
  struct BlockOffsets {
    std::size_t norm1_w, norm1_b, qkv_w, qkv_b, proj_w, proj_b, norm2_w, norm2_b, fc1_w, fc1_b,
        fc2_w, fc2_b;
  };
  std::size_t patch_w_, patch_b_, pos_, norm_w_, norm_b_, head_w_, head_b_;
  std::vector<BlockOffsets> blocks_;
};

/// Batched forward/backward over samples, serial or OpenMP-parallel.
template <class Real>
struct BatchPass {
  std::vector<typename VitModel<Real>::Tape> tapes;
  std::vector<Real> outputs;  // n x output_dim
  int n = 0;
  int dim = 0;

  std::span<const Real> output(int i) const {
    return {outputs.data() + static_cast<std::size_t>(i) * dim, static_cast<std::size_t>(dim)};
  }
};

/// `selections` is empty (all tokens) or holds one entry per sample;
/// `block_scales` is empty or n x depth.
template <class Real>
void forward_batch(const VitModel<Real>& model, const ParamStore<Real>& params,
                   const ImageBatch<Real>& images, std::span<const TokenSelection> selections,
                   BatchPass<Real>& pass, Exec exec = Exec::parallel,
                   std::span<const Real> block_scales = {});

/// Sums per-sample parameter gradients in a fixed grouping that does not
/// depend on the thread count, so serial and parallel runs agree bitwise.
template <class Real>
void backward_batch(const VitModel<Real>& model, const ParamStore<Real>& params,
                    const BatchPass<Real>& pass, std::span<const Real> douts,
                    ParamStore<Real>* grad, ImageBatch<Real>* dimages, Exec exec = Exec::parallel);

/// Forward multiply-accumulate count of one sample with `tokens` tokens:
/// embedding + depth * (4 T W^2 + 2 T^2 W + 2 T W^2 r) + head.
double forward_flops(const VitConfig& config, int tokens);

/// GFLOPs to train on one sample whose adversary takes `attack_steps` steps:
/// (k + 1) forward+backward passes, backward counted as 2x forward.
double flops_per_sample(const VitConfig& config, int tokens, int attack_steps);

}  // namespace advxl
