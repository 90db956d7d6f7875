#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "advxl/augment.hpp"
#include "advxl/perturb.hpp"
#include "advxl/text_embeddings.hpp"
#include "advxl/vit.hpp"

namespace advxl {

enum class Objective { supervised, contrastive };

std::string to_string(Objective o);
Objective parse_objective(const std::string& s);

/// Learnable temperature, parameterized as log(tau) and clamped to
/// [kMinTau, kMaxTau].
struct TemperatureParam {
  static constexpr double kMinTau = 1e-3;
  static constexpr double kMaxTau = 100.0;
  static constexpr double kInitTau = 0.07;

  double log_tau = std::log(kInitTau);

  double tau() const;
  void clamp();
};

/// Mean negative log-softmax of the true class with optional label smoothing.
/// Writes d(loss)/d(logits) into `dlogits` when non-empty.
template <class Real>
Real cross_entropy(std::span<const Real> logits, int num_classes, std::span<const int> labels,
                   double label_smoothing = 0.0, std::span<Real> dlogits = {});

struct ContrastiveGrads {
  std::span<double> dimage;  // n x D, may be empty
  std::span<double> dtext;   // n x D, may be empty
  double* dtau = nullptr;
};

/// Symmetric image-text contrastive loss over in-batch similarities / tau,
/// with the 1/(2n) normalization. Rows are expected to be unit vectors.
double contrastive_loss(std::span<const double> image_embeds, std::span<const double> text_embeds,
                        int n, int dim, double tau, ContrastiveGrads grads = {});

/// logits[i][c] = <image_i, table[class_keys[c]]> / tau.
std::vector<double> zero_shot_logits(std::span<const double> image_embeds, int n,
                                     const TextEmbeddingTable& table,
                                     std::span<const std::string> class_keys, double tau);

/// A batch for either objective: labels (supervised) or text rows into the
/// frozen table (contrastive).
struct TrainBatch {
  ImageBatch<float> images;
  std::vector<int> labels;
  std::vector<int> text_rows;
  std::vector<TokenSelection> selections;  // empty: all tokens
  std::vector<int> mix_labels;  // MixUp/CutMix partners; target = lambda * labels + (1 - lambda) * mix_labels
  float mix_lambda = 1.0f;
  std::vector<float> block_scales;  // n x depth stochastic-depth scales, empty: none
};

/// What the attacked loss is computed against.
struct ObjectiveContext {
  Objective kind = Objective::supervised;
  const TextEmbeddingTable* table = nullptr;  // contrastive only
  double label_smoothing = 0.0;
  double tau = TemperatureParam::kInitTau;
  bool tau_divides = true;  // similarities / tau (false: similarities * tau)
};

/// Loss of model outputs for the batch. Fills `douts` (n x output_dim) and
/// `dtau` when requested.
float objective_loss(const ObjectiveContext& ctx, const TrainBatch& batch,
                     std::span<const float> outputs, int output_dim, std::span<float> douts = {},
                     double* dtau = nullptr);

struct AdversarialLoss {
  float loss = 0.0f;  // at x + delta
  ImageBatch<float> adversarial_inputs;
  std::vector<double> delta_norms;
};

/// Inner maximization by PGD on the chosen objective, then the loss at
/// x + delta. When `grad` is given, accumulates d(loss)/d(theta) there (and
/// d(loss)/d(tau) into `dtau`). Text rows are only read. An active `mix`
/// blends the adversarial batch and its labels before the final loss.
AdversarialLoss adversarial_objective(const VitModel<float>& model, const ParamStore<float>& params,
                                      const ObjectiveContext& ctx, const TrainBatch& batch,
                                      std::span<const TokenSelection> selections,
                                      const PerturbationBudget& budget, Rng& rng,
                                      ParamStore<float>* grad = nullptr, double* dtau = nullptr,
                                      long batch_id = -1, Exec exec = Exec::parallel,
                                      const BatchMix& mix = {});

/// The per-batch loss callback PGD maximizes.
BatchLossFn<float> make_attack_loss(const VitModel<float>& model, const ParamStore<float>& params,
                                    const ObjectiveContext& ctx, const TrainBatch& batch,
                                    std::span<const TokenSelection> selections, Exec exec);

}  // namespace advxl
