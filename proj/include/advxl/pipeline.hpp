#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "advxl/augment.hpp"
#include "advxl/data.hpp"
#include "advxl/objectives.hpp"
#include "advxl/perturb.hpp"
#include "advxl/reduce.hpp"
#include "advxl/vit.hpp"

namespace advxl {

/// AdamW with linear warmup then cosine decay, all measured in samples.
struct OptimizerConfig {
  double peak_lr = 1e-3;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t warmup_samples = 0;
  double grad_clip = 1.0;  // global-norm clip, <= 0 disables

  bool operator==(const OptimizerConfig&) const = default;
};

/// One training stage.
struct StageConfig {
  std::string name = "stage";
  ReductionSpec reduction;
  PerturbationBudget budget;
  Objective objective = Objective::supervised;
  std::int64_t samples_total = 0;
  int batch_size = 128;
  OptimizerConfig optimizer;
  std::uint64_t seed = 0;
  double label_smoothing = 0.0;
  bool tau_divides = true;
  AugmentConfig augment;

  std::int64_t total_steps() const { return samples_total / batch_size; }
  void validate(int base_resolution) const;
  bool operator==(const StageConfig&) const = default;
};

/// Learning rate for a step that starts after `samples_seen` samples.
double learning_rate(const OptimizerConfig& opt, std::int64_t samples_seen, std::int64_t samples_total,
                     int batch_size);

struct StageLedger {
  std::string name;
  std::int64_t steps = 0;
  std::int64_t samples = 0;
  std::int64_t passes_forward = 0;
  std::int64_t passes_backward = 0;
  double gflops = 0.0;

  bool operator==(const StageLedger&) const = default;
};

/// Forward/backward pass counts and GFLOPs, accumulated per step.
struct ComputeLedger {
  std::int64_t passes_forward = 0;
  std::int64_t passes_backward = 0;
  double gflops_total = 0.0;
  std::vector<StageLedger> stages;

  /// One training step: `batch` samples, each costing (k + 1) passes.
  void record(const std::string& stage, int batch, int attack_steps, double gflops_per_sample);
  double stage_gflops(const std::string& stage) const;

  bool operator==(const ComputeLedger&) const = default;
};

nlohmann::ordered_json ledger_to_json(const ComputeLedger& ledger);
ComputeLedger ledger_from_json(const nlohmann::ordered_json& j);

/// Everything needed to continue training exactly.
struct TrainState {
  VitConfig model;  // image_size tracks the current stage's input side
  ParamStore<float> params;  // ViT tensors plus "objective.log_tau"
  ParamStore<float> adam_m;
  ParamStore<float> adam_v;
  std::int64_t adam_step = 0;
  int stage_index = 0;
  std::int64_t step = 0;          // within the current stage
  std::int64_t samples_seen = 0;  // within the current stage
  int nonfinite_streak = 0;
  ComputeLedger ledger;

  double tau() const;
};

/// Fresh parameters for `model` (at the first stage's input side).
TrainState init_train_state(const VitConfig& model, std::uint64_t seed);

struct StepRecord {
  std::string stage;
  std::int64_t step = 0;
  std::int64_t samples_seen = 0;
  double loss = 0.0;
  double lr = 0.0;
  double gflops_cum = 0.0;

  std::string to_json_line() const;
  static StepRecord parse(const std::string& line);
  bool operator==(const StepRecord&) const = default;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StageHooks {
  std::function<void(const StepRecord&)> on_step;
  /// Called after a step when `checkpoint_every_steps` divides the step
  /// count, at the end of the stage, and before a divergence halt.
  std::function<void(const TrainState&)> on_checkpoint;
  std::int64_t checkpoint_every_steps = 0;
  /// Testing hook: return after this many steps in this call, as if killed.
  std::int64_t stop_after_steps = -1;
  Exec exec = Exec::parallel;
};

/// Runs the stage from `state.step` to its end: reduce, attack, AdamW step,
/// ledger update.
TrainState run_stage(TrainState state, const StageConfig& stage, const BatchStream& stream,
                     const TextEmbeddingTable* table = nullptr, const StageHooks& hooks = {});

/// Moves to the next stage: interpolates position embeddings to the new
/// input side, keeps other parameters, resets optimizer moments.
TrainState transition(TrainState state, const StageConfig& from, const StageConfig& to, int base_resolution);

struct StageEstimate {
  std::string name;
  int tokens = 0;
  int attack_steps = 0;
  std::int64_t samples = 0;
  double gflops_per_sample = 0.0;
  double gflops = 0.0;
};

struct ComputeEstimate {
  std::vector<StageEstimate> stages;
  double total_gflops = 0.0;
  double first_stage_gflops = 0.0;  // "pre-training only" view

  /// Totals relative to another estimate.
  double ratio_total(const ComputeEstimate& baseline) const { return total_gflops / baseline.total_gflops; }
  double ratio_first_stage(const ComputeEstimate& baseline) const {
    return first_stage_gflops / baseline.first_stage_gflops;
  }
};

/// Pure function of the configs; `model` is the full-resolution model.
ComputeEstimate estimate_compute(const VitConfig& model, const std::vector<StageConfig>& stages);

/// Samples-at-resolution notation, e.g. "2M@16 + 300K@32".
std::string schedule_notation(const std::vector<StageConfig>& stages, int base_resolution);

// ---------------------------------------------------------------------------
// Checkpoints

/// Binary container: "ADVXLCK1", u64 header length, JSON header (model
/// config, tensor directory, position grid, ledger, optimizer/progress
/// counters, optional run config), then little-endian f32 tensor data.
void save_checkpoint(const std::string& path, const TrainState& state, const std::string& run_config = "");
TrainState load_checkpoint(const std::string& path, std::string* run_config = nullptr);

}  // namespace advxl
