#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "advxl/data.hpp"
#include "advxl/perturb.hpp"
#include "advxl/pipeline.hpp"
#include "advxl/text_embeddings.hpp"
#include "advxl/vit.hpp"

namespace advxl {

/// Class scores for a batch, plus the evaluation loss an attacker maximizes.
struct Classifier {
  int num_classes = 0;
  int input_resolution = 0;  // 0: any
  /// n x num_classes logits.
  std::function<std::vector<double>(const ImageBatch<float>& x)> logits;
  /// Mean cross-entropy against `labels`; fills d(loss)/d(x) when `grad` is given.
  std::function<float(const ImageBatch<float>& x, std::span<const int> labels, ImageBatch<float>* grad)> loss;
};

/// Classifier-head ViT. The model and parameters are copied into the closure.
Classifier vit_classifier(const VitConfig& config, const ParamStore<float>& params, Exec exec = Exec::parallel);

/// Projection-head ViT scored against frozen text rows (one per class key).
/// `table` must outlive the classifier.
Classifier zero_shot_classifier(const VitConfig& config, const ParamStore<float>& params,
                                const TextEmbeddingTable& table, std::vector<std::string> class_keys,
                                double tau, Exec exec = Exec::parallel);

/// Images and class indices of an evaluation subset.
struct EvalSet {
  ImageBatch<float> images;
  std::vector<int> labels;
  std::vector<int> indices;  // positions in the source dataset
  std::uint64_t seed = 0;
};

/// Seed-fixed subset of up to `count` samples (count < 0: all) resized to
/// `resolution`. Samples without a class index are dropped.
EvalSet make_eval_set(const Dataset& data, int count, std::uint64_t seed, int resolution);

std::vector<int> predict(const Classifier& clf, const ImageBatch<float>& x, int batch_size = 256);

double clean_accuracy(const Classifier& clf, const EvalSet& set, int batch_size = 256);

/// A sample counts as robust when it is classified correctly clean and after
/// every restart of the attack.
double robust_accuracy(const Classifier& clf, const EvalSet& set, const PerturbationBudget& budget,
                       std::uint64_t seed, int restarts = 1, int batch_size = 256);

struct NamedAttack {
  std::string name;
  PerturbationBudget budget;
  int restarts = 1;

  bool operator==(const NamedAttack&) const = default;
};

struct AttackSuite {
  std::vector<NamedAttack> attacks;
  int eval_subset_size = 1000;
  std::uint64_t seed = 0;
  std::string scaling_rule;

  void validate() const;

  /// l-inf 4/255 at every side; l2 2 * (s / 224); l1 75 * (s / 224)^2.
  /// PGD-`steps`; l2 and l1 step sizes are 2.5 * eps / steps.
  static AttackSuite standard_protocol(int side, int steps = 20, int restarts = 1);
  static std::string standard_scaling_rule(int side);
};

struct RobustEntry {
  std::string name;
  PerturbationBudget budget;
  int restarts = 1;
  double robust_acc = 0.0;

  bool operator==(const RobustEntry&) const = default;
};

struct EvalReport {
  double clean_acc = 0.0;
  std::vector<RobustEntry> robust;
  int samples_evaluated = 0;
  std::uint64_t subset_seed = 0;
  int eval_resolution = 0;
  std::string fingerprint;
  std::string scaling_rule;
  ComputeLedger ledger;

  /// Stable field order; round-trips through parse().
  std::string to_json() const;
  static EvalReport parse(const std::string& text);
  /// attack,norm,epsilon,num_steps,restarts,robust_acc
  std::string to_csv() const;
  bool operator==(const EvalReport&) const = default;
};

EvalReport multi_norm_report(const Classifier& clf, const EvalSet& set, const AttackSuite& suite,
                             const std::string& fingerprint = "", const ComputeLedger& ledger = {},
                             int batch_size = 256);

/// Hex digest of the model config and parameter bytes.
std::string model_fingerprint(const VitConfig& config, const ParamStore<float>& params);

}  // namespace advxl
