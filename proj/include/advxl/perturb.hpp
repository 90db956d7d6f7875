#pragma once

#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "advxl/rng.hpp"
#include "advxl/tensor.hpp"

namespace advxl {

enum class Norm { linf, l2, l1 };

std::string to_string(Norm norm);
Norm parse_norm(const std::string& s);

/// Constraint set and iteration schedule of a projected-gradient attack.
/// Radii are in pixel units for inputs scaled to [0, 1].
struct PerturbationBudget {
  Norm norm = Norm::linf;
  double epsilon = 0.0;
  double step_size = 0.0;
  int num_steps = 0;
  bool random_init = true;

  void validate() const;
  bool operator==(const PerturbationBudget&) const = default;

  /// PGD-20, step 1/255, radius 4/255, random start.
  static PerturbationBudget eval_linf();
};

/// Raised when the loss gradient turns non-finite mid-attack.
class AttackError : public std::runtime_error {
 public:
  AttackError(const std::string& what, long batch_id)
      : std::runtime_error(what), batch_id_(batch_id) {}
  long batch_id() const { return batch_id_; }

 private:
  long batch_id_;
};

template <class Real>
struct AttackResult {
  ImageBatch<Real> adversarial_inputs;
  Real final_loss = Real(0);
  std::vector<double> delta_norms;
};

/// Scalar loss of a batch. When `grad` is non-null it receives d(loss)/d(inputs)
/// with the inputs' shape.
template <class Real>
using BatchLossFn = std::function<Real(const ImageBatch<Real>& inputs, ImageBatch<Real>* grad)>;

struct AttackOptions {
  /// Evaluate the loss once more at the returned point (forward only).
  bool compute_final_loss = true;
  /// Identifies the batch in diagnostics.
  long batch_id = -1;
};

/// p-norm of one flattened sample, accumulated in double.
template <class Real>
double lp_norm(std::span<const Real> v, Norm norm);

/// Euclidean projection of one sample onto the radius-`epsilon` ball
/// (coordinate clamp for linf). Interior points are returned untouched.
template <class Real>
void project_sample(std::span<Real> delta, Norm norm, double epsilon);

/// Per-sample projection of a whole batch.
template <class Real>
ImageBatch<Real> project(ImageBatch<Real> delta, Norm norm, double epsilon);

/// Starting perturbation: zeros, or a uniform draw from the ball.
template <class Real>
ImageBatch<Real> init_delta(int n, int channels, int height, int width,
                            const PerturbationBudget& budget, Rng& rng);

/// Ascent direction for one sample (sign / unit-l2 / sparse unit-l1).
template <class Real>
void ascent_direction(std::span<const Real> grad, std::span<Real> out, Norm norm);

/// Projected gradient ascent on `loss` inside the budget's ball, with every
/// iterate clamped to the [0, 1] pixel range.
template <class Real>
AttackResult<Real> pgd_attack(const BatchLossFn<Real>& loss, const ImageBatch<Real>& inputs,
                              const PerturbationBudget& budget, Rng& rng,
                              const AttackOptions& options = {});

/// Fraction of coordinates kept by the l1 ascent direction.
inline constexpr double kL1TopFraction = 0.01;

}  // namespace advxl
