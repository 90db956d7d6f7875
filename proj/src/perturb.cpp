#include "advxl/perturb.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace advxl {

std::string to_string(Norm norm) {
  switch (norm) {
    case Norm::linf: return "linf";
    case Norm::l2: return "l2";
    case Norm::l1: return "l1";
  }
  return "?";
}

Norm parse_norm(const std::string& s) {
  if (s == "linf" || s == "Linf" || s == "inf") return Norm::linf;
  if (s == "l2" || s == "L2") return Norm::l2;
  if (s == "l1" || s == "L1") return Norm::l1;
  throw std::invalid_argument("unknown norm '" + s + "' (expected linf, l2 or l1)");
}

void PerturbationBudget::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon))
    throw std::invalid_argument("perturbation budget: epsilon must be finite and >= 0");
  if (num_steps < 0) throw std::invalid_argument("perturbation budget: num_steps must be >= 0");
  if (num_steps > 0 && !(step_size > 0.0))
    throw std::invalid_argument("perturbation budget: step_size must be > 0 when num_steps > 0");
}

PerturbationBudget PerturbationBudget::eval_linf() {
  return {Norm::linf, 4.0 / 255.0, 1.0 / 255.0, 20, true};
}

template <class Real>
double lp_norm(std::span<const Real> v, Norm norm) {
  double acc = 0.0;
  switch (norm) {
    case Norm::linf:
      for (Real x : v) acc = std::max(acc, std::abs(static_cast<double>(x)));
      return acc;
    case Norm::l2:
      for (Real x : v) acc += static_cast<double>(x) * static_cast<double>(x);
      return std::sqrt(acc);
    case Norm::l1:
      for (Real x : v) acc += std::abs(static_cast<double>(x));
      return acc;
  }
  return acc;
}

namespace {

// Rounding can leave a rescaled vector a few ulps outside the ball; shrink
// geometrically until it is inside so projection stays idempotent.
template <class Real>
void shrink_inside(std::span<Real> v, Norm norm, double epsilon) {
  const Real factor = Real(1) - Real(4) * std::numeric_limits<Real>::epsilon();
  Real scale = factor;
  while (lp_norm<Real>(v, norm) > epsilon) {
    for (Real& x : v) x *= scale;
    scale *= factor;
  }
}

template <class Real>
void project_l1(std::span<Real> v, double epsilon) {
  if (lp_norm<Real>(v, Norm::l1) <= epsilon) return;
  if (epsilon == 0.0) {
    std::fill(v.begin(), v.end(), Real(0));
    return;
  }
  std::vector<double> mags(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) mags[i] = std::abs(static_cast<double>(v[i]));
  std::vector<double> sorted = mags;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  double cumsum = 0.0;
  double theta = 0.0;
  for (std::size_t j = 0; j < sorted.size(); ++j) {
    cumsum += sorted[j];
    const double t = (cumsum - epsilon) / static_cast<double>(j + 1);
    if (sorted[j] - t > 0.0) theta = t;
    else break;
  }
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double m = std::max(mags[i] - theta, 0.0);
    v[i] = static_cast<Real>(v[i] < Real(0) ? -m : m);
  }
  shrink_inside<Real>(v, Norm::l1, epsilon);
}

}  // namespace

template <class Real>
void project_sample(std::span<Real> delta, Norm norm, double epsilon) {
  if (epsilon < 0.0) throw std::invalid_argument("project: epsilon must be >= 0");
  switch (norm) {
    case Norm::linf: {
      const Real e = static_cast<Real>(epsilon);
      for (Real& x : delta) x = std::clamp(x, -e, e);
      return;
    }
    case Norm::l2: {
      const double n = lp_norm<Real>(delta, Norm::l2);
      if (n <= epsilon) return;
      const double scale = epsilon / n;
      for (Real& x : delta) x = static_cast<Real>(static_cast<double>(x) * scale);
      shrink_inside<Real>(delta, Norm::l2, epsilon);
      return;
    }
    case Norm::l1:
      project_l1<Real>(delta, epsilon);
      return;
  }
}

template <class Real>
ImageBatch<Real> project(ImageBatch<Real> delta, Norm norm, double epsilon) {
  if (epsilon < 0.0) throw std::invalid_argument("project: epsilon must be >= 0");
  for (int i = 0; i < delta.n; ++i) project_sample<Real>(delta.sample(i), norm, epsilon);
  return delta;
}

template <class Real>
ImageBatch<Real> init_delta(int n, int channels, int height, int width,
                            const PerturbationBudget& budget, Rng& rng) {
  budget.validate();
  ImageBatch<Real> delta(n, channels, height, width);
  if (!budget.random_init || budget.epsilon == 0.0) return delta;
  const double eps = budget.epsilon;
  const std::size_t d = delta.sample_size();
  for (int i = 0; i < n; ++i) {
    auto s = delta.sample(i);
    switch (budget.norm) {
      case Norm::linf:
        for (Real& x : s) x = static_cast<Real>(rng.uniform(-eps, eps));
        break;
      case Norm::l2: {
        std::vector<double> g(d);
        double sq = 0.0;
        for (double& x : g) {
          x = rng.normal();
          sq += x * x;
        }
        const double radius = eps * std::pow(rng.uniform(), 1.0 / static_cast<double>(d));
        const double scale = sq > 0.0 ? radius / std::sqrt(sq) : 0.0;
        for (std::size_t j = 0; j < d; ++j) s[j] = static_cast<Real>(g[j] * scale);
        break;
      }
      case Norm::l1: {
        // (E_1..E_d) / (E_1 + .. + E_{d+1}) is uniform on the solid simplex.
        std::vector<double> e(d);
        double total = 0.0;
        for (double& x : e) {
          x = rng.exponential();
          total += x;
        }
        total += rng.exponential();
        for (std::size_t j = 0; j < d; ++j) {
          const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
          s[j] = static_cast<Real>(sign * eps * e[j] / total);
        }
        break;
      }
    }
    project_sample<Real>(s, budget.norm, eps);
  }
  return delta;
}

template <class Real>
void ascent_direction(std::span<const Real> grad, std::span<Real> out, Norm norm) {
  const std::size_t d = grad.size();
  switch (norm) {
    case Norm::linf:
      for (std::size_t j = 0; j < d; ++j)
        out[j] = grad[j] > Real(0) ? Real(1) : (grad[j] < Real(0) ? Real(-1) : Real(0));
      return;
    case Norm::l2: {
      const double n = lp_norm<Real>(grad, Norm::l2);
      const double inv = n > 0.0 ? 1.0 / n : 0.0;
      for (std::size_t j = 0; j < d; ++j) out[j] = static_cast<Real>(grad[j] * inv);
      return;
    }
    case Norm::l1: {
      const std::size_t k = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::ceil(kL1TopFraction * static_cast<double>(d))));
      std::vector<std::size_t> idx(d);
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      auto larger = [&](std::size_t a, std::size_t b) {
        const Real ma = std::abs(grad[a]), mb = std::abs(grad[b]);
        return ma > mb || (ma == mb && a < b);
      };
      std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k - 1), idx.end(), larger);
      double total = 0.0;
      for (std::size_t t = 0; t < k; ++t) total += std::abs(static_cast<double>(grad[idx[t]]));
      std::fill(out.begin(), out.end(), Real(0));
      if (total == 0.0) return;
      for (std::size_t t = 0; t < k; ++t)
        out[idx[t]] = static_cast<Real>(static_cast<double>(grad[idx[t]]) / total);
      return;
    }
  }
}

namespace {

// Clamp delta to [-x, 1 - x]; never increases any coordinate's magnitude.
template <class Real>
void clamp_to_pixels(const ImageBatch<Real>& x, ImageBatch<Real>& delta) {
  for (std::size_t j = 0; j < delta.data.size(); ++j)
    delta.data[j] = std::clamp(delta.data[j], -x.data[j], Real(1) - x.data[j]);
}

// Forms x + delta in [0, 1] and returns the exact norm of the realized
// perturbation, shrinking delta if rounding of the sum pushed it outside.
template <class Real>
double realize_sample(std::span<const Real> x, std::span<Real> delta, std::span<Real> adv,
                      Norm norm, double epsilon) {
  for (;;) {
    for (std::size_t j = 0; j < x.size(); ++j) adv[j] = std::clamp(x[j] + delta[j], Real(0), Real(1));
    double n = 0.0;
    switch (norm) {
      case Norm::linf:
        for (std::size_t j = 0; j < x.size(); ++j)
          n = std::max(n, std::abs(static_cast<double>(adv[j]) - static_cast<double>(x[j])));
        break;
      case Norm::l2:
        for (std::size_t j = 0; j < x.size(); ++j) {
          const double d = static_cast<double>(adv[j]) - static_cast<double>(x[j]);
          n += d * d;
        }
        n = std::sqrt(n);
        break;
      case Norm::l1:
        for (std::size_t j = 0; j < x.size(); ++j)
          n += std::abs(static_cast<double>(adv[j]) - static_cast<double>(x[j]));
        break;
    }
    if (n <= epsilon) return n;
    const Real shrink = static_cast<Real>(epsilon / n) * (Real(1) - Real(8) * std::numeric_limits<Real>::epsilon());
    for (Real& d : delta) d *= shrink;
  }
}

template <class Real>
void check_finite(const ImageBatch<Real>& g, long batch_id, int step) {
  for (std::size_t j = 0; j < g.data.size(); ++j) {
    if (!std::isfinite(g.data[j])) {
      std::ostringstream msg;
      msg << "pgd_attack: non-finite input gradient in batch " << batch_id << " at step " << step
          << " (sample " << j / g.sample_size() << ")";
      throw AttackError(msg.str(), batch_id);
    }
  }
}

}  // namespace

template <class Real>
AttackResult<Real> pgd_attack(const BatchLossFn<Real>& loss, const ImageBatch<Real>& inputs,
                              const PerturbationBudget& budget, Rng& rng,
                              const AttackOptions& options) {
  budget.validate();
  AttackResult<Real> result;
  ImageBatch<Real> delta =
      init_delta<Real>(inputs.n, inputs.channels, inputs.height, inputs.width, budget, rng);
  clamp_to_pixels(inputs, delta);

  ImageBatch<Real> adv = inputs;
  ImageBatch<Real> grad(inputs.n, inputs.channels, inputs.height, inputs.width);
  std::vector<Real> dir(inputs.sample_size());
  const Real step = static_cast<Real>(budget.step_size);

  for (int t = 0; t < budget.num_steps; ++t) {
    for (std::size_t j = 0; j < adv.data.size(); ++j) adv.data[j] = inputs.data[j] + delta.data[j];
    std::fill(grad.data.begin(), grad.data.end(), Real(0));
    loss(adv, &grad);
    check_finite(grad, options.batch_id, t);
    for (int i = 0; i < inputs.n; ++i) {
      ascent_direction<Real>(grad.sample(i), dir, budget.norm);
      auto s = delta.sample(i);
      for (std::size_t j = 0; j < s.size(); ++j) s[j] += step * dir[j];
      project_sample<Real>(s, budget.norm, budget.epsilon);
    }
    clamp_to_pixels(inputs, delta);
  }

  result.delta_norms.resize(static_cast<std::size_t>(inputs.n));
  for (int i = 0; i < inputs.n; ++i)
    result.delta_norms[static_cast<std::size_t>(i)] =
        realize_sample<Real>(inputs.sample(i), delta.sample(i), adv.sample(i), budget.norm,
                             budget.epsilon);
  if (options.compute_final_loss) result.final_loss = loss(adv, nullptr);
  result.adversarial_inputs = std::move(adv);
  return result;
}

#define ADVXL_INSTANTIATE(Real)                                                                   \
  template double lp_norm<Real>(std::span<const Real>, Norm);                                     \
  template void project_sample<Real>(std::span<Real>, Norm, double);                              \
  template ImageBatch<Real> project<Real>(ImageBatch<Real>, Norm, double);                        \
  template ImageBatch<Real> init_delta<Real>(int, int, int, int, const PerturbationBudget&, Rng&); \
  template void ascent_direction<Real>(std::span<const Real>, std::span<Real>, Norm);             \
  template AttackResult<Real> pgd_attack<Real>(const BatchLossFn<Real>&, const ImageBatch<Real>&, \
                                               const PerturbationBudget&, Rng&, const AttackOptions&);

ADVXL_INSTANTIATE(float)
ADVXL_INSTANTIATE(double)
#undef ADVXL_INSTANTIATE

}  // namespace advxl
