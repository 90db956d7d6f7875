#include "advxl/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace advxl {

std::string to_string(Objective o) { return o == Objective::supervised ? "supervised" : "contrastive"; }

Objective parse_objective(const std::string& s) {
  if (s == "supervised") return Objective::supervised;
  if (s == "contrastive") return Objective::contrastive;
  throw std::invalid_argument("unknown objective '" + s + "' (expected supervised or contrastive)");
}

double TemperatureParam::tau() const { return std::clamp(std::exp(log_tau), kMinTau, kMaxTau); }

void TemperatureParam::clamp() {
  log_tau = std::clamp(log_tau, std::log(kMinTau), std::log(kMaxTau));
}

template <class Real>
Real cross_entropy(std::span<const Real> logits, int num_classes, std::span<const int> labels,
                   double label_smoothing, std::span<Real> dlogits) {
  const std::size_t n = labels.size();
  if (num_classes <= 0 || logits.size() != n * static_cast<std::size_t>(num_classes))
    throw std::invalid_argument("cross_entropy: logits do not match labels x classes");
  if (n == 0) return Real(0);
  const bool want_grad = !dlogits.empty();
  if (want_grad && dlogits.size() != logits.size())
    throw std::invalid_argument("cross_entropy: gradient buffer size mismatch");
  const double s = label_smoothing;
  std::vector<double> prob(static_cast<std::size_t>(num_classes));
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= num_classes)
      throw std::invalid_argument("cross_entropy: label " + std::to_string(y) + " out of range");
    const Real* row = logits.data() + i * num_classes;
    double mx = -INFINITY;
    for (int c = 0; c < num_classes; ++c) {
      if (!std::isfinite(row[c]))
        throw std::domain_error("cross_entropy: non-finite logit in sample " + std::to_string(i));
      mx = std::max(mx, static_cast<double>(row[c]));
    }
    double z = 0.0;
    for (int c = 0; c < num_classes; ++c) z += std::exp(static_cast<double>(row[c]) - mx);
    const double logz = mx + std::log(z);
    double loss_i = 0.0;
    for (int c = 0; c < num_classes; ++c) {
      const double target = (c == y ? 1.0 - s : 0.0) + s / num_classes;
      const double logp = static_cast<double>(row[c]) - logz;
      if (target != 0.0) loss_i -= target * logp;
      prob[static_cast<std::size_t>(c)] = std::exp(logp);
      if (want_grad)
        dlogits[i * num_classes + c] = static_cast<Real>((prob[static_cast<std::size_t>(c)] - target) / n);
    }
    total += loss_i;
  }
  return static_cast<Real>(total / static_cast<double>(n));
}

template float cross_entropy<float>(std::span<const float>, int, std::span<const int>, double, std::span<float>);
template double cross_entropy<double>(std::span<const double>, int, std::span<const int>, double, std::span<double>);

double contrastive_loss(std::span<const double> image_embeds, std::span<const double> text_embeds,
                        int n, int dim, double tau, ContrastiveGrads grads) {
  if (!(tau > 0.0)) throw std::invalid_argument("contrastive_loss: tau must be > 0");
  if (n < 1) throw std::invalid_argument("contrastive_loss: need at least one pair");
  const std::size_t nd = static_cast<std::size_t>(n) * dim;
  if (image_embeds.size() != nd || text_embeds.size() != nd)
    throw std::invalid_argument("contrastive_loss: embedding matrices must be n x dim");

  // sim[i][j] = h_i^I . h_j^T
  std::vector<double> sim(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int d = 0; d < dim; ++d) acc += image_embeds[i * dim + d] * text_embeds[j * dim + d];
      sim[static_cast<std::size_t>(i) * n + j] = acc;
    }
  auto S = [&](int i, int j) { return sim[static_cast<std::size_t>(i) * n + j] / tau; };

  // dL/d(sim/tau), accumulated from both directions
  std::vector<double> dlogit(static_cast<std::size_t>(n) * n, 0.0);
  const double norm = 1.0 / (2.0 * n);
  double total = 0.0;
  // image -> texts: row softmax
  for (int i = 0; i < n; ++i) {
    double mx = -INFINITY;
    for (int j = 0; j < n; ++j) mx = std::max(mx, S(i, j));
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(S(i, j) - mx);
    const double logz = mx + std::log(z);
    total += logz - S(i, i);
    for (int j = 0; j < n; ++j)
      dlogit[static_cast<std::size_t>(i) * n + j] += norm * (std::exp(S(i, j) - logz) - (i == j ? 1.0 : 0.0));
  }
  // text -> images: column softmax
  for (int j = 0; j < n; ++j) {
    double mx = -INFINITY;
    for (int i = 0; i < n; ++i) mx = std::max(mx, S(i, j));
    double z = 0.0;
    for (int i = 0; i < n; ++i) z += std::exp(S(i, j) - mx);
    const double logz = mx + std::log(z);
    total += logz - S(j, j);
    for (int i = 0; i < n; ++i)
      dlogit[static_cast<std::size_t>(i) * n + j] += norm * (std::exp(S(i, j) - logz) - (i == j ? 1.0 : 0.0));
  }

  if (!grads.dimage.empty()) {
    if (grads.dimage.size() != nd) throw std::invalid_argument("contrastive_loss: dimage size mismatch");
    std::fill(grads.dimage.begin(), grads.dimage.end(), 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const double g = dlogit[static_cast<std::size_t>(i) * n + j] / tau;
        for (int d = 0; d < dim; ++d) grads.dimage[i * dim + d] += g * text_embeds[j * dim + d];
      }
  }
  if (!grads.dtext.empty()) {
    if (grads.dtext.size() != nd) throw std::invalid_argument("contrastive_loss: dtext size mismatch");
    std::fill(grads.dtext.begin(), grads.dtext.end(), 0.0);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const double g = dlogit[static_cast<std::size_t>(i) * n + j] / tau;
        for (int d = 0; d < dim; ++d) grads.dtext[j * dim + d] += g * image_embeds[i * dim + d];
      }
  }
  if (grads.dtau) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) acc += dlogit[static_cast<std::size_t>(i) * n + j] * S(i, j);
    *grads.dtau = -acc / tau;
  }
  return total * norm;
}

std::vector<double> zero_shot_logits(std::span<const double> image_embeds, int n,
                                     const TextEmbeddingTable& table,
                                     std::span<const std::string> class_keys, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("zero_shot_logits: tau must be > 0");
  const int dim = table.dim();
  if (image_embeds.size() != static_cast<std::size_t>(n) * dim)
    throw std::invalid_argument("zero_shot_logits: image embeddings must be n x table.dim()");
  const int k = static_cast<int>(class_keys.size());
  std::vector<int> rows;
  rows.reserve(class_keys.size());
  for (const auto& key : class_keys) rows.push_back(table.row_id(key));
  std::vector<double> logits(static_cast<std::size_t>(n) * k);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < k; ++c) {
      const auto r = table.row(rows[static_cast<std::size_t>(c)]);
      double acc = 0.0;
      for (int d = 0; d < dim; ++d) acc += image_embeds[static_cast<std::size_t>(i) * dim + d] * r[d];
      logits[static_cast<std::size_t>(i) * k + c] = acc / tau;
    }
  return logits;
}

float objective_loss(const ObjectiveContext& ctx, const TrainBatch& batch, std::span<const float> outputs,
                     int output_dim, std::span<float> douts, double* dtau) {
  const int n = batch.images.n;
  if (outputs.size() != static_cast<std::size_t>(n) * output_dim)
    throw std::invalid_argument("objective_loss: outputs do not match batch x output_dim");
  if (ctx.kind == Objective::supervised) {
    if (dtau) *dtau = 0.0;
    if (batch.mix_labels.empty()) return cross_entropy<float>(outputs, output_dim, batch.labels, ctx.label_smoothing, douts);
    if (batch.mix_labels.size() != batch.labels.size())
      throw std::invalid_argument("objective_loss: mix labels do not match labels");
    const float lam = batch.mix_lambda;
    std::vector<float> d2(douts.size());
    const float l1 = cross_entropy<float>(outputs, output_dim, batch.labels, ctx.label_smoothing, douts);
    const float l2 = cross_entropy<float>(outputs, output_dim, batch.mix_labels, ctx.label_smoothing, d2);
    for (std::size_t j = 0; j < douts.size(); ++j) douts[j] = lam * douts[j] + (1.0f - lam) * d2[j];
    return lam * l1 + (1.0f - lam) * l2;
  }
  if (!ctx.table) throw std::invalid_argument("objective_loss: contrastive objective needs a text table");
  if (static_cast<int>(batch.text_rows.size()) != n)
    throw std::invalid_argument("objective_loss: contrastive batch needs one text row per image");
  if (ctx.table->dim() != output_dim)
    throw std::invalid_argument("objective_loss: projection dim " + std::to_string(output_dim) +
                                " does not match text embedding dim " + std::to_string(ctx.table->dim()));
  for (float v : outputs)
    if (!std::isfinite(v)) throw std::domain_error("objective_loss: non-finite image embedding");
  std::vector<double> img(outputs.begin(), outputs.end());
  std::vector<double> txt(static_cast<std::size_t>(n) * output_dim);
  for (int i = 0; i < n; ++i) {
    const auto r = ctx.table->row(batch.text_rows[static_cast<std::size_t>(i)]);
    std::copy(r.begin(), r.end(), txt.begin() + static_cast<std::ptrdiff_t>(i) * output_dim);
  }
  // tau_divides=false treats tau as a logit scale: similarities * tau == similarities / (1/tau).
  const double eff_tau = ctx.tau_divides ? ctx.tau : 1.0 / ctx.tau;
  std::vector<double> dimg(douts.empty() ? 0 : img.size());
  double deff = 0.0;
  ContrastiveGrads g{dimg, {}, dtau ? &deff : nullptr};
  const double loss = contrastive_loss(img, txt, n, output_dim, eff_tau, g);
  if (!douts.empty())
    for (std::size_t j = 0; j < dimg.size(); ++j) douts[j] = static_cast<float>(dimg[j]);
  if (dtau) *dtau = ctx.tau_divides ? deff : deff * (-1.0 / (ctx.tau * ctx.tau));
  return static_cast<float>(loss);
}

BatchLossFn<float> make_attack_loss(const VitModel<float>& model, const ParamStore<float>& params,
                                    const ObjectiveContext& ctx, const TrainBatch& batch,
                                    std::span<const TokenSelection> selections, Exec exec) {
  return [&model, &params, ctx, &batch, selections, exec](const ImageBatch<float>& x,
                                                          ImageBatch<float>* grad) -> float {
    BatchPass<float> pass;
    forward_batch<float>(model, params, x, selections, pass, exec, batch.block_scales);
    std::vector<float> douts(grad ? pass.outputs.size() : 0);
    const float loss = objective_loss(ctx, batch, pass.outputs, pass.dim, douts);
    if (grad) backward_batch<float>(model, params, pass, douts, nullptr, grad, exec);
    return loss;
  };
}

AdversarialLoss adversarial_objective(const VitModel<float>& model, const ParamStore<float>& params,
                                      const ObjectiveContext& ctx, const TrainBatch& batch,
                                      std::span<const TokenSelection> selections,
                                      const PerturbationBudget& budget, Rng& rng,
                                      ParamStore<float>* grad, double* dtau, long batch_id, Exec exec,
                                      const BatchMix& mix) {
  AdversarialLoss out;
  const BatchLossFn<float> attack_loss = make_attack_loss(model, params, ctx, batch, selections, exec);
  AttackOptions opts;
  opts.compute_final_loss = false;
  opts.batch_id = batch_id;
  AttackResult<float> attack = pgd_attack<float>(attack_loss, batch.images, budget, rng, opts);

  const TrainBatch* target = &batch;
  TrainBatch mixed;
  if (mix.active()) {
    if (ctx.kind != Objective::supervised)
      throw std::invalid_argument("adversarial_objective: batch mixing needs the supervised objective");
    mixed = batch;
    apply_mix(mix, attack.adversarial_inputs);
    apply_mix_labels(mix, mixed);
    target = &mixed;
  }
  BatchPass<float> pass;
  forward_batch<float>(model, params, attack.adversarial_inputs, selections, pass, exec, batch.block_scales);
  std::vector<float> douts(grad ? pass.outputs.size() : 0);
  out.loss = objective_loss(ctx, *target, pass.outputs, pass.dim, douts, grad ? dtau : nullptr);
  if (grad) backward_batch<float>(model, params, pass, douts, grad, nullptr, exec);
  out.adversarial_inputs = std::move(attack.adversarial_inputs);
  out.delta_norms = std::move(attack.delta_norms);
  return out;
}

}  // namespace advxl
