#include "advxl/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace advxl {

using nlohmann::ordered_json;

namespace {
constexpr const char* kLogTau = "objective.log_tau";
constexpr std::uint64_t kAugmentStream = 0xA06Dull;

bool decays(const std::string& name) {
  return name.ends_with(".weight") && name.find("norm") == std::string::npos;
}
}  // namespace

void StageConfig::validate(int base_resolution) const {
  reduction.validate(base_resolution);
  budget.validate();
  if (batch_size < 1) throw std::invalid_argument("stage '" + name + "': batch_size must be >= 1");
  if (samples_total < 0) throw std::invalid_argument("stage '" + name + "': samples_total must be >= 0");
  if (samples_total > 0 && samples_total < batch_size)
    throw std::invalid_argument("stage '" + name + "': samples_total must be >= batch_size");
  if (optimizer.warmup_samples < 0 || optimizer.warmup_samples > samples_total)
    throw std::invalid_argument("stage '" + name + "': warmup_samples must lie in [0, samples_total]");
  if (!(optimizer.peak_lr > 0.0)) throw std::invalid_argument("stage '" + name + "': peak_lr must be > 0");
  augment.validate();
  if (augment.mixes() && objective != Objective::supervised)
    throw std::invalid_argument("stage '" + name + "': MixUp/CutMix need the supervised objective");
}

double learning_rate(const OptimizerConfig& opt, std::int64_t samples_seen, std::int64_t samples_total,
                     int batch_size) {
  const double peak = opt.peak_lr;
  if (opt.warmup_samples > 0 && samples_seen < opt.warmup_samples)
    return peak * static_cast<double>(std::min<std::int64_t>(samples_seen + batch_size, opt.warmup_samples)) /
           static_cast<double>(opt.warmup_samples);
  const double span = static_cast<double>(samples_total - opt.warmup_samples);
  if (span <= 0.0) return peak;
  const double progress = std::clamp((samples_seen - opt.warmup_samples) / span, 0.0, 1.0);
  return 0.5 * peak * (1.0 + std::cos(3.14159265358979323846 * progress));
}

void ComputeLedger::record(const std::string& stage, int batch, int attack_steps, double gflops_per_sample) {
  if (stages.empty() || stages.back().name != stage) stages.push_back({stage});
  StageLedger& s = stages.back();
  const std::int64_t passes = static_cast<std::int64_t>(batch) * (attack_steps + 1);
  const double g = batch * gflops_per_sample;
  s.steps += 1;
  s.samples += batch;
  s.passes_forward += passes;
  s.passes_backward += passes;
  s.gflops += g;
  passes_forward += passes;
  passes_backward += passes;
  gflops_total += g;
}

double ComputeLedger::stage_gflops(const std::string& stage) const {
  double total = 0.0;
  for (const auto& s : stages)
    if (s.name == stage) total += s.gflops;
  return total;
}

double TrainState::tau() const {
  TemperatureParam t{static_cast<double>(params.tensor(kLogTau)[0])};
  return t.tau();
}

TrainState init_train_state(const VitConfig& model, std::uint64_t seed) {
  TrainState s;
  s.model = model;
  ParamStore<float> vit = init_vit_params<float>(model, seed);
  ParamLayout layout = vit.layout;
  layout.add(kLogTau, {1});
  s.params = ParamStore<float>(layout);
  std::copy(vit.values.begin(), vit.values.end(), s.params.values.begin());
  s.params.tensor(kLogTau)[0] = static_cast<float>(TemperatureParam{}.log_tau);
  s.adam_m = s.params.zeros_like();
  s.adam_v = s.params.zeros_like();
  return s;
}

std::string StepRecord::to_json_line() const {
  ordered_json j;
  j["stage"] = stage;
  j["step"] = step;
  j["samples_seen"] = samples_seen;
  j["loss"] = loss;
  j["lr"] = lr;
  j["gflops_cum"] = gflops_cum;
  return j.dump();
}

StepRecord StepRecord::parse(const std::string& line) {
  const auto j = ordered_json::parse(line);
  StepRecord r;
  r.stage = j.value("stage", "");
  r.step = j.at("step").get<std::int64_t>();
  r.samples_seen = j.at("samples_seen").get<std::int64_t>();
  r.loss = j.at("loss").is_null() ? NAN : j.at("loss").get<double>();
  r.lr = j.at("lr").get<double>();
  r.gflops_cum = j.at("gflops_cum").get<double>();
  return r;
}

namespace {

void adamw_update(TrainState& s, const ParamStore<float>& grad, const OptimizerConfig& opt, double lr) {
  double sq = 0.0;
  for (float g : grad.values) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  const double clip = (opt.grad_clip > 0.0 && norm > opt.grad_clip) ? opt.grad_clip / norm : 1.0;

  s.adam_step += 1;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(s.adam_step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(s.adam_step));
  for (const auto& e : s.params.layout.entries()) {
    const bool wd = decays(e.name);
    float* p = s.params.values.data() + e.offset;
    float* m = s.adam_m.values.data() + e.offset;
    float* v = s.adam_v.values.data() + e.offset;
    const float* g = grad.values.data() + e.offset;
    for (std::size_t j = 0; j < e.size; ++j) {
      const double gj = g[j] * clip;
      m[j] = static_cast<float>(opt.beta1 * m[j] + (1.0 - opt.beta1) * gj);
      v[j] = static_cast<float>(opt.beta2 * v[j] + (1.0 - opt.beta2) * gj * gj);
      const double mhat = m[j] / bc1, vhat = v[j] / bc2;
      double pj = p[j];
      if (wd) pj -= lr * opt.weight_decay * pj;
      pj -= lr * mhat / (std::sqrt(vhat) + opt.eps);
      p[j] = static_cast<float>(pj);
    }
  }
  TemperatureParam t{static_cast<double>(s.params.tensor(kLogTau)[0])};
  t.clamp();
  s.params.tensor(kLogTau)[0] = static_cast<float>(t.log_tau);
}

}  // namespace

TrainState run_stage(TrainState state, const StageConfig& stage, const BatchStream& stream,
                     const TextEmbeddingTable* table, const StageHooks& hooks) {
  const std::int64_t total_steps = stage.total_steps();
  if (total_steps == 0 || state.step >= total_steps) return state;
  if (stream.input_resolution() != state.model.image_size)
    throw std::invalid_argument("run_stage '" + stage.name + "': batches are " +
                                std::to_string(stream.input_resolution()) + "px but the model expects " +
                                std::to_string(state.model.image_size) + "px");
  if (stream.batch_size() != stage.batch_size)
    throw std::invalid_argument("run_stage '" + stage.name + "': stream batch size differs from stage");
  if (stage.objective == Objective::contrastive) {
    if (!table) throw std::invalid_argument("run_stage '" + stage.name + "': contrastive stage needs a text table");
    if (state.model.head_mode != HeadMode::projection)
      throw std::invalid_argument("run_stage '" + stage.name + "': contrastive stage needs a projection head");
  }

  const VitModel<float> model(state.model);
  const int tokens = stage.reduction.strategy == ReductionStrategy::random_mask ||
                             stage.reduction.strategy == ReductionStrategy::block_mask
                         ? kept_token_count(stage.reduction, state.model.image_size)
                         : state.model.tokens();
  const double gflops_per_sample = flops_per_sample(state.model, tokens, stage.budget.num_steps);

  std::int64_t steps_this_call = 0;
  ParamStore<float> grad = state.params.zeros_like();
  while (state.step < total_steps) {
    TrainBatch batch = stream.at_step(state.step);
    Rng rng(derive_seed(stage.seed, static_cast<std::uint64_t>(state.step)));
    BatchMix mix_after;
    if (stage.augment.any()) {
      Rng aug(derive_seed(derive_seed(stage.seed, kAugmentStream), static_cast<std::uint64_t>(state.step)));
      mix_after = augment_batch(stage.augment, batch, state.model.depth, aug);
    }
    ObjectiveContext ctx;
    ctx.kind = stage.objective;
    ctx.table = table;
    ctx.label_smoothing = stage.label_smoothing;
    ctx.tau = state.tau();
    ctx.tau_divides = stage.tau_divides;

    std::fill(grad.values.begin(), grad.values.end(), 0.0f);
    double dtau = 0.0;
    double loss = NAN;
    try {
      const AdversarialLoss adv = adversarial_objective(model, state.params, ctx, batch, batch.selections,
                                                        stage.budget, rng, &grad, &dtau, state.step, hooks.exec,
                                                        mix_after);
      loss = adv.loss;
    } catch (const AttackError&) {
      loss = NAN;
    } catch (const std::domain_error&) {
      loss = NAN;
    }
    const double lr = learning_rate(stage.optimizer, state.samples_seen, stage.samples_total, stage.batch_size);
    bool finite = std::isfinite(loss) && std::isfinite(dtau);
    if (finite)
      for (float g : grad.values)
        if (!std::isfinite(g)) {
          finite = false;
          break;
        }
    if (finite) {
      // d(loss)/d(log tau) = tau * d(loss)/d(tau); zero unless contrastive
      grad.tensor(kLogTau)[0] = static_cast<float>(dtau * ctx.tau);
      adamw_update(state, grad, stage.optimizer, lr);
      state.nonfinite_streak = 0;
    } else {
      state.nonfinite_streak += 1;
    }
    state.ledger.record(stage.name, stage.batch_size, stage.budget.num_steps, gflops_per_sample);
    state.samples_seen += stage.batch_size;
    state.step += 1;
    ++steps_this_call;

    StepRecord rec{stage.name, state.step, state.samples_seen, loss, lr, state.ledger.gflops_total};
    if (hooks.on_step) hooks.on_step(rec);
    if (state.nonfinite_streak >= 3) {
      if (hooks.on_checkpoint) hooks.on_checkpoint(state);
      throw TrainingDiverged("stage '" + stage.name + "': non-finite loss for 3 consecutive steps (last step " +
                             std::to_string(state.step) + ")");
    }
    const bool cadence = hooks.checkpoint_every_steps > 0 && state.step % hooks.checkpoint_every_steps == 0;
    if (hooks.on_checkpoint && (cadence || state.step == total_steps)) hooks.on_checkpoint(state);
    if (hooks.stop_after_steps >= 0 && steps_this_call >= hooks.stop_after_steps) break;
  }
  return state;
}

TrainState transition(TrainState state, const StageConfig& from, const StageConfig& to, int base_resolution) {
  if (from.reduction.patch_size != to.reduction.patch_size || to.reduction.patch_size != state.model.patch_size)
    throw std::invalid_argument("transition: patch size differs between stages '" + from.name + "' and '" +
                                to.name + "'");
  to.validate(base_resolution);
  VitConfig next = state.model;
  next.image_size = to.reduction.input_resolution(base_resolution);
  if (next.image_size != state.model.image_size) {
    state.params = resize_vit_params(state.params, state.model, next);
    state.model = next;
  }
  state.adam_m = state.params.zeros_like();
  state.adam_v = state.params.zeros_like();
  state.adam_step = 0;
  state.stage_index += 1;
  state.step = 0;
  state.samples_seen = 0;
  state.nonfinite_streak = 0;
  return state;
}

ComputeEstimate estimate_compute(const VitConfig& model, const std::vector<StageConfig>& stages) {
  ComputeEstimate est;
  const int base = model.image_size;
  for (const auto& st : stages) {
    st.validate(base);
    VitConfig m = model;
    m.image_size = st.reduction.input_resolution(base);
    StageEstimate se;
    se.name = st.name;
    se.tokens = kept_token_count(st.reduction, base);
    se.attack_steps = st.budget.num_steps;
    se.samples = st.samples_total;
    se.gflops_per_sample = flops_per_sample(m, se.tokens, se.attack_steps);
    se.gflops = static_cast<double>(se.samples) * se.gflops_per_sample;
    est.total_gflops += se.gflops;
    est.stages.push_back(se);
  }
  if (!est.stages.empty()) est.first_stage_gflops = est.stages.front().gflops;
  return est;
}

std::string schedule_notation(const std::vector<StageConfig>& stages, int base_resolution) {
  auto count = [](std::int64_t n) {
    char buf[32];
    if (n >= 1000000) std::snprintf(buf, sizeof buf, "%gM", n / 1e6);
    else if (n >= 1000) std::snprintf(buf, sizeof buf, "%gK", n / 1e3);
    else std::snprintf(buf, sizeof buf, "%lld", static_cast<long long>(n));
    return std::string(buf);
  };
  std::string out;
  for (const auto& s : stages) {
    if (!out.empty()) out += " + ";
    out += count(s.samples_total) + "@" + std::to_string(s.reduction.input_resolution(base_resolution));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'A', 'D', 'V', 'X', 'L', 'C', 'K', '1'};
static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

ordered_json model_json(const VitConfig& m) {
  ordered_json j;
  j["image_size"] = m.image_size;
  j["patch_size"] = m.patch_size;
  j["channels"] = m.channels;
  j["depth"] = m.depth;
  j["width"] = m.width;
  j["heads"] = m.heads;
  j["mlp_ratio"] = m.mlp_ratio;
  j["head_mode"] = to_string(m.head_mode);
  j["num_classes"] = m.num_classes;
  j["embed_dim"] = m.embed_dim;
  return j;
}

VitConfig model_from_json(const ordered_json& j) {
  VitConfig m;
  m.image_size = j.at("image_size").get<int>();
  m.patch_size = j.at("patch_size").get<int>();
  m.channels = j.at("channels").get<int>();
  m.depth = j.at("depth").get<int>();
  m.width = j.at("width").get<int>();
  m.heads = j.at("heads").get<int>();
  m.mlp_ratio = j.at("mlp_ratio").get<double>();
  m.head_mode = parse_head_mode(j.at("head_mode").get<std::string>());
  m.num_classes = j.at("num_classes").get<int>();
  m.embed_dim = j.at("embed_dim").get<int>();
  return m;
}

}  // namespace

ordered_json ledger_to_json(const ComputeLedger& l) {
  ordered_json j;
  j["passes_forward"] = l.passes_forward;
  j["passes_backward"] = l.passes_backward;
  j["gflops_total"] = l.gflops_total;
  ordered_json stages = ordered_json::array();
  for (const auto& s : l.stages) {
    ordered_json e;
    e["name"] = s.name;
    e["steps"] = s.steps;
    e["samples"] = s.samples;
    e["passes_forward"] = s.passes_forward;
    e["passes_backward"] = s.passes_backward;
    e["gflops"] = s.gflops;
    stages.push_back(e);
  }
  j["stages"] = stages;
  return j;
}

ComputeLedger ledger_from_json(const ordered_json& j) {
  ComputeLedger l;
  l.passes_forward = j.at("passes_forward").get<std::int64_t>();
  l.passes_backward = j.at("passes_backward").get<std::int64_t>();
  l.gflops_total = j.at("gflops_total").get<double>();
  for (const auto& e : j.at("stages")) {
    StageLedger s;
    s.name = e.at("name").get<std::string>();
    s.steps = e.at("steps").get<std::int64_t>();
    s.samples = e.at("samples").get<std::int64_t>();
    s.passes_forward = e.at("passes_forward").get<std::int64_t>();
    s.passes_backward = e.at("passes_backward").get<std::int64_t>();
    s.gflops = e.at("gflops").get<double>();
    l.stages.push_back(s);
  }
  return l;
}

void save_checkpoint(const std::string& path, const TrainState& state, const std::string& run_config) {
  ordered_json h;
  h["format"] = "advxl-checkpoint";
  h["model"] = model_json(state.model);
  const auto pos = state.params.layout.at("pos_embed");
  h["pos_grid"] = {pos.shape[0], pos.shape[1]};
  ordered_json tensors = ordered_json::array();
  for (const auto& e : state.params.layout.entries()) tensors.push_back({{"name", e.name}, {"shape", e.shape}});
  h["tensors"] = tensors;
  h["groups"] = {"params", "adam_m", "adam_v"};
  h["adam_step"] = state.adam_step;
  h["stage_index"] = state.stage_index;
  h["step"] = state.step;
  h["samples_seen"] = state.samples_seen;
  h["nonfinite_streak"] = state.nonfinite_streak;
  h["ledger"] = ledger_to_json(state.ledger);
  h["run_config"] = run_config;
  const std::string header = h.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write checkpoint " + tmp);
    os.write(kMagic, sizeof kMagic);
    const std::uint64_t len = header.size();
    os.write(reinterpret_cast<const char*>(&len), sizeof len);
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto* store : {&state.params, &state.adam_m, &state.adam_v}) {
      if (!(store->layout == state.params.layout)) throw std::logic_error("checkpoint: optimizer layout mismatch");
      os.write(reinterpret_cast<const char*>(store->values.data()),
               static_cast<std::streamsize>(store->values.size() * sizeof(float)));
    }
    if (!os) throw std::runtime_error("short write to checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

TrainState load_checkpoint(const std::string& path, std::string* run_config) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[8];
  std::uint64_t len = 0;
  is.read(magic, sizeof magic);
  is.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw std::runtime_error(path + ": not an advxl checkpoint");
  if (len > (std::uint64_t{1} << 30)) throw std::runtime_error(path + ": corrupt header length");
  std::string header(len, '\0');
  is.read(header.data(), static_cast<std::streamsize>(len));
  if (!is) throw std::runtime_error(path + ": truncated header");

  TrainState s;
  try {
    const auto h = ordered_json::parse(header);
    s.model = model_from_json(h.at("model"));
    s.model.validate();
    ParamLayout layout;
    for (const auto& t : h.at("tensors")) layout.add(t.at("name").get<std::string>(), t.at("shape").get<std::vector<int>>());
    s.params = ParamStore<float>(layout);
    s.adam_m = ParamStore<float>(layout);
    s.adam_v = ParamStore<float>(layout);
    s.adam_step = h.at("adam_step").get<std::int64_t>();
    s.stage_index = h.at("stage_index").get<int>();
    s.step = h.at("step").get<std::int64_t>();
    s.samples_seen = h.at("samples_seen").get<std::int64_t>();
    s.nonfinite_streak = h.at("nonfinite_streak").get<int>();
    s.ledger = ledger_from_json(h.at("ledger"));
    if (run_config) *run_config = h.value("run_config", "");
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": bad checkpoint header: " + e.what());
  }
  for (auto* store : {&s.params, &s.adam_m, &s.adam_v}) {
    is.read(reinterpret_cast<char*>(store->values.data()),
            static_cast<std::streamsize>(store->values.size() * sizeof(float)));
    if (!is) throw std::runtime_error(path + ": truncated tensor data");
  }
  // The tensor directory must be the model's layout plus the temperature.
  ParamLayout expect = vit_layout(s.model);
  expect.add(kLogTau, {1});
  if (!(expect == s.params.layout))
    throw std::runtime_error(path + ": tensor directory does not match the model config");
  return s;
}

}  // namespace advxl
