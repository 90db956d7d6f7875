#include "advxl/config.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

namespace advxl {

namespace fs = std::filesystem;

double parse_real(const std::string& text) {
  auto one = [&](const std::string& s) {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  };
  std::string t = text;
  t.erase(std::remove_if(t.begin(), t.end(), [](unsigned char c) { return std::isspace(c); }), t.end());
  if (t.empty()) throw std::invalid_argument("empty number");
  const auto slash = t.find('/');
  if (slash == std::string::npos) return one(t);
  const double den = one(t.substr(slash + 1));
  if (den == 0.0) throw std::invalid_argument("division by zero");
  return one(t.substr(0, slash)) / den;
}

namespace {

int line_of(const YAML::Node& n) { return n.Mark().is_null() ? 0 : n.Mark().line + 1; }

/// A node plus its dotted path, so every error names the field.
struct Field {
  YAML::Node node;
  std::string path;

  [[noreturn]] void fail(const std::string& what) const { throw ConfigError(path, what, line_of(node)); }

  bool has(const std::string& key) const { return node.IsMap() && node[key].IsDefined() && !node[key].IsNull(); }
  Field operator[](const std::string& key) const { return {node[key], path.empty() ? key : path + "." + key}; }

  void expect_map(std::initializer_list<const char*> allowed) const {
    if (!node.IsMap()) fail("expected a mapping");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& kv : node) {
      const std::string k = kv.first.as<std::string>();
      if (!ok.count(k)) throw ConfigError(path.empty() ? k : path + "." + k, "unknown key", line_of(kv.first));
    }
  }

  std::string str() const {
    if (!node.IsScalar()) fail("expected a scalar");
    return node.Scalar();
  }
  double real() const {
    try {
      const double v = parse_real(str());
      if (!std::isfinite(v)) fail("must be finite");
      return v;
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      fail("expected a number or fraction, got '" + node.Scalar() + "'");
    }
  }
  std::int64_t integer() const {
    const std::string s = str();
    double mult = 1.0;
    std::string digits = s;
    if (!s.empty() && (s.back() == 'K' || s.back() == 'k')) mult = 1e3, digits.pop_back();
    else if (!s.empty() && s.back() == 'M') mult = 1e6, digits.pop_back();
    else if (!s.empty() && (s.back() == 'B' || s.back() == 'G')) mult = 1e9, digits.pop_back();
    double v;
    try {
      v = parse_real(digits) * mult;
    } catch (const std::exception&) {
      fail("expected an integer, got '" + s + "'");
    }
    if (v != std::floor(v) || std::abs(v) > 9e18) fail("expected an integer, got '" + s + "'");
    return static_cast<std::int64_t>(v);
  }
  int i32() const {
    const std::int64_t v = integer();
    if (v < INT32_MIN || v > INT32_MAX) fail("out of range");
    return static_cast<int>(v);
  }
  std::uint64_t u64() const {
    const std::string s = str();
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(s, &used, 0);
      if (used != s.size() || s.front() == '-') throw std::invalid_argument("");
      return v;
    } catch (const std::exception&) {
      fail("expected a non-negative integer, got '" + s + "'");
    }
  }
  bool boolean() const {
    try {
      return node.as<bool>();
    } catch (const std::exception&) {
      fail("expected true or false");
    }
  }
};

std::string resolve(const std::string& base, const std::string& p) {
  if (p.empty() || fs::path(p).is_absolute() || base.empty()) return p;
  return (fs::path(base) / p).lexically_normal().string();
}

SynthConfig parse_synth(const Field& f, int resolution) {
  f.expect_map({"count", "seed", "task_seed", "classes", "captioned"});
  SynthConfig s;
  s.resolution = resolution;
  if (f.has("count")) s.count = f["count"].i32();
  if (f.has("seed")) s.seed = f["seed"].u64();
  if (f.has("task_seed")) s.task_seed = f["task_seed"].u64();
  if (f.has("classes")) s.num_classes = f["classes"].i32();
  if (f.has("captioned")) s.captioned = f["captioned"].boolean();
  if (s.count < 1) f["count"].fail("must be >= 1");
  if (s.num_classes < 2) f["classes"].fail("must be >= 2");
  return s;
}

PerturbationBudget parse_budget(const Field& f) {
  f.expect_map({"norm", "epsilon", "step_size", "steps", "random_init"});
  PerturbationBudget b;
  try {
    if (f.has("norm")) b.norm = parse_norm(f["norm"].str());
  } catch (const std::invalid_argument& e) {
    f["norm"].fail(e.what());
  }
  if (f.has("epsilon")) b.epsilon = f["epsilon"].real();
  if (f.has("step_size")) b.step_size = f["step_size"].real();
  if (f.has("steps")) b.num_steps = f["steps"].i32();
  if (f.has("random_init")) b.random_init = f["random_init"].boolean();
  try {
    b.validate();
  } catch (const std::invalid_argument& e) {
    f.fail(e.what());
  }
  return b;
}

StageConfig parse_stage(const Field& f, int index, const VitConfig& model) {
  f.expect_map({"name", "samples", "batch_size", "objective", "label_smoothing", "tau_divides", "reduction",
                "attack", "optimizer", "augment", "seed"});
  StageConfig s;
  s.name = f.has("name") ? f["name"].str() : "stage" + std::to_string(index);
  if (!f.has("samples")) f.fail("missing 'samples'");
  s.samples_total = f["samples"].integer();
  if (f.has("batch_size")) s.batch_size = f["batch_size"].i32();
  try {
    if (f.has("objective")) s.objective = parse_objective(f["objective"].str());
  } catch (const std::invalid_argument& e) {
    f["objective"].fail(e.what());
  }
  if (f.has("label_smoothing")) s.label_smoothing = f["label_smoothing"].real();
  if (f.has("tau_divides")) s.tau_divides = f["tau_divides"].boolean();
  s.reduction.patch_size = model.patch_size;
  if (f.has("reduction")) {
    const Field r = f["reduction"];
    r.expect_map({"strategy", "mask_ratio", "resolution", "random_offset"});
    try {
      if (r.has("strategy")) s.reduction.strategy = parse_reduction_strategy(r["strategy"].str());
    } catch (const std::invalid_argument& e) {
      r["strategy"].fail(e.what());
    }
    if (r.has("mask_ratio")) s.reduction.mask_ratio = r["mask_ratio"].real();
    if (r.has("resolution")) s.reduction.target_resolution = r["resolution"].i32();
    if (r.has("random_offset")) s.reduction.random_block_offset = r["random_offset"].boolean();
  }
  if (!f.has("attack")) f.fail("missing 'attack'");
  s.budget = parse_budget(f["attack"]);
  if (f.has("optimizer")) {
    const Field o = f["optimizer"];
    o.expect_map({"peak_lr", "weight_decay", "warmup_samples", "grad_clip", "beta1", "beta2", "eps"});
    if (o.has("peak_lr")) s.optimizer.peak_lr = o["peak_lr"].real();
    if (o.has("weight_decay")) s.optimizer.weight_decay = o["weight_decay"].real();
    if (o.has("warmup_samples")) s.optimizer.warmup_samples = o["warmup_samples"].integer();
    if (o.has("grad_clip")) s.optimizer.grad_clip = o["grad_clip"].real();
    if (o.has("beta1")) s.optimizer.beta1 = o["beta1"].real();
    if (o.has("beta2")) s.optimizer.beta2 = o["beta2"].real();
    if (o.has("eps")) s.optimizer.eps = o["eps"].real();
  }
  if (f.has("augment")) {
    const Field a = f["augment"];
    a.expect_map({"randaug_ops", "randaug_magnitude", "mixup_alpha", "cutmix_alpha", "mix_prob", "switch_prob",
                  "mix_order", "drop_path"});
    AugmentConfig& g = s.augment;
    if (a.has("randaug_ops")) g.randaug_ops = a["randaug_ops"].i32();
    if (a.has("randaug_magnitude")) g.randaug_magnitude = a["randaug_magnitude"].real();
    if (a.has("mixup_alpha")) g.mixup_alpha = a["mixup_alpha"].real();
    if (a.has("cutmix_alpha")) g.cutmix_alpha = a["cutmix_alpha"].real();
    if (a.has("mix_prob")) g.mix_prob = a["mix_prob"].real();
    if (a.has("switch_prob")) g.switch_prob = a["switch_prob"].real();
    if (a.has("drop_path")) g.drop_path = a["drop_path"].real();
    try {
      if (a.has("mix_order")) g.mix_order = parse_mix_order(a["mix_order"].str());
      g.validate();
    } catch (const std::invalid_argument& e) {
      a.fail(e.what());
    }
  }
  if (f.has("seed")) s.seed = f["seed"].u64();
  try {
    s.validate(model.image_size);
  } catch (const std::invalid_argument& e) {
    f.fail(e.what());
  }
  return s;
}

std::vector<StageConfig> parse_stages(const Field& f, const VitConfig& model, std::uint64_t master) {
  if (!f.node.IsSequence() || f.node.size() == 0) f.fail("expected a non-empty list of stages");
  std::vector<StageConfig> out;
  for (std::size_t i = 0; i < f.node.size(); ++i) {
    Field item{f.node[i], f.path + "[" + std::to_string(i) + "]"};
    StageConfig s = parse_stage(item, static_cast<int>(i), model);
    if (!item.has("seed")) s.seed = derive_seed(master, 0x57A6E000ull + i);
    for (const auto& prev : out)
      if (prev.name == s.name) item["name"].fail("duplicate stage name '" + s.name + "'");
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

RunConfig parse_run_config(const std::string& text, const std::string& base_dir, std::optional<std::uint64_t> seed) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError("<document>", e.msg, e.mark.line + 1);
  }
  const Field top{root, ""};
  top.expect_map({"seed", "output_dir", "checkpoints_per_stage", "model", "data", "stages", "baseline_stages", "eval"});
  RunConfig c;
  c.source_text = text;
  c.base_dir = base_dir;
  if (top.has("seed")) c.seed = top["seed"].u64();
  if (seed) c.seed = *seed;
  if (top.has("output_dir")) c.output_dir = resolve(base_dir, top["output_dir"].str());
  if (top.has("checkpoints_per_stage")) c.checkpoints_per_stage = top["checkpoints_per_stage"].i32();

  if (!top.has("data")) throw ConfigError("data", "missing section");
  const Field d = top["data"];
  d.expect_map({"resolution", "train_manifest", "eval_manifest", "synthetic_train", "synthetic_eval", "text_table",
                "stub_text"});
  if (d.has("resolution")) c.data.resolution = d["resolution"].i32();
  if (c.data.resolution < 1) d["resolution"].fail("must be >= 1");
  if (d.has("train_manifest")) {
    c.data.train_manifest = resolve(base_dir, d["train_manifest"].str());
    c.lines["data.train_manifest"] = line_of(d["train_manifest"].node);
  }
  if (d.has("eval_manifest")) {
    c.data.eval_manifest = resolve(base_dir, d["eval_manifest"].str());
    c.lines["data.eval_manifest"] = line_of(d["eval_manifest"].node);
  }
  if (d.has("synthetic_train")) c.data.synthetic_train = parse_synth(d["synthetic_train"], c.data.resolution);
  if (d.has("synthetic_eval")) c.data.synthetic_eval = parse_synth(d["synthetic_eval"], c.data.resolution);
  if (d.has("text_table")) {
    c.data.text_table = resolve(base_dir, d["text_table"].str());
    c.lines["data.text_table"] = line_of(d["text_table"].node);
  }
  if (d.has("stub_text")) {
    const Field st = d["stub_text"];
    st.expect_map({"dim", "seed"});
    c.data.stub_text_dim = st.has("dim") ? st["dim"].i32() : 0;
    if (c.data.stub_text_dim < 1) st["dim"].fail("must be >= 1");
    if (st.has("seed")) c.data.stub_text_seed = st["seed"].u64();
  }
  if (c.data.train_manifest.empty() == !c.data.synthetic_train)
    throw ConfigError("data.train_manifest", "give exactly one of train_manifest or synthetic_train", line_of(d.node));
  if (!c.data.eval_manifest.empty() && c.data.synthetic_eval)
    throw ConfigError("data.eval_manifest", "give at most one of eval_manifest or synthetic_eval", line_of(d.node));

  c.model.image_size = c.data.resolution;
  if (top.has("model")) {
    const Field m = top["model"];
    m.expect_map({"patch_size", "channels", "depth", "width", "heads", "mlp_ratio", "head", "num_classes", "embed_dim"});
    if (m.has("patch_size")) c.model.patch_size = m["patch_size"].i32();
    if (m.has("channels")) c.model.channels = m["channels"].i32();
    if (m.has("depth")) c.model.depth = m["depth"].i32();
    if (m.has("width")) c.model.width = m["width"].i32();
    if (m.has("heads")) c.model.heads = m["heads"].i32();
    if (m.has("mlp_ratio")) c.model.mlp_ratio = m["mlp_ratio"].real();
    try {
      if (m.has("head")) c.model.head_mode = parse_head_mode(m["head"].str());
    } catch (const std::invalid_argument& e) {
      m["head"].fail(e.what());
    }
    if (m.has("num_classes")) c.model.num_classes = m["num_classes"].i32();
    if (m.has("embed_dim")) c.model.embed_dim = m["embed_dim"].i32();
    try {
      c.model.validate();
    } catch (const std::invalid_argument& e) {
      m.fail(e.what());
    }
  }

  if (!top.has("stages")) throw ConfigError("stages", "missing section");
  c.stages = parse_stages(top["stages"], c.model, c.seed);
  if (top.has("baseline_stages")) c.baseline_stages = parse_stages(top["baseline_stages"], c.model, c.seed);

  c.eval.suite = AttackSuite::standard_protocol(c.data.resolution);
  if (top.has("eval")) {
    const Field e = top["eval"];
    e.expect_map({"protocol", "steps", "restarts", "subset", "seed", "resolution", "after_each_stage", "batch_size",
                  "attacks"});
    if (e.has("resolution")) c.eval.resolution = e["resolution"].i32();
    const int side = c.eval.resolution > 0 ? c.eval.resolution : c.data.resolution;
    const int steps = e.has("steps") ? e["steps"].i32() : 20;
    const int restarts = e.has("restarts") ? e["restarts"].i32() : 1;
    const std::string protocol = e.has("protocol") ? e["protocol"].str() : "standard";
    if (protocol == "standard") {
      c.eval.suite = AttackSuite::standard_protocol(side, steps, restarts);
    } else if (protocol == "custom") {
      c.eval.suite = {};
      c.eval.suite.scaling_rule = "custom attack list (no scaling applied)";
    } else {
      e["protocol"].fail("expected 'standard' or 'custom'");
    }
    if (e.has("attacks")) {
      const Field list = e["attacks"];
      if (!list.node.IsSequence()) list.fail("expected a list");
      if (protocol == "standard") list.fail("attacks need protocol: custom");
      for (std::size_t i = 0; i < list.node.size(); ++i) {
        Field a{list.node[i], list.path + "[" + std::to_string(i) + "]"};
        a.expect_map({"name", "norm", "epsilon", "step_size", "steps", "random_init", "restarts"});
        NamedAttack na;
        na.name = a.has("name") ? a["name"].str() : "attack" + std::to_string(i);
        YAML::Node b = YAML::Clone(a.node);
        b.remove("name");
        b.remove("restarts");
        na.budget = parse_budget({b, a.path});
        na.restarts = a.has("restarts") ? a["restarts"].i32() : restarts;
        c.eval.suite.attacks.push_back(na);
      }
    }
    if (e.has("subset")) c.eval.suite.eval_subset_size = e["subset"].i32();
    if (e.has("seed")) c.eval.suite.seed = e["seed"].u64();
    if (e.has("after_each_stage")) c.eval.after_each_stage = e["after_each_stage"].boolean();
    if (e.has("batch_size")) c.eval.batch_size = e["batch_size"].i32();
    try {
      c.eval.suite.validate();
    } catch (const std::invalid_argument& ex) {
      e.fail(ex.what());
    }
  }
  c.validate(false);
  return c;
}

RunConfig load_run_config(const std::string& path, std::optional<std::uint64_t> seed, bool check_files) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError(path, "cannot open config file");
  std::ostringstream ss;
  ss << is.rdbuf();
  try {
    RunConfig c = parse_run_config(ss.str(), fs::path(path).parent_path().string(), seed);
    c.validate(check_files);
    return c;
  } catch (const ConfigError& e) {
    throw ConfigError(e.field(), e.detail(), e.line(), path);
  }
}

void RunConfig::validate(bool check_files) const {
  model.validate();
  if (model.image_size != data.resolution) throw ConfigError("model", "image_size must equal data.resolution");
  if (stages.empty()) throw ConfigError("stages", "at least one stage is required");
  if (checkpoints_per_stage < 0) throw ConfigError("checkpoints_per_stage", "must be >= 0");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const StageConfig& s = stages[i];
    const std::string f = "stages[" + std::to_string(i) + "]";
    if (s.reduction.patch_size != model.patch_size) throw ConfigError(f, "reduction patch size differs from model");
    const int side = s.reduction.input_resolution(model.image_size);
    if (side % model.patch_size != 0)
      throw ConfigError(f, "input side " + std::to_string(side) + " is not a multiple of patch " +
                               std::to_string(model.patch_size));
    if (s.objective == Objective::contrastive) {
      if (model.head_mode != HeadMode::projection) throw ConfigError(f + ".objective", "contrastive needs model.head: projection");
      if (data.text_table.empty() && data.stub_text_dim == 0)
        throw ConfigError("data.text_table", "contrastive stages need text_table or stub_text");
    }
  }
  if (model.head_mode == HeadMode::projection && data.text_table.empty() && data.stub_text_dim == 0)
    throw ConfigError("data.text_table", "projection-head models need text_table or stub_text for zero-shot eval");
  if (data.stub_text_dim > 0 && model.head_mode == HeadMode::projection && data.stub_text_dim != model.embed_dim)
    throw ConfigError("data.stub_text.dim", "must equal model.embed_dim");
  if (check_files) {
    auto need = [this](const std::string& field, const std::string& p) {
      const auto it = lines.find(field);
      if (!p.empty() && !fs::exists(p))
        throw ConfigError(field, "file not found: " + p, it == lines.end() ? 0 : it->second);
    };
    need("data.train_manifest", data.train_manifest);
    need("data.eval_manifest", data.eval_manifest);
    need("data.text_table", data.text_table);
  }
}

VitConfig RunConfig::stage_model(int i) const {
  VitConfig m = model;
  m.image_size = stages.at(static_cast<std::size_t>(i)).reduction.input_resolution(model.image_size);
  return m;
}

std::vector<StageConfig> RunConfig::comparison_baseline() const {
  if (!baseline_stages.empty()) return baseline_stages;
  StageConfig b = stages.back();
  b.name = "full_resolution_baseline";
  b.reduction = ReductionSpec{};
  b.reduction.patch_size = model.patch_size;
  b.samples_total = 0;
  for (const auto& s : stages) b.samples_total += s.samples_total;
  b.optimizer.warmup_samples = std::min(b.optimizer.warmup_samples, b.samples_total);
  return {b};
}

}  // namespace advxl
