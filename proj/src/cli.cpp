#include "advxl/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <utility>

#include "advxl/eval.hpp"
#include "advxl/rng.hpp"

namespace advxl {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kInitStream = 0x1A17ull;
constexpr std::uint64_t kDataStream = 0xDA7Aull;

std::string read_text(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << text;
    if (!os) throw std::runtime_error("short write to " + path);
  }
  fs::rename(tmp, path);
}

Dataset load_split(const std::string& manifest, const std::optional<SynthConfig>& synth, int resolution,
                   const TextEmbeddingTable* table, std::ostream& err) {
  if (synth) return make_synthetic_dataset(*synth);
  Dataset d = decode_dataset(DatasetManifest::load(manifest, table), resolution);
  if (d.skipped > 0) err << "warning: skipped " << d.skipped << " undecodable image(s) in " << manifest << "\n";
  return d;
}

/// Loads the configured table, or builds stub rows for every caption and
/// class key the data refers to.
std::optional<TextEmbeddingTable> text_table_for(const RunConfig& cfg, const std::vector<const Dataset*>& splits) {
  if (!cfg.data.text_table.empty()) return TextEmbeddingTable::load(cfg.data.text_table);
  if (cfg.data.stub_text_dim <= 0) return std::nullopt;
  std::vector<std::string> captions;
  std::set<std::string> seen;
  auto add = [&](const std::string& c) {
    if (seen.insert(c).second) captions.push_back(c);
  };
  for (const Dataset* d : splits) {
    for (const auto& k : d->zero_shot_keys()) add(k);
    for (const auto& k : d->caption_keys) add(k);
  }
  return stub_text_embeddings(captions, cfg.data.stub_text_dim, cfg.data.stub_text_seed);
}

/// Manifests with caption keys are checked against the table only once it exists.
Dataset load_train(const RunConfig& cfg, std::ostream& err) {
  return load_split(cfg.data.train_manifest, cfg.data.synthetic_train, cfg.data.resolution, nullptr, err);
}

Classifier classifier_for(const VitConfig& model, const ParamStore<float>& params, double tau,
                          const TextEmbeddingTable* table, const std::vector<std::string>& class_keys, Exec exec) {
  if (model.head_mode == HeadMode::classifier) return vit_classifier(model, params, exec);
  if (!table) throw std::invalid_argument("projection-head model needs a text table for zero-shot evaluation");
  return zero_shot_classifier(model, params, *table, class_keys, tau, exec);
}

EvalReport evaluate_state(const TrainState& state, const Dataset& eval_data, const EvalConfig& ec,
                          const TextEmbeddingTable* table, Exec exec) {
  const int side = ec.resolution > 0 ? ec.resolution : eval_data.resolution;
  VitConfig m = state.model;
  m.image_size = side;
  const ParamStore<float> params =
      side == state.model.image_size ? state.params : resize_vit_params(state.params, state.model, m);
  const Classifier clf = classifier_for(m, params, state.tau(), table, eval_data.zero_shot_keys(), exec);
  const EvalSet set = make_eval_set(eval_data, ec.suite.eval_subset_size, ec.suite.seed, side);
  return multi_norm_report(clf, set, ec.suite, model_fingerprint(m, params), state.ledger, ec.batch_size);
}

void print_report(const EvalReport& r, std::ostream& out) {
  out << std::fixed << std::setprecision(4);
  out << "clean_acc " << r.clean_acc << " (" << r.samples_evaluated << " samples @" << r.eval_resolution << "px)\n";
  for (const auto& e : r.robust)
    out << "robust_acc[" << e.name << "] " << e.robust_acc << "  (" << to_string(e.budget.norm)
        << " eps=" << std::setprecision(6) << e.budget.epsilon << std::setprecision(4) << ", PGD-"
        << e.budget.num_steps << ", restarts=" << e.restarts << ")\n";
  out.unsetf(std::ios::floatfield);
}

std::int64_t recorded_steps(const ComputeLedger& l) {
  std::int64_t n = 0;
  for (const auto& s : l.stages) n += s.steps;
  return n;
}

/// Keeps the first `lines` lines of the step log.
void truncate_log(const std::string& path, std::int64_t lines) {
  std::string kept;
  if (fs::exists(path)) {
    std::istringstream in(read_text(path));
    std::string line;
    for (std::int64_t i = 0; i < lines && std::getline(in, line); ++i) kept += line + "\n";
  }
  write_text(path, kept);
}

std::string stage_tag(int index, const StageConfig& s) { return std::to_string(index) + "_" + s.name; }

}  // namespace

int cmd_train(const TrainOptions& opt, std::ostream& out, std::ostream& err) {
  RunConfig cfg;
  try {
    cfg = load_run_config(opt.config_path, opt.seed);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
  const fs::path dir = opt.out_dir.empty() ? fs::path(cfg.output_dir) : fs::path(opt.out_dir);
  const fs::path ckpt_dir = dir / "checkpoints";
  const std::string latest = (ckpt_dir / "latest.ckpt").string();
  const std::string log_path = (dir / "steps.jsonl").string();
  std::string provenance = cfg.source_text;
  if (opt.seed) provenance += "\n# --seed " + std::to_string(*opt.seed) + "\n";

  try {
    fs::create_directories(ckpt_dir);
    Dataset train = load_train(cfg, err);
    Dataset eval_data = (cfg.data.eval_manifest.empty() && !cfg.data.synthetic_eval)
                            ? Dataset{}
                            : load_split(cfg.data.eval_manifest, cfg.data.synthetic_eval, cfg.data.resolution,
                                         nullptr, err);
    const bool have_eval = eval_data.size() > 0;
    if (!have_eval) err << "warning: no evaluation split configured; evaluating on the training split\n";
    const Dataset& eval_ref = have_eval ? eval_data : train;
    const std::optional<TextEmbeddingTable> table = text_table_for(cfg, {&train, &eval_ref});
    if (table)
      for (const Dataset* d : {&std::as_const(train), &eval_ref})
        for (const auto& k : d->caption_keys)
          if (!table->contains(k)) throw DataError("caption_key '" + k + "' not found in the text-embedding table");
    const TextEmbeddingTable* tbl = table ? &*table : nullptr;
    const std::uint64_t table_sum = table ? table->checksum() : 0;
    if (table) table->save((dir / "text_table.teb").string());
    if (cfg.model.head_mode == HeadMode::classifier)
      for (int i = 0; i < train.size(); ++i)
        if (train.class_of(i) >= cfg.model.num_classes)
          throw ConfigError("model.num_classes", "training labels reach " + std::to_string(train.class_of(i)));

    TrainState state;
    if (opt.resume && fs::exists(latest)) {
      std::string stored;
      state = load_checkpoint(latest, &stored);
      if (stored != provenance) {
        err << "resume refused: " << latest << " was written by a different run config\n";
        return kExitConfig;
      }
      truncate_log(log_path, recorded_steps(state.ledger));
      out << "resuming stage " << state.stage_index << " (" << cfg.stages[static_cast<std::size_t>(state.stage_index)].name
          << ") at step " << state.step << "\n";
    } else {
      if (opt.resume) err << "note: no checkpoint in " << ckpt_dir.string() << "; starting fresh\n";
      for (const auto& f : fs::directory_iterator(ckpt_dir))
        if (f.path().extension() == ".ckpt") fs::remove(f.path());
      state = init_train_state(cfg.stage_model(0), derive_seed(cfg.seed, kInitStream));
      truncate_log(log_path, 0);
    }
    write_text((dir / "config.yaml").string(), provenance);

    std::ofstream log(log_path, std::ios::app);
    std::int64_t budget = opt.stop_after_steps;
    for (;;) {
      const int si = state.stage_index;
      const StageConfig& stage = cfg.stages[static_cast<std::size_t>(si)];
      const BatchStream stream(train, stage.batch_size, derive_seed(stage.seed, kDataStream), stage.reduction, tbl);
      StageHooks hooks;
      hooks.exec = opt.exec;
      hooks.stop_after_steps = budget;
      const std::int64_t total = stage.total_steps();
      hooks.checkpoint_every_steps =
          cfg.checkpoints_per_stage > 0 ? std::max<std::int64_t>(1, total / cfg.checkpoints_per_stage) : 0;
      const auto t0 = std::chrono::steady_clock::now();
      const std::int64_t start_step = state.step;
      hooks.on_step = [&](const StepRecord& r) {
        log << r.to_json_line() << "\n";
        if (opt.log_every_steps > 0 && (r.step % opt.log_every_steps == 0 || r.step == total)) {
          log.flush();
          const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
          const double rate = secs > 0 ? (r.step - start_step) * stage.batch_size / secs : 0.0;
          out << "[" << stage.name << "] step " << r.step << "/" << total << " loss " << r.loss << " lr " << r.lr
              << " gflops " << r.gflops_cum << " (" << static_cast<long>(rate) << " samples/s)\n";
        }
      };
      hooks.on_checkpoint = [&](const TrainState& s) {
        log.flush();
        save_checkpoint(latest, s, provenance);
        char name[64];
        std::snprintf(name, sizeof name, "_step%06lld.ckpt", static_cast<long long>(s.step));
        fs::copy_file(latest, ckpt_dir / (stage_tag(si, stage) + name), fs::copy_options::overwrite_existing);
      };
      const std::int64_t before = state.step;
      try {
        state = run_stage(std::move(state), stage, stream, tbl, hooks);
      } catch (const TrainingDiverged& e) {
        err << "training diverged: " << e.what() << "; last state saved to " << latest << "\n";
        return kExitDiverged;
      }
      log.flush();
      if (budget >= 0) {
        budget -= state.step - before;
        if (state.step < total || budget <= 0) {
          out << "stopped after the requested number of steps\n";
          return kExitOk;
        }
      }
      if (total == 0) save_checkpoint(latest, state, provenance);
      if (cfg.eval.after_each_stage && si + 1 < static_cast<int>(cfg.stages.size())) {
        const EvalReport r = evaluate_state(state, eval_ref, cfg.eval, tbl, opt.exec);
        write_text((dir / ("eval_stage" + stage_tag(si, stage) + ".json")).string(), r.to_json());
        out << "evaluation after stage " << stage.name << ":\n";
        print_report(r, out);
      }
      if (si + 1 >= static_cast<int>(cfg.stages.size())) break;
      state = transition(std::move(state), stage, cfg.stages[static_cast<std::size_t>(si) + 1], cfg.model.image_size);
      out << "transition to stage " << cfg.stages[static_cast<std::size_t>(si) + 1].name << " at "
          << state.model.image_size << "px\n";
    }
    fs::copy_file(latest, dir / "final.ckpt", fs::copy_options::overwrite_existing);
    const EvalReport report = evaluate_state(state, eval_ref, cfg.eval, tbl, opt.exec);
    write_text((dir / "eval_report.json").string(), report.to_json());
    write_text((dir / "eval_curve.csv").string(), report.to_csv());
    print_report(report, out);
    if (table && table->checksum() != table_sum) {
      err << "internal error: text-embedding table changed during training\n";
      return kExitIo;
    }
    if (table) {
      char hex[32];
      std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(table->checksum()));
      out << "text table checksum " << hex << " unchanged (" << table->size() << " rows)\n";
    }
    out << "total ledger GFLOPs " << state.ledger.gflops_total << "\n";
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  }
}

int cmd_eval(const EvalOptions& opt, std::ostream& out, std::ostream& err) {
  RunConfig cfg;
  try {
    cfg = load_run_config(opt.config_path);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
  try {
    TrainState state = load_checkpoint(opt.checkpoint_path);
    VitConfig a = state.model, b = cfg.model;
    a.image_size = b.image_size = 0;
    if (!(a == b)) {
      err << "shape mismatch: checkpoint " << opt.checkpoint_path << " does not match the config's model section\n";
      return kExitShape;
    }
    EvalConfig ec = cfg.eval;
    const int side = ec.resolution > 0 ? ec.resolution : cfg.data.resolution;
    if (opt.standard_protocol) {
      AttackSuite p = AttackSuite::standard_protocol(side);
      p.eval_subset_size = ec.suite.eval_subset_size;
      p.seed = ec.suite.seed;
      ec.suite = p;
    }
    if (opt.seed) ec.suite.seed = *opt.seed;
    if (opt.subset >= 0) ec.suite.eval_subset_size = opt.subset;
    if (opt.restarts > 0)
      for (auto& at : ec.suite.attacks) at.restarts = opt.restarts;

    const bool have_eval = !cfg.data.eval_manifest.empty() || cfg.data.synthetic_eval;
    Dataset data = have_eval ? load_split(cfg.data.eval_manifest, cfg.data.synthetic_eval, cfg.data.resolution, nullptr, err)
                             : load_train(cfg, err);
    if (!have_eval) err << "warning: no evaluation split configured; evaluating on the training split\n";
    const std::optional<TextEmbeddingTable> table = text_table_for(cfg, {&data});
    const EvalReport r = evaluate_state(state, data, ec, table ? &*table : nullptr, opt.exec);
    std::string path = opt.out_path;
    if (path.empty())
      path = (fs::path(opt.checkpoint_path).parent_path() /
              ("eval_" + fs::path(opt.checkpoint_path).stem().string() + ".json"))
                 .string();
    write_text(path, r.to_json());
    write_text(fs::path(path).replace_extension(".csv").string(), r.to_csv());
    print_report(r, out);
    out << "scaling rule: " << r.scaling_rule << "\nreport written to " << path << "\n";
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  }
}

Vitb16ComputeTables vitb16_compute_tables() {
  VitConfig b16;
  b16.image_size = 224;
  b16.patch_size = 16;
  b16.depth = 12;
  b16.width = 768;
  b16.heads = 12;
  b16.mlp_ratio = 4.0;
  b16.num_classes = 1000;
  auto stage = [&](const std::string& name, int side, int k, std::int64_t samples) {
    StageConfig s;
    s.name = name;
    s.reduction.patch_size = 16;
    if (side != 224) {
      s.reduction.strategy = ReductionStrategy::resize;
      s.reduction.target_resolution = side;
    }
    s.budget = {Norm::linf, 4.0 / 255.0, 4.0 / 255.0, k, true};
    s.samples_total = samples;
    s.batch_size = 4096;
    return s;
  };
  Vitb16ComputeTables t;
  const std::int64_t n = 256'000'000;
  const ComputeEstimate full = estimate_compute(b16, {stage("224", 224, 1, n)});
  for (int side : {224, 160, 112, 96}) {
    const ComputeEstimate e = estimate_compute(b16, {stage(std::to_string(side), side, 1, n)});
    t.resolution.push_back({std::to_string(side) + "px", e.ratio_total(full)});
  }
  const ComputeEstimate k1 = estimate_compute(b16, {stage("pgd1", 112, 1, n)});
  for (int k : {1, 2, 3}) {
    const ComputeEstimate e = estimate_compute(b16, {stage("pgd" + std::to_string(k), 112, k, n)});
    t.attack_steps.push_back({"PGD-" + std::to_string(k), e.ratio_total(k1)});
  }
  const ComputeEstimate two =
      estimate_compute(b16, {stage("pretrain", 112, 1, n), stage("finetune", 224, 3, 38'400'000)});
  t.finetune_over_pretrain = two.stages[1].gflops / two.stages[0].gflops;
  t.pretrain_share = two.stages[0].gflops / two.total_gflops;
  return t;
}

void print_vitb16_compute_tables(const Vitb16ComputeTables& t, std::ostream& out) {
  char buf[160];
  out << "ViT-B/16 compute (closed-form FLOP model)\n";
  out << "  pre-training resolution (same samples, PGD-1) vs 224px:\n";
  for (const auto& r : t.resolution) {
    std::snprintf(buf, sizeof buf, "    %-8s %.4fx\n", r.label.c_str(), r.ratio);
    out << buf;
  }
  out << "  attack steps (same samples, 112px) vs PGD-1:\n";
  for (const auto& r : t.attack_steps) {
    std::snprintf(buf, sizeof buf, "    %-8s %.4fx\n", r.label.c_str(), r.ratio);
    out << buf;
  }
  std::snprintf(buf, sizeof buf,
                "  256M@112 PGD-1 + 38.4M@224 PGD-3: fine-tune / pre-train = %.4f, pre-train share of total = %.1f%%\n",
                t.finetune_over_pretrain, 100.0 * t.pretrain_share);
  out << buf;
}

int cmd_flops(const std::string& config_path, bool vitb16_tables, std::ostream& out, std::ostream& err) {
  RunConfig cfg;
  try {
    cfg = load_run_config(config_path, std::nullopt, false);  // no data needed
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
  const ComputeEstimate est = estimate_compute(cfg.model, cfg.stages);
  const std::vector<StageConfig> base_stages = cfg.comparison_baseline();
  const ComputeEstimate base = estimate_compute(cfg.model, base_stages);
  char buf[200];
  out << "schedule " << schedule_notation(cfg.stages, cfg.model.image_size) << "\n";
  std::snprintf(buf, sizeof buf, "%-24s %8s %6s %14s %16s %16s\n", "stage", "tokens", "PGD-k", "samples",
                "GFLOPs/sample", "GFLOPs");
  out << buf;
  for (const auto& s : est.stages) {
    std::snprintf(buf, sizeof buf, "%-24s %8d %6d %14lld %16.6g %16.6g\n", s.name.c_str(), s.tokens, s.attack_steps,
                  static_cast<long long>(s.samples), s.gflops_per_sample, s.gflops);
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "%-24s %66.6g\n", "total", est.total_gflops);
  out << buf;
  out << "baseline " << schedule_notation(base_stages, cfg.model.image_size) << ": " << base.total_gflops
      << " GFLOPs\n";
  std::snprintf(buf, sizeof buf, "ratio vs baseline: total %.4fx, first stage only %.4fx\n", est.ratio_total(base),
                est.ratio_first_stage(base));
  out << buf;
  if (vitb16_tables) print_vitb16_compute_tables(vitb16_compute_tables(), out);
  return kExitOk;
}

int cmd_embed_text(const EmbedTextOptions& opt, std::ostream& out, std::ostream& err) {
  if (opt.out_path.empty() || opt.captions_path.empty() == opt.external_path.empty()) {
    err << "embed-text: give --out and exactly one of --captions or --external\n";
    return kExitUsage;
  }
  try {
    TextEmbeddingTable table;
    if (!opt.captions_path.empty()) {
      std::vector<std::string> captions;
      std::istringstream in(read_text(opt.captions_path));
      std::string line;
      while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) captions.push_back(line);
      }
      if (captions.empty()) throw std::invalid_argument("no captions in " + opt.captions_path);
      table = stub_text_embeddings(captions, opt.dim, opt.seed);
    } else {
      std::vector<std::string> keys;
      std::vector<float> rows;
      int dim = 0;
      std::istringstream in(read_text(opt.external_path));
      std::string line;
      int lineno = 0;
      while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos)
          throw DataError(opt.external_path + ": expected key<TAB>values", lineno);
        std::istringstream vs(line.substr(tab + 1));
        std::vector<double> v;
        for (double x; vs >> x;) v.push_back(x);
        if (v.empty() || (dim != 0 && static_cast<int>(v.size()) != dim))
          throw DataError(opt.external_path + ": inconsistent embedding width", lineno);
        dim = static_cast<int>(v.size());
        double sq = 0.0;
        for (double x : v) sq += x * x;
        if (!(sq > 0.0)) throw DataError(opt.external_path + ": zero embedding", lineno);
        for (double x : v) rows.push_back(static_cast<float>(x / std::sqrt(sq)));
        keys.push_back(line.substr(0, tab));
      }
      table = TextEmbeddingTable(keys, rows, dim, TextEmbeddingTable::Provenance::file);
    }
    table.save(opt.out_path);
    out << "wrote " << table.size() << " x " << table.dim() << " embeddings to " << opt.out_path << " (checksum "
        << std::hex << table.checksum() << std::dec << ")\n";
    return kExitOk;
  } catch (const std::exception& e) {
    err << "embed-text: " << e.what() << "\n";
    return kExitIo;
  }
}

int cmd_make_data(const SynthConfig& config, const std::string& out_dir, bool write_captions, std::ostream& out,
                  std::ostream& err) {
  try {
    const Dataset d = make_synthetic_dataset(config);
    const std::string manifest = write_dataset(d, out_dir);
    out << "wrote " << d.size() << " images to " << manifest << "\n";
    if (write_captions) {
      std::string text;
      for (const auto& k : d.zero_shot_keys()) text += k + "\n";
      const std::string path = (fs::path(out_dir) / "captions.txt").string();
      write_text(path, text);
      out << "wrote caption list " << path << "\n";
    }
    return kExitOk;
  } catch (const std::exception& e) {
    err << "make-data: " << e.what() << "\n";
    return kExitIo;
  }
}

}  // namespace advxl
