#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "advxl/config.hpp"
#include "advxl/parallel.hpp"

namespace advxl {

/// Exit codes shared by the subcommands.
enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitConfig = 2,
  kExitDiverged = 3,
  kExitShape = 4,
  kExitIo = 5,
};

struct TrainOptions {
  std::string config_path;
  bool resume = false;
  std::optional<std::uint64_t> seed;
  std::string out_dir;  // empty: the config's output_dir
  /// Testing hook: stop after this many steps of this invocation, as if killed.
  std::int64_t stop_after_steps = -1;
  int log_every_steps = 50;
  Exec exec = Exec::parallel;
};

/// Output directory layout: config.yaml (verbatim copy), steps.jsonl, text_table.teb (when used),
/// checkpoints/, eval_report.json, eval_curve.csv.
int cmd_train(const TrainOptions& options, std::ostream& out, std::ostream& err);

struct EvalOptions {
  std::string checkpoint_path;
  std::string config_path;  // data and eval suite
  std::string out_path;     // report file; empty: <checkpoint dir>/eval_<name>.json
  std::optional<std::uint64_t> seed;  // eval seed override
  bool standard_protocol = false;  // force the standard suite at the eval side
  int restarts = 0;             // > 0 overrides every attack's restarts
  int subset = -1;              // >= 0 overrides eval_subset_size
  Exec exec = Exec::parallel;
};

int cmd_eval(const EvalOptions& options, std::ostream& out, std::ostream& err);

/// Per-stage and total GFLOPs of the config, ratios against its comparison
/// baseline and, with `vitb16_tables`, the ViT-B/16 compute tables.
int cmd_flops(const std::string& config_path, bool vitb16_tables, std::ostream& out, std::ostream& err);

struct EmbedTextOptions {
  std::string captions_path;  // one caption per line (stub provider)
  std::string external_path;  // "key<TAB>v1 v2 ..." per line (external embeddings)
  int dim = 32;
  std::uint64_t seed = 0;
  std::string out_path;
};

int cmd_embed_text(const EmbedTextOptions& options, std::ostream& out, std::ostream& err);

int cmd_make_data(const SynthConfig& config, const std::string& out_dir, bool write_captions, std::ostream& out,
                  std::ostream& err);

struct RatioRow {
  std::string label;
  double ratio = 0.0;
};

/// Compute tables under the closed-form ViT-B/16 FLOP model.
struct Vitb16ComputeTables {
  std::vector<RatioRow> resolution;   // pre-training at {224,160,112,96}px vs 224px
  std::vector<RatioRow> attack_steps; // PGD-{1,2,3} vs PGD-1
  double finetune_over_pretrain = 0.0;  // 38.4M@224 PGD-3 vs 256M@112 PGD-1
  double pretrain_share = 0.0;          // pre-training share of the two-stage total
};

Vitb16ComputeTables vitb16_compute_tables();
void print_vitb16_compute_tables(const Vitb16ComputeTables& tables, std::ostream& out);

}  // namespace advxl
