#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "advxl/data.hpp"
#include "advxl/eval.hpp"
#include "advxl/pipeline.hpp"
#include "advxl/vit.hpp"

namespace advxl {

/// Config problem anchored to a field path and, when known, a source line.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& field, const std::string& detail, int line = 0, const std::string& file = "")
      : std::runtime_error(format(field, detail, line, file)), field_(field), detail_(detail), line_(line) {}
  const std::string& field() const { return field_; }
  const std::string& detail() const { return detail_; }
  int line() const { return line_; }

 private:
  static std::string format(const std::string& field, const std::string& detail, int line, const std::string& file) {
    std::string where = file;
    if (line > 0) where += (where.empty() ? "line " : ":") + std::to_string(line);
    return (where.empty() ? "" : where + ": ") + field + ": " + detail;
  }
  std::string field_;
  std::string detail_;
  int line_;
};

struct DataConfig {
  std::string train_manifest;  // resolved against the config directory
  std::string eval_manifest;
  std::optional<SynthConfig> synthetic_train;  // alternative to train_manifest
  std::optional<SynthConfig> synthetic_eval;
  int resolution = 32;
  std::string text_table;  // TEB1 file, contrastive runs
  int stub_text_dim = 0;   // > 0: build stub embeddings from the captions instead
  std::uint64_t stub_text_seed = 0;
};

struct EvalConfig {
  AttackSuite suite;
  int resolution = 0;  // 0: the data resolution
  bool after_each_stage = false;
  int batch_size = 256;
};

/// Everything a run depends on.
struct RunConfig {
  std::uint64_t seed = 0;
  VitConfig model;  // image_size is the full (data) resolution
  DataConfig data;
  std::vector<StageConfig> stages;
  std::vector<StageConfig> baseline_stages;  // flops comparison; empty: derived
  EvalConfig eval;
  std::string output_dir = "runs/default";
  int checkpoints_per_stage = 10;
  std::string source_text;  // the file as read
  std::string base_dir;
  std::map<std::string, int> lines;  // source line of file-valued fields

  void validate(bool check_files = true) const;
  /// Model as trained in stage `i` (image_size = that stage's input side).
  VitConfig stage_model(int i) const;
  /// Full-resolution stages with the final stage's attack and the same total samples.
  std::vector<StageConfig> comparison_baseline() const;
};

/// YAML. Fractions such as "4/255" are accepted wherever a real is expected.
/// `seed` replaces the file's master seed (and the stage seeds derived from it).
RunConfig parse_run_config(const std::string& text, const std::string& base_dir = "",
                           std::optional<std::uint64_t> seed = std::nullopt);
/// `check_files`: also require the referenced manifests and tables to exist.
RunConfig load_run_config(const std::string& path, std::optional<std::uint64_t> seed = std::nullopt,
                          bool check_files = true);

/// Parses "4/255", "0.5", "2e-3".
double parse_real(const std::string& text);

}  // namespace advxl
