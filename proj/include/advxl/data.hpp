#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "advxl/objectives.hpp"
#include "advxl/reduce.hpp"
#include "advxl/text_embeddings.hpp"

namespace advxl {

enum class DatasetMode { labeled, captioned };

std::string to_string(DatasetMode m);

/// Manifest / decoding problem, anchored to a manifest line when known.
class DataError : public std::runtime_error {
 public:
  DataError(const std::string& what, int line = 0)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

struct SampleRecord {
  std::string id;
  std::string path;         // relative to the manifest directory, or absolute
  std::string inline_ppm;   // base64 PPM bytes, alternative to `path`
  std::optional<int> label;
  std::optional<std::string> caption_key;

  bool operator==(const SampleRecord&) const = default;
};

/// Line-delimited JSON: a header {"mode", "classes", "class_keys"?} followed by
/// one record per line {"id", "path" | "inline_ppm", "label" | "caption_key"}.
struct DatasetManifest {
  DatasetMode mode = DatasetMode::labeled;
  std::vector<std::string> class_names;
  /// Text-table keys used as zero-shot classifier rows (defaults to class names).
  std::vector<std::string> class_keys;
  std::vector<SampleRecord> records;
  std::string base_dir;

  /// Parses and validates. Image files must exist; caption keys must resolve
  /// in `table` when one is given.
  static DatasetManifest load(const std::string& path, const TextEmbeddingTable* table = nullptr);
  static DatasetManifest parse(const std::string& text, const std::string& base_dir,
                               const TextEmbeddingTable* table = nullptr, bool check_files = true);
  std::string serialize() const;
  void save(const std::string& path) const;

  const std::vector<std::string>& zero_shot_keys() const {
    return class_keys.empty() ? class_names : class_keys;
  }
  bool operator==(const DatasetManifest& o) const {
    return mode == o.mode && class_names == o.class_names && class_keys == o.class_keys &&
           records == o.records;
  }
};

/// Decoded dataset: 8-bit pixels at one base resolution.
struct Dataset {
  DatasetMode mode = DatasetMode::labeled;
  std::vector<std::string> class_names;
  std::vector<std::string> class_keys;
  int channels = 3;
  int resolution = 0;
  std::vector<std::uint8_t> pixels;  // N x C x R x R
  std::vector<int> labels;           // labeled mode
  std::vector<std::string> caption_keys;  // captioned mode
  std::vector<std::string> ids;
  int skipped = 0;  // undecodable records

  int size() const { return static_cast<int>(ids.size()); }
  std::size_t sample_size() const { return static_cast<std::size_t>(channels) * resolution * resolution; }
  const std::vector<std::string>& zero_shot_keys() const {
    return class_keys.empty() ? class_names : class_keys;
  }
  /// Class index of sample i: its label, or its caption's position in the
  /// zero-shot key list (-1 if absent).
  int class_of(int i) const;
  /// Images [first, first + count) of `order`, as floats in [0, 1].
  ImageBatch<float> images(std::span<const int> order) const;
  /// Deterministic subset of up to `count` samples.
  std::vector<int> subset(int count, std::uint64_t seed) const;
};

/// Decodes every record to `resolution` x `resolution` (resampling other
/// sizes). Undecodable images are skipped with a warning and counted.
Dataset decode_dataset(const DatasetManifest& manifest, int resolution, int channels = 3);

/// Binary PPM (P6) or PGM (P5, replicated to 3 channels), 8-bit.
struct DecodedImage {
  int channels = 0, height = 0, width = 0;
  std::vector<std::uint8_t> pixels;  // C x H x W
};
DecodedImage decode_pnm(const std::string& bytes);
std::string encode_ppm(const DecodedImage& image);

std::string base64_encode(const std::string& bytes);
std::string base64_decode(const std::string& text);

/// Seed-determined batch stream. Shuffles per epoch, drops the final partial
/// batch, applies the reduction (resize or per-sample token masks).
class BatchStream {
 public:
  BatchStream(const Dataset& data, int batch_size, std::uint64_t epoch_seed, ReductionSpec reduction,
              const TextEmbeddingTable* table = nullptr);

  int batches_per_epoch() const { return data_->size() / batch_size_; }
  int batch_size() const { return batch_size_; }
  int input_resolution() const { return reduction_.input_resolution(data_->resolution); }
  /// Random access: the `index`-th batch of `epoch`.
  TrainBatch batch(std::int64_t epoch, int index) const;
  /// Global step -> (epoch, index).
  TrainBatch at_step(std::int64_t step) const;

  std::vector<int> epoch_order(std::int64_t epoch) const;

 private:
  const Dataset* data_;
  int batch_size_;
  std::uint64_t seed_;
  ReductionSpec reduction_;
  std::vector<int> text_rows_;
  mutable std::int64_t cached_epoch_ = -1;
  mutable std::vector<int> cached_order_;
};

/// One unit vector per caption from a generator seeded by
/// stable_hash(caption) mixed with `master_seed`.
TextEmbeddingTable stub_text_embeddings(const std::vector<std::string>& captions, int dim,
                                        std::uint64_t master_seed);

// ---------------------------------------------------------------------------
// Desk-scale synthetic data

struct SynthConfig {
  int num_classes = 10;
  int count = 1000;
  int resolution = 32;
  std::uint64_t seed = 0;       // draws samples
  std::uint64_t task_seed = 0;  // draws the class templates; share it across splits
  bool captioned = false;
};

std::vector<std::string> synth_class_names(int num_classes);
std::string caption_for(const std::string& class_name);

/// Procedural class-conditional images: each class owns a smooth colored
/// template; samples add jitter, a distractor template and pixel noise.
Dataset make_synthetic_dataset(const SynthConfig& config);

/// Writes PPM files plus a manifest; returns the manifest path.
std::string write_dataset(const Dataset& data, const std::string& dir);

}  // namespace advxl
