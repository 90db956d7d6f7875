#include "advxl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "advxl/rng.hpp"

namespace advxl {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

std::string to_string(DatasetMode m) { return m == DatasetMode::labeled ? "labeled" : "captioned"; }

namespace {

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string resolve(const std::string& base_dir, const std::string& path) {
  if (path.empty() || fs::path(path).is_absolute() || base_dir.empty()) return path;
  return (fs::path(base_dir) / path).string();
}

}  // namespace

// ---------------------------------------------------------------------------
// Manifest

DatasetManifest DatasetManifest::parse(const std::string& text, const std::string& base_dir,
                                       const TextEmbeddingTable* table, bool check_files) {
  DatasetManifest m;
  m.base_dir = base_dir;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  bool have_header = false;
  std::set<std::string> ids;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const std::exception& e) {
      throw DataError(std::string("malformed JSON: ") + e.what(), lineno);
    }
    if (!j.is_object()) throw DataError("expected a JSON object", lineno);
    if (!have_header) {
      have_header = true;
      const std::string mode = j.value("mode", "");
      if (mode == "labeled") m.mode = DatasetMode::labeled;
      else if (mode == "captioned") m.mode = DatasetMode::captioned;
      else throw DataError("header must set \"mode\" to \"labeled\" or \"captioned\"", lineno);
      if (j.contains("classes")) m.class_names = j["classes"].get<std::vector<std::string>>();
      if (j.contains("class_keys")) m.class_keys = j["class_keys"].get<std::vector<std::string>>();
      if (m.mode == DatasetMode::labeled && m.class_names.empty())
        throw DataError("labeled manifest header needs a non-empty \"classes\" list", lineno);
      if (!m.class_keys.empty() && m.class_keys.size() != m.class_names.size())
        throw DataError("\"class_keys\" must have one entry per class", lineno);
      continue;
    }
    SampleRecord r;
    try {
      r.id = j.at("id").get<std::string>();
      r.path = j.value("path", "");
      r.inline_ppm = j.value("inline_ppm", "");
      if (j.contains("label")) r.label = j["label"].get<int>();
      if (j.contains("caption_key")) r.caption_key = j["caption_key"].get<std::string>();
    } catch (const std::exception& e) {
      throw DataError(std::string("bad record: ") + e.what(), lineno);
    }
    if (!ids.insert(r.id).second) throw DataError("duplicate id '" + r.id + "'", lineno);
    if (r.path.empty() == r.inline_ppm.empty())
      throw DataError("record needs exactly one of \"path\" or \"inline_ppm\"", lineno);
    if (m.mode == DatasetMode::labeled) {
      if (!r.label || r.caption_key)
        throw DataError("labeled records need a \"label\" and no \"caption_key\"", lineno);
      if (*r.label < 0 || *r.label >= static_cast<int>(m.class_names.size()))
        throw DataError("label " + std::to_string(*r.label) + " outside [0, " +
                            std::to_string(m.class_names.size()) + ")",
                        lineno);
    } else {
      if (!r.caption_key || r.label)
        throw DataError("captioned records need a \"caption_key\" and no \"label\"", lineno);
      if (table && !table->contains(*r.caption_key))
        throw DataError("caption_key '" + *r.caption_key + "' not found in the text-embedding table", lineno);
    }
    if (check_files && !r.path.empty() && !fs::exists(resolve(base_dir, r.path)))
      throw DataError("missing image file " + resolve(base_dir, r.path), lineno);
    m.records.push_back(std::move(r));
  }
  if (!have_header) throw DataError("manifest is empty (missing header line)");
  if (table)
    for (const auto& k : m.class_keys)
      if (!table->contains(k)) throw DataError("class key '" + k + "' not found in the text-embedding table", 1);
  return m;
}

DatasetManifest DatasetManifest::load(const std::string& path, const TextEmbeddingTable* table) {
  const std::string text = read_file(path);
  try {
    return parse(text, fs::path(path).parent_path().string(), table);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

std::string DatasetManifest::serialize() const {
  std::ostringstream os;
  ordered_json h;
  h["mode"] = to_string(mode);
  h["classes"] = class_names;
  if (!class_keys.empty()) h["class_keys"] = class_keys;
  os << h.dump() << '\n';
  for (const auto& r : records) {
    ordered_json j;
    j["id"] = r.id;
    if (!r.path.empty()) j["path"] = r.path;
    if (!r.inline_ppm.empty()) j["inline_ppm"] = r.inline_ppm;
    if (r.label) j["label"] = *r.label;
    if (r.caption_key) j["caption_key"] = *r.caption_key;
    os << j.dump() << '\n';
  }
  return os.str();
}

void DatasetManifest::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  os << serialize();
}

// ---------------------------------------------------------------------------
// Images

namespace {

// Reads one whitespace-delimited header integer, skipping '#' comments.
int pnm_header_int(const std::string& b, std::size_t& pos) {
  for (;;) {
    while (pos < b.size() && std::isspace(static_cast<unsigned char>(b[pos]))) ++pos;
    if (pos < b.size() && b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  if (pos >= b.size() || !std::isdigit(static_cast<unsigned char>(b[pos])))
    throw DataError("PNM: malformed header");
  long v = 0;
  while (pos < b.size() && std::isdigit(static_cast<unsigned char>(b[pos]))) {
    v = v * 10 + (b[pos] - '0');
    if (v > (1 << 20)) throw DataError("PNM: header value too large");
    ++pos;
  }
  return static_cast<int>(v);
}

}  // namespace

DecodedImage decode_pnm(const std::string& b) {
  if (b.size() < 2 || b[0] != 'P' || (b[1] != '6' && b[1] != '5'))
    throw DataError("not a binary PPM/PGM image");
  const int src_channels = b[1] == '6' ? 3 : 1;
  std::size_t pos = 2;
  const int w = pnm_header_int(b, pos);
  const int h = pnm_header_int(b, pos);
  const int maxval = pnm_header_int(b, pos);
  if (w <= 0 || h <= 0) throw DataError("PNM: empty image");
  if (maxval != 255) throw DataError("PNM: only 8-bit images (maxval 255) are supported");
  ++pos;  // single whitespace byte after maxval
  const std::size_t need = static_cast<std::size_t>(w) * h * src_channels;
  if (b.size() < pos + need) throw DataError("PNM: truncated pixel data");
  DecodedImage img{3, h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(3) * w * h)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const int sc = src_channels == 3 ? c : 0;
        img.pixels[(static_cast<std::size_t>(c) * h + y) * w + x] =
            static_cast<std::uint8_t>(b[pos + (static_cast<std::size_t>(y) * w + x) * src_channels + sc]);
      }
  return img;
}

std::string encode_ppm(const DecodedImage& image) {
  if (image.channels != 3) throw DataError("encode_ppm: need 3 channels");
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  const std::size_t hw = static_cast<std::size_t>(image.height) * image.width;
  out.reserve(out.size() + 3 * hw);
  for (std::size_t p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c) out.push_back(static_cast<char>(image.pixels[c * hw + p]));
  return out;
}

namespace {
constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(const std::string& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const unsigned v = (static_cast<unsigned char>(bytes[i]) << 16) |
                       (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                       static_cast<unsigned char>(bytes[i + 2]);
    out += {kB64[(v >> 18) & 63], kB64[(v >> 12) & 63], kB64[(v >> 6) & 63], kB64[v & 63]};
  }
  if (i < bytes.size()) {
    unsigned v = static_cast<unsigned char>(bytes[i]) << 16;
    if (i + 1 < bytes.size()) v |= static_cast<unsigned char>(bytes[i + 1]) << 8;
    out += kB64[(v >> 18) & 63];
    out += kB64[(v >> 12) & 63];
    out += i + 1 < bytes.size() ? kB64[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::string base64_decode(const std::string& text) {
  std::string out;
  unsigned acc = 0;
  int bits = 0;
  for (char ch : text) {
    if (ch == '=' || std::isspace(static_cast<unsigned char>(ch))) continue;
    const char* p = std::strchr(kB64, ch);
    if (!p || ch == '\0') throw DataError("invalid base64 character");
    acc = (acc << 6) | static_cast<unsigned>(p - kB64);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<char>((acc >> bits) & 0xFF));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset

int Dataset::class_of(int i) const {
  if (mode == DatasetMode::labeled) return labels[static_cast<std::size_t>(i)];
  const auto& keys = zero_shot_keys();
  auto it = std::find(keys.begin(), keys.end(), caption_keys[static_cast<std::size_t>(i)]);
  return it == keys.end() ? -1 : static_cast<int>(it - keys.begin());
}

ImageBatch<float> Dataset::images(std::span<const int> order) const {
  ImageBatch<float> out(static_cast<int>(order.size()), channels, resolution, resolution);
  const std::size_t s = sample_size();
  for (std::size_t b = 0; b < order.size(); ++b) {
    const std::uint8_t* src = pixels.data() + static_cast<std::size_t>(order[b]) * s;
    float* dst = out.data.data() + b * s;
    for (std::size_t j = 0; j < s; ++j) dst[j] = static_cast<float>(src[j]) / 255.0f;
  }
  return out;
}

std::vector<int> Dataset::subset(int count, std::uint64_t seed) const {
  std::vector<int> idx(static_cast<std::size_t>(size()));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, 0x5EB5E7ull));
  rng.shuffle(idx.begin(), idx.end());
  if (count >= 0 && count < size()) idx.resize(static_cast<std::size_t>(count));
  std::sort(idx.begin(), idx.end());
  return idx;
}

Dataset decode_dataset(const DatasetManifest& manifest, int resolution, int channels) {
  if (channels != 3) throw DataError("decode_dataset: only 3-channel images are supported");
  Dataset d;
  d.mode = manifest.mode;
  d.class_names = manifest.class_names;
  d.class_keys = manifest.class_keys;
  d.channels = channels;
  d.resolution = resolution;
  const std::size_t s = d.sample_size();
  std::vector<float> src, dst(s);
  for (const auto& r : manifest.records) {
    DecodedImage img;
    try {
      const std::string bytes =
          r.path.empty() ? base64_decode(r.inline_ppm) : read_file(resolve(manifest.base_dir, r.path));
      img = decode_pnm(bytes);
    } catch (const DataError& e) {
      std::cerr << "warning: skipping record '" << r.id << "': " << e.what() << '\n';
      ++d.skipped;
      continue;
    }
    const std::size_t base = d.pixels.size();
    d.pixels.resize(base + s);
    if (img.height == resolution && img.width == resolution) {
      std::copy(img.pixels.begin(), img.pixels.end(), d.pixels.begin() + static_cast<std::ptrdiff_t>(base));
    } else {
      // non-square sources are center-cropped to a square first
      const int side = std::min(img.height, img.width);
      const int oy = (img.height - side) / 2, ox = (img.width - side) / 2;
      src.assign(static_cast<std::size_t>(3) * side * side, 0.0f);
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < side; ++y)
          for (int x = 0; x < side; ++x)
            src[(static_cast<std::size_t>(c) * side + y) * side + x] =
                img.pixels[(static_cast<std::size_t>(c) * img.height + y + oy) * img.width + x + ox] / 255.0f;
      resize_antialias_bilinear(src.data(), 3, side, side, resolution, dst.data());
      for (std::size_t j = 0; j < s; ++j)
        d.pixels[base + j] = static_cast<std::uint8_t>(std::lround(std::clamp(dst[j], 0.0f, 1.0f) * 255.0f));
    }
    d.ids.push_back(r.id);
    if (r.label) d.labels.push_back(*r.label);
    if (r.caption_key) d.caption_keys.push_back(*r.caption_key);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Batches

BatchStream::BatchStream(const Dataset& data, int batch_size, std::uint64_t epoch_seed,
                         ReductionSpec reduction, const TextEmbeddingTable* table)
    : data_(&data), batch_size_(batch_size), seed_(epoch_seed), reduction_(reduction) {
  if (batch_size < 1) throw std::invalid_argument("batches: batch_size must be >= 1");
  reduction_.validate(data.resolution);
  if (data.mode == DatasetMode::captioned) {
    if (!table) throw std::invalid_argument("batches: captioned data needs a text-embedding table");
    text_rows_.reserve(data.caption_keys.size());
    for (const auto& k : data.caption_keys) text_rows_.push_back(table->row_id(k));
  }
}

std::vector<int> BatchStream::epoch_order(std::int64_t epoch) const {
  if (cached_epoch_ != epoch) {
    cached_order_.resize(static_cast<std::size_t>(data_->size()));
    std::iota(cached_order_.begin(), cached_order_.end(), 0);
    Rng rng(derive_seed(seed_, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(cached_order_.begin(), cached_order_.end());
    cached_epoch_ = epoch;
  }
  return cached_order_;
}

TrainBatch BatchStream::batch(std::int64_t epoch, int index) const {
  if (index < 0 || index >= batches_per_epoch()) throw std::out_of_range("batches: batch index out of range");
  epoch_order(epoch);
  std::span<const int> ids(cached_order_.data() + static_cast<std::size_t>(index) * batch_size_,
                           static_cast<std::size_t>(batch_size_));
  TrainBatch b;
  b.images = data_->images(ids);
  const int base = data_->resolution;
  if (reduction_.strategy == ReductionStrategy::resize && reduction_.target_resolution != base)
    b.images = resize_batch(b.images, reduction_.target_resolution);
  if (data_->mode == DatasetMode::labeled) {
    for (int i : ids) b.labels.push_back(data_->labels[static_cast<std::size_t>(i)]);
  } else {
    for (int i : ids) b.text_rows.push_back(text_rows_[static_cast<std::size_t>(i)]);
  }
  const int grid = base / reduction_.patch_size;
  Rng mask_rng(derive_seed(derive_seed(seed_ ^ 0x6D61736Bull, static_cast<std::uint64_t>(epoch)),
                           static_cast<std::uint64_t>(index)));
  if (reduction_.strategy == ReductionStrategy::random_mask) {
    for (int i = 0; i < batch_size_; ++i)
      b.selections.push_back(random_mask(grid, grid, reduction_.mask_ratio, mask_rng));
  } else if (reduction_.strategy == ReductionStrategy::block_mask) {
    for (int i = 0; i < batch_size_; ++i)
      b.selections.push_back(block_mask(grid, grid, 1.0 - reduction_.mask_ratio,
                                        reduction_.random_block_offset ? &mask_rng : nullptr));
  }
  return b;
}

TrainBatch BatchStream::at_step(std::int64_t step) const {
  const int per = batches_per_epoch();
  if (per == 0) throw std::invalid_argument("batches: dataset smaller than one batch");
  return batch(step / per, static_cast<int>(step % per));
}

// ---------------------------------------------------------------------------
// Stub text tower

TextEmbeddingTable stub_text_embeddings(const std::vector<std::string>& captions, int dim,
                                        std::uint64_t master_seed) {
  if (captions.empty()) throw std::invalid_argument("stub_text_embeddings: no captions");
  if (dim <= 0) throw std::invalid_argument("stub_text_embeddings: dim must be positive");
  std::map<std::string, int> counts;
  for (const auto& c : captions) ++counts[c];
  std::string dups;
  for (const auto& [c, k] : counts)
    if (k > 1) dups += (dups.empty() ? "'" : ", '") + c + "'";
  if (!dups.empty()) throw std::invalid_argument("stub_text_embeddings: duplicate captions: " + dups);

  std::vector<float> rows(captions.size() * static_cast<std::size_t>(dim));
  std::vector<double> v(static_cast<std::size_t>(dim));
  for (std::size_t i = 0; i < captions.size(); ++i) {
    Rng rng(derive_seed(master_seed, stable_hash(captions[i])));
    double sq = 0.0;
    for (double& x : v) {
      x = rng.normal();
      sq += x * x;
    }
    const double inv = 1.0 / std::sqrt(sq);
    for (int d = 0; d < dim; ++d) rows[i * dim + d] = static_cast<float>(v[static_cast<std::size_t>(d)] * inv);
  }
  return TextEmbeddingTable(captions, std::move(rows), dim, TextEmbeddingTable::Provenance::stub);
}

// ---------------------------------------------------------------------------
// Synthetic data

std::vector<std::string> synth_class_names(int num_classes) {
  static const char* kNames[] = {"airplane", "automobile", "bird", "cat", "deer",
                                 "dog", "frog", "horse", "ship", "truck"};
  std::vector<std::string> out;
  for (int c = 0; c < num_classes; ++c)
    out.push_back(c < 10 ? kNames[c] : "class" + std::to_string(c));
  return out;
}

std::string caption_for(const std::string& class_name) { return "a photo of a " + class_name; }

namespace {

struct Wave {
  double fx, fy, phase, amp[3];
};

std::vector<Wave> class_waves(std::uint64_t seed, int cls) {
  Rng rng(derive_seed(seed ^ 0x7E3B1A5Eull, static_cast<std::uint64_t>(cls)));
  std::vector<Wave> waves(4);
  for (auto& w : waves) {
    w.fx = static_cast<double>(rng.below(4)) + 0.5 * rng.uniform();
    w.fy = static_cast<double>(rng.below(4)) + 0.5 * rng.uniform();
    w.phase = 6.283185307179586 * rng.uniform();
    for (double& a : w.amp) a = rng.uniform(-1.0, 1.0);
  }
  return waves;
}

void render(const std::vector<Wave>& waves, int res, double dx, double dy, double weight,
            std::vector<double>& img) {
  for (const auto& w : waves)
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x) {
        const double v = std::cos(6.283185307179586 * (w.fx * (x + dx) + w.fy * (y + dy)) / res + w.phase);
        for (int c = 0; c < 3; ++c)
          img[(static_cast<std::size_t>(c) * res + y) * res + x] += weight * w.amp[c] * v;
      }
}

}  // namespace

Dataset make_synthetic_dataset(const SynthConfig& cfg) {
  if (cfg.num_classes < 2 || cfg.count < 0 || cfg.resolution < 1)
    throw std::invalid_argument("synthetic data: bad configuration");
  Dataset d;
  d.mode = cfg.captioned ? DatasetMode::captioned : DatasetMode::labeled;
  d.class_names = synth_class_names(cfg.num_classes);
  if (cfg.captioned)
    for (const auto& n : d.class_names) d.class_keys.push_back(caption_for(n));
  d.channels = 3;
  d.resolution = cfg.resolution;
  const int res = cfg.resolution;
  std::vector<std::vector<Wave>> waves;
  for (int c = 0; c < cfg.num_classes; ++c) waves.push_back(class_waves(cfg.task_seed, c));

  const std::size_t s = d.sample_size();
  d.pixels.resize(s * static_cast<std::size_t>(cfg.count));
  std::vector<double> img(s);
  for (int i = 0; i < cfg.count; ++i) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(i)));
    const int cls = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.num_classes)));
    int other = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.num_classes - 1)));
    if (other >= cls) ++other;
    std::fill(img.begin(), img.end(), 0.0);
    const double base = rng.uniform(0.35, 0.65);
    render(waves[static_cast<std::size_t>(cls)], res, rng.uniform(-3, 3), rng.uniform(-3, 3),
           rng.uniform(0.07, 0.12), img);
    render(waves[static_cast<std::size_t>(other)], res, rng.uniform(-3, 3), rng.uniform(-3, 3),
           rng.uniform(0.0, 0.06), img);
    for (std::size_t j = 0; j < s; ++j) {
      const double v = base + img[j] + 0.06 * rng.normal();
      d.pixels[static_cast<std::size_t>(i) * s + j] =
          static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
    char id[32];
    std::snprintf(id, sizeof id, "%06d", i);
    d.ids.emplace_back(id);
    if (cfg.captioned) d.caption_keys.push_back(d.class_keys[static_cast<std::size_t>(cls)]);
    else d.labels.push_back(cls);
  }
  return d;
}

std::string write_dataset(const Dataset& data, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "images");
  DatasetManifest m;
  m.mode = data.mode;
  m.class_names = data.class_names;
  m.class_keys = data.class_keys;
  m.base_dir = dir;
  const std::size_t s = data.sample_size();
  for (int i = 0; i < data.size(); ++i) {
    DecodedImage img{3, data.resolution, data.resolution,
                     std::vector<std::uint8_t>(data.pixels.begin() + static_cast<std::ptrdiff_t>(i * s),
                                               data.pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * s))};
    const std::string rel = "images/" + data.ids[static_cast<std::size_t>(i)] + ".ppm";
    std::ofstream os(fs::path(dir) / rel, std::ios::binary);
    os << encode_ppm(img);
    if (!os) throw DataError("failed writing " + rel);
    SampleRecord r;
    r.id = data.ids[static_cast<std::size_t>(i)];
    r.path = rel;
    if (data.mode == DatasetMode::labeled) r.label = data.labels[static_cast<std::size_t>(i)];
    else r.caption_key = data.caption_keys[static_cast<std::size_t>(i)];
    m.records.push_back(std::move(r));
  }
  const std::string path = (fs::path(dir) / "manifest.jsonl").string();
  m.save(path);
  return path;
}

}  // namespace advxl
