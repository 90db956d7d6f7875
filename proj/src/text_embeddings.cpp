#include "advxl/text_embeddings.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace advxl {

namespace {

static_assert(std::endian::native == std::endian::little,
              "TEB1 and checkpoint I/O assume a little-endian host");

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

std::uint32_t read_u32(std::istream& is, const std::string& path) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) throw std::runtime_error(path + ": truncated TEB1 header");
  return v;
}

}  // namespace

TextEmbeddingTable::TextEmbeddingTable(std::vector<std::string> keys, std::vector<float> rows, int dim,
                                       Provenance provenance)
    : keys_(std::move(keys)), rows_(std::move(rows)), dim_(dim), provenance_(provenance) {
  if (dim_ <= 0) throw std::invalid_argument("text embeddings: dim must be positive");
  if (rows_.size() != keys_.size() * static_cast<std::size_t>(dim_))
    throw std::invalid_argument("text embeddings: row data does not match key count x dim");
  for (std::size_t i = 0; i < keys_.size(); ++i) {
    if (!index_.emplace(keys_[i], static_cast<int>(i)).second)
      throw std::invalid_argument("text embeddings: duplicate key '" + keys_[i] + "'");
    double sq = 0.0;
    for (float v : row(static_cast<int>(i))) sq += static_cast<double>(v) * v;
    if (std::abs(std::sqrt(sq) - 1.0) > 1e-6)
      throw std::invalid_argument("text embeddings: row '" + keys_[i] + "' is not unit-norm");
  }
}

int TextEmbeddingTable::row_id(const std::string& key) const {
  auto it = index_.find(key);
  if (it == index_.end()) throw std::out_of_range("text embeddings: no entry for key '" + key + "'");
  return it->second;
}

std::uint64_t TextEmbeddingTable::checksum() const {
  std::uint64_t h = 0xCBF29CE484222325ull;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001B3ull;
    }
  };
  for (const auto& k : keys_) {
    feed(k.data(), k.size());
    feed("\n", 1);
  }
  feed(rows_.data(), rows_.size() * sizeof(float));
  return h;
}

void TextEmbeddingTable::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os.write("TEB1", 4);
  write_u32(os, static_cast<std::uint32_t>(keys_.size()));
  write_u32(os, static_cast<std::uint32_t>(dim_));
  os.write(reinterpret_cast<const char*>(rows_.data()),
           static_cast<std::streamsize>(rows_.size() * sizeof(float)));
  for (const auto& k : keys_) {
    if (k.find('\n') != std::string::npos)
      throw std::invalid_argument("text embeddings: key contains a newline: " + k);
    os << k << '\n';
  }
  if (!os) throw std::runtime_error("failed writing " + path);
}

TextEmbeddingTable TextEmbeddingTable::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open text-embedding cache " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "TEB1", 4) != 0)
    throw std::runtime_error(path + ": not a TEB1 text-embedding cache");
  const std::uint32_t n = read_u32(is, path);
  const std::uint32_t d = read_u32(is, path);
  std::vector<float> rows(static_cast<std::size_t>(n) * d);
  if (!is.read(reinterpret_cast<char*>(rows.data()), static_cast<std::streamsize>(rows.size() * sizeof(float))))
    throw std::runtime_error(path + ": truncated embedding rows");
  std::vector<std::string> keys;
  keys.reserve(n);
  std::string line;
  for (std::uint32_t i = 0; i < n; ++i) {
    if (!std::getline(is, line))
      throw std::runtime_error(path + ": key manifest has " + std::to_string(i) + " lines, expected " +
                               std::to_string(n));
    keys.push_back(line);
  }
  return TextEmbeddingTable(std::move(keys), std::move(rows), static_cast<int>(d), Provenance::file);
}

}  // namespace advxl
