#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace advxl {

/// Frozen unit-norm text-side embeddings, one row per caption or class key.
/// Immutable once constructed.
class TextEmbeddingTable {
 public:
  enum class Provenance { file, stub };

  TextEmbeddingTable() = default;

  /// Validates unique keys and unit-norm rows (within 1e-6).
  TextEmbeddingTable(std::vector<std::string> keys, std::vector<float> rows, int dim,
                     Provenance provenance);

  int size() const { return static_cast<int>(keys_.size()); }
  int dim() const { return dim_; }
  Provenance provenance() const { return provenance_; }
  const std::vector<std::string>& keys() const { return keys_; }
  const std::vector<float>& data() const { return rows_; }

  bool contains(const std::string& key) const { return index_.count(key) != 0; }
  /// Throws std::out_of_range naming the key.
  int row_id(const std::string& key) const;
  std::span<const float> row(int id) const {
    return {rows_.data() + static_cast<std::size_t>(id) * dim_, static_cast<std::size_t>(dim_)};
  }
  std::span<const float> row(const std::string& key) const { return row(row_id(key)); }

  /// FNV-1a over keys and row bytes; used to prove the table stayed frozen.
  std::uint64_t checksum() const;

  /// TEB1 cache: "TEB1", u32 N, u32 D, N*D f32 (all little-endian), then N
  /// newline-terminated UTF-8 keys.
  void save(const std::string& path) const;
  static TextEmbeddingTable load(const std::string& path);

 private:
  std::vector<std::string> keys_;
  std::vector<float> rows_;
  int dim_ = 0;
  Provenance provenance_ = Provenance::stub;
  std::unordered_map<std::string, int> index_;
};

}  // namespace advxl
