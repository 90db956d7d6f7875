#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace advxl {

/// Dense N x C x H x W batch of images, row-major.
template <class Real>
struct ImageBatch {
  int n = 0;
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<Real> data;

  ImageBatch() = default;
  ImageBatch(int n_, int c, int h, int w, Real fill = Real(0))
      : n(n_), channels(c), height(h), width(w),
        data(static_cast<std::size_t>(n_) * c * h * w, fill) {}

  std::size_t sample_size() const {
    return static_cast<std::size_t>(channels) * height * width;
  }
  std::span<Real> sample(int i) {
    return {data.data() + i * sample_size(), sample_size()};
  }
  std::span<const Real> sample(int i) const {
    return {data.data() + i * sample_size(), sample_size()};
  }
  bool same_shape(const ImageBatch& o) const {
    return n == o.n && channels == o.channels && height == o.height && width == o.width;
  }
  bool operator==(const ImageBatch&) const = default;
};

template <class To, class From>
ImageBatch<To> cast_batch(const ImageBatch<From>& src) {
  ImageBatch<To> out(src.n, src.channels, src.height, src.width);
  for (std::size_t i = 0; i < src.data.size(); ++i) out.data[i] = static_cast<To>(src.data[i]);
  return out;
}

struct TensorInfo {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

/// Ordered name -> shape directory over one flat parameter buffer.
class ParamLayout {
 public:
  std::size_t add(std::string name, std::vector<int> shape) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    std::size_t size = 1;
    for (int d : shape) size *= static_cast<std::size_t>(d);
    TensorInfo info{name, std::move(shape), total_, size};
    index_[name] = entries_.size();
    entries_.push_back(std::move(info));
    total_ += size;
    return entries_.back().offset;
  }

  const TensorInfo& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return entries_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const std::vector<TensorInfo>& entries() const { return entries_; }
  std::size_t total() const { return total_; }

  bool operator==(const ParamLayout& o) const {
    if (entries_.size() != o.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].name != o.entries_[i].name || entries_[i].shape != o.entries_[i].shape)
        return false;
    }
    return true;
  }

 private:
  std::vector<TensorInfo> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t total_ = 0;
};

/// Flat parameter (or gradient / moment) vector tied to a layout.
template <class Real>
struct ParamStore {
  ParamLayout layout;
  std::vector<Real> values;

  ParamStore() = default;
  explicit ParamStore(ParamLayout l) : layout(std::move(l)), values(layout.total(), Real(0)) {}

  std::span<Real> tensor(const std::string& name) {
    const auto& e = layout.at(name);
    return {values.data() + e.offset, e.size};
  }
  std::span<const Real> tensor(const std::string& name) const {
    const auto& e = layout.at(name);
    return {values.data() + e.offset, e.size};
  }
  ParamStore zeros_like() const { return ParamStore(layout); }
};

template <class To, class From>
ParamStore<To> cast_params(const ParamStore<From>& src) {
  ParamStore<To> out(src.layout);
  for (std::size_t i = 0; i < src.values.size(); ++i) out.values[i] = static_cast<To>(src.values[i]);
  return out;
}

}  // namespace advxl
