#include "advxl/vit.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "advxl/rng.hpp"

namespace advxl {

namespace {

constexpr double kLayerNormEps = 1e-6;
constexpr int kGradGroup = 8;  // samples summed per partial-gradient buffer

std::string block_prefix(int l) { return "blocks." + std::to_string(l) + "."; }

}  // namespace

int VitConfig::mlp_hidden() const {
  return std::max(1, static_cast<int>(std::lround(width * mlp_ratio)));
}

void VitConfig::validate() const {
  if (patch_size <= 0 || image_size <= 0 || image_size % patch_size != 0)
    throw std::invalid_argument("vit config: image_size " + std::to_string(image_size) +
                                " must be a positive multiple of patch_size " +
                                std::to_string(patch_size));
  if (channels <= 0) throw std::invalid_argument("vit config: channels must be positive");
  if (depth < 0) throw std::invalid_argument("vit config: depth must be >= 0");
  if (width <= 0 || heads <= 0 || width % heads != 0)
    throw std::invalid_argument("vit config: width must be a positive multiple of heads");
  if (!(mlp_ratio > 0.0)) throw std::invalid_argument("vit config: mlp_ratio must be positive");
  if (head_mode == HeadMode::classifier && num_classes <= 0)
    throw std::invalid_argument("vit config: num_classes must be positive");
  if (head_mode == HeadMode::projection && embed_dim <= 0)
    throw std::invalid_argument("vit config: embed_dim must be positive");
}

std::string to_string(HeadMode m) { return m == HeadMode::classifier ? "classifier" : "projection"; }

HeadMode parse_head_mode(const std::string& s) {
  if (s == "classifier") return HeadMode::classifier;
  if (s == "projection") return HeadMode::projection;
  throw std::invalid_argument("unknown head mode '" + s + "' (expected classifier or projection)");
}

ParamLayout vit_layout(const VitConfig& c) {
  c.validate();
  ParamLayout l;
  const int w = c.width, hid = c.mlp_hidden();
  l.add("patch_embed.weight", {w, c.patch_dim()});
  l.add("patch_embed.bias", {w});
  l.add("pos_embed", {c.grid(), c.grid(), w});
  for (int b = 0; b < c.depth; ++b) {
    const std::string p = block_prefix(b);
    l.add(p + "norm1.weight", {w});
    l.add(p + "norm1.bias", {w});
    l.add(p + "attn.qkv.weight", {3 * w, w});
    l.add(p + "attn.qkv.bias", {3 * w});
    l.add(p + "attn.proj.weight", {w, w});
    l.add(p + "attn.proj.bias", {w});
    l.add(p + "norm2.weight", {w});
    l.add(p + "norm2.bias", {w});
    l.add(p + "mlp.fc1.weight", {hid, w});
    l.add(p + "mlp.fc1.bias", {hid});
    l.add(p + "mlp.fc2.weight", {w, hid});
    l.add(p + "mlp.fc2.bias", {w});
  }
  l.add("norm.weight", {w});
  l.add("norm.bias", {w});
  l.add("head.weight", {c.output_dim(), w});
  l.add("head.bias", {c.output_dim()});
  return l;
}

template <class Real>
ParamStore<Real> init_vit_params(const VitConfig& config, std::uint64_t seed) {
  ParamStore<Real> p(vit_layout(config));
  Rng rng(seed);
  for (const auto& e : p.layout.entries()) {
    auto t = p.tensor(e.name);
    const bool is_bias = e.name.ends_with(".bias");
    const bool is_norm = e.name.find("norm") != std::string::npos;
    if (e.name == "pos_embed") {
      for (Real& v : t) v = static_cast<Real>(0.02 * rng.normal());
    } else if (is_norm) {
      std::fill(t.begin(), t.end(), is_bias ? Real(0) : Real(1));
    } else if (is_bias) {
      std::fill(t.begin(), t.end(), Real(0));
    } else {
      const double fan_out = e.shape[0], fan_in = e.shape[1];
      const double limit = std::sqrt(6.0 / (fan_in + fan_out));
      for (Real& v : t) v = static_cast<Real>(rng.uniform(-limit, limit));
    }
  }
  return p;
}

template <class Real>
PosEmbedGrid<Real> interpolate_pos_embed(const PosEmbedGrid<Real>& grid, int new_h, int new_w) {
  if (new_h <= 0 || new_w <= 0) throw std::invalid_argument("interpolate_pos_embed: empty target grid");
  if (new_h == grid.grid_h && new_w == grid.grid_w) return grid;
  PosEmbedGrid<Real> out{new_h, new_w, grid.width,
                         std::vector<Real>(static_cast<std::size_t>(new_h) * new_w * grid.width)};
  auto coord = [](int o, int n_out, int n_in) {
    if (n_out == 1) return 0.5 * (n_in - 1);
    return static_cast<double>(o) * (n_in - 1) / (n_out - 1);
  };
  for (int oy = 0; oy < new_h; ++oy) {
    const double sy = coord(oy, new_h, grid.grid_h);
    const int y0 = std::min(static_cast<int>(std::floor(sy)), grid.grid_h - 1);
    const int y1 = std::min(y0 + 1, grid.grid_h - 1);
    const double fy = sy - y0;
    for (int ox = 0; ox < new_w; ++ox) {
      const double sx = coord(ox, new_w, grid.grid_w);
      const int x0 = std::min(static_cast<int>(std::floor(sx)), grid.grid_w - 1);
      const int x1 = std::min(x0 + 1, grid.grid_w - 1);
      const double fx = sx - x0;
      const Real* r00 = &grid.table[static_cast<std::size_t>(y0 * grid.grid_w + x0) * grid.width];
      const Real* r01 = &grid.table[static_cast<std::size_t>(y0 * grid.grid_w + x1) * grid.width];
      const Real* r10 = &grid.table[static_cast<std::size_t>(y1 * grid.grid_w + x0) * grid.width];
      const Real* r11 = &grid.table[static_cast<std::size_t>(y1 * grid.grid_w + x1) * grid.width];
      Real* dst = &out.table[static_cast<std::size_t>(oy * new_w + ox) * grid.width];
      for (int c = 0; c < grid.width; ++c) {
        const double top = (1.0 - fx) * r00[c] + fx * r01[c];
        const double bot = (1.0 - fx) * r10[c] + fx * r11[c];
        dst[c] = static_cast<Real>((1.0 - fy) * top + fy * bot);
      }
    }
  }
  return out;
}

template <class Real>
PosEmbedGrid<Real> extract_pos_embed(const ParamStore<Real>& params) {
  const auto& e = params.layout.at("pos_embed");
  auto t = params.tensor("pos_embed");
  return {e.shape[0], e.shape[1], e.shape[2], std::vector<Real>(t.begin(), t.end())};
}

template <class Real>
ParamStore<Real> resize_vit_params(const ParamStore<Real>& params, const VitConfig& old_config,
                                   const VitConfig& new_config) {
  VitConfig a = old_config, b = new_config;
  a.image_size = b.image_size = 0;
  if (!(a == b))
    throw std::invalid_argument("resize_vit_params: configs differ in more than image_size");
  if (old_config.patch_size != new_config.patch_size)
    throw std::invalid_argument("resize_vit_params: patch size mismatch");
  new_config.validate();
  ParamLayout layout = vit_layout(new_config);
  for (const auto& e : params.layout.entries())
    if (!layout.contains(e.name)) layout.add(e.name, e.shape);
  ParamStore<Real> out(std::move(layout));
  for (const auto& e : params.layout.entries()) {
    if (e.name == "pos_embed") continue;
    auto src = params.tensor(e.name);
    auto dst = out.tensor(e.name);
    if (src.size() != dst.size()) throw std::invalid_argument("resize_vit_params: shape mismatch for " + e.name);
    std::copy(src.begin(), src.end(), dst.begin());
  }
  const auto grid = interpolate_pos_embed(extract_pos_embed(params), new_config.grid(), new_config.grid());
  auto dst = out.tensor("pos_embed");
  std::copy(grid.table.begin(), grid.table.end(), dst.begin());
  return out;
}

// ---------------------------------------------------------------------------
// Model

namespace {

template <class Real>
using MatT = typename VitModel<Real>::Mat;
template <class Real>
using RowVecT = typename VitModel<Real>::RowVec;
template <class Real>
using CMap = Eigen::Map<const MatT<Real>>;
template <class Real>
using MMap = Eigen::Map<MatT<Real>>;
template <class Real>
using CVec = Eigen::Map<const RowVecT<Real>>;
template <class Real>
using MVec = Eigen::Map<RowVecT<Real>>;

template <class Real>
void layernorm_rows(const MatT<Real>& x, const Real* gamma, const Real* beta, MatT<Real>& xhat,
                    RowVecT<Real>& rstd, MatT<Real>& y) {
  const Eigen::Index rows = x.rows(), cols = x.cols();
  xhat.resize(rows, cols);
  y.resize(rows, cols);
  rstd.resize(rows);
  CVec<Real> g(gamma, cols), b(beta, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Real mu = x.row(r).mean();
    const Real var = (x.row(r).array() - mu).square().mean();
    const Real rs = Real(1) / std::sqrt(var + static_cast<Real>(kLayerNormEps));
    rstd(r) = rs;
    xhat.row(r) = (x.row(r).array() - mu) * rs;
    y.row(r) = xhat.row(r).cwiseProduct(g) + b;
  }
}

template <class Real>
void layernorm_rows_backward(const MatT<Real>& dy, const MatT<Real>& xhat, const RowVecT<Real>& rstd,
                             const Real* gamma, Real* dgamma, Real* dbeta, MatT<Real>& dx) {
  const Eigen::Index rows = dy.rows(), cols = dy.cols();
  CVec<Real> g(gamma, cols);
  dx.resize(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const RowVecT<Real> dxhat = dy.row(r).cwiseProduct(g);
    const Real m1 = dxhat.mean();
    const Real m2 = dxhat.cwiseProduct(xhat.row(r)).mean();
    dx.row(r) = rstd(r) * (dxhat.array() - m1 - xhat.row(r).array() * m2);
  }
  if (dgamma) {
    MVec<Real>(dgamma, cols) += dy.cwiseProduct(xhat).colwise().sum();
    MVec<Real>(dbeta, cols) += dy.colwise().sum();
  }
}

template <class Real>
Real gelu(Real x) {
  return Real(0.5) * x * (Real(1) + std::erf(x * Real(0.70710678118654752440)));
}

template <class Real>
Real gelu_grad(Real x) {
  const Real cdf = Real(0.5) * (Real(1) + std::erf(x * Real(0.70710678118654752440)));
  const Real pdf = std::exp(Real(-0.5) * x * x) * Real(0.39894228040143267794);
  return cdf + x * pdf;
}

}  // namespace

template <class Real>
VitModel<Real>::VitModel(VitConfig config) : config_(config) {
  const ParamLayout l = vit_layout(config_);
  patch_w_ = l.at("patch_embed.weight").offset;
  patch_b_ = l.at("patch_embed.bias").offset;
  pos_ = l.at("pos_embed").offset;
  norm_w_ = l.at("norm.weight").offset;
  norm_b_ = l.at("norm.bias").offset;
  head_w_ = l.at("head.weight").offset;
  head_b_ = l.at("head.bias").offset;
  for (int b = 0; b < config_.depth; ++b) {
    const std::string p = block_prefix(b);
    blocks_.push_back({l.at(p + "norm1.weight").offset, l.at(p + "norm1.bias").offset,
                       l.at(p + "attn.qkv.weight").offset, l.at(p + "attn.qkv.bias").offset,
                       l.at(p + "attn.proj.weight").offset, l.at(p + "attn.proj.bias").offset,
                       l.at(p + "norm2.weight").offset, l.at(p + "norm2.bias").offset,
                       l.at(p + "mlp.fc1.weight").offset, l.at(p + "mlp.fc1.bias").offset,
                       l.at(p + "mlp.fc2.weight").offset, l.at(p + "mlp.fc2.bias").offset});
  }
}

template <class Real>
void VitModel<Real>::check_params(const ParamStore<Real>& params) const {
  const auto& pos = params.layout.at("pos_embed");
  if (pos.offset != pos_ || pos.shape[0] != config_.grid() || pos.shape[1] != config_.grid() ||
      pos.shape[2] != config_.width || params.layout.at("head.bias").offset != head_b_)
    throw std::invalid_argument("vit: parameter layout does not match the model configuration");
}

template <class Real>
void VitModel<Real>::forward(const ParamStore<Real>& params, std::span<const Real> image,
                             const TokenSelection* selection, Tape& tape, std::span<Real> out,
                             std::span<const Real> block_scale) const {
  const VitConfig& c = config_;
  const int side = c.image_size, p = c.patch_size, g = c.grid(), w = c.width;
  if (image.size() != static_cast<std::size_t>(c.channels) * side * side)
    throw std::invalid_argument("vit forward: image of " + std::to_string(image.size()) +
                                " values does not match " + std::to_string(c.channels) + "x" +
                                std::to_string(side) + "x" + std::to_string(side));
  if (out.size() != static_cast<std::size_t>(c.output_dim()))
    throw std::invalid_argument("vit forward: output span has the wrong size");
  check_params(params);
  const Real* pv = params.values.data();
  if (!block_scale.empty() && block_scale.size() != static_cast<std::size_t>(c.depth))
    throw std::invalid_argument("vit forward: need one block scale per layer");
  tape.block_scale.assign(block_scale.begin(), block_scale.end());

  if (selection) {
    if (selection->grid_h != g || selection->grid_w != g)
      throw std::invalid_argument("vit forward: token selection grid does not match image grid");
    tape.tokens = selection->kept_indices;
  } else {
    tape.tokens.resize(static_cast<std::size_t>(g) * g);
    for (int i = 0; i < g * g; ++i) tape.tokens[static_cast<std::size_t>(i)] = i;
  }
  const int T = static_cast<int>(tape.tokens.size());
  if (T == 0) throw std::invalid_argument("vit forward: no tokens");

  // patchify: row t holds (channel, row, col) of the t-th kept patch
  tape.patches.resize(T, c.patch_dim());
  for (int t = 0; t < T; ++t) {
    const int idx = tape.tokens[static_cast<std::size_t>(t)];
    if (idx < 0 || idx >= g * g) throw std::invalid_argument("vit forward: token index out of range");
    const int gy = idx / g, gx = idx % g;
    Real* dst = tape.patches.row(t).data();
    for (int ch = 0; ch < c.channels; ++ch)
      for (int py = 0; py < p; ++py) {
        const Real* src = image.data() + static_cast<std::size_t>(ch) * side * side +
                          static_cast<std::size_t>(gy * p + py) * side + gx * p;
        std::copy(src, src + p, dst + (ch * p + py) * p);
      }
  }

  MatT<Real> x = tape.patches * CMap<Real>(pv + patch_w_, w, c.patch_dim()).transpose();
  x.rowwise() += CVec<Real>(pv + patch_b_, w);
  CMap<Real> pos(pv + pos_, g * g, w);
  for (int t = 0; t < T; ++t) x.row(t) += pos.row(tape.tokens[static_cast<std::size_t>(t)]);

  const int heads = c.heads, dh = w / heads, hid = c.mlp_hidden();
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
  tape.blocks.resize(static_cast<std::size_t>(c.depth));
  MatT<Real> branch;
  for (int l = 0; l < c.depth; ++l) {
    const BlockOffsets& o = blocks_[static_cast<std::size_t>(l)];
    BlockTape& bt = tape.blocks[static_cast<std::size_t>(l)];
    const Real s = block_scale.empty() ? Real(1) : block_scale[static_cast<std::size_t>(l)];
    layernorm_rows<Real>(x, pv + o.norm1_w, pv + o.norm1_b, bt.xhat1, bt.rstd1, bt.a);
    bt.qkv.noalias() = bt.a * CMap<Real>(pv + o.qkv_w, 3 * w, w).transpose();
    bt.qkv.rowwise() += CVec<Real>(pv + o.qkv_b, 3 * w);
    bt.o.resize(T, w);
    bt.probs.resize(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      auto q = bt.qkv.block(0, h * dh, T, dh);
      auto k = bt.qkv.block(0, w + h * dh, T, dh);
      auto v = bt.qkv.block(0, 2 * w + h * dh, T, dh);
      MatT<Real>& P = bt.probs[static_cast<std::size_t>(h)];
      P.noalias() = (q * k.transpose()) * scale;
      for (int r = 0; r < T; ++r) {
        const Real mx = P.row(r).maxCoeff();
        P.row(r) = (P.row(r).array() - mx).exp();
        P.row(r) /= P.row(r).sum();
      }
      bt.o.block(0, h * dh, T, dh).noalias() = P * v;
    }
    if (s == Real(1)) {
      x.noalias() += bt.o * CMap<Real>(pv + o.proj_w, w, w).transpose();
      x.rowwise() += CVec<Real>(pv + o.proj_b, w);
    } else {
      branch.noalias() = bt.o * CMap<Real>(pv + o.proj_w, w, w).transpose();
      branch.rowwise() += CVec<Real>(pv + o.proj_b, w);
      x += s * branch;
    }

    layernorm_rows<Real>(x, pv + o.norm2_w, pv + o.norm2_b, bt.xhat2, bt.rstd2, bt.b);
    bt.h_pre.noalias() = bt.b * CMap<Real>(pv + o.fc1_w, hid, w).transpose();
    bt.h_pre.rowwise() += CVec<Real>(pv + o.fc1_b, hid);
    bt.g = bt.h_pre.unaryExpr([](Real v) { return gelu(v); });
    if (s == Real(1)) {
      x.noalias() += bt.g * CMap<Real>(pv + o.fc2_w, w, hid).transpose();
      x.rowwise() += CVec<Real>(pv + o.fc2_b, w);
    } else {
      branch.noalias() = bt.g * CMap<Real>(pv + o.fc2_w, w, hid).transpose();
      branch.rowwise() += CVec<Real>(pv + o.fc2_b, w);
      x += s * branch;
    }
  }

  // global average pool, then final LayerNorm, then head
  tape.pooled = x.colwise().mean();
  {
    const Real mu = tape.pooled.mean();
    const Real var = (tape.pooled.array() - mu).square().mean();
    tape.rstd_f = Real(1) / std::sqrt(var + static_cast<Real>(kLayerNormEps));
    tape.xhat_f = (tape.pooled.array() - mu) * tape.rstd_f;
    tape.f = tape.xhat_f.cwiseProduct(CVec<Real>(pv + norm_w_, w)) + CVec<Real>(pv + norm_b_, w);
  }
  const int od = c.output_dim();
  tape.z = tape.f * CMap<Real>(pv + head_w_, od, w).transpose() + CVec<Real>(pv + head_b_, od);
  MVec<Real> o(out.data(), od);
  if (c.head_mode == HeadMode::projection) {
    tape.z_norm = tape.z.norm();
    const Real denom = std::max(tape.z_norm, Real(1e-12));
    o = tape.z / denom;
  } else {
    o = tape.z;
  }
}

template <class Real>
void VitModel<Real>::backward(const ParamStore<Real>& params, const Tape& tape,
                              std::span<const Real> dout, ParamStore<Real>* grad,
                              std::span<Real> dimage) const {
  const VitConfig& c = config_;
  const int side = c.image_size, p = c.patch_size, g = c.grid(), w = c.width;
  const int T = static_cast<int>(tape.tokens.size());
  const int od = c.output_dim(), heads = c.heads, dh = w / heads, hid = c.mlp_hidden();
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
  const Real* pv = params.values.data();
  Real* gv = grad ? grad->values.data() : nullptr;
  if (grad && grad->values.size() < params.values.size())
    throw std::invalid_argument("vit backward: gradient store smaller than parameters");

  RowVecT<Real> dz = CVec<Real>(dout.data(), od);
  if (c.head_mode == HeadMode::projection) {
    const Real denom = std::max(tape.z_norm, Real(1e-12));
    const RowVecT<Real> e = tape.z / denom;
    dz = (dz - e * e.dot(dz)) / denom;
  }
  if (gv) {
    MMap<Real>(gv + head_w_, od, w).noalias() += dz.transpose() * tape.f;
    MVec<Real>(gv + head_b_, od) += dz;
  }
  const RowVecT<Real> df = dz * CMap<Real>(pv + head_w_, od, w);
  RowVecT<Real> dpooled(w);
  {
    const RowVecT<Real> dxhat = df.cwiseProduct(CVec<Real>(pv + norm_w_, w));
    const Real m1 = dxhat.mean();
    const Real m2 = dxhat.cwiseProduct(tape.xhat_f).mean();
    dpooled = tape.rstd_f * (dxhat.array() - m1 - tape.xhat_f.array() * m2);
    if (gv) {
      MVec<Real>(gv + norm_w_, w) += df.cwiseProduct(tape.xhat_f);
      MVec<Real>(gv + norm_b_, w) += df;
    }
  }
  MatT<Real> dx = (dpooled / static_cast<Real>(T)).replicate(T, 1);

  MatT<Real> tmp, dln, scaled;
  for (int l = c.depth - 1; l >= 0; --l) {
    const BlockOffsets& o = blocks_[static_cast<std::size_t>(l)];
    const BlockTape& bt = tape.blocks[static_cast<std::size_t>(l)];
    const Real s = tape.block_scale.empty() ? Real(1) : tape.block_scale[static_cast<std::size_t>(l)];
    // gradient reaching a residual branch
    auto branch_grad = [&]() -> const MatT<Real>& {
      if (s == Real(1)) return dx;
      scaled = s * dx;
      return scaled;
    };

    // MLP branch
    const MatT<Real>& dy2 = branch_grad();
    MatT<Real> dh_pre = dy2 * CMap<Real>(pv + o.fc2_w, w, hid);
    if (gv) {
      MMap<Real>(gv + o.fc2_w, w, hid).noalias() += dy2.transpose() * bt.g;
      MVec<Real>(gv + o.fc2_b, w) += dy2.colwise().sum();
    }
    dh_pre.array() *= bt.h_pre.unaryExpr([](Real v) { return gelu_grad(v); }).array();
    if (gv) {
      MMap<Real>(gv + o.fc1_w, hid, w).noalias() += dh_pre.transpose() * bt.b;
      MVec<Real>(gv + o.fc1_b, hid) += dh_pre.colwise().sum();
    }
    tmp.noalias() = dh_pre * CMap<Real>(pv + o.fc1_w, hid, w);
    layernorm_rows_backward<Real>(tmp, bt.xhat2, bt.rstd2, pv + o.norm2_w,
                                  gv ? gv + o.norm2_w : nullptr, gv ? gv + o.norm2_b : nullptr, dln);
    dx += dln;

    // attention branch
    const MatT<Real>& dy1 = branch_grad();
    MatT<Real> d_o = dy1 * CMap<Real>(pv + o.proj_w, w, w);
    if (gv) {
      MMap<Real>(gv + o.proj_w, w, w).noalias() += dy1.transpose() * bt.o;
      MVec<Real>(gv + o.proj_b, w) += dy1.colwise().sum();
    }
    MatT<Real> dqkv(T, 3 * w);
    for (int h = 0; h < heads; ++h) {
      const MatT<Real>& P = bt.probs[static_cast<std::size_t>(h)];
      auto q = bt.qkv.block(0, h * dh, T, dh);
      auto k = bt.qkv.block(0, w + h * dh, T, dh);
      auto v = bt.qkv.block(0, 2 * w + h * dh, T, dh);
      auto dO = d_o.block(0, h * dh, T, dh);
      MatT<Real> dP = dO * v.transpose();
      dqkv.block(0, 2 * w + h * dh, T, dh).noalias() = P.transpose() * dO;
      const Eigen::Matrix<Real, Eigen::Dynamic, 1> rowdot = dP.cwiseProduct(P).rowwise().sum();
      MatT<Real> dS = (P.array() * (dP.colwise() - rowdot).array()).matrix() * scale;
      dqkv.block(0, h * dh, T, dh).noalias() = dS * k;
      dqkv.block(0, w + h * dh, T, dh).noalias() = dS.transpose() * q;
    }
    if (gv) {
      MMap<Real>(gv + o.qkv_w, 3 * w, w).noalias() += dqkv.transpose() * bt.a;
      MVec<Real>(gv + o.qkv_b, 3 * w) += dqkv.colwise().sum();
    }
    tmp.noalias() = dqkv * CMap<Real>(pv + o.qkv_w, 3 * w, w);
    layernorm_rows_backward<Real>(tmp, bt.xhat1, bt.rstd1, pv + o.norm1_w,
                                  gv ? gv + o.norm1_w : nullptr, gv ? gv + o.norm1_b : nullptr, dln);
    dx += dln;
  }

  // embedding
  if (gv) {
    MMap<Real>(gv + patch_w_, w, c.patch_dim()).noalias() += dx.transpose() * tape.patches;
    MVec<Real>(gv + patch_b_, w) += dx.colwise().sum();
    MMap<Real> dpos(gv + pos_, g * g, w);
    for (int t = 0; t < T; ++t) dpos.row(tape.tokens[static_cast<std::size_t>(t)]) += dx.row(t);
  }
  if (!dimage.empty()) {
    if (dimage.size() != static_cast<std::size_t>(c.channels) * side * side)
      throw std::invalid_argument("vit backward: input-gradient span has the wrong size");
    std::fill(dimage.begin(), dimage.end(), Real(0));
    const MatT<Real> dpatch = dx * CMap<Real>(pv + patch_w_, w, c.patch_dim());
    for (int t = 0; t < T; ++t) {
      const int idx = tape.tokens[static_cast<std::size_t>(t)];
      const int gy = idx / g, gx = idx % g;
      const Real* src = dpatch.row(t).data();
      for (int ch = 0; ch < c.channels; ++ch)
        for (int py = 0; py < p; ++py) {
          Real* dst = dimage.data() + static_cast<std::size_t>(ch) * side * side +
                      static_cast<std::size_t>(gy * p + py) * side + gx * p;
          for (int px = 0; px < p; ++px) dst[px] += src[(ch * p + py) * p + px];
        }
    }
  }
}

// ---------------------------------------------------------------------------
// Batch drivers

template <class Real>
void forward_batch(const VitModel<Real>& model, const ParamStore<Real>& params,
                   const ImageBatch<Real>& images, std::span<const TokenSelection> selections,
                   BatchPass<Real>& pass, Exec exec, std::span<const Real> block_scales) {
  const VitConfig& c = model.config();
  if (images.channels != c.channels || images.height != c.image_size || images.width != c.image_size)
    throw std::invalid_argument("forward_batch: image batch " + std::to_string(images.height) + "x" +
                                std::to_string(images.width) + " does not match model resolution " +
                                std::to_string(c.image_size));
  if (!selections.empty() && static_cast<int>(selections.size()) != images.n)
    throw std::invalid_argument("forward_batch: need one token selection per sample");
  if (!block_scales.empty() && block_scales.size() != static_cast<std::size_t>(images.n) * c.depth)
    throw std::invalid_argument("forward_batch: block scales must be n x depth");
  pass.n = images.n;
  pass.dim = c.output_dim();
  pass.tapes.resize(static_cast<std::size_t>(images.n));
  pass.outputs.assign(static_cast<std::size_t>(images.n) * pass.dim, Real(0));
  for_each_sample(images.n, exec, [&](int i) {
    model.forward(params, images.sample(i),
                  selections.empty() ? nullptr : &selections[static_cast<std::size_t>(i)],
                  pass.tapes[static_cast<std::size_t>(i)],
                  {pass.outputs.data() + static_cast<std::size_t>(i) * pass.dim,
                   static_cast<std::size_t>(pass.dim)},
                  block_scales.empty() ? std::span<const Real>()
                                       : block_scales.subspan(static_cast<std::size_t>(i) * c.depth,
                                                              static_cast<std::size_t>(c.depth)));
  });
}

template <class Real>
void backward_batch(const VitModel<Real>& model, const ParamStore<Real>& params,
                    const BatchPass<Real>& pass, std::span<const Real> douts,
                    ParamStore<Real>* grad, ImageBatch<Real>* dimages, Exec exec) {
  const int n = pass.n;
  if (douts.size() != static_cast<std::size_t>(n) * pass.dim)
    throw std::invalid_argument("backward_batch: output-gradient size mismatch");
  if (dimages) {
    const VitConfig& c = model.config();
    if (dimages->n != n || dimages->channels != c.channels || dimages->height != c.image_size ||
        dimages->width != c.image_size)
      *dimages = ImageBatch<Real>(n, c.channels, c.image_size, c.image_size);
  }
  auto sample_dout = [&](int i) {
    return std::span<const Real>(douts.data() + static_cast<std::size_t>(i) * pass.dim,
                                 static_cast<std::size_t>(pass.dim));
  };
  auto sample_dimage = [&](int i) {
    return dimages ? dimages->sample(i) : std::span<Real>();
  };

  if (!grad) {
    for_each_sample(n, exec, [&](int i) {
      model.backward(params, pass.tapes[static_cast<std::size_t>(i)], sample_dout(i), nullptr,
                     sample_dimage(i));
    });
    return;
  }

  const int groups = (n + kGradGroup - 1) / kGradGroup;
  std::vector<ParamStore<Real>> partial(static_cast<std::size_t>(groups), params.zeros_like());
  for_each_sample(groups, exec, [&](int gi) {
    const int lo = gi * kGradGroup, hi = std::min(n, lo + kGradGroup);
    for (int i = lo; i < hi; ++i)
      model.backward(params, pass.tapes[static_cast<std::size_t>(i)], sample_dout(i),
                     &partial[static_cast<std::size_t>(gi)], sample_dimage(i));
  });
  if (grad->values.size() != params.values.size()) *grad = params.zeros_like();
  for (const auto& part : partial)
    for (std::size_t j = 0; j < grad->values.size(); ++j) grad->values[j] += part.values[j];
}

double forward_flops(const VitConfig& c, int tokens) {
  const double T = tokens, W = c.width;
  const double embed = T * c.patch_dim() * W;
  const double per_layer = 4.0 * T * W * W + 2.0 * T * T * W + 2.0 * T * W * W * c.mlp_ratio;
  const double head = W * c.output_dim();
  return embed + c.depth * per_layer + head;
}

double flops_per_sample(const VitConfig& c, int tokens, int attack_steps) {
  if (tokens < 1) throw std::invalid_argument("flops_per_sample: token_count must be >= 1");
  const double pass = 3.0 * forward_flops(c, tokens);  // forward + 2x backward
  return (attack_steps + 1) * pass / 1e9;
}

#define ADVXL_INSTANTIATE(Real)                                                                    \
  template ParamStore<Real> init_vit_params<Real>(const VitConfig&, std::uint64_t);                \
  template PosEmbedGrid<Real> interpolate_pos_embed<Real>(const PosEmbedGrid<Real>&, int, int);    \
  template PosEmbedGrid<Real> extract_pos_embed<Real>(const ParamStore<Real>&);                    \
  template ParamStore<Real> resize_vit_params<Real>(const ParamStore<Real>&, const VitConfig&,     \
                                                    const VitConfig&);                             \
  template class VitModel<Real>;                                                                   \
  template void forward_batch<Real>(const VitModel<Real>&, const ParamStore<Real>&,                \
                                    const ImageBatch<Real>&, std::span<const TokenSelection>,     \
                                    BatchPass<Real>&, Exec, std::span<const Real>);                \
  template void backward_batch<Real>(const VitModel<Real>&, const ParamStore<Real>&,               \
                                     const BatchPass<Real>&, std::span<const Real>,                \
                                     ParamStore<Real>*, ImageBatch<Real>*, Exec);

ADVXL_INSTANTIATE(float)
ADVXL_INSTANTIATE(double)
#undef ADVXL_INSTANTIATE

}  // namespace advxl
