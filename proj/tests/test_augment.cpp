#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "advxl/augment.hpp"
#include "advxl/config.hpp"
#include "advxl/objectives.hpp"
#include "advxl/pipeline.hpp"

using namespace advxl;

namespace {

ImageBatch<float> random_batch(int n, int side, Rng& rng) {
  ImageBatch<float> b(n, 3, side, side);
  for (float& v : b.data) v = static_cast<float>(rng.uniform());
  return b;
}

VitConfig model(int depth) {
  VitConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.depth = depth;
  c.width = 16;
  c.heads = 2;
  return c;
}

}  // namespace

TEST_CASE("gamma and beta draws have the right means") {
  Rng rng(1);
  for (double shape : {0.3, 1.0, 4.5}) {
    double s = 0.0;
    for (int i = 0; i < 40000; ++i) s += sample_gamma(shape, rng);
    CHECK(s / 40000 == doctest::Approx(shape).epsilon(0.03));
  }
  double s = 0.0;
  for (int i = 0; i < 40000; ++i) {
    const double x = sample_beta(0.8, 0.8, rng);
    REQUIRE((x >= 0.0 && x <= 1.0));
    s += x;
  }
  CHECK(s / 40000 == doctest::Approx(0.5).epsilon(0.02));
  CHECK_THROWS(sample_gamma(0.0, rng));
}

TEST_CASE("mixup blends each sample with its mirror") {
  Rng rng(2);
  const ImageBatch<float> x = random_batch(5, 4, rng);
  ImageBatch<float> y = x;
  BatchMix m;
  m.kind = BatchMix::Kind::mixup;
  m.lambda = 0.3;
  apply_mix(m, y);
  for (int i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < x.sample_size(); ++j)
      CHECK(y.sample(i)[j] == doctest::Approx(0.3 * x.sample(i)[j] + 0.7 * x.sample(4 - i)[j]).epsilon(1e-6));

  TrainBatch b;
  b.labels = {0, 1, 2, 3, 4};
  apply_mix_labels(m, b);
  CHECK(b.mix_labels == std::vector<int>{4, 3, 2, 1, 0});
  CHECK(b.mix_lambda == doctest::Approx(0.3));

  ImageBatch<float> z = x;
  apply_mix(BatchMix{}, z);
  CHECK(z == x);
}

TEST_CASE("cutmix pastes a box and weights labels by its area") {
  Rng rng(3);
  AugmentConfig cfg;
  cfg.cutmix_alpha = 1.0;
  for (int t = 0; t < 50; ++t) {
    const BatchMix m = draw_mix(cfg, 16, rng);
    REQUIRE(m.kind == BatchMix::Kind::cutmix);
    const int area = (m.y1 - m.y0) * (m.x1 - m.x0);
    CHECK(m.lambda == doctest::Approx(1.0 - area / 256.0));
    const ImageBatch<float> x = random_batch(3, 16, rng);
    ImageBatch<float> y = x;
    apply_mix(m, y);
    for (int i = 0; i < 3; ++i)
      for (int ch = 0; ch < 3; ++ch)
        for (int r = 0; r < 16; ++r)
          for (int c = 0; c < 16; ++c) {
            const std::size_t k = static_cast<std::size_t>(ch * 256 + r * 16 + c);
            const bool in = r >= m.y0 && r < m.y1 && c >= m.x0 && c < m.x1;
            CHECK(y.sample(i)[k] == (in ? x.sample(2 - i)[k] : x.sample(i)[k]));
          }
  }
  cfg.mix_prob = 0.0;
  CHECK_FALSE(draw_mix(cfg, 16, rng).active());
}

TEST_CASE("mixed labels give the weighted cross entropy") {
  Rng rng(4);
  TrainBatch b;
  b.images = ImageBatch<float>(4, 3, 8, 8);
  b.labels = {1, 0, 2, 2};
  b.mix_labels = {2, 2, 0, 1};
  b.mix_lambda = 0.25f;
  std::vector<float> logits(12);
  for (float& v : logits) v = static_cast<float>(rng.normal());
  std::vector<float> d(12), d1(12), d2(12);
  const float l = objective_loss(ObjectiveContext{}, b, logits, 3, d);
  const float l1 = cross_entropy<float>(logits, 3, b.labels, 0.0, d1);
  const float l2 = cross_entropy<float>(logits, 3, b.mix_labels, 0.0, d2);
  CHECK(l == doctest::Approx(0.25 * l1 + 0.75 * l2).epsilon(1e-6));
  for (int j = 0; j < 12; ++j) CHECK(d[j] == doctest::Approx(0.25 * d1[j] + 0.75 * d2[j]).epsilon(1e-6));
}

TEST_CASE("randaug ops keep pixels in range and are seed-determined") {
  Rng rng(5);
  for (int op = 0; op < kRandAugOps; ++op)
    for (double mag : {0.0, 5.0, 10.0}) {
      const ImageBatch<float> x = random_batch(1, 8, rng);
      ImageBatch<float> a = x, b = x;
      Rng r1(9), r2(9);
      randaug_op(op, a.sample(0), 3, 8, mag, r1);
      randaug_op(op, b.sample(0), 3, 8, mag, r2);
      CHECK(a == b);
      for (float v : a.data) CHECK((v >= 0.0f && v <= 1.0f));
      // everything but the level-free ops and posterize is the identity at magnitude 0
      if (mag == 0.0 && op != 1 && op != 2 && op != 6) {
        INFO("op " << op);
        for (std::size_t j = 0; j < x.data.size(); ++j) CHECK(a.data[j] == doctest::Approx(x.data[j]).epsilon(1e-6));
      }
    }
  std::vector<float> img(3 * 64, 0.2f);
  CHECK_THROWS(randaug_op(kRandAugOps, img, 3, 8, 5.0, rng));
}

TEST_CASE("translation shifts pixels and fills with gray") {
  ImageBatch<float> x(1, 3, 8, 8);
  for (int k = 0; k < 192; ++k) x.data[static_cast<std::size_t>(k)] = static_cast<float>(k % 64) / 64.0f;
  // magnitude chosen so the shift is exactly 1 pixel: 0.45 * f * 8 = 1
  for (int trial = 0; trial < 4; ++trial) {
    Rng rng(static_cast<std::uint64_t>(trial));
    const bool plus = Rng(static_cast<std::uint64_t>(trial)).below(2) == 1;
    ImageBatch<float> y = x;
    randaug_op(12, y.sample(0), 3, 8, 10.0 / 3.6, rng);
    for (int r = 0; r < 8; ++r)
      for (int c = 0; c < 8; ++c) {
        const int src = plus ? c + 1 : c - 1;
        const float want = (src < 0 || src > 7) ? 0.5f : x.data[static_cast<std::size_t>(r * 8 + src)];
        CHECK(y.data[static_cast<std::size_t>(r * 8 + c)] == want);
      }
  }
}

TEST_CASE("stochastic depth scales") {
  Rng rng(6);
  const auto none = draw_block_scales(4, 3, 0.0, rng);
  CHECK(none == std::vector<float>(12, 1.0f));
  const int n = 20000, depth = 4;
  const auto s = draw_block_scales(n, depth, 0.3, rng);
  std::vector<double> mean(depth, 0.0), dropped(depth, 0.0);
  for (int i = 0; i < n; ++i)
    for (int l = 0; l < depth; ++l) {
      mean[l] += s[static_cast<std::size_t>(i * depth + l)] / n;
      dropped[l] += (s[static_cast<std::size_t>(i * depth + l)] == 0.0f) / static_cast<double>(n);
    }
  CHECK(dropped[0] == 0.0);
  CHECK(dropped[3] == doctest::Approx(0.3).epsilon(0.05));
  for (int l = 0; l < depth; ++l) CHECK(mean[l] == doctest::Approx(1.0).epsilon(0.03));
}

TEST_CASE("a dropped block is skipped and unit scales change nothing") {
  const VitConfig deep = model(2), shallow = model(1);
  const auto p2 = init_vit_params<double>(deep, 7);
  ParamStore<double> p1(vit_layout(shallow));
  for (const auto& e : p1.layout.entries()) {
    // the shallow model keeps block 1 of the deep one
    std::string src = e.name;
    if (src.rfind("blocks.0.", 0) == 0) src.replace(0, 9, "blocks.1.");
    const auto from = p2.tensor(src);
    std::copy(from.begin(), from.end(), p1.tensor(e.name).begin());
  }
  Rng rng(8);
  std::vector<double> img(192);
  for (double& v : img) v = rng.uniform();
  const VitModel<double> m2(deep), m1(shallow);
  typename VitModel<double>::Tape t;
  std::vector<double> a(10), b(10), c(10), d(10);
  const std::vector<double> skip0{0.0, 1.0}, ones{1.0, 1.0};
  m2.forward(p2, img, nullptr, t, a, skip0);
  m1.forward(p1, img, nullptr, t, b);
  for (int k = 0; k < 10; ++k) CHECK(a[k] == doctest::Approx(b[k]).epsilon(1e-12));
  m2.forward(p2, img, nullptr, t, c, ones);
  m2.forward(p2, img, nullptr, t, d);
  CHECK(c == d);
}

TEST_CASE("gradients with block scales match finite differences") {
  const VitConfig c = model(2);
  auto p = init_vit_params<double>(c, 9);
  Rng rng(10);
  for (double& v : p.values) v += rng.uniform(-0.1, 0.1);
  const VitModel<double> m(c);
  std::vector<double> img(192), dout(10);
  for (double& v : img) v = rng.uniform();
  for (double& v : dout) v = rng.normal();
  const std::vector<double> scales{0.5, 1.7};
  auto f = [&](const ParamStore<double>& q, const std::vector<double>& x) {
    typename VitModel<double>::Tape t;
    std::vector<double> o(10);
    m.forward(q, x, nullptr, t, o, scales);
    double s = 0;
    for (int k = 0; k < 10; ++k) s += o[k] * dout[k];
    return s;
  };
  typename VitModel<double>::Tape tape;
  std::vector<double> out(10), dimg(192);
  m.forward(p, img, nullptr, tape, out, scales);
  ParamStore<double> g = p.zeros_like();
  m.backward(p, tape, dout, &g, dimg);
  const double h = 1e-6;
  auto rel = [](double a, double b) { return std::abs(a - b) / std::max(1e-4, std::abs(a) + std::abs(b)); };
  for (std::size_t i = 0; i < img.size(); i += 11) {
    auto up = img, dn = img;
    up[i] += h;
    dn[i] -= h;
    CHECK(rel(dimg[i], (f(p, up) - f(p, dn)) / (2 * h)) < 1e-3);
  }
  for (std::size_t k = 0; k < p.values.size(); k += 37) {
    auto up = p, dn = p;
    up.values[k] += h;
    dn.values[k] -= h;
    CHECK(rel(g.values[k], (f(up, img) - f(dn, img)) / (2 * h)) < 1e-3);
  }
}

TEST_CASE("augmented training is deterministic") {
  SynthConfig sc;
  sc.count = 64;
  sc.resolution = 16;
  const Dataset d = make_synthetic_dataset(sc);
  StageConfig s;
  s.name = "aug";
  s.reduction.patch_size = 4;
  s.budget = {Norm::linf, 4.0 / 255, 4.0 / 255, 1, true};
  s.batch_size = 16;
  s.samples_total = 64;
  s.seed = 5;
  s.augment.randaug_ops = 2;
  s.augment.mixup_alpha = 0.8;
  s.augment.cutmix_alpha = 1.0;
  s.augment.drop_path = 0.1;
  VitConfig c = model(2);
  c.image_size = 16;
  for (MixOrder order : {MixOrder::before_attack, MixOrder::after_attack}) {
    s.augment.mix_order = order;
    const TrainState a = run_stage(init_train_state(c, 1), s, BatchStream(d, 16, 0, s.reduction));
    const TrainState b = run_stage(init_train_state(c, 1), s, BatchStream(d, 16, 0, s.reduction));
    CHECK(a.params.values == b.params.values);
    StageConfig plain = s;
    plain.augment = {};
    const TrainState p = run_stage(init_train_state(c, 1), plain, BatchStream(d, 16, 0, s.reduction));
    CHECK(p.params.values != a.params.values);
  }
}

TEST_CASE("augment config parsing") {
  const std::string base =
      "model: {patch_size: 4, depth: 1, width: 16, heads: 2}\n"
      "data: {resolution: 16, synthetic_train: {count: 64}}\n"
      "stages:\n"
      "  - name: s\n"
      "    samples: 64\n"
      "    batch_size: 16\n"
      "    attack: {norm: linf, epsilon: 4/255, step_size: 4/255, steps: 1}\n";
  const RunConfig c = parse_run_config(base + "    augment: {randaug_ops: 2, randaug_magnitude: 9, mixup_alpha: 0.8, "
                                              "cutmix_alpha: 1.0, mix_order: after_attack, drop_path: 0.1}\n");
  const AugmentConfig& a = c.stages[0].augment;
  CHECK(a.randaug_ops == 2);
  CHECK(a.mix_order == MixOrder::after_attack);
  CHECK(a.drop_path == doctest::Approx(0.1));
  CHECK_FALSE(parse_run_config(base).stages[0].augment.any());
  CHECK_THROWS_AS(parse_run_config(base + "    augment: {mix_order: sideways}\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(base + "    augment: {drop_path: 1.5}\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config(base + "    objective: contrastive\n    augment: {mixup_alpha: 0.8}\n"), ConfigError);
}
