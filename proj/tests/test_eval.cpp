#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "advxl/eval.hpp"

using namespace advxl;
namespace fs = std::filesystem;

namespace {

const fs::path kFixture = fs::path(ADVXL_FIXTURE_DIR) / "eval_tiny";

// Pixel 0 encodes the label; the oracle reads it back.
Classifier label_oracle() {
  Classifier c;
  c.num_classes = 10;
  c.logits = [](const ImageBatch<float>& x) {
    std::vector<double> out(static_cast<std::size_t>(x.n) * 10, 0.0);
    for (int i = 0; i < x.n; ++i) out[static_cast<std::size_t>(i) * 10 + std::lround(x.sample(i)[0] * 10)] = 1.0;
    return out;
  };
  c.loss = [](const ImageBatch<float>& x, std::span<const int>, ImageBatch<float>* grad) {
    if (grad) *grad = ImageBatch<float>(x.n, x.channels, x.height, x.width);
    return 0.0f;
  };
  return c;
}

Classifier constant_logits() {
  Classifier c = label_oracle();
  c.logits = [](const ImageBatch<float>& x) {
    std::vector<double> out(static_cast<std::size_t>(x.n) * 10, 0.0);
    for (int i = 0; i < x.n; ++i) out[static_cast<std::size_t>(i) * 10 + 3] = 1.0;
    return out;
  };
  return c;
}

EvalSet label_coded_set(int n) {
  EvalSet s;
  s.images = ImageBatch<float>(n, 3, 8, 8, 0.5f);
  for (int i = 0; i < n; ++i) {
    s.labels.push_back(i % 10);
    s.images.sample(i)[0] = static_cast<float>((i % 10) / 10.0);
    s.indices.push_back(i);
  }
  return s;
}

VitConfig fixture_model(int side) {
  VitConfig c;
  c.image_size = side;
  c.patch_size = 4;
  c.depth = 1;
  c.width = 24;
  c.heads = 2;
  c.num_classes = 10;
  return c;
}

SynthConfig fixture_data(int count, std::uint64_t seed) {
  SynthConfig s;
  s.count = count;
  s.resolution = 16;
  s.seed = seed;
  s.task_seed = 11;
  return s;
}

PerturbationBudget linf(double eps, int steps = 10) { return {Norm::linf, eps, eps / 4, steps, true}; }

struct Golden {
  TrainState state;
  Dataset data;
  nlohmann::json values;
};

nlohmann::json measure(const Classifier& clf, const EvalSet& set) {
  nlohmann::json j;
  j["clean"] = clean_accuracy(clf, set);
  j["linf"] = robust_accuracy(clf, set, linf(4.0 / 255), 5);
  const double l2 = 2.0 * 16 / 224;
  j["l2"] = robust_accuracy(clf, set, {Norm::l2, l2, l2 / 4, 10, true}, 5);
  return j;
}

// Trains the fixture model with l-inf adversarial training and freezes it, its
// 100 evaluation images and the accuracies they produce.
void regenerate_fixture() {
  fs::create_directories(kFixture);
  const Dataset train = make_synthetic_dataset(fixture_data(2000, 1));
  StageConfig s;
  s.name = "fixture";
  s.reduction.patch_size = 4;
  s.budget = {Norm::linf, 4.0 / 255, 4.0 / 255, 1, true};
  s.batch_size = 64;
  s.samples_total = 64 * 500;
  s.optimizer.peak_lr = 2e-3;
  s.optimizer.warmup_samples = 3200;
  s.seed = 5;
  TrainState st = init_train_state(fixture_model(16), 3);
  st = run_stage(st, s, BatchStream(train, 64, 6, s.reduction));
  save_checkpoint((kFixture / "model.ckpt").string(), st);
  const Dataset eval = make_synthetic_dataset(fixture_data(100, 2));
  fs::remove_all(kFixture / "data");
  write_dataset(eval, (kFixture / "data").string());
}

Golden load_golden() {
  Golden g;
  g.state = load_checkpoint((kFixture / "model.ckpt").string());
  g.data = decode_dataset(DatasetManifest::load((kFixture / "data" / "manifest.jsonl").string()), 16);
  std::ifstream f(kFixture / "golden.json");
  if (f) g.values = nlohmann::json::parse(f);
  return g;
}

}  // namespace

TEST_CASE("label oracle and constant model") {
  const EvalSet s = label_coded_set(200);
  CHECK(clean_accuracy(label_oracle(), s) == 1.0);
  CHECK(robust_accuracy(label_oracle(), s, linf(4.0 / 255, 20), 1) == 1.0);
  const double c = clean_accuracy(constant_logits(), s);
  CHECK(std::abs(c - 0.1) <= 3 * std::sqrt(0.1 * 0.9 / 200));
}

TEST_CASE("zero budget reproduces clean accuracy") {
  const Golden g = load_golden();
  const Classifier clf = vit_classifier(g.state.model, g.state.params);
  const EvalSet set = make_eval_set(g.data, -1, 0, 16);
  const double clean = clean_accuracy(clf, set);
  CHECK(robust_accuracy(clf, set, {Norm::linf, 0.0, 1.0 / 255, 20, true}, 1) == clean);
  CHECK(robust_accuracy(clf, set, {Norm::l2, 0.0, 0.1, 5, false}, 1) == clean);
  AttackSuite suite;
  suite.attacks = {{"none", {Norm::linf, 0.0, 1.0 / 255, 3, true}, 1}};
  const EvalReport r = multi_norm_report(clf, set, suite);
  CHECK(r.robust[0].robust_acc == r.clean_acc);
  CHECK(r.samples_evaluated == 100);
}

TEST_CASE("golden fixture accuracies") {
  if (std::getenv("ADVXL_REGENERATE_FIXTURE")) {
    regenerate_fixture();
    const Golden g = load_golden();
    std::ofstream(kFixture / "golden.json")
        << measure(vit_classifier(g.state.model, g.state.params), make_eval_set(g.data, -1, 0, 16)).dump(2) << "\n";
  }
  const Golden g = load_golden();
  REQUIRE(!g.values.is_null());
  const Classifier clf = vit_classifier(g.state.model, g.state.params);
  const EvalSet set = make_eval_set(g.data, -1, 0, 16);
  REQUIRE(set.labels.size() == 100);
  const nlohmann::json now = measure(clf, set);
  CHECK(now["clean"].get<double>() == doctest::Approx(g.values["clean"].get<double>()).epsilon(1e-12));
  CHECK(std::abs(now["linf"].get<double>() - g.values["linf"].get<double>()) <= 0.01 + 1e-12);
  CHECK(std::abs(now["l2"].get<double>() - g.values["l2"].get<double>()) <= 0.01 + 1e-12);
  CHECK(now["clean"].get<double>() > 0.3);
  // an l-inf trained model keeps some l2 robustness
  CHECK(now["l2"].get<double>() > 0.0);
}

TEST_CASE("robust accuracy is bounded by clean and monotone") {
  const Golden g = load_golden();
  const Classifier clf = vit_classifier(g.state.model, g.state.params);
  const EvalSet set = make_eval_set(g.data, -1, 0, 16);
  const double n = static_cast<double>(set.labels.size());
  const double clean = clean_accuracy(clf, set);
  double prev = clean;
  for (double eps : {1.0, 2.0, 4.0, 8.0, 16.0}) {
    const double r = robust_accuracy(clf, set, linf(eps / 255), 3);
    CHECK(r <= clean + 1 / n);
    CHECK(r <= prev + 1 / n);
    CHECK((r >= 0.0 && r <= 1.0));
    prev = r;
  }
  prev = clean;
  for (int steps : {1, 3, 10, 20}) {
    const double r = robust_accuracy(clf, set, {Norm::linf, 8.0 / 255, 1.0 / 255, steps, false}, 4);
    CHECK(r <= prev + 1 / n);
    prev = r;
  }
  // restarts can only remove samples
  CHECK(robust_accuracy(clf, set, linf(4.0 / 255), 9, 3) <= robust_accuracy(clf, set, linf(4.0 / 255), 9, 1));
  CHECK(robust_accuracy(clf, set, linf(4.0 / 255), 9) == robust_accuracy(clf, set, linf(4.0 / 255), 9));
}

TEST_CASE("random model under PGD-20") {
  const Dataset d = make_synthetic_dataset(fixture_data(200, 4));
  const auto params = init_vit_params<float>(fixture_model(16), 8);
  const Classifier clf = vit_classifier(fixture_model(16), params);
  const EvalSet set = make_eval_set(d, -1, 1, 16);
  const AttackSuite suite = AttackSuite::standard_protocol(16);
  const EvalReport r = multi_norm_report(clf, set, suite);
  for (const auto& e : r.robust) CHECK(e.robust_acc <= r.clean_acc);
}

TEST_CASE("eval subsets are seed-determined") {
  const Dataset d = make_synthetic_dataset(fixture_data(300, 4));
  const EvalSet a = make_eval_set(d, 50, 7, 16), b = make_eval_set(d, 50, 7, 16), c = make_eval_set(d, 50, 8, 16);
  CHECK(a.indices == b.indices);
  CHECK(a.images == b.images);
  CHECK(a.indices != c.indices);
  CHECK(a.indices.size() == 50);
  const EvalSet up = make_eval_set(d, 50, 7, 32);
  CHECK(up.images.height == 32);
  CHECK(up.labels == a.labels);
  CHECK(make_eval_set(d, -1, 7, 16).indices.size() == 300);
}

TEST_CASE("standard protocol suite") {
  const AttackSuite full = AttackSuite::standard_protocol(224);
  REQUIRE(full.attacks.size() == 3);
  CHECK(full.attacks[0].budget == PerturbationBudget::eval_linf());
  CHECK(full.attacks[0].budget.epsilon == doctest::Approx(4.0 / 255));
  CHECK(full.attacks[0].budget.step_size == doctest::Approx(1.0 / 255));
  CHECK(full.attacks[0].budget.num_steps == 20);
  CHECK(full.attacks[1].budget.norm == Norm::l2);
  CHECK(full.attacks[1].budget.epsilon == doctest::Approx(2.0));
  CHECK(full.attacks[2].budget.norm == Norm::l1);
  CHECK(full.attacks[2].budget.epsilon == doctest::Approx(75.0));
  const AttackSuite desk = AttackSuite::standard_protocol(32);
  CHECK(desk.attacks[0].budget.epsilon == doctest::Approx(4.0 / 255));
  CHECK(desk.attacks[1].budget.epsilon == doctest::Approx(2.0 * 32 / 224));
  CHECK(desk.attacks[2].budget.epsilon == doctest::Approx(75.0 * (32.0 / 224) * (32.0 / 224)));
  CHECK(!desk.scaling_rule.empty());
  AttackSuite dup = desk;
  dup.attacks[1].name = dup.attacks[0].name;
  CHECK_THROWS_AS(dup.validate(), std::invalid_argument);
  CHECK_THROWS_AS(AttackSuite{}.validate(), std::invalid_argument);
}

TEST_CASE("report round trip") {
  EvalReport r;
  r.clean_acc = 0.75;
  r.robust = {{"linf", PerturbationBudget::eval_linf(), 1, 0.5}, {"l2", {Norm::l2, 0.3, 0.0375, 20, true}, 3, 0.25}};
  r.samples_evaluated = 1000;
  r.subset_seed = 12345678901234ULL;
  r.eval_resolution = 32;
  r.fingerprint = "abc";
  r.scaling_rule = "rule";
  r.ledger.record("pre", 128, 1, 0.5);
  r.ledger.record("ft", 128, 3, 1.5);
  const std::string text = r.to_json();
  CHECK(EvalReport::parse(text) == r);
  CHECK(EvalReport::parse(text).to_json() == text);
  std::istringstream csv(r.to_csv());
  std::string line;
  std::getline(csv, line);
  CHECK(line == "attack,norm,epsilon,num_steps,restarts,robust_acc");
  int rows = 0;
  while (std::getline(csv, line)) rows += !line.empty();
  CHECK(rows == 2);
}

TEST_CASE("zero-shot classifier uses the frozen table") {
  VitConfig c = fixture_model(16);
  c.head_mode = HeadMode::projection;
  c.embed_dim = 8;
  const auto params = init_vit_params<float>(c, 2);
  std::vector<std::string> keys;
  for (int i = 0; i < 10; ++i) keys.push_back("class " + std::to_string(i));
  const auto table = stub_text_embeddings(keys, 8, 1);
  const auto sum = table.checksum();
  const Classifier clf = zero_shot_classifier(c, params, table, keys, 0.07);
  const Dataset d = make_synthetic_dataset(fixture_data(20, 3));
  const EvalSet set = make_eval_set(d, -1, 0, 16);
  const auto logits = clf.logits(set.images);
  VitModel<float> m(c);
  BatchPass<float> pass;
  forward_batch(m, params, set.images, {}, pass);
  const std::vector<double> emb(pass.outputs.begin(), pass.outputs.end());
  const auto expect = zero_shot_logits(emb, set.images.n, table, keys, 0.07);
  for (std::size_t i = 0; i < expect.size(); ++i) CHECK(logits[i] == doctest::Approx(expect[i]).epsilon(1e-5));
  robust_accuracy(clf, set, linf(4.0 / 255), 1);
  CHECK(table.checksum() == sum);
}

TEST_CASE("model fingerprint") {
  const auto p = init_vit_params<float>(fixture_model(16), 1);
  auto q = p;
  q.values[5] += 1e-3f;
  CHECK(model_fingerprint(fixture_model(16), p) == model_fingerprint(fixture_model(16), p));
  CHECK(model_fingerprint(fixture_model(16), p) != model_fingerprint(fixture_model(16), q));
}
