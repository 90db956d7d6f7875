#include "advxl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "advxl/objectives.hpp"
#include "advxl/rng.hpp"

namespace advxl {

using nlohmann::ordered_json;

namespace {

ImageBatch<float> slice(const ImageBatch<float>& x, int start, int count) {
  ImageBatch<float> out(count, x.channels, x.height, x.width);
  const std::size_t s = x.sample_size();
  std::copy(x.data.begin() + static_cast<std::ptrdiff_t>(start * s),
            x.data.begin() + static_cast<std::ptrdiff_t>((start + count) * s), out.data.begin());
  return out;
}

int argmax_row(const std::vector<double>& logits, int row, int k) {
  const double* p = logits.data() + static_cast<std::size_t>(row) * k;
  return static_cast<int>(std::max_element(p, p + k) - p);
}

void check_input(const Classifier& clf, const ImageBatch<float>& x) {
  if (clf.input_resolution > 0 && (x.height != clf.input_resolution || x.width != clf.input_resolution))
    throw std::invalid_argument("classifier expects " + std::to_string(clf.input_resolution) + "px inputs, got " +
                                std::to_string(x.height) + "x" + std::to_string(x.width));
}

struct VitHandle {
  VitModel<float> model;
  ParamStore<float> params;
  Exec exec;
};

}  // namespace

Classifier vit_classifier(const VitConfig& config, const ParamStore<float>& params, Exec exec) {
  if (config.head_mode != HeadMode::classifier)
    throw std::invalid_argument("vit_classifier: model has a projection head; use zero_shot_classifier");
  auto h = std::make_shared<const VitHandle>(VitHandle{VitModel<float>(config), params, exec});
  Classifier c;
  c.num_classes = config.num_classes;
  c.input_resolution = config.image_size;
  c.logits = [h](const ImageBatch<float>& x) {
    BatchPass<float> pass;
    forward_batch<float>(h->model, h->params, x, {}, pass, h->exec);
    return std::vector<double>(pass.outputs.begin(), pass.outputs.end());
  };
  c.loss = [h](const ImageBatch<float>& x, std::span<const int> labels, ImageBatch<float>* grad) {
    BatchPass<float> pass;
    forward_batch<float>(h->model, h->params, x, {}, pass, h->exec);
    std::vector<float> dout(grad ? pass.outputs.size() : 0);
    const float loss = cross_entropy<float>(pass.outputs, pass.dim, labels, 0.0, dout);
    if (grad) backward_batch<float>(h->model, h->params, pass, dout, nullptr, grad, h->exec);
    return loss;
  };
  return c;
}

Classifier zero_shot_classifier(const VitConfig& config, const ParamStore<float>& params,
                                const TextEmbeddingTable& table, std::vector<std::string> class_keys,
                                double tau, Exec exec) {
  if (config.head_mode != HeadMode::projection)
    throw std::invalid_argument("zero_shot_classifier: model needs a projection head");
  if (config.embed_dim != table.dim())
    throw std::invalid_argument("zero_shot_classifier: embed_dim " + std::to_string(config.embed_dim) +
                                " does not match text dim " + std::to_string(table.dim()));
  if (class_keys.empty()) throw std::invalid_argument("zero_shot_classifier: no class keys");
  for (const auto& k : class_keys) table.row_id(k);
  auto h = std::make_shared<const VitHandle>(VitHandle{VitModel<float>(config), params, exec});
  auto keys = std::make_shared<const std::vector<std::string>>(std::move(class_keys));
  const TextEmbeddingTable* tbl = &table;
  const int k = static_cast<int>(keys->size());
  const int dim = table.dim();

  auto scores = [h, keys, tbl, tau](const BatchPass<float>& pass) {
    std::vector<double> emb(pass.outputs.begin(), pass.outputs.end());
    return zero_shot_logits(emb, pass.n, *tbl, *keys, tau);
  };
  Classifier c;
  c.num_classes = k;
  c.input_resolution = config.image_size;
  c.logits = [h, scores](const ImageBatch<float>& x) {
    BatchPass<float> pass;
    forward_batch<float>(h->model, h->params, x, {}, pass, h->exec);
    return scores(pass);
  };
  c.loss = [h, keys, tbl, tau, k, dim, scores](const ImageBatch<float>& x, std::span<const int> labels,
                                               ImageBatch<float>* grad) {
    BatchPass<float> pass;
    forward_batch<float>(h->model, h->params, x, {}, pass, h->exec);
    const std::vector<double> logits = scores(pass);
    std::vector<double> dlogits(grad ? logits.size() : 0);
    const double loss = cross_entropy<double>(logits, k, labels, 0.0, dlogits);
    if (grad) {
      std::vector<float> dout(pass.outputs.size(), 0.0f);
      for (int i = 0; i < pass.n; ++i)
        for (int d = 0; d < dim; ++d) {
          double acc = 0.0;
          for (int cl = 0; cl < k; ++cl)
            acc += dlogits[static_cast<std::size_t>(i) * k + cl] * tbl->row((*keys)[static_cast<std::size_t>(cl)])[d];
          dout[static_cast<std::size_t>(i) * dim + d] = static_cast<float>(acc / tau);
        }
      backward_batch<float>(h->model, h->params, pass, dout, nullptr, grad, h->exec);
    }
    return static_cast<float>(loss);
  };
  return c;
}

EvalSet make_eval_set(const Dataset& data, int count, std::uint64_t seed, int resolution) {
  EvalSet set;
  set.seed = seed;
  for (int i : data.subset(count, seed))
    if (data.class_of(i) >= 0) {
      set.indices.push_back(i);
      set.labels.push_back(data.class_of(i));
    }
  set.images = data.images(set.indices);
  if (resolution != data.resolution) set.images = resize_batch(set.images, resolution);
  return set;
}

std::vector<int> predict(const Classifier& clf, const ImageBatch<float>& x, int batch_size) {
  check_input(clf, x);
  std::vector<int> out(static_cast<std::size_t>(x.n));
  for (int start = 0; start < x.n; start += batch_size) {
    const int count = std::min(batch_size, x.n - start);
    const std::vector<double> logits = clf.logits(slice(x, start, count));
    for (int i = 0; i < count; ++i) out[static_cast<std::size_t>(start + i)] = argmax_row(logits, i, clf.num_classes);
  }
  return out;
}

namespace {

std::vector<char> clean_correct(const Classifier& clf, const EvalSet& set, int batch_size) {
  const std::vector<int> pred = predict(clf, set.images, batch_size);
  std::vector<char> ok(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) ok[i] = pred[i] == set.labels[i];
  return ok;
}

double fraction(const std::vector<char>& ok) {
  if (ok.empty()) return 0.0;
  return static_cast<double>(std::count(ok.begin(), ok.end(), 1)) / static_cast<double>(ok.size());
}

void attack_into(const Classifier& clf, const EvalSet& set, const PerturbationBudget& budget,
                 std::uint64_t seed, int restarts, int batch_size, std::vector<char>& ok) {
  budget.validate();
  if (restarts < 1) throw std::invalid_argument("robust_accuracy: restarts must be >= 1");
  check_input(clf, set.images);
  int batch_index = 0;
  for (int start = 0; start < set.images.n; start += batch_size, ++batch_index) {
    const int count = std::min(batch_size, set.images.n - start);
    const ImageBatch<float> x = slice(set.images, start, count);
    const std::span<const int> labels(set.labels.data() + start, static_cast<std::size_t>(count));
    const BatchLossFn<float> loss = [&](const ImageBatch<float>& in, ImageBatch<float>* grad) {
      return clf.loss(in, labels, grad);
    };
    for (int r = 0; r < restarts; ++r) {
      Rng rng(derive_seed(derive_seed(seed, static_cast<std::uint64_t>(batch_index)), static_cast<std::uint64_t>(r)));
      AttackOptions opts;
      opts.compute_final_loss = false;
      opts.batch_id = batch_index;
      const AttackResult<float> adv = pgd_attack<float>(loss, x, budget, rng, opts);
      const std::vector<double> logits = clf.logits(adv.adversarial_inputs);
      for (int i = 0; i < count; ++i)
        if (argmax_row(logits, i, clf.num_classes) != labels[static_cast<std::size_t>(i)])
          ok[static_cast<std::size_t>(start + i)] = 0;
    }
  }
}

}  // namespace

double clean_accuracy(const Classifier& clf, const EvalSet& set, int batch_size) {
  return fraction(clean_correct(clf, set, batch_size));
}

double robust_accuracy(const Classifier& clf, const EvalSet& set, const PerturbationBudget& budget,
                       std::uint64_t seed, int restarts, int batch_size) {
  std::vector<char> ok = clean_correct(clf, set, batch_size);
  attack_into(clf, set, budget, seed, restarts, batch_size, ok);
  return fraction(ok);
}

void AttackSuite::validate() const {
  if (attacks.empty()) throw std::invalid_argument("attack suite is empty");
  for (std::size_t i = 0; i < attacks.size(); ++i) {
    attacks[i].budget.validate();
    if (attacks[i].restarts < 1) throw std::invalid_argument("attack '" + attacks[i].name + "': restarts must be >= 1");
    for (std::size_t j = 0; j < i; ++j)
      if (attacks[j].name == attacks[i].name) throw std::invalid_argument("duplicate attack name '" + attacks[i].name + "'");
  }
}

std::string AttackSuite::standard_scaling_rule(int side) {
  char buf[256];
  const double f = side / 224.0;
  std::snprintf(buf, sizeof buf,
                "eval side %d: linf eps = 4/255 (per-pixel, unscaled); l2 eps = 2 * (%d/224) = %.6g; "
                "l1 eps = 75 * (%d/224)^2 = %.6g",
                side, side, 2.0 * f, side, 75.0 * f * f);
  return buf;
}

AttackSuite AttackSuite::standard_protocol(int side, int steps, int restarts) {
  if (side < 1 || steps < 1) throw std::invalid_argument("standard_protocol: side and steps must be >= 1");
  const double f = side / 224.0;
  const double l2 = 2.0 * f, l1 = 75.0 * f * f;
  AttackSuite s;
  s.attacks.push_back({"linf", {Norm::linf, 4.0 / 255.0, 1.0 / 255.0, steps, true}, restarts});
  s.attacks.push_back({"l2", {Norm::l2, l2, 2.5 * l2 / steps, steps, true}, restarts});
  s.attacks.push_back({"l1", {Norm::l1, l1, 2.5 * l1 / steps, steps, true}, restarts});
  s.scaling_rule = standard_scaling_rule(side);
  return s;
}

EvalReport multi_norm_report(const Classifier& clf, const EvalSet& set, const AttackSuite& suite,
                             const std::string& fingerprint, const ComputeLedger& ledger, int batch_size) {
  suite.validate();
  EvalReport r;
  const std::vector<char> clean = clean_correct(clf, set, batch_size);
  r.clean_acc = fraction(clean);
  r.samples_evaluated = set.images.n;
  r.subset_seed = set.seed;
  r.eval_resolution = set.images.height;
  r.fingerprint = fingerprint;
  r.scaling_rule = suite.scaling_rule;
  r.ledger = ledger;
  for (std::size_t a = 0; a < suite.attacks.size(); ++a) {
    const NamedAttack& at = suite.attacks[a];
    std::vector<char> ok = clean;
    attack_into(clf, set, at.budget, derive_seed(suite.seed, stable_hash(at.name)), at.restarts, batch_size, ok);
    r.robust.push_back({at.name, at.budget, at.restarts, fraction(ok)});
  }
  return r;
}

std::string EvalReport::to_json() const {
  ordered_json j;
  j["clean_acc"] = clean_acc;
  ordered_json rob = ordered_json::array();
  for (const auto& e : robust) {
    ordered_json x;
    x["name"] = e.name;
    x["norm"] = to_string(e.budget.norm);
    x["epsilon"] = e.budget.epsilon;
    x["step_size"] = e.budget.step_size;
    x["num_steps"] = e.budget.num_steps;
    x["random_init"] = e.budget.random_init;
    x["restarts"] = e.restarts;
    x["robust_acc"] = e.robust_acc;
    rob.push_back(x);
  }
  j["robust"] = rob;
  j["samples_evaluated"] = samples_evaluated;
  j["subset_seed"] = subset_seed;
  j["eval_resolution"] = eval_resolution;
  j["fingerprint"] = fingerprint;
  j["scaling_rule"] = scaling_rule;
  j["ledger"] = ledger_to_json(ledger);
  return j.dump(2) + "\n";
}

EvalReport EvalReport::parse(const std::string& text) {
  const auto j = ordered_json::parse(text);
  EvalReport r;
  r.clean_acc = j.at("clean_acc").get<double>();
  for (const auto& x : j.at("robust")) {
    RobustEntry e;
    e.name = x.at("name").get<std::string>();
    e.budget.norm = parse_norm(x.at("norm").get<std::string>());
    e.budget.epsilon = x.at("epsilon").get<double>();
    e.budget.step_size = x.at("step_size").get<double>();
    e.budget.num_steps = x.at("num_steps").get<int>();
    e.budget.random_init = x.at("random_init").get<bool>();
    e.restarts = x.at("restarts").get<int>();
    e.robust_acc = x.at("robust_acc").get<double>();
    r.robust.push_back(e);
  }
  r.samples_evaluated = j.at("samples_evaluated").get<int>();
  r.subset_seed = j.at("subset_seed").get<std::uint64_t>();
  r.eval_resolution = j.at("eval_resolution").get<int>();
  r.fingerprint = j.at("fingerprint").get<std::string>();
  r.scaling_rule = j.at("scaling_rule").get<std::string>();
  r.ledger = ledger_from_json(j.at("ledger"));
  return r;
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "attack,norm,epsilon,num_steps,restarts,robust_acc\n";
  char buf[160];
  for (const auto& e : robust) {
    std::snprintf(buf, sizeof buf, "%s,%s,%.9g,%d,%d,%.6f\n", e.name.c_str(), to_string(e.budget.norm).c_str(),
                  e.budget.epsilon, e.budget.num_steps, e.restarts, e.robust_acc);
    os << buf;
  }
  return os.str();
}

std::string model_fingerprint(const VitConfig& config, const ParamStore<float>& params) {
  std::ostringstream cfg;
  cfg << config.image_size << ',' << config.patch_size << ',' << config.channels << ',' << config.depth << ','
      << config.width << ',' << config.heads << ',' << config.mlp_ratio << ',' << to_string(config.head_mode) << ','
      << config.num_classes << ',' << config.embed_dim;
  std::uint64_t h = stable_hash(cfg.str());
  for (const auto& e : params.layout.entries()) h = derive_seed(h, stable_hash(e.name));
  const std::string_view bytes(reinterpret_cast<const char*>(params.values.data()),
                               params.values.size() * sizeof(float));
  h = derive_seed(h, stable_hash(bytes));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace advxl
