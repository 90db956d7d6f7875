#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "advxl/cli.hpp"

using namespace advxl;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = ADVXL_FIXTURE_DIR;

std::string read(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

void write(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("advxl_test_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string tiny_config() { return read(kFixtures / "cli_tiny.yaml"); }

std::string replace(std::string s, const std::string& from, const std::string& to) {
  const auto at = s.find(from);
  REQUIRE(at != std::string::npos);
  return s.replace(at, from.size(), to);
}

int line_of(const std::string& text, const std::string& needle) {
  const auto at = text.find(needle);
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<long>(at), '\n'));
}

int train(const fs::path& cfg, const fs::path& out, std::int64_t stop = -1, bool resume = false,
          Exec exec = Exec::parallel) {
  TrainOptions o;
  o.config_path = cfg.string();
  o.out_dir = out.string();
  o.stop_after_steps = stop;
  o.resume = resume;
  o.exec = exec;
  std::ostringstream sink;
  return cmd_train(o, sink, sink);
}

}  // namespace

TEST_CASE("config errors name the field and line") {
  const std::string good = tiny_config();
  CHECK_NOTHROW(parse_run_config(good));

  const std::string bad_steps = replace(good, "steps: 2}", "steps: -2}");
  try {
    parse_run_config(bad_steps);
    FAIL("accepted negative steps");
  } catch (const ConfigError& e) {
    CHECK(e.field().rfind("stages[1].attack", 0) == 0);
    CHECK(e.line() == line_of(bad_steps, "steps: -2"));
  }
  const std::string typo = replace(good, "  width: 16", "  widht: 16");
  try {
    parse_run_config(typo);
    FAIL("accepted unknown key");
  } catch (const ConfigError& e) {
    CHECK(e.field().find("widht") != std::string::npos);
    CHECK(e.line() == line_of(typo, "widht"));
  }
  const std::string res = replace(good, "resolution: 8}", "resolution: 9}");
  CHECK_THROWS_AS(parse_run_config(res).validate(false), ConfigError);
  CHECK(parse_real("4/255") == doctest::Approx(4.0 / 255));
  CHECK(parse_real("2e-3") == doctest::Approx(2e-3));
  CHECK_THROWS(parse_real("four"));
}

TEST_CASE("missing dataset exits with the field name") {
  const fs::path dir = scratch("missing");
  const std::string cfg =
      replace(tiny_config(), "  synthetic_train: {count: 2048, seed: 1, classes: 10}", "  train_manifest: nowhere/manifest.jsonl");
  write(dir / "c.yaml", cfg);
  TrainOptions o;
  o.config_path = (dir / "c.yaml").string();
  o.out_dir = (dir / "out").string();
  std::ostringstream out, err;
  CHECK(cmd_train(o, out, err) == kExitConfig);
  CHECK(err.str().find("data.train_manifest") != std::string::npos);
  CHECK(err.str().find(":" + std::to_string(line_of(cfg, "train_manifest"))) != std::string::npos);

  write(dir / "none.yaml", replace(tiny_config(), "  synthetic_train: {count: 2048, seed: 1, classes: 10}\n", ""));
  o.config_path = (dir / "none.yaml").string();
  std::ostringstream err2;
  CHECK(cmd_train(o, out, err2) == kExitConfig);
  CHECK(err2.str().find("data.train_manifest") != std::string::npos);
}

TEST_CASE("flops reports the ViT-B/16 ratios") {
  const auto t = vitb16_compute_tables();
  REQUIRE(t.resolution.size() == 4);
  const double expect[] = {1.0, 0.51, 0.25, 0.18};
  for (int i = 0; i < 4; ++i) CHECK(std::abs(t.resolution[static_cast<std::size_t>(i)].ratio - expect[i]) <= 0.03);
  REQUIRE(t.attack_steps.size() == 3);
  CHECK(t.attack_steps[0].ratio == 1.0);
  CHECK(t.attack_steps[1].ratio == 1.5);
  CHECK(t.attack_steps[2].ratio == 2.0);
  CHECK((t.finetune_over_pretrain >= 0.5 && t.finetune_over_pretrain <= 1.3));

  const fs::path dir = scratch("flops");
  write(dir / "c.yaml", tiny_config());
  std::ostringstream out, err;
  CHECK(cmd_flops((dir / "c.yaml").string(), true, out, err) == kExitOk);
  CHECK(out.str().find("1.5000x") != std::string::npos);
  CHECK(out.str().find("32K@8 + 1.024K@16") != std::string::npos);

  std::string single = tiny_config();
  single = single.substr(0, single.find("  - name: ft")) + single.substr(single.find("\neval:") + 1);
  single = replace(single, "reduction: {strategy: resize, resolution: 8}", "reduction: {strategy: none}");
  single = replace(single, "steps: 1}", "steps: 2}");
  write(dir / "single.yaml", single);
  std::ostringstream o2;
  CHECK(cmd_flops((dir / "single.yaml").string(), false, o2, err) == kExitOk);
  CHECK(o2.str().find("ratio vs baseline: total 1.0000x") != std::string::npos);
}

TEST_CASE("train, resume and evaluate") {
  // one reference run shared by every subcase
  static const fs::path dir = [] {
    const fs::path d = scratch("train");
    write(d / "c.yaml", tiny_config());
    return d;
  }();
  static const int full_status = train(dir / "c.yaml", dir / "full");
  REQUIRE(full_status == kExitOk);
  for (const char* f : {"config.yaml", "steps.jsonl", "final.ckpt", "eval_report.json", "eval_curve.csv",
                        "eval_stage0_pre.json", "checkpoints/latest.ckpt"})
    CHECK(fs::exists(dir / "full" / f));
  CHECK(read(dir / "full" / "config.yaml") == tiny_config());
  const std::string log = read(dir / "full" / "steps.jsonl");
  CHECK(std::count(log.begin(), log.end(), '\n') == 1000 + 32);

  SUBCASE("identical seeds give identical logs") {
    REQUIRE(train(dir / "c.yaml", dir / "again", -1, false, Exec::serial) == kExitOk);
    CHECK(read(dir / "again" / "steps.jsonl") == log);
    CHECK(read(dir / "again" / "eval_report.json") == read(dir / "full" / "eval_report.json"));
  }
  SUBCASE("kill and resume matches the uninterrupted run") {
    CHECK(train(dir / "c.yaml", dir / "cut", 9) == kExitOk);
    CHECK(train(dir / "c.yaml", dir / "cut", 130) == kExitOk);  // resume not requested: starts over
    CHECK(train(dir / "c.yaml", dir / "cut", 200, true) == kExitOk);
    REQUIRE(train(dir / "c.yaml", dir / "cut", -1, true) == kExitOk);
    CHECK(read(dir / "cut" / "steps.jsonl") == log);
    CHECK(read(dir / "cut" / "final.ckpt") == read(dir / "full" / "final.ckpt"));
    CHECK(read(dir / "cut" / "eval_report.json") == read(dir / "full" / "eval_report.json"));
  }
  SUBCASE("resume refuses a different config") {
    CHECK(train(dir / "c.yaml", dir / "other", 130) == kExitOk);
    write(dir / "d.yaml", replace(tiny_config(), "seed: 3", "seed: 4"));
    CHECK(train(dir / "d.yaml", dir / "other", -1, true) == kExitConfig);
  }
  SUBCASE("evaluating twice is byte-identical") {
    EvalOptions e;
    e.checkpoint_path = (dir / "full" / "final.ckpt").string();
    e.config_path = (dir / "c.yaml").string();
    std::ostringstream out, err;
    e.out_path = (dir / "e1.json").string();
    REQUIRE(cmd_eval(e, out, err) == kExitOk);
    e.out_path = (dir / "e2.json").string();
    e.exec = Exec::serial;
    REQUIRE(cmd_eval(e, out, err) == kExitOk);
    CHECK(read(dir / "e1.json") == read(dir / "e2.json"));
    const EvalReport r = EvalReport::parse(read(dir / "e1.json"));
    CHECK(r.robust.size() == 3);
    CHECK(r.scaling_rule.find("16/224") != std::string::npos);
    CHECK(r.ledger.stages.size() == 2);
    for (const auto& a : r.robust) CHECK(a.robust_acc <= r.clean_acc + 0.01);
  }
  SUBCASE("zero-radius suite reports robust equal to clean") {
    std::string cfg = tiny_config();
    cfg = cfg.substr(0, cfg.find("\neval:") + 1) +
          "eval:\n  protocol: custom\n  subset: 100\n  attacks:\n"
          "    - {name: zero, norm: linf, epsilon: 0, step_size: 1/255, steps: 5}\n";
    write(dir / "zero.yaml", cfg);
    EvalOptions e;
    e.checkpoint_path = (dir / "full" / "final.ckpt").string();
    e.config_path = (dir / "zero.yaml").string();
    e.out_path = (dir / "zero.json").string();
    std::ostringstream out, err;
    REQUIRE(cmd_eval(e, out, err) == kExitOk);
    const EvalReport r = EvalReport::parse(read(dir / "zero.json"));
    CHECK(r.robust[0].robust_acc == r.clean_acc);
  }
  SUBCASE("shape mismatch") {
    write(dir / "wide.yaml", replace(tiny_config(), "  width: 16", "  width: 24"));
    EvalOptions e;
    e.checkpoint_path = (dir / "full" / "final.ckpt").string();
    e.config_path = (dir / "wide.yaml").string();
    std::ostringstream out, err;
    CHECK(cmd_eval(e, out, err) == kExitShape);
    e.checkpoint_path = (dir / "absent.ckpt").string();
    CHECK(cmd_eval(e, out, err) != kExitOk);
  }
  SUBCASE("end-to-end golden") {
    const fs::path golden = kFixtures / "cli_tiny_report.json";
    const EvalReport r = EvalReport::parse(read(dir / "full" / "eval_report.json"));
    if (std::getenv("ADVXL_REGENERATE_FIXTURE")) write(golden, read(dir / "full" / "eval_report.json"));
    const EvalReport g = EvalReport::parse(read(golden));
    CHECK(r.clean_acc == doctest::Approx(g.clean_acc).epsilon(1e-12));
    CHECK(r.ledger == g.ledger);
    REQUIRE(r.robust.size() == g.robust.size());
    for (std::size_t i = 0; i < r.robust.size(); ++i) CHECK(std::abs(r.robust[i].robust_acc - g.robust[i].robust_acc) <= 0.02);
  }
}

TEST_CASE("embed-text builds a frozen table") {
  const fs::path dir = scratch("embed");
  write(dir / "caps.txt", "a photo of a cat\na photo of a dog\n");
  EmbedTextOptions o;
  o.captions_path = (dir / "caps.txt").string();
  o.dim = 8;
  o.out_path = (dir / "t.teb").string();
  std::ostringstream out, err;
  REQUIRE(cmd_embed_text(o, out, err) == kExitOk);
  const auto t = TextEmbeddingTable::load(o.out_path);
  CHECK(t.size() == 2);
  CHECK(t.dim() == 8);

  write(dir / "ext.tsv", "cat\t3 0 4\ndog\t0 2 0\n");
  EmbedTextOptions x;
  x.external_path = (dir / "ext.tsv").string();
  x.out_path = (dir / "x.teb").string();
  REQUIRE(cmd_embed_text(x, out, err) == kExitOk);
  const auto e = TextEmbeddingTable::load(x.out_path);
  CHECK(e.row("cat")[0] == doctest::Approx(0.6));
  CHECK(e.row("dog")[1] == doctest::Approx(1.0));

  write(dir / "dup.txt", "same\nsame\n");
  o.captions_path = (dir / "dup.txt").string();
  CHECK(cmd_embed_text(o, out, err) != kExitOk);
}
