#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "advxl/cli.hpp"

int main(int argc, char** argv) {
  using namespace advxl;
  CLI::App app{"advxl: two-stage adversarial training of a miniature ViT"};
  app.require_subcommand(1);
  bool serial = false;
  app.add_flag("--serial", serial, "run kernels on one thread (reference path)");

  TrainOptions train;
  std::uint64_t train_seed = 0;
  auto* t = app.add_subcommand("train", "run every stage of a config, then evaluate");
  t->add_option("--config", train.config_path, "run config (YAML)")->required()->check(CLI::ExistingFile);
  t->add_flag("--resume", train.resume, "continue from <out>/checkpoints/latest.ckpt");
  auto* tseed = t->add_option("--seed", train_seed, "override the master seed");
  t->add_option("--out", train.out_dir, "output directory (default: config output_dir)");
  t->add_option("--stop-after-steps", train.stop_after_steps, "exit after N steps, as if interrupted");
  t->add_option("--log-every", train.log_every_steps, "progress line cadence in steps");

  EvalOptions eval;
  std::uint64_t eval_seed = 0;
  auto* e = app.add_subcommand("eval", "clean and multi-norm robust accuracy of a checkpoint");
  e->add_option("checkpoint", eval.checkpoint_path, "checkpoint file")->required()->check(CLI::ExistingFile);
  e->add_option("--config", eval.config_path, "run config providing data and the attack suite")
      ->required()
      ->check(CLI::ExistingFile);
  e->add_option("--out", eval.out_path, "report path (JSON; a CSV is written alongside)");
  auto* eseed = e->add_option("--seed", eval_seed, "override the evaluation seed");
  e->add_flag("--standard-protocol", eval.standard_protocol, "linf 4/255, l2 2*(s/224), l1 75*(s/224)^2 at eval side s");
  e->add_option("--restarts", eval.restarts, "restarts per attack (3 gives the 'strong' report)");
  e->add_option("--subset", eval.subset, "number of evaluation samples");

  std::string flops_config;
  bool vitb16_tables = false;
  auto* f = app.add_subcommand("flops", "compute estimate of a config's stage list");
  f->add_option("--config", flops_config, "run config")->required()->check(CLI::ExistingFile);
  f->add_flag("--vitb16-tables", vitb16_tables, "also print the ViT-B/16 compute ratios");

  EmbedTextOptions embed;
  auto* x = app.add_subcommand("embed-text", "build a TEB1 text-embedding cache");
  x->add_option("--captions", embed.captions_path, "caption list, one per line (stub provider)");
  x->add_option("--external", embed.external_path, "external embeddings: key<TAB>v1 v2 ... per line");
  x->add_option("--dim", embed.dim, "stub embedding width");
  x->add_option("--seed", embed.seed, "stub master seed");
  x->add_option("--out", embed.out_path, "output .teb file")->required();

  SynthConfig synth;
  std::string data_out;
  bool captions = false;
  auto* d = app.add_subcommand("make-data", "write a procedural desk-scale dataset (PPM + manifest)");
  d->add_option("--out", data_out, "output directory")->required();
  d->add_option("--count", synth.count, "number of images");
  d->add_option("--classes", synth.num_classes, "number of classes");
  d->add_option("--resolution", synth.resolution, "image side");
  d->add_option("--seed", synth.seed, "sample seed");
  d->add_option("--task-seed", synth.task_seed, "class-template seed (keep equal across splits)");
  d->add_flag("--captioned", synth.captioned, "caption keys instead of labels");
  d->add_flag("--write-captions", captions, "also write captions.txt for embed-text");

  CLI11_PARSE(app, argc, argv);
  const Exec exec = serial ? Exec::serial : Exec::parallel;

  if (*t) {
    if (*tseed) train.seed = train_seed;
    train.exec = exec;
    return cmd_train(train, std::cout, std::cerr);
  }
  if (*e) {
    if (*eseed) eval.seed = eval_seed;
    eval.exec = exec;
    return cmd_eval(eval, std::cout, std::cerr);
  }
  if (*f) return cmd_flops(flops_config, vitb16_tables, std::cout, std::cerr);
  if (*x) return cmd_embed_text(embed, std::cout, std::cerr);
  if (*d) return cmd_make_data(synth, data_out, captions, std::cout, std::cerr);
  return kExitUsage;
}
