// promo_cli: pretrain / tune / evaluate / ablate / retention.
#include "cli_commands.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  using namespace promo::cli;
  CLI::App app{"Prompt tuning for cold-start items on a frozen sequential recommender"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  CommonOptions common;
  std::uint64_t seed = 0;
  std::string out;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "flat key = value config file")->required();
    sub->add_option("--seed", seed, "overrides the config seed");
    sub->add_option("--out", out, "output directory");
    sub->add_option("--set", common.overrides, "extra key=value overrides");
  };

  auto* pre = app.add_subcommand("pretrain", "train the backbone and write backbone.ckpt");
  add_common(pre);

  TuneOptions tune;
  auto* tun = app.add_subcommand("tune", "prompt-tune on a frozen backbone and write prompts.ckpt");
  add_common(tun);
  tun->add_option("--backbone", tune.backbone, "backbone checkpoint (default <out>/backbone.ckpt)");
  tun->add_option("--variant", tune.variant, "PROMO, PROMO_I, PROMO_F, PROMO_IF, PROMO_M or PROMO_T");

  EvaluateOptions eval;
  auto* ev = app.add_subcommand("evaluate", "write metrics.txt and histogram.txt for one regime");
  add_common(ev);
  ev->add_option("--regime", eval.regime, "a prompt variant, PRETRAIN or FINETUNE");
  ev->add_option("--backbone", eval.backbone, "backbone checkpoint (default <out>/backbone.ckpt)");
  ev->add_option("--prompts", eval.prompts, "prompt state (default <out>/prompts.ckpt)");

  AblateOptions ablate;
  auto* ab = app.add_subcommand("ablate", "run the regime matrix over the configured seeds");
  add_common(ab);
  ab->add_option("--regimes", ablate.regimes, "subset of regimes (default all)");

  RetentionCliOptions retention;
  auto* re = app.add_subcommand("retention", "PROMO vs fine-tune memory retention");
  add_common(re);
  re->add_option("--backbone", retention.backbone, "backbone checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kInvalidInput;
  }
  for (auto* sub : {pre, tun, ev, ab, re}) {
    if (!sub->parsed()) continue;
    if (sub->count("--seed")) common.seed = seed;
    if (sub->count("--out")) common.out = out;
  }
  if (pre->parsed()) return cmd_pretrain(common, std::cerr);
  if (tun->parsed()) return cmd_tune(common, tune, std::cerr);
  if (ev->parsed()) return cmd_evaluate(common, eval, std::cerr);
  if (ab->parsed()) return cmd_ablate(common, ablate, std::cerr);
  return cmd_retention(common, retention, std::cerr);
}
