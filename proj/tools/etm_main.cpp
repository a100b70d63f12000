#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "etm/cli/commands.hpp"

using namespace etm;

int main(int argc, char** argv) {
  CLI::App app{"Sequential adaptation of a segmentation network to unlabelled domains, with target-specific memories"};
  app.require_subcommand(1);

  cli::GenerateOptions gen;
  std::optional<std::uint64_t> gen_seed;
  auto* g = app.add_subcommand("generate", "render the synthetic domains as directory datasets");
  g->add_option("--config", gen.config, "experiment config (JSON)")->required();
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--seed", gen_seed, "data seed (overrides the config)");

  cli::TrainOptions train;
  std::optional<std::uint64_t> train_seed;
  auto* t = app.add_subcommand("train", "source training, then continual adaptation over the targets");
  t->add_option("--config", train.config, "experiment config (JSON)")->required();
  t->add_option("--data", train.data, "directory written by generate")->required();
  t->add_option("--out", train.out, "run directory (checkpoint, metrics.log, history.csv)")->required();
  t->add_option("--seed", train_seed, "training seed (overrides the config)");
  t->add_option("--threads", train.eval_threads, "evaluation threads (0: all cores)");

  cli::EvalOptions eval;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint on one domain's validation split");
  e->add_option("bundle", eval.bundle, "checkpoint directory")->required();
  e->add_option("--data", eval.data, "directory written by generate")->required();
  e->add_option("--domain", eval.domain, "domain name")->required();
  e->add_option("--emit-maps", eval.emit_maps, "write predicted maps as indexed PNGs here");
  e->add_option("--threads", eval.threads, "evaluation threads (0: all cores)");

  cli::ReportOptions report;
  std::string format = "text";
  auto* r = app.add_subcommand("report", "tables (and charts) from history CSV files");
  r->add_option("histories", report.histories, "history.csv files")->required();
  r->add_option("--format", format, "text or csv")->check(CLI::IsMember({"text", "csv"}));
  r->add_option("--plot", report.plot, "write mIoU-vs-checkpoint charts here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : cli::kConfigError;
  }

  if (*g) {
    gen.seed = gen_seed;
    return cli::cmd_generate(gen, std::cout, std::cerr);
  }
  if (*t) {
    train.seed = train_seed;
    return cli::cmd_train(train, std::cout, std::cerr);
  }
  if (*e) return cli::cmd_eval(eval, std::cout, std::cerr);
  report.format = metrics::parse_table_format(format);
  return cli::cmd_report(report, std::cout, std::cerr);
}
