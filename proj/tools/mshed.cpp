#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "mshed/errors.hpp"
#include "mshed/harness.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Selective state-space language models and structured pruning"};
  std::string config_path, out;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  bool emit_trace = false, plan_only = false;
  app.add_option("--config", config_path, "INI run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Seed for initialization, batch sampling and calibration");
  app.add_option("--out", out, "Output directory");
  app.add_flag("--emit-trace", emit_trace, "Write trace.jsonl with every candidate score");
  app.add_flag("--plan-only", plan_only, "Search and write the plan without exporting a pruned model");
  app.add_option("--threads", threads, "Scoring threads for prune and study-sensitivity")->check(CLI::PositiveNumber);
  app.require_subcommand(1, 1);
  app.add_subcommand("train", "Train a model from scratch")->fallthrough();
  app.add_subcommand("prune", "Search a pruning plan and export the pruned model")->fallthrough();
  app.add_subcommand("eval", "Validation perplexity of a checkpoint")->fallthrough();
  app.add_subcommand("bench", "Prefill and decode throughput, dense versus pruned")->fallthrough();
  app.add_subcommand("report", "Check the artifacts of a run and write report.csv")->fallthrough();
  app.add_subcommand("study-sensitivity", "Block and SSM pruning curves for Mamba-1 and Mamba-2")->fallthrough();
  CLI11_PARSE(app, argc, argv);

  try {
    auto cfg = config_path.empty() ? mshed::harness::RunConfig{} : mshed::harness::RunConfig::load(config_path);
    cfg.command = app.get_subcommands().front()->get_name();
    if (seed) cfg.seed = *seed;
    if (!out.empty()) cfg.out = out;
    if (threads) cfg.threads = *threads;
    cfg.emit_trace |= emit_trace;
    cfg.plan_only |= plan_only;
    mshed::harness::run(cfg, std::cout);
  } catch (const mshed::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const mshed::IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return 3;
  } catch (const mshed::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
