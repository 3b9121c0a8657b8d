#include <filesystem>
#include <fstream>
#include <ostream>

#include <json.hpp>

#include "mshed/errors.hpp"
#include "mshed/harness.hpp"

namespace mshed::harness {

namespace fs = std::filesystem;

namespace {

std::string path_in(const RunConfig& cfg, const std::string& name) { return (fs::path(cfg.out) / name).string(); }

std::string checkpoint_path(const RunConfig& cfg) {
  return cfg.model.checkpoint.empty() ? path_in(cfg, "model.ckpt") : cfg.model.checkpoint;
}

struct EvalRow {
  std::string checkpoint;
  double ppl;
};

void write_eval_csv(const std::string& path, const DataSection& data, std::span<const EvalRow> rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "checkpoint,split,sequences,length,ppl\n";
  out.precision(17);
  for (const auto& r : rows) {
    out << r.checkpoint << ",validation," << data.validation_count << ',' << data.validation_length << ',' << r.ppl << '\n';
  }
}

std::string metadata(const RunConfig& cfg, double ppl) {
  nlohmann::ordered_json j;
  j["command"] = cfg.command;
  j["seed"] = cfg.seed;
  j["validation_ppl"] = ppl;
  return j.dump();
}

void cmd_train(const RunConfig& cfg, std::ostream& log) {
  const auto corpus = cfg.data.load_corpus();
  model::Model m = model::Model::build(cfg.model.descriptor(), cfg.seed);
  training::TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  log << "train: " << m.dense_param_count() << " parameters, " << tc.steps << " steps\n";
  const auto result = training::train(m, corpus, tc);
  training::write_loss_csv(path_in(cfg, "loss.csv"), result);
  const double ppl = training::perplexity(m, cfg.data.validation(corpus));
  const auto ckpt = path_in(cfg, "model.ckpt");
  model::save_checkpoint(m, ckpt, metadata(cfg, ppl));
  const EvalRow row{ckpt, ppl};
  write_eval_csv(path_in(cfg, "eval.csv"), cfg.data, std::span(&row, 1));
  log.precision(17);
  log << "train: validation PPL " << ppl << ", checkpoint " << ckpt << '\n';
}

void cmd_eval(const RunConfig& cfg, std::ostream& log) {
  const auto corpus = cfg.data.load_corpus();
  const auto ckpt = checkpoint_path(cfg);
  const model::Model m = model::load_checkpoint(ckpt);
  const double ppl = training::perplexity(m, cfg.data.validation(corpus));
  const EvalRow row{ckpt, ppl};
  write_eval_csv(path_in(cfg, "eval.csv"), cfg.data, std::span(&row, 1));
  log.precision(17);
  log << "eval: validation PPL " << ppl << '\n';
}

void cmd_prune(const RunConfig& cfg, std::ostream& log) {
  const auto corpus = cfg.data.load_corpus();
  const auto ckpt = checkpoint_path(cfg);
  const model::Model dense = model::load_checkpoint(ckpt);
  const auto schedule = shedder::Schedule::parse(cfg.prune.schedule);
  const auto cal = cfg.data.calibration(corpus);
  model::Model m = dense.clone();
  std::vector<shedder::ImportanceRecord> trace;
  const auto plan = shedder::run_schedule(m, schedule, cal, {cfg.threads}, &trace);
  shedder::write_plan(path_in(cfg, "plan.jsonl"), plan, schedule);
  if (cfg.emit_trace || cfg.plan_only) shedder::write_trace(path_in(cfg, "trace.jsonl"), trace);
  log.precision(17);
  log << "prune: " << plan.actions.size() << " actions" << (plan.truncated ? " (truncated)" : "") << ", ratio "
      << m.prune_ratio() << '\n';
  if (cfg.plan_only) return;

  const auto eval = cfg.data.validation(corpus);
  const model::Model pruned = m.compact();
  const auto out = path_in(cfg, "pruned.ckpt");
  const double ppl_dense = training::perplexity(dense, eval);
  const double ppl_pruned = training::perplexity(pruned, eval);
  model::save_checkpoint(pruned, out, metadata(cfg, ppl_pruned));
  std::vector<EvalRow> rows{{ckpt, ppl_dense}, {out, ppl_pruned}};
  if (cfg.prune.recovery_steps > 0) {
    model::Model tuned = pruned.clone();
    training::TrainConfig tc = cfg.train;
    tc.steps = cfg.prune.recovery_steps;
    tc.seed = cfg.seed;
    const auto r = training::recovery_tune(tuned, corpus, tc, eval);
    training::write_loss_csv(path_in(cfg, "recovery_loss.csv"), r.run);
    const auto rec = path_in(cfg, "recovered.ckpt");
    model::save_checkpoint(tuned, rec, metadata(cfg, r.ppl_after));
    rows.push_back({rec, r.ppl_after});
    log << "prune: recovery tuning " << r.ppl_before << " -> " << r.ppl_after << '\n';
  }
  write_eval_csv(path_in(cfg, "eval.csv"), cfg.data, rows);
  log << "prune: validation PPL " << ppl_dense << " -> " << ppl_pruned << '\n';
}

void cmd_bench(const RunConfig& cfg, std::ostream& log) {
  const auto corpus = cfg.data.load_corpus();
  const model::Model dense = model::load_checkpoint(checkpoint_path(cfg));
  model::Model pruned = dense.clone();
  std::string plan = cfg.bench.plan;
  if (plan.empty() && fs::exists(path_in(cfg, "plan.jsonl"))) plan = path_in(cfg, "plan.jsonl");
  if (!plan.empty()) shedder::replay(pruned, shedder::read_plan(plan));
  const auto r = bench(dense, pruned, corpus, cfg.bench);
  write_bench_csv(path_in(cfg, "bench.csv"), r.samples);
  write_bench_json(path_in(cfg, "bench.json"), r);
  log << "bench: " << r.plan_summary << "; prefill " << r.prefill_speedup << "x, decode " << r.decode_speedup << "x"
      << (r.unstable ? " (UNSTABLE timings)" : "") << '\n';
}

void cmd_report(const RunConfig& cfg, std::ostream& log) {
  const auto s = report(cfg.out);
  auto show = [&](const char* what, std::int64_t n) {
    if (n >= 0) log << "report: " << what << ' ' << n << '\n';
  };
  show("plan actions", s.plan_actions);
  show("trace records", s.trace_records);
  show("bench samples", s.bench_samples);
  show("curve points", s.curve_points);
  show("loss points", s.loss_points);
  if (s.bench_samples >= 0) log << "report: prefill " << s.prefill_speedup << "x, decode " << s.decode_speedup << "x\n";
}

void cmd_study(const RunConfig& cfg, std::ostream& log) {
  const auto corpus = cfg.data.load_corpus();
  const auto r = study_sensitivity(corpus, cfg.study, cfg.data, cfg.seed, cfg.threads, &log);
  write_curves_csv(path_in(cfg, "curves.csv"), r.points);
  std::ofstream out(path_in(cfg, "study.json"));
  if (!out) throw IoError("cannot write study.json");
  out << r.to_json() << '\n';
  log << "study: ordering " << (r.ordering_reproduced ? "reproduced" : "not reproduced") << " (" << r.seconds << " s)\n";
}

}  // namespace

void run(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  fs::create_directories(cfg.out);
  {
    std::ofstream out(path_in(cfg, "config.ini"));
    if (!out) throw IoError("cannot write config into '" + cfg.out + "'");
    out << cfg.to_text();
  }
  if (cfg.command == "train") {
    cmd_train(cfg, log);
  } else if (cfg.command == "eval") {
    cmd_eval(cfg, log);
  } else if (cfg.command == "prune") {
    cmd_prune(cfg, log);
  } else if (cfg.command == "bench") {
    cmd_bench(cfg, log);
  } else if (cfg.command == "report") {
    cmd_report(cfg, log);
  } else if (cfg.command == "study-sensitivity") {
    cmd_study(cfg, log);
  } else {
    throw ConfigError("unknown command '" + cfg.command + "'");
  }
}

}  // namespace mshed::harness
