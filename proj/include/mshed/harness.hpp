#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mshed/model.hpp"
#include "mshed/shedder.hpp"
#include "mshed/training.hpp"

namespace mshed::harness {

// ---- configuration -------------------------------------------------------

struct ModelSection {
  std::string arch = "mamba1";  // mamba1 | mamba2 | transformer | hybrid
  std::int64_t n_blocks = 12;
  std::int64_t d_model = 64;
  std::int64_t d_inner = 128;
  std::int64_t ssm_state = 16;
  std::int64_t conv_width = 4;
  std::int64_t n_heads = 4;
  std::int64_t mlp_width = 256;
  std::vector<std::int64_t> transformer_positions;  // hybrid only
  std::string checkpoint;                           // input checkpoint for prune/eval/bench

  model::ArchDescriptor descriptor() const;
};

struct DataSection {
  std::string corpus;  // empty: bundled corpus
  std::int64_t calibration_count = 16;
  std::int64_t calibration_length = 256;
  std::int64_t validation_count = 16;
  std::int64_t validation_length = 256;

  training::Corpus load_corpus() const;
  shedder::CalibrationSet calibration(const training::Corpus& corpus) const;
  std::vector<training::TokenSeq> validation(const training::Corpus& corpus) const;
};

struct PruneSection {
  std::string schedule = "mamba_block:3";
  std::int64_t recovery_steps = 0;
};

struct BenchConfig {
  std::int64_t batches = 10;
  std::int64_t prompt_length = 512;
  std::int64_t new_tokens = 16;
  std::int64_t warmup = 2;
  std::int64_t eval_count = 4;
  double instability_threshold = 0.25;  // coefficient of variation of batch times
  std::string plan;                     // plan.jsonl applied to the dense model; empty: dense vs dense
};

struct StudyConfig {
  std::int64_t n_blocks = 8;
  std::int64_t d_model = 64;
  std::int64_t d_inner = 128;
  std::int64_t ssm_state = 16;
  std::int64_t block_steps = 6;
  std::int64_t ssm_steps = 6;
  training::TrainConfig train = default_train();  // seed is overwritten by the run seed

  static training::TrainConfig default_train() {
    training::TrainConfig t;
    t.steps = 300;
    t.warmup = 30;
    return t;
  }
};

// Flat INI text with one section per concern:
// [run] [model] [data] [train] [prune] [bench] [study].
// Unknown sections and keys are errors.
struct RunConfig {
  std::string command;
  std::uint64_t seed = 0;
  std::string out = "run";
  int threads = 1;
  bool emit_trace = false;
  bool plan_only = false;
  ModelSection model;
  DataSection data;
  training::TrainConfig train;
  PruneSection prune;
  BenchConfig bench;
  StudyConfig study;

  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::string& path);
  std::string to_text() const;
  void validate() const;  // throws ConfigError
};

// ---- benchmark -----------------------------------------------------------

struct BenchSample {
  std::string model;  // dense | pruned
  std::int64_t batch = 0;
  std::string phase;  // prefill | decode
  std::int64_t tokens = 0;
  double seconds = 0.0;

  bool operator==(const BenchSample&) const = default;
};

struct PhaseStats {
  double median_seconds = 0.0;
  double tokens_per_second = 0.0;  // tokens / median seconds
  double cv = 0.0;                 // stddev / mean of batch seconds
};

struct BenchReport {
  std::vector<BenchSample> samples;  // warm-up batches excluded
  PhaseStats dense_prefill, dense_decode, pruned_prefill, pruned_decode;
  double prefill_speedup = 0.0;
  double decode_speedup = 0.0;
  bool unstable = false;
  double max_logit_diff = 0.0;  // compacted vs overlay logits
  double ppl_dense = 0.0;
  double ppl_pruned = 0.0;
  std::string plan_summary;
  double prune_ratio = 0.0;
};

// Derives every statistic of a report from its raw samples.
BenchReport summarize(std::vector<BenchSample> samples, double instability_threshold);

// Times prefill and token-by-token decode of the dense model against the
// physically compacted form of `pruned`. Throws ContractError if the compacted
// logits differ from the overlay logits by more than 1e-6.
BenchReport bench(const model::Model& dense, const model::Model& pruned, const training::Corpus& corpus,
                  const BenchConfig& cfg);

void write_bench_csv(const std::string& path, std::span<const BenchSample> samples);
std::vector<BenchSample> read_bench_csv(const std::string& path);
void write_bench_json(const std::string& path, const BenchReport& r);

// ---- sensitivity study ---------------------------------------------------

struct CurvePoint {
  std::string arch;
  model::StructureKind kind = model::StructureKind::mamba_block;
  std::int64_t steps = 0;
  double ppl = 0.0;    // validation PPL after `steps` removals
  double ratio = 0.0;  // prune ratio after `steps` removals

  bool operator==(const CurvePoint&) const = default;
};

struct StudyReport {
  std::vector<CurvePoint> points;
  std::vector<shedder::PrunePlan> plans;  // mamba1 blocks, mamba1 ssm, mamba2 blocks, mamba2 ssm
  double dense_ppl_mamba1 = 0.0;
  double dense_ppl_mamba2 = 0.0;
  // Mean relative degradation (ppl_t / ppl_0) over t >= 1 for each curve.
  double block_degradation_mamba1 = 0.0, block_degradation_mamba2 = 0.0;
  double ssm_degradation_mamba1 = 0.0, ssm_degradation_mamba2 = 0.0;
  bool mamba1_tolerates_blocks = false;  // lower block degradation than mamba2
  bool mamba2_tolerates_ssm = false;     // lower SSM degradation than mamba1
  bool ordering_reproduced = false;
  double seconds = 0.0;

  std::string to_json() const;
};

StudyReport study_sensitivity(const training::Corpus& corpus, const StudyConfig& cfg, const DataSection& data,
                              std::uint64_t seed, int threads, std::ostream* log = nullptr);

void write_curves_csv(const std::string& path, std::span<const CurvePoint> points);
std::vector<CurvePoint> read_curves_csv(const std::string& path);

// ---- reports -------------------------------------------------------------

void write_trace_csv(const std::string& path, std::span<const shedder::ImportanceRecord> trace);
std::vector<shedder::ImportanceRecord> read_trace_csv(const std::string& path);

struct RunSummary {
  std::int64_t plan_actions = -1;  // -1 when the artifact is absent
  std::int64_t trace_records = -1;
  std::int64_t bench_samples = -1;
  std::int64_t curve_points = -1;
  std::int64_t loss_points = -1;
  double decode_speedup = 0.0;
  double prefill_speedup = 0.0;
};

// Reads every artifact present in a run directory, writes report.csv from
// the trace and returns what was found.
RunSummary report(const std::string& run_dir);

// ---- command dispatch ----------------------------------------------------

// Executes cfg.command. Writes the resolved config next to the outputs.
void run(const RunConfig& cfg, std::ostream& log);

}  // namespace mshed::harness
