#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mshed/model.hpp"
#include "mshed/training.hpp"

namespace mshed::shedder {

using model::StructureId;
using model::StructureKind;

struct CalibrationSet {
  std::vector<training::TokenSeq> sequences;

  static CalibrationSet from_corpus(const training::Corpus& corpus, std::int64_t count = 256,
                                    std::int64_t length = 256);
};

inline constexpr double kDisqualified = std::numeric_limits<double>::infinity();

// One candidate: a structure to bypass, or for channel groups the block whose
// MLP loses its trailing `group` channels.
struct Candidate {
  StructureKind kind = StructureKind::mamba_block;
  std::int64_t block_index = 0;
  std::int64_t group = 0;

  bool operator==(const Candidate&) const = default;
};

// Deterministic order: lowest block index first, then structure kind order.
bool candidate_before(const Candidate& a, const Candidate& b);

struct ImportanceRecord {
  std::int64_t stage = 0;
  std::int64_t iteration = 0;  // global across stages
  Candidate candidate;
  double score = 0.0;  // calibration PPL with the candidate removed
  bool selected = false;

  bool operator==(const ImportanceRecord&) const = default;
};

struct PruneAction {
  std::int64_t stage = 0;
  std::int64_t iteration = 0;
  Candidate target;
  double score = 0.0;

  bool operator==(const PruneAction&) const = default;
};

struct PrunePlan {
  std::vector<PruneAction> actions;
  bool truncated = false;

  bool operator==(const PrunePlan&) const = default;
};

// A stage lists the kinds that compete jointly in each of its `steps`
// iterations; `group` is the channel group size for mlp_channel.
struct Stage {
  std::vector<StructureKind> kinds;
  std::int64_t steps = 1;
  std::int64_t group = 0;

  bool operator==(const Stage&) const = default;
};

// Stages run in order. Text form: "mamba_block&mlp&mha:4 + mlp_channel:20:16 + ssm:6".
struct Schedule {
  std::vector<Stage> stages;

  static Schedule parse(std::string_view text);
  std::string to_string() const;
  // Throws ValidationError if a stage targets a kind the model does not have.
  void validate(const model::Model& m) const;

  bool operator==(const Schedule&) const = default;
};

struct ScoringOptions {
  int threads = 1;
};

// Calibration perplexity under an arbitrary prune state.
double calibration_ppl(const model::Model& m, const model::PruneState& state, const CalibrationSet& cal);
double calibration_ppl(const model::Model& m, const CalibrationSet& cal);

// Overlay that applies `c` on top of `state` without touching weights.
model::PruneState apply_overlay(const model::Model& m, model::PruneState state, const Candidate& c);

// Score of one candidate: PPL with it removed. Non-finite → kDisqualified.
// Throws StateError when the candidate is not alive / has too few channels.
double importance(const model::Model& m, const Candidate& c, const CalibrationSet& cal);

// Every live candidate of the given kinds, in deterministic order.
std::vector<Candidate> candidates(const model::Model& m, std::span<const StructureKind> kinds, std::int64_t group);

// Scores every candidate (optionally on several threads); results are in
// candidate order regardless of thread count.
std::vector<double> score_candidates(const model::Model& m, std::span<const Candidate> cands,
                                     const CalibrationSet& cal, const ScoringOptions& opts = {});

// Applies an action physically (remove or slice).
void apply(model::Model& m, const Candidate& c);

// Greedy iterations over one stage.
PrunePlan prune_blocks(model::Model& m, std::span<const StructureKind> kinds, std::int64_t steps,
                       const CalibrationSet& cal, std::int64_t group = 0, const ScoringOptions& opts = {},
                       std::vector<ImportanceRecord>* trace = nullptr, std::int64_t stage = 0,
                       std::int64_t first_iteration = 0);

PrunePlan run_schedule(model::Model& m, const Schedule& schedule, const CalibrationSet& cal,
                       const ScoringOptions& opts = {}, std::vector<ImportanceRecord>* trace = nullptr);

// Applies a plan to a model (typically a fresh copy of the one it came from).
void replay(model::Model& m, const PrunePlan& plan);

// JSON Lines. The plan file starts with a header line carrying the schedule
// and the truncated flag; every further line is one action.
void write_plan(const std::string& path, const PrunePlan& plan, const Schedule& schedule);
PrunePlan read_plan(const std::string& path, Schedule* schedule = nullptr);
void write_trace(const std::string& path, std::span<const ImportanceRecord> trace);
std::vector<ImportanceRecord> read_trace(const std::string& path);

}  // namespace mshed::shedder
