#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mshed/model.hpp"

namespace mshed::training {

using TokenSeq = std::vector<std::int32_t>;

// Character-level charset: '\n' → 0, ' '..'~' → 1..95.
inline constexpr std::int32_t kCharsetSize = 96;
std::int32_t encode_char(char c);  // throws InputError for unmapped bytes
char decode_id(std::int32_t id);
TokenSeq encode(std::string_view text);
std::string decode(std::span<const std::int32_t> ids);

struct Split {
  std::int64_t begin = 0;
  std::int64_t end = 0;
  std::int64_t size() const { return end - begin; }
};

// Token stream of a text with three disjoint contiguous splits.
struct Corpus {
  TokenSeq ids;
  Split train, validation, calibration;

  // Unmapped bytes (tabs, carriage returns, non-ASCII) are replaced by spaces.
  static Corpus from_text(std::string_view text, double validation_fraction = 0.1,
                          double calibration_fraction = 0.1);
  static Corpus load(const std::string& path, double validation_fraction = 0.1,
                     double calibration_fraction = 0.1);
  // The text shipped in the data directory.
  static Corpus bundled();

  // `count` windows of `length` tokens spread evenly over a split (they
  // overlap when the split is short). Deterministic.
  std::vector<TokenSeq> windows(const Split& split, std::int64_t length, std::int64_t count) const;
};

// corpus.txt in $MSHED_DATA_DIR when set, else in the build-time data directory.
std::string bundled_corpus_path();

struct TrainConfig {
  std::int64_t steps = 2000;
  std::int64_t batch_size = 8;
  std::int64_t seq_len = 64;
  double lr = 3e-3;
  double min_lr_fraction = 0.1;  // cosine decays to lr·min_lr_fraction
  std::int64_t warmup = 50;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;

  void validate() const;  // throws ValidationError
  std::string to_json() const;
};

struct LossPoint {
  std::int64_t step;
  double loss;
  double lr;
  double grad_norm;
};

struct TrainResult {
  std::vector<LossPoint> curve;
};

// Next-token cross-entropy training with Adam, global-norm clipping and a
// cosine learning-rate schedule. Only active structures are updated.
// Throws NumericError(step) on a non-finite loss.
TrainResult train(model::Model& m, const Corpus& corpus, const TrainConfig& cfg);

// exp(mean NLL) over every predicted position (positions 1..L-1 of each
// sequence), accumulated in double.
double perplexity(const model::Model& m, std::span<const TokenSeq> data);
double perplexity(const model::Model& m, const model::PruneState& state, std::span<const TokenSeq> data);
// Summed NLL of tokens[1..T-1] under logit rows 0..T-2 of one sequence.
double sequence_nll(const Tensor& logits, std::span<const std::int32_t> tokens);

struct RecoveryResult {
  double ppl_before = 0.0;
  double ppl_after = 0.0;
  TrainResult run;
};

// Fine-tunes the surviving parameters of a pruned model; validation PPL is
// measured on `eval` before and after.
RecoveryResult recovery_tune(model::Model& m, const Corpus& corpus, const TrainConfig& cfg,
                             std::span<const TokenSeq> eval);

void write_loss_csv(const std::string& path, const TrainResult& result);

}  // namespace mshed::training
