#include "mshed/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "mshed/errors.hpp"
#include "mshed/numerics/graph.hpp"
#include "mshed/numerics/ops.hpp"

#ifndef MSHED_DATA_DIR
#define MSHED_DATA_DIR "data"
#endif

namespace mshed::training {

std::int32_t encode_char(char c) {
  if (c == '\n') return 0;
  if (c >= ' ' && c <= '~') return static_cast<std::int32_t>(c - ' ') + 1;
  throw InputError("byte " + std::to_string(static_cast<unsigned char>(c)) + " is outside the charset", -1);
}

char decode_id(std::int32_t id) {
  if (id < 0 || id >= kCharsetSize) throw InputError("token id " + std::to_string(id) + " outside the charset", -1);
  return id == 0 ? '\n' : static_cast<char>(' ' + id - 1);
}

TokenSeq encode(std::string_view text) {
  TokenSeq out;
  out.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    try {
      out.push_back(encode_char(text[i]));
    } catch (const InputError& e) {
      throw InputError(e.what(), static_cast<std::int64_t>(i));
    }
  }
  return out;
}

std::string decode(std::span<const std::int32_t> ids) {
  std::string s;
  s.reserve(ids.size());
  for (auto id : ids) s.push_back(decode_id(id));
  return s;
}

Corpus Corpus::from_text(std::string_view text, double validation_fraction, double calibration_fraction) {
  if (validation_fraction <= 0 || calibration_fraction <= 0 || validation_fraction + calibration_fraction >= 1) {
    throw ValidationError("corpus split fractions must be positive and leave room for training");
  }
  Corpus c;
  c.ids.reserve(text.size());
  for (char ch : text) {
    const bool mapped = ch == '\n' || (ch >= ' ' && ch <= '~');
    c.ids.push_back(encode_char(mapped ? ch : ' '));
  }
  const auto n = static_cast<std::int64_t>(c.ids.size());
  const auto n_val = static_cast<std::int64_t>(static_cast<double>(n) * validation_fraction);
  const auto n_cal = static_cast<std::int64_t>(static_cast<double>(n) * calibration_fraction);
  c.train = {0, n - n_val - n_cal};
  c.validation = {c.train.end, c.train.end + n_val};
  c.calibration = {c.validation.end, n};
  if (c.train.size() < 2 || c.validation.size() < 2 || c.calibration.size() < 2) {
    throw ValidationError("corpus of " + std::to_string(n) + " characters is too small to split");
  }
  return c;
}

Corpus Corpus::load(const std::string& path, double validation_fraction, double calibration_fraction) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read corpus '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str(), validation_fraction, calibration_fraction);
}

std::string bundled_corpus_path() {
  const char* dir = std::getenv("MSHED_DATA_DIR");
  return std::string(dir && *dir ? dir : MSHED_DATA_DIR) + "/corpus.txt";
}

Corpus Corpus::bundled() { return load(bundled_corpus_path()); }

std::vector<TokenSeq> Corpus::windows(const Split& split, std::int64_t length, std::int64_t count) const {
  if (length < 2 || count < 1) throw ValidationError("windows need length >= 2 and count >= 1");
  const auto len = std::min(length, split.size());
  if (len < 2) throw ValidationError("split is too short for a window");
  const auto span = split.size() - len;
  std::vector<TokenSeq> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    const auto offset = count == 1 ? 0 : (span * i) / (count - 1);
    const auto start = ids.begin() + split.begin + offset;
    out.emplace_back(start, start + len);
  }
  return out;
}

void TrainConfig::validate() const {
  std::vector<std::string> bad;
  if (steps < 0) bad.push_back("steps must be >= 0");
  if (batch_size < 1) bad.push_back("batch_size must be positive");
  if (seq_len < 2) bad.push_back("seq_len must be >= 2");
  if (lr < 0) bad.push_back("lr must be >= 0");
  if (min_lr_fraction < 0 || min_lr_fraction > 1) bad.push_back("min_lr_fraction must lie in [0, 1]");
  if (warmup < 0) bad.push_back("warmup must be >= 0");
  if (beta1 <= 0 || beta1 >= 1 || beta2 <= 0 || beta2 >= 1) bad.push_back("Adam betas must lie in (0, 1)");
  if (eps <= 0) bad.push_back("eps must be positive");
  if (clip_norm <= 0) bad.push_back("clip_norm must be positive");
  if (bad.empty()) return;
  std::string msg = "invalid training config:";
  for (const auto& b : bad) msg += " " + b + ";";
  throw ValidationError(msg);
}

std::string TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["steps"] = steps;
  j["batch_size"] = batch_size;
  j["seq_len"] = seq_len;
  j["lr"] = lr;
  j["min_lr_fraction"] = min_lr_fraction;
  j["warmup"] = warmup;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["eps"] = eps;
  j["clip_norm"] = clip_norm;
  j["seed"] = seed;
  return j.dump();
}

namespace {

double learning_rate(const TrainConfig& cfg, std::int64_t step) {
  if (cfg.warmup > 0 && step < cfg.warmup) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup);
  const auto span = std::max<std::int64_t>(cfg.steps - cfg.warmup, 1);
  const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup) / static_cast<double>(span));
  const double floor = cfg.lr * cfg.min_lr_fraction;
  return floor + (cfg.lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamSlot {
  std::vector<double> m, v;
};

}  // namespace

TrainResult train(model::Model& m, const Corpus& corpus, const TrainConfig& cfg) {
  cfg.validate();
  TrainResult result;
  if (cfg.steps == 0) return result;
  const auto window = cfg.seq_len + 1;
  if (corpus.train.size() < window) throw ValidationError("training split shorter than one sequence");

  const std::vector<Tensor> params = m.trainable_parameters();
  std::vector<AdamSlot> slots(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    slots[i].m.assign(static_cast<std::size_t>(params[i].numel()), 0.0);
    slots[i].v.assign(static_cast<std::size_t>(params[i].numel()), 0.0);
  }
  Rng rng(cfg.seed);
  auto& graph = Graph::current();
  graph.clear();

  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    for (const auto& p : params) p.zero_grad();
    double loss_sum = 0.0;
    for (std::int64_t b = 0; b < cfg.batch_size; ++b) {
      const auto start = corpus.train.begin + static_cast<std::int64_t>(rng.below(
                                                  static_cast<std::uint64_t>(corpus.train.size() - window + 1)));
      const std::span<const std::int32_t> seq(corpus.ids.data() + start, static_cast<std::size_t>(window));
      try {
        const Tensor logits = m.forward(seq.first(static_cast<std::size_t>(cfg.seq_len)));
        const Tensor loss =
            scale(cross_entropy(logits, seq.subspan(1)), 1.0f / static_cast<float>(cfg.batch_size));
        loss_sum += loss.item();
        backward(loss);
      } catch (const NumericError& e) {
        graph.clear();
        throw NumericError(std::string("training diverged: ") + e.what(), step);
      }
    }
    if (!std::isfinite(loss_sum)) {
      graph.clear();
      throw NumericError("training loss diverged", step);
    }
    double norm2 = 0.0;
    for (const auto& p : params) {
      if (!p.has_grad()) continue;
      for (float g : p.grad()) norm2 += double(g) * g;
    }
    const double norm = std::sqrt(norm2);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient", step);
    const double clip = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;
    const double lr = learning_rate(cfg, step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step + 1));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step + 1));
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i].has_grad()) continue;
      const auto g = params[i].grad();
      auto w = params[i].mutable_data();
      auto& s = slots[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = double(g[k]) * clip;
        s.m[k] = cfg.beta1 * s.m[k] + (1.0 - cfg.beta1) * gk;
        s.v[k] = cfg.beta2 * s.v[k] + (1.0 - cfg.beta2) * gk * gk;
        const double update = lr * (s.m[k] / bc1) / (std::sqrt(s.v[k] / bc2) + cfg.eps);
        w[k] = static_cast<float>(double(w[k]) - update);
      }
    }
    result.curve.push_back({step, loss_sum, lr, norm});
  }
  for (const auto& p : params) p.zero_grad();
  return result;
}

double sequence_nll(const Tensor& logits, std::span<const std::int32_t> tokens) {
  const auto steps = static_cast<std::int64_t>(tokens.size());
  if (logits.rank() != 2 || logits.dim(0) < steps - 1) {
    throw DimensionError("sequence_nll: logits " + shape_str(logits.shape()) + " for " + std::to_string(steps) +
                         " tokens");
  }
  const auto vocab = logits.dim(1);
  const auto data = logits.data();
  double total = 0.0;
  for (std::int64_t t = 0; t + 1 < steps; ++t) {
    const float* row = data.data() + t * vocab;
    double mx = row[0];
    for (std::int64_t v = 1; v < vocab; ++v) mx = std::max(mx, double(row[v]));
    double z = 0.0;
    for (std::int64_t v = 0; v < vocab; ++v) z += std::exp(double(row[v]) - mx);
    total += mx + std::log(z) - double(row[tokens[static_cast<std::size_t>(t + 1)]]);
  }
  return total;
}

double perplexity(const model::Model& m, std::span<const TokenSeq> data) { return perplexity(m, m.state(), data); }

double perplexity(const model::Model& m, const model::PruneState& state, std::span<const TokenSeq> data) {
  if (data.empty()) throw ContractError("perplexity needs at least one sequence");
  NoGradGuard no_grad;
  double total = 0.0;
  std::int64_t count = 0;
  for (const auto& seq : data) {
    if (seq.size() < 2) continue;
    const Tensor logits = m.forward(std::span(seq).first(seq.size() - 1), state);
    total += sequence_nll(logits, seq);
    count += static_cast<std::int64_t>(seq.size()) - 1;
  }
  if (count == 0) throw ContractError("perplexity needs a sequence with at least two tokens");
  return std::exp(total / static_cast<double>(count));
}

RecoveryResult recovery_tune(model::Model& m, const Corpus& corpus, const TrainConfig& cfg,
                             std::span<const TokenSeq> eval) {
  RecoveryResult r;
  r.ppl_before = perplexity(m, eval);
  const auto alive_before = m.state();
  r.run = train(m, corpus, cfg);
  if (m.state() != alive_before) throw StateError("recovery tuning changed the pruning state");
  r.ppl_after = perplexity(m, eval);
  return r;
}

void write_loss_csv(const std::string& path, const TrainResult& result) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "step,loss,lr,grad_norm\n";
  out.precision(17);
  for (const auto& p : result.curve) out << p.step << ',' << p.loss << ',' << p.lr << ',' << p.grad_norm << '\n';
  if (!out) throw IoError("write failed on '" + path + "'");
}

}  // namespace mshed::training
