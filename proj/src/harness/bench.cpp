#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mshed/errors.hpp"
#include "mshed/harness.hpp"
#include "mshed/numerics/graph.hpp"

namespace mshed::harness {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::int32_t argmax(const std::vector<float>& logits) {
  return static_cast<std::int32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

// One prefill of `prompt` followed by `new_tokens` greedy decode steps.
std::pair<double, double> time_batch(const model::Model& m, std::span<const std::int32_t> prompt,
                                     std::int64_t new_tokens) {
  model::Session session(m);
  auto start = Clock::now();
  auto logits = session.prefill(prompt);
  const double prefill = seconds_since(start);
  start = Clock::now();
  for (std::int64_t k = 0; k < new_tokens; ++k) logits = session.step(argmax(logits));
  return {prefill, seconds_since(start)};
}

PhaseStats phase_stats(const std::vector<BenchSample>& samples, const std::string& model, const std::string& phase) {
  std::vector<double> secs;
  std::int64_t tokens = 0;
  for (const auto& s : samples) {
    if (s.model != model || s.phase != phase) continue;
    secs.push_back(s.seconds);
    tokens = s.tokens;
  }
  PhaseStats st;
  if (secs.empty()) return st;
  std::vector<double> sorted = secs;
  std::sort(sorted.begin(), sorted.end());
  const auto n = sorted.size();
  st.median_seconds = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  st.tokens_per_second = static_cast<double>(tokens) / st.median_seconds;
  double mean = 0.0;
  for (double s : secs) mean += s;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double s : secs) var += (s - mean) * (s - mean);
  st.cv = n > 1 ? std::sqrt(var / static_cast<double>(n - 1)) / mean : 0.0;
  return st;
}

std::string plan_summary(const model::Model& m) {
  std::ostringstream out;
  std::int64_t removed = 0;
  for (const auto& s : m.registry()) removed += s.alive ? 0 : 1;
  out << removed << " structures removed";
  std::int64_t channels = 0;
  const auto desc = m.descriptor();
  for (std::size_t b = 0; b < desc.mlp_widths.size(); ++b) {
    if (desc.mlp_widths[b] > 0 && m.is_active(m.index_of(model::StructureKind::mlp_module, static_cast<std::int64_t>(b)))) {
      channels += desc.mlp_widths[b] - m.state().mlp_width[b];
    }
  }
  if (channels) out << ", " << channels << " MLP channels sliced";
  return out.str();
}

}  // namespace

BenchReport summarize(std::vector<BenchSample> samples, double instability_threshold) {
  BenchReport r;
  r.samples = std::move(samples);
  r.dense_prefill = phase_stats(r.samples, "dense", "prefill");
  r.dense_decode = phase_stats(r.samples, "dense", "decode");
  r.pruned_prefill = phase_stats(r.samples, "pruned", "prefill");
  r.pruned_decode = phase_stats(r.samples, "pruned", "decode");
  if (r.dense_prefill.tokens_per_second > 0) {
    r.prefill_speedup = r.pruned_prefill.tokens_per_second / r.dense_prefill.tokens_per_second;
  }
  if (r.dense_decode.tokens_per_second > 0) {
    r.decode_speedup = r.pruned_decode.tokens_per_second / r.dense_decode.tokens_per_second;
  }
  for (const auto* st : {&r.dense_prefill, &r.dense_decode, &r.pruned_prefill, &r.pruned_decode}) {
    r.unstable |= st->cv > instability_threshold;
  }
  return r;
}

BenchReport bench(const model::Model& dense, const model::Model& pruned, const training::Corpus& corpus,
                  const BenchConfig& cfg) {
  if (cfg.batches < 1 || cfg.prompt_length < 1 || cfg.new_tokens < 1 || cfg.warmup < 0) {
    throw ContractError("bench needs positive batches, prompt length and new tokens");
  }
  if (dense.descriptor().vocab != pruned.descriptor().vocab) throw ContractError("bench models disagree on vocab");
  const model::Model compact = pruned.compact();
  const auto total = cfg.warmup + cfg.batches;
  const auto prompts = corpus.windows(corpus.validation, cfg.prompt_length, total);

  double max_diff = 0.0;
  {
    NoGradGuard no_grad;
    const Tensor overlay = pruned.forward(prompts.front());
    const Tensor physical = compact.forward(prompts.front());
    const auto a = overlay.data(), b = physical.data();
    for (std::size_t i = 0; i < a.size(); ++i) max_diff = std::max(max_diff, std::abs(double(a[i]) - double(b[i])));
  }
  if (!(max_diff <= 1e-6)) {
    throw ContractError("compacted model logits differ from the overlay by " + std::to_string(max_diff));
  }

  std::vector<BenchSample> samples;
  const auto prompt_tokens = static_cast<std::int64_t>(prompts.front().size());
  // Dense and pruned alternate per batch so slow drifts hit both equally.
  for (std::int64_t b = 0; b < total; ++b) {
    for (const auto& [name, m] : {std::pair<std::string, const model::Model*>{"dense", &dense}, {"pruned", &compact}}) {
      const auto [prefill, decode] = time_batch(*m, prompts[static_cast<std::size_t>(b)], cfg.new_tokens);
      if (b < cfg.warmup) continue;
      samples.push_back({name, b - cfg.warmup, "prefill", prompt_tokens, prefill});
      samples.push_back({name, b - cfg.warmup, "decode", cfg.new_tokens, decode});
    }
  }
  BenchReport r = summarize(std::move(samples), cfg.instability_threshold);
  r.max_logit_diff = max_diff;
  const auto eval = corpus.windows(corpus.validation, 256, cfg.eval_count);
  r.ppl_dense = training::perplexity(dense, eval);
  r.ppl_pruned = training::perplexity(compact, eval);
  r.plan_summary = plan_summary(pruned);
  r.prune_ratio = pruned.prune_ratio();
  return r;
}

void write_bench_csv(const std::string& path, std::span<const BenchSample> samples) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "model,batch,phase,tokens,seconds\n";
  out.precision(17);
  for (const auto& s : samples) out << s.model << ',' << s.batch << ',' << s.phase << ',' << s.tokens << ',' << s.seconds << '\n';
  if (!out) throw IoError("write failed on '" + path + "'");
}

std::vector<BenchSample> read_bench_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != "model,batch,phase,tokens,seconds") {
    throw IoError("'" + path + "' is not a bench CSV");
  }
  std::vector<BenchSample> out;
  std::int64_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    std::istringstream row(line);
    BenchSample s;
    std::string batch, tokens, seconds;
    if (!std::getline(row, s.model, ',') || !std::getline(row, batch, ',') || !std::getline(row, s.phase, ',') ||
        !std::getline(row, tokens, ',') || !std::getline(row, seconds)) {
      throw IoError(path + ":" + std::to_string(n) + ": malformed row");
    }
    try {
      s.batch = std::stoll(batch);
      s.tokens = std::stoll(tokens);
      s.seconds = std::stod(seconds);
    } catch (const std::exception&) {
      throw IoError(path + ":" + std::to_string(n) + ": malformed number");
    }
    out.push_back(std::move(s));
  }
  return out;
}

void write_bench_json(const std::string& path, const BenchReport& r) {
  nlohmann::ordered_json j;
  auto phase = [](const PhaseStats& s) {
    return nlohmann::ordered_json{{"median_seconds", s.median_seconds},
                                  {"tokens_per_second", s.tokens_per_second},
                                  {"cv", s.cv}};
  };
  j["dense_prefill"] = phase(r.dense_prefill);
  j["dense_decode"] = phase(r.dense_decode);
  j["pruned_prefill"] = phase(r.pruned_prefill);
  j["pruned_decode"] = phase(r.pruned_decode);
  j["prefill_speedup"] = r.prefill_speedup;
  j["decode_speedup"] = r.decode_speedup;
  j["unstable"] = r.unstable;
  j["max_logit_diff"] = r.max_logit_diff;
  j["ppl_dense"] = r.ppl_dense;
  j["ppl_pruned"] = r.ppl_pruned;
  j["prune_ratio"] = r.prune_ratio;
  j["plan_summary"] = r.plan_summary;
  j["samples"] = r.samples.size();
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

}  // namespace mshed::harness
