#include "mshed/shedder.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "mshed/errors.hpp"

namespace mshed::shedder {

using model::BlockKind;
using model::Model;
using model::PruneState;
using nlohmann::ordered_json;

CalibrationSet CalibrationSet::from_corpus(const training::Corpus& corpus, std::int64_t count, std::int64_t length) {
  return {corpus.windows(corpus.calibration, length, count)};
}

bool candidate_before(const Candidate& a, const Candidate& b) {
  if (a.block_index != b.block_index) return a.block_index < b.block_index;
  return static_cast<int>(a.kind) < static_cast<int>(b.kind);
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::int64_t parse_count(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty() || v < 1) {
    throw ValidationError("schedule: " + what + " must be a positive integer, got '" + s + "'");
  }
  return v;
}

bool has_channel(const Stage& s) {
  return std::find(s.kinds.begin(), s.kinds.end(), StructureKind::mlp_channel_group) != s.kinds.end();
}

ordered_json candidate_json(const Candidate& c) {
  ordered_json j;
  j["kind"] = std::string(model::to_string(c.kind));
  j["block"] = c.block_index;
  j["group"] = c.group;
  return j;
}

Candidate candidate_from_json(const nlohmann::json& j) {
  return {model::parse_structure_kind(j.at("kind").get<std::string>()), j.at("block").get<std::int64_t>(),
          j.at("group").get<std::int64_t>()};
}

// JSON has no infinity; disqualified scores are written as the string "inf".
nlohmann::json score_json(double s) {
  if (std::isinf(s)) return "inf";
  return s;
}

double score_from_json(const nlohmann::json& j) {
  if (j.is_string() && j.get<std::string>() == "inf") return kDisqualified;
  return j.get<double>();
}

std::vector<nlohmann::json> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read '" + path + "'");
  std::vector<nlohmann::json> out;
  std::string line;
  std::int64_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace

Schedule Schedule::parse(std::string_view text) {
  Schedule s;
  if (trim(text).empty()) throw ValidationError("schedule is empty");
  for (const auto& stage_text : split(text, '+')) {
    const auto parts = split(stage_text, ':');
    if (parts.size() < 2 || parts.size() > 3) {
      throw ValidationError("schedule stage '" + stage_text + "' must look like kinds:steps[:group]");
    }
    Stage st;
    for (const auto& k : split(parts[0], '&')) {
      const auto kind = model::parse_structure_kind(k);
      if (std::find(st.kinds.begin(), st.kinds.end(), kind) != st.kinds.end()) {
        throw ValidationError("schedule stage '" + stage_text + "' lists " + k + " twice");
      }
      st.kinds.push_back(kind);
    }
    st.steps = parse_count(parts[1], "step count");
    if (parts.size() == 3) st.group = parse_count(parts[2], "group size");
    if (has_channel(st) && st.group == 0) {
      throw ValidationError("schedule stage '" + stage_text + "' prunes channels but gives no group size");
    }
    if (!has_channel(st) && st.group != 0) {
      throw ValidationError("schedule stage '" + stage_text + "' gives a group size without mlp_channel");
    }
    s.stages.push_back(std::move(st));
  }
  return s;
}

std::string Schedule::to_string() const {
  std::string out;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (i) out += " + ";
    for (std::size_t k = 0; k < stages[i].kinds.size(); ++k) {
      if (k) out += "&";
      out += model::to_string(stages[i].kinds[k]);
    }
    out += ":" + std::to_string(stages[i].steps);
    if (stages[i].group) out += ":" + std::to_string(stages[i].group);
  }
  return out;
}

void Schedule::validate(const Model& m) const {
  if (stages.empty()) throw ValidationError("schedule has no stages");
  std::vector<std::string> problems;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& st = stages[i];
    if (st.kinds.empty()) problems.push_back("stage " + std::to_string(i) + " has no target kinds");
    if (st.steps < 1) problems.push_back("stage " + std::to_string(i) + " needs at least one step");
    if (has_channel(st) && st.group < 1) problems.push_back("stage " + std::to_string(i) + " needs a group size");
    for (auto kind : st.kinds) {
      const auto wanted = kind == StructureKind::mlp_channel_group ? StructureKind::mlp_module : kind;
      const bool present = std::any_of(m.layout().begin(), m.layout().end(),
                                       [&](const model::RegistryEntry& e) { return e.kind == wanted; });
      if (!present) {
        problems.push_back("stage " + std::to_string(i) + " targets " + std::string(model::to_string(kind)) +
                           " but the model has none");
      }
    }
  }
  if (problems.empty()) return;
  std::string msg = "invalid schedule:";
  for (const auto& p : problems) msg += "\n  - " + p;
  throw ValidationError(msg);
}

double calibration_ppl(const Model& m, const PruneState& state, const CalibrationSet& cal) {
  return training::perplexity(m, state, cal.sequences);
}

double calibration_ppl(const Model& m, const CalibrationSet& cal) { return calibration_ppl(m, m.state(), cal); }

PruneState apply_overlay(const Model& m, PruneState state, const Candidate& c) {
  if (c.kind == StructureKind::mlp_channel_group) {
    const auto idx = m.index_of(StructureKind::mlp_module, c.block_index);
    if (!m.is_active(idx, state)) throw StateError("MLP at block " + std::to_string(c.block_index) + " is removed");
    auto& width = state.mlp_width[static_cast<std::size_t>(c.block_index)];
    if (c.group < 1 || width < c.group) {
      throw CapacityError("MLP at block " + std::to_string(c.block_index) + " has " + std::to_string(width) +
                          " channels, cannot drop " + std::to_string(c.group));
    }
    width -= c.group;
    return state;
  }
  const auto idx = m.index_of(c.kind, c.block_index);
  if (!m.is_active(idx, state)) {
    throw StateError(std::string(model::to_string(c.kind)) + " at block " + std::to_string(c.block_index) +
                     " is not alive");
  }
  state.alive[static_cast<std::size_t>(idx)] = 0;
  return state;
}

double importance(const Model& m, const Candidate& c, const CalibrationSet& cal) {
  const auto overlay = apply_overlay(m, m.state(), c);
  double ppl = kDisqualified;
  try {
    ppl = calibration_ppl(m, overlay, cal);
  } catch (const NumericError&) {
    ppl = kDisqualified;
  }
  return std::isfinite(ppl) ? ppl : kDisqualified;
}

std::vector<Candidate> candidates(const Model& m, std::span<const StructureKind> kinds, std::int64_t group) {
  auto wanted = [&](StructureKind k) { return std::find(kinds.begin(), kinds.end(), k) != kinds.end(); };
  std::vector<Candidate> out;
  const auto& layout = m.layout();
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& e = layout[i];
    if (!m.is_active(static_cast<std::int64_t>(i))) continue;
    if (wanted(e.kind)) out.push_back({e.kind, e.block_index, 0});
    if (e.kind == StructureKind::mlp_module && wanted(StructureKind::mlp_channel_group) && group > 0 &&
        m.state().mlp_width[static_cast<std::size_t>(e.block_index)] >= group) {
      out.push_back({StructureKind::mlp_channel_group, e.block_index, group});
    }
  }
  std::stable_sort(out.begin(), out.end(), candidate_before);
  return out;
}

std::vector<double> score_candidates(const Model& m, std::span<const Candidate> cands, const CalibrationSet& cal,
                                     const ScoringOptions& opts) {
  std::vector<double> scores(cands.size(), kDisqualified);
  const auto n = static_cast<int>(cands.size());
  const int workers = std::clamp(opts.threads, 1, std::max(n, 1));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) scores[static_cast<std::size_t>(i)] = importance(m, cands[static_cast<std::size_t>(i)], cal);
    return scores;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  {
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (int i = w; i < n; i += workers) {
            scores[static_cast<std::size_t>(i)] = importance(m, cands[static_cast<std::size_t>(i)], cal);
          }
        } catch (...) {
          errors[static_cast<std::size_t>(w)] = std::current_exception();
        }
      });
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return scores;
}

void apply(Model& m, const Candidate& c) {
  if (c.kind == StructureKind::mlp_channel_group) {
    m.slice_mlp(c.block_index, c.group);
  } else {
    m.remove(c.kind, c.block_index);
  }
}

PrunePlan prune_blocks(Model& m, std::span<const StructureKind> kinds, std::int64_t steps, const CalibrationSet& cal,
                       std::int64_t group, const ScoringOptions& opts, std::vector<ImportanceRecord>* trace,
                       std::int64_t stage, std::int64_t first_iteration) {
  if (steps < 1) throw ContractError("prune_blocks needs at least one step");
  if (cal.sequences.empty()) throw ContractError("calibration set is empty");
  PrunePlan plan;
  for (std::int64_t t = 0; t < steps; ++t) {
    const auto cands = candidates(m, kinds, group);
    if (cands.empty()) {
      plan.truncated = true;
      break;
    }
    const auto scores = score_candidates(m, cands, cal, opts);
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i) {
      if (scores[i] < scores[best]) best = i;
    }
    const auto iteration = first_iteration + t;
    if (trace) {
      for (std::size_t i = 0; i < cands.size(); ++i) trace->push_back({stage, iteration, cands[i], scores[i], i == best});
    }
    apply(m, cands[best]);
    plan.actions.push_back({stage, iteration, cands[best], scores[best]});
  }
  return plan;
}

PrunePlan run_schedule(Model& m, const Schedule& schedule, const CalibrationSet& cal, const ScoringOptions& opts,
                       std::vector<ImportanceRecord>* trace) {
  schedule.validate(m);
  PrunePlan plan;
  std::int64_t iteration = 0;
  for (std::size_t s = 0; s < schedule.stages.size(); ++s) {
    const auto& st = schedule.stages[s];
    const auto part = prune_blocks(m, st.kinds, st.steps, cal, st.group, opts, trace, static_cast<std::int64_t>(s),
                                   iteration);
    plan.actions.insert(plan.actions.end(), part.actions.begin(), part.actions.end());
    plan.truncated = plan.truncated || part.truncated;
    iteration += static_cast<std::int64_t>(part.actions.size());
  }
  return plan;
}

void replay(Model& m, const PrunePlan& plan) {
  for (const auto& a : plan.actions) apply(m, a.target);
}

void write_plan(const std::string& path, const PrunePlan& plan, const Schedule& schedule) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  ordered_json header;
  header["schedule"] = schedule.to_string();
  header["actions"] = plan.actions.size();
  header["truncated"] = plan.truncated;
  out << header.dump() << '\n';
  for (const auto& a : plan.actions) {
    ordered_json j;
    j["stage"] = a.stage;
    j["iteration"] = a.iteration;
    j["target"] = candidate_json(a.target);
    j["score"] = score_json(a.score);
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed on '" + path + "'");
}

PrunePlan read_plan(const std::string& path, Schedule* schedule) {
  const auto lines = read_lines(path);
  if (lines.empty()) throw IoError("plan file '" + path + "' is empty");
  PrunePlan plan;
  try {
    const auto& header = lines.front();
    plan.truncated = header.at("truncated").get<bool>();
    if (schedule) *schedule = Schedule::parse(header.at("schedule").get<std::string>());
    const auto expected = header.at("actions").get<std::size_t>();
    for (std::size_t i = 1; i < lines.size(); ++i) {
      const auto& j = lines[i];
      plan.actions.push_back({j.at("stage").get<std::int64_t>(), j.at("iteration").get<std::int64_t>(),
                              candidate_from_json(j.at("target")), score_from_json(j.at("score"))});
    }
    if (plan.actions.size() != expected) {
      throw IoError("plan file '" + path + "' declares " + std::to_string(expected) + " actions but holds " +
                    std::to_string(plan.actions.size()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed plan file '" + path + "': " + e.what());
  }
  return plan;
}

void write_trace(const std::string& path, std::span<const ImportanceRecord> trace) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  for (const auto& r : trace) {
    ordered_json j;
    j["stage"] = r.stage;
    j["iteration"] = r.iteration;
    j["candidate"] = candidate_json(r.candidate);
    j["score"] = score_json(r.score);
    j["selected"] = r.selected;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed on '" + path + "'");
}

std::vector<ImportanceRecord> read_trace(const std::string& path) {
  std::vector<ImportanceRecord> out;
  try {
    for (const auto& j : read_lines(path)) {
      out.push_back({j.at("stage").get<std::int64_t>(), j.at("iteration").get<std::int64_t>(),
                     candidate_from_json(j.at("candidate")), score_from_json(j.at("score")),
                     j.at("selected").get<bool>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed trace file '" + path + "': " + e.what());
  }
  return out;
}

}  // namespace mshed::shedder
