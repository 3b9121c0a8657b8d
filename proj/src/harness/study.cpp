#include <chrono>
#include <fstream>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "mshed/errors.hpp"
#include "mshed/harness.hpp"

namespace mshed::harness {

namespace {

double mean_degradation(std::span<const CurvePoint> points, const std::string& arch, model::StructureKind kind) {
  double base = 0.0, sum = 0.0;
  std::int64_t n = 0;
  for (const auto& p : points) {
    if (p.arch != arch || p.kind != kind) continue;
    if (p.steps == 0) {
      base = p.ppl;
    } else {
      sum += p.ppl;
      ++n;
    }
  }
  if (n == 0 || base <= 0) return 0.0;
  return sum / static_cast<double>(n) / base;
}

}  // namespace

StudyReport study_sensitivity(const training::Corpus& corpus, const StudyConfig& cfg, const DataSection& data,
                              std::uint64_t seed, int threads, std::ostream* log) {
  const auto start = std::chrono::steady_clock::now();
  StudyReport report;
  const auto cal = data.calibration(corpus);
  const auto eval = data.validation(corpus);
  training::TrainConfig tc = cfg.train;
  tc.seed = seed;

  for (auto kind : {model::BlockKind::mamba1, model::BlockKind::mamba2}) {
    const std::string arch(model::to_string(kind));
    auto desc = model::ArchDescriptor::uniform(kind, cfg.n_blocks);
    desc.d_model = cfg.d_model;
    desc.d_inner = cfg.d_inner;
    desc.ssm_state = cfg.ssm_state;
    model::Model trained = model::Model::build(desc, seed);
    if (log) *log << "study: training " << arch << " for " << tc.steps << " steps\n";
    const auto run = training::train(trained, corpus, tc);
    const double dense = training::perplexity(trained, eval);
    (kind == model::BlockKind::mamba1 ? report.dense_ppl_mamba1 : report.dense_ppl_mamba2) = dense;
    if (log && !run.curve.empty()) *log << "study: " << arch << " final loss " << run.curve.back().loss << ", validation PPL " << dense << '\n';

    for (auto [target, steps] : {std::pair{model::StructureKind::mamba_block, cfg.block_steps},
                                 std::pair{model::StructureKind::ssm_module, cfg.ssm_steps}}) {
      model::Model m = trained.clone();
      const std::vector<model::StructureKind> kinds{target};
      const auto plan = shedder::prune_blocks(m, kinds, steps, cal, 0, {threads});
      report.plans.push_back(plan);
      // Points come from replaying plan prefixes on a fresh copy.
      model::Model replayed = trained.clone();
      report.points.push_back({arch, target, 0, dense, 0.0});
      for (std::size_t t = 0; t < plan.actions.size(); ++t) {
        shedder::apply(replayed, plan.actions[t].target);
        report.points.push_back({arch, target, static_cast<std::int64_t>(t + 1), training::perplexity(replayed, eval),
                                 replayed.prune_ratio()});
      }
      if (log) {
        *log << "study: " << arch << " " << model::to_string(target) << " curve:";
        for (std::size_t t = 0; t <= plan.actions.size(); ++t) *log << ' ' << report.points[report.points.size() - plan.actions.size() - 1 + t].ppl;
        *log << '\n';
      }
    }
  }
  using model::StructureKind;
  report.block_degradation_mamba1 = mean_degradation(report.points, "mamba1", StructureKind::mamba_block);
  report.block_degradation_mamba2 = mean_degradation(report.points, "mamba2", StructureKind::mamba_block);
  report.ssm_degradation_mamba1 = mean_degradation(report.points, "mamba1", StructureKind::ssm_module);
  report.ssm_degradation_mamba2 = mean_degradation(report.points, "mamba2", StructureKind::ssm_module);
  report.mamba1_tolerates_blocks = report.block_degradation_mamba1 < report.block_degradation_mamba2;
  report.mamba2_tolerates_ssm = report.ssm_degradation_mamba2 < report.ssm_degradation_mamba1;
  report.ordering_reproduced = report.mamba1_tolerates_blocks && report.mamba2_tolerates_ssm;
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

std::string StudyReport::to_json() const {
  nlohmann::ordered_json j;
  j["dense_ppl_mamba1"] = dense_ppl_mamba1;
  j["dense_ppl_mamba2"] = dense_ppl_mamba2;
  j["block_degradation_mamba1"] = block_degradation_mamba1;
  j["block_degradation_mamba2"] = block_degradation_mamba2;
  j["ssm_degradation_mamba1"] = ssm_degradation_mamba1;
  j["ssm_degradation_mamba2"] = ssm_degradation_mamba2;
  j["mamba1_tolerates_blocks"] = mamba1_tolerates_blocks;
  j["mamba2_tolerates_ssm"] = mamba2_tolerates_ssm;
  j["ordering_reproduced"] = ordering_reproduced;
  j["seconds"] = seconds;
  return j.dump(2);
}

void write_curves_csv(const std::string& path, std::span<const CurvePoint> points) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "arch,kind,steps,ppl,ratio\n";
  out.precision(17);
  for (const auto& p : points) {
    out << p.arch << ',' << model::to_string(p.kind) << ',' << p.steps << ',' << p.ppl << ',' << p.ratio << '\n';
  }
  if (!out) throw IoError("write failed on '" + path + "'");
}

std::vector<CurvePoint> read_curves_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != "arch,kind,steps,ppl,ratio") throw IoError("'" + path + "' is not a curves CSV");
  std::vector<CurvePoint> out;
  std::int64_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string kind, steps, ppl, ratio;
    CurvePoint p;
    if (!std::getline(row, p.arch, ',') || !std::getline(row, kind, ',') || !std::getline(row, steps, ',') ||
        !std::getline(row, ppl, ',') || !std::getline(row, ratio)) {
      throw IoError(path + ":" + std::to_string(n) + ": malformed row");
    }
    try {
      p.kind = model::parse_structure_kind(kind);
      p.steps = std::stoll(steps);
      p.ppl = std::stod(ppl);
      p.ratio = std::stod(ratio);
    } catch (const std::exception& e) {
      throw IoError(path + ":" + std::to_string(n) + ": " + e.what());
    }
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace mshed::harness
