#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mshed/errors.hpp"
#include "mshed/harness.hpp"

namespace mshed::harness {

namespace fs = std::filesystem;

void write_trace_csv(const std::string& path, std::span<const shedder::ImportanceRecord> trace) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "stage,iteration,kind,block,group,score,selected\n";
  out.precision(17);
  for (const auto& r : trace) {
    out << r.stage << ',' << r.iteration << ',' << model::to_string(r.candidate.kind) << ',' << r.candidate.block_index
        << ',' << r.candidate.group << ',' << r.score << ',' << (r.selected ? 1 : 0) << '\n';
  }
  if (!out) throw IoError("write failed on '" + path + "'");
}

std::vector<shedder::ImportanceRecord> read_trace_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != "stage,iteration,kind,block,group,score,selected") {
    throw IoError("'" + path + "' is not a trace CSV");
  }
  std::vector<shedder::ImportanceRecord> out;
  std::int64_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream row(line);
    for (std::string cell; std::getline(row, cell, ',');) cells.push_back(cell);
    if (cells.size() != 7) throw IoError(path + ":" + std::to_string(n) + ": expected 7 columns");
    shedder::ImportanceRecord r;
    try {
      r.stage = std::stoll(cells[0]);
      r.iteration = std::stoll(cells[1]);
      r.candidate.kind = model::parse_structure_kind(cells[2]);
      r.candidate.block_index = std::stoll(cells[3]);
      r.candidate.group = std::stoll(cells[4]);
      r.score = std::stod(cells[5]);
      r.selected = cells[6] == "1";
    } catch (const std::exception& e) {
      throw IoError(path + ":" + std::to_string(n) + ": " + e.what());
    }
    out.push_back(r);
  }
  return out;
}

namespace {

std::int64_t count_loss_rows(const std::string& path) {
  std::ifstream in(path);
  std::string line;
  if (!std::getline(in, line) || line != "step,loss,lr,grad_norm") throw IoError("'" + path + "' is not a loss CSV");
  std::int64_t n = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    int cols = 0;
    while (std::getline(row, cell, ',')) {
      try {
        std::stod(cell);
      } catch (const std::exception&) {
        throw IoError("'" + path + "' row " + std::to_string(n + 1) + " is malformed");
      }
      ++cols;
    }
    if (cols != 4) throw IoError("'" + path + "' row " + std::to_string(n + 1) + " is malformed");
    ++n;
  }
  return n;
}

}  // namespace

RunSummary report(const std::string& run_dir) {
  const fs::path dir(run_dir);
  if (!fs::is_directory(dir)) throw IoError("run directory '" + run_dir + "' does not exist");
  RunSummary s;
  if (fs::exists(dir / "plan.jsonl")) {
    s.plan_actions = static_cast<std::int64_t>(shedder::read_plan((dir / "plan.jsonl").string()).actions.size());
  }
  if (fs::exists(dir / "trace.jsonl")) {
    const auto trace = shedder::read_trace((dir / "trace.jsonl").string());
    const auto csv = (dir / "report.csv").string();
    write_trace_csv(csv, trace);
    if (read_trace_csv(csv) != trace) throw IoError("report.csv does not reproduce the trace");
    s.trace_records = static_cast<std::int64_t>(trace.size());
  }
  if (fs::exists(dir / "bench.csv")) {
    const auto samples = read_bench_csv((dir / "bench.csv").string());
    const auto r = summarize(samples, 1.0);
    s.bench_samples = static_cast<std::int64_t>(samples.size());
    s.decode_speedup = r.decode_speedup;
    s.prefill_speedup = r.prefill_speedup;
    if (fs::exists(dir / "bench.json")) {
      std::ifstream in(dir / "bench.json");
      const auto j = nlohmann::json::parse(in, nullptr, false);
      if (j.is_discarded()) throw IoError("bench.json is not valid JSON");
      if (j.value("decode_speedup", -1.0) != r.decode_speedup || j.value("prefill_speedup", -1.0) != r.prefill_speedup) {
        throw IoError("bench.json speedups do not match the raw timings in bench.csv");
      }
    }
  }
  if (fs::exists(dir / "curves.csv")) {
    s.curve_points = static_cast<std::int64_t>(read_curves_csv((dir / "curves.csv").string()).size());
  }
  if (fs::exists(dir / "loss.csv")) s.loss_points = count_loss_rows((dir / "loss.csv").string());
  return s;
}

}  // namespace mshed::harness
