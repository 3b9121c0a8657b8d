#include <fstream>
#include <map>
#include <sstream>
#include <variant>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "mshed/errors.hpp"
#include "mshed/harness.hpp"

namespace mshed::harness {

namespace {

using Field = std::variant<std::int64_t*, std::uint64_t*, int*, double*, bool*, std::string*,
                           std::vector<std::int64_t>*>;

struct Key {
  const char* section;
  const char* name;
  Field field;
};

std::vector<Key> keys(RunConfig& c) {
  return {
      {"run", "command", &c.command},
      {"run", "seed", &c.seed},
      {"run", "out", &c.out},
      {"run", "threads", &c.threads},
      {"run", "emit_trace", &c.emit_trace},
      {"run", "plan_only", &c.plan_only},
      {"model", "arch", &c.model.arch},
      {"model", "n_blocks", &c.model.n_blocks},
      {"model", "d_model", &c.model.d_model},
      {"model", "d_inner", &c.model.d_inner},
      {"model", "ssm_state", &c.model.ssm_state},
      {"model", "conv_width", &c.model.conv_width},
      {"model", "n_heads", &c.model.n_heads},
      {"model", "mlp_width", &c.model.mlp_width},
      {"model", "transformer_positions", &c.model.transformer_positions},
      {"model", "checkpoint", &c.model.checkpoint},
      {"data", "corpus", &c.data.corpus},
      {"data", "calibration_count", &c.data.calibration_count},
      {"data", "calibration_length", &c.data.calibration_length},
      {"data", "validation_count", &c.data.validation_count},
      {"data", "validation_length", &c.data.validation_length},
      {"train", "steps", &c.train.steps},
      {"train", "batch_size", &c.train.batch_size},
      {"train", "seq_len", &c.train.seq_len},
      {"train", "lr", &c.train.lr},
      {"train", "min_lr_fraction", &c.train.min_lr_fraction},
      {"train", "warmup", &c.train.warmup},
      {"train", "beta1", &c.train.beta1},
      {"train", "beta2", &c.train.beta2},
      {"train", "eps", &c.train.eps},
      {"train", "clip_norm", &c.train.clip_norm},
      {"prune", "schedule", &c.prune.schedule},
      {"prune", "recovery_steps", &c.prune.recovery_steps},
      {"bench", "batches", &c.bench.batches},
      {"bench", "prompt_length", &c.bench.prompt_length},
      {"bench", "new_tokens", &c.bench.new_tokens},
      {"bench", "warmup", &c.bench.warmup},
      {"bench", "eval_count", &c.bench.eval_count},
      {"bench", "instability_threshold", &c.bench.instability_threshold},
      {"bench", "plan", &c.bench.plan},
      {"study", "n_blocks", &c.study.n_blocks},
      {"study", "d_model", &c.study.d_model},
      {"study", "d_inner", &c.study.d_inner},
      {"study", "ssm_state", &c.study.ssm_state},
      {"study", "block_steps", &c.study.block_steps},
      {"study", "ssm_steps", &c.study.ssm_steps},
      {"study", "train_steps", &c.study.train.steps},
      {"study", "batch_size", &c.study.train.batch_size},
      {"study", "seq_len", &c.study.train.seq_len},
      {"study", "lr", &c.study.train.lr},
      {"study", "warmup", &c.study.train.warmup},
  };
}

template <typename T>
T parse_number(const std::string& text, const std::string& where) {
  std::istringstream in(text);
  T v{};
  in >> v;
  if (in.fail() || !(in >> std::ws).eof()) throw ConfigError(where + ": cannot parse '" + text + "'");
  return v;
}

void assign(const Field& field, const std::string& text, const std::string& where) {
  std::visit(
      [&](auto* p) {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, std::string>) {
          *p = text;
        } else if constexpr (std::is_same_v<T, bool>) {
          if (text == "true" || text == "1") {
            *p = true;
          } else if (text == "false" || text == "0") {
            *p = false;
          } else {
            throw ConfigError(where + ": expected true or false, got '" + text + "'");
          }
        } else if constexpr (std::is_same_v<T, std::vector<std::int64_t>>) {
          p->clear();
          std::istringstream in(text);
          std::string item;
          while (std::getline(in, item, ',')) {
            if (item.find_first_not_of(' ') == std::string::npos) continue;
            p->push_back(parse_number<std::int64_t>(item, where));
          }
        } else if constexpr (std::is_same_v<T, std::uint64_t>) {
          if (text.find('-') != std::string::npos) throw ConfigError(where + ": must be non-negative");
          *p = parse_number<std::uint64_t>(text, where);
        } else {
          *p = parse_number<T>(text, where);
        }
      },
      field);
}

std::string render(const Field& field) {
  return std::visit(
      [](auto* p) -> std::string {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, std::string>) {
          return *p;
        } else if constexpr (std::is_same_v<T, bool>) {
          return *p ? "true" : "false";
        } else if constexpr (std::is_same_v<T, std::vector<std::int64_t>>) {
          std::string s;
          for (std::size_t i = 0; i < p->size(); ++i) s += (i ? "," : "") + std::to_string((*p)[i]);
          return s;
        } else {
          std::ostringstream out;
          out.precision(17);
          out << *p;
          return out.str();
        }
      },
      field);
}

}  // namespace

model::ArchDescriptor ModelSection::descriptor() const {
  model::ArchDescriptor d;
  if (arch == "hybrid") {
    d = model::ArchDescriptor::hybrid(n_blocks, transformer_positions);
  } else {
    d = model::ArchDescriptor::uniform(model::parse_block_kind(arch), n_blocks);
    if (!transformer_positions.empty()) throw ConfigError("transformer_positions is only valid for arch = hybrid");
  }
  d.d_model = d_model;
  d.d_inner = d_inner;
  d.ssm_state = ssm_state;
  d.conv_width = conv_width;
  d.n_heads = n_heads;
  for (auto& w : d.mlp_widths) w = w ? mlp_width : 0;
  return d;
}

training::Corpus DataSection::load_corpus() const {
  return training::Corpus::load(corpus.empty() ? training::bundled_corpus_path() : corpus);
}

shedder::CalibrationSet DataSection::calibration(const training::Corpus& c) const {
  return shedder::CalibrationSet::from_corpus(c, calibration_count, calibration_length);
}

std::vector<training::TokenSeq> DataSection::validation(const training::Corpus& c) const {
  return c.windows(c.validation, validation_length, validation_count);
}

RunConfig RunConfig::parse(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  RunConfig cfg;
  std::map<std::string, std::map<std::string, Field>> table;
  for (const auto& k : keys(cfg)) table[k.section].emplace(k.name, k.field);
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config: key '" + section + "' is outside any section");
    const auto s = table.find(section);
    if (s == table.end()) throw ConfigError("config: unknown section [" + section + "]");
    for (const auto& [key, value] : body) {
      const auto f = s->second.find(key);
      if (f == s->second.end()) throw ConfigError("config: unknown key '" + key + "' in [" + section + "]");
      assign(f->second, value.data(), section + "." + key);
    }
  }
  return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string RunConfig::to_text() const {
  RunConfig copy = *this;
  std::string out, section;
  for (const auto& k : keys(copy)) {
    if (section != k.section) {
      section = k.section;
      out += (out.empty() ? "[" : "\n[") + section + "]\n";
    }
    out += std::string(k.name) + " = " + render(k.field) + "\n";
  }
  return out;
}

void RunConfig::validate() const {
  std::vector<std::string> bad;
  if (threads < 1) bad.push_back("run.threads must be positive");
  try {
    model.descriptor().validate();
  } catch (const Error& e) {
    bad.push_back(std::string("model: ") + e.what());
  }
  try {
    shedder::Schedule::parse(prune.schedule);
  } catch (const Error& e) {
    bad.push_back(std::string("prune.schedule: ") + e.what());
  }
  if (prune.recovery_steps < 0) bad.push_back("prune.recovery_steps must be >= 0");
  if (data.calibration_count < 1 || data.calibration_length < 2) bad.push_back("data: calibration set is empty");
  if (data.validation_count < 1 || data.validation_length < 2) bad.push_back("data: validation set is empty");
  try {
    train.validate();
  } catch (const Error& e) {
    bad.push_back(e.what());
  }
  if (bench.batches < 10) bad.push_back("bench.batches must be >= 10");
  if (bench.prompt_length < 1 || bench.new_tokens < 1) bad.push_back("bench: prompt and new tokens must be positive");
  if (bench.warmup < 0 || bench.eval_count < 1) bad.push_back("bench: warmup >= 0 and eval_count >= 1");
  if (bench.instability_threshold <= 0) bad.push_back("bench.instability_threshold must be positive");
  if (study.n_blocks < 2 || study.block_steps < 1 || study.ssm_steps < 1) bad.push_back("study: needs blocks and steps");
  if (study.block_steps >= study.n_blocks || study.ssm_steps > study.n_blocks) {
    bad.push_back("study: more removal steps than structures");
  }
  if (bad.empty()) return;
  std::string msg = "invalid config:";
  for (const auto& b : bad) msg += "\n  " + b;
  throw ConfigError(msg);
}

}  // namespace mshed::harness
