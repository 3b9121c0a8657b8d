#include <algorithm>
#include <json.hpp>

#include "mshed/errors.hpp"
#include "mshed/model.hpp"

namespace mshed::model {
namespace {

constexpr std::int64_t kToyMlpWidth = 256;

}  // namespace

std::string_view to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::mamba1: return "mamba1";
    case BlockKind::mamba2: return "mamba2";
    case BlockKind::transformer: return "transformer";
  }
  return "?";
}

std::string_view to_string(StructureKind kind) {
  switch (kind) {
    case StructureKind::mamba_block: return "mamba_block";
    case StructureKind::transformer_block: return "transformer_block";
    case StructureKind::ssm_module: return "ssm";
    case StructureKind::mha_module: return "mha";
    case StructureKind::mlp_module: return "mlp";
    case StructureKind::mlp_channel_group: return "mlp_channel";
  }
  return "?";
}

BlockKind parse_block_kind(std::string_view text) {
  for (auto k : {BlockKind::mamba1, BlockKind::mamba2, BlockKind::transformer}) {
    if (to_string(k) == text) return k;
  }
  throw ValidationError("unknown block kind '" + std::string(text) + "'");
}

StructureKind parse_structure_kind(std::string_view text) {
  for (auto k : {StructureKind::mamba_block, StructureKind::transformer_block, StructureKind::ssm_module,
                 StructureKind::mha_module, StructureKind::mlp_module, StructureKind::mlp_channel_group}) {
    if (to_string(k) == text) return k;
  }
  throw ValidationError("unknown structure kind '" + std::string(text) + "'");
}

std::vector<std::string> ArchDescriptor::violations() const {
  std::vector<std::string> out;
  auto positive = [&](std::int64_t v, const char* name) {
    if (v <= 0) out.push_back(std::string(name) + " must be positive (got " + std::to_string(v) + ")");
  };
  positive(vocab, "vocab");
  positive(d_model, "d_model");
  positive(d_inner, "d_inner");
  positive(ssm_state, "ssm_state");
  positive(conv_width, "conv_width");
  positive(n_heads, "n_heads");
  if (n_blocks < 0) out.push_back("n_blocks must be non-negative");
  if (static_cast<std::int64_t>(block_kinds.size()) != n_blocks) {
    out.push_back("block_kinds has " + std::to_string(block_kinds.size()) + " entries for n_blocks=" +
                  std::to_string(n_blocks));
  }
  if (mlp_widths.size() != block_kinds.size()) {
    out.push_back("mlp_widths has " + std::to_string(mlp_widths.size()) + " entries for " +
                  std::to_string(block_kinds.size()) + " blocks");
  }
  const bool has_attention = std::find(block_kinds.begin(), block_kinds.end(), BlockKind::transformer) != block_kinds.end();
  if (has_attention && n_heads > 0 && d_model > 0 && (d_model % n_heads != 0 || (d_model / n_heads) % 2 != 0)) {
    out.push_back("d_model " + std::to_string(d_model) + " must split into " + std::to_string(n_heads) +
                  " heads of even width");
  }
  for (std::size_t i = 0; i < std::min(block_kinds.size(), mlp_widths.size()); ++i) {
    if (block_kinds[i] == BlockKind::transformer && mlp_widths[i] < 0) {
      out.push_back("block " + std::to_string(i) + ": negative MLP width");
    }
    if (block_kinds[i] != BlockKind::transformer && mlp_widths[i] != 0) {
      out.push_back("block " + std::to_string(i) + ": Mamba blocks carry no MLP width (got " +
                    std::to_string(mlp_widths[i]) + ")");
    }
  }
  return out;
}

void ArchDescriptor::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::string msg = "invalid architecture descriptor:";
  for (const auto& s : v) msg += "\n  - " + s;
  throw ValidationError(msg);
}

std::string ArchDescriptor::to_json() const {
  nlohmann::ordered_json j;
  j["vocab"] = vocab;
  j["d_model"] = d_model;
  j["d_inner"] = d_inner;
  j["ssm_state"] = ssm_state;
  j["conv_width"] = conv_width;
  j["n_heads"] = n_heads;
  j["tie_embeddings"] = tie_embeddings;
  j["n_blocks"] = n_blocks;
  auto kinds = nlohmann::ordered_json::array();
  for (auto k : block_kinds) kinds.push_back(std::string(to_string(k)));
  j["block_kinds"] = kinds;
  j["mlp_widths"] = mlp_widths;
  return j.dump();
}

ArchDescriptor ArchDescriptor::from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("descriptor is not valid JSON: ") + e.what());
  }
  ArchDescriptor d;
  try {
    d.vocab = j.at("vocab").get<std::int64_t>();
    d.d_model = j.at("d_model").get<std::int64_t>();
    d.d_inner = j.at("d_inner").get<std::int64_t>();
    d.ssm_state = j.at("ssm_state").get<std::int64_t>();
    d.conv_width = j.at("conv_width").get<std::int64_t>();
    d.n_heads = j.at("n_heads").get<std::int64_t>();
    d.tie_embeddings = j.at("tie_embeddings").get<bool>();
    d.n_blocks = j.at("n_blocks").get<std::int64_t>();
    for (const auto& k : j.at("block_kinds")) d.block_kinds.push_back(parse_block_kind(k.get<std::string>()));
    d.mlp_widths = j.at("mlp_widths").get<std::vector<std::int64_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("descriptor field error: ") + e.what());
  }
  return d;
}

ArchDescriptor ArchDescriptor::uniform(BlockKind kind, std::int64_t n_blocks) {
  ArchDescriptor d;
  d.n_blocks = n_blocks;
  d.block_kinds.assign(static_cast<std::size_t>(n_blocks), kind);
  d.mlp_widths.assign(static_cast<std::size_t>(n_blocks), kind == BlockKind::transformer ? kToyMlpWidth : 0);
  return d;
}

ArchDescriptor ArchDescriptor::hybrid(std::int64_t n_blocks, std::vector<std::int64_t> transformer_positions,
                                      BlockKind mamba_kind) {
  ArchDescriptor d = uniform(mamba_kind, n_blocks);
  for (auto p : transformer_positions) {
    if (p < 0 || p >= n_blocks) {
      throw ValidationError("transformer position " + std::to_string(p) + " outside " + std::to_string(n_blocks) +
                            " blocks");
    }
    d.block_kinds[static_cast<std::size_t>(p)] = BlockKind::transformer;
    d.mlp_widths[static_cast<std::size_t>(p)] = kToyMlpWidth;
  }
  return d;
}

std::vector<RegistryEntry> registry_layout(const ArchDescriptor& desc) {
  std::vector<RegistryEntry> out;
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(desc.block_kinds.size()); ++i) {
    const auto parent = static_cast<std::int64_t>(out.size());
    if (desc.block_kinds[static_cast<std::size_t>(i)] == BlockKind::transformer) {
      out.push_back({StructureKind::transformer_block, i, -1});
      out.push_back({StructureKind::mha_module, i, parent});
      out.push_back({StructureKind::mlp_module, i, parent});
    } else {
      out.push_back({StructureKind::mamba_block, i, -1});
      out.push_back({StructureKind::ssm_module, i, parent});
    }
  }
  return out;
}

std::int64_t ParamCounts::total() const {
  std::int64_t t = global;
  for (auto v : owned) t += v;
  return t;
}

ParamCounts analytic_param_counts(const ArchDescriptor& desc) {
  const auto d = desc.d_model, di = desc.d_inner, n = desc.ssm_state, w = desc.conv_width;
  ParamCounts pc;
  pc.global = desc.vocab * d * (desc.tie_embeddings ? 1 : 2) + d;
  for (const auto& e : registry_layout(desc)) {
    const auto kind = desc.block_kinds[static_cast<std::size_t>(e.block_index)];
    std::int64_t c = 0;
    switch (e.kind) {
      case StructureKind::mamba_block:
        // norm, in_x, in_z, conv kernel+bias, out, (inner norm)
        c = d + 2 * d * di + di * w + di + di * d + (kind == BlockKind::mamba2 ? di : 0);
        break;
      case StructureKind::ssm_module:
        // a_log, x_to_b, x_to_c, x_to_dt (+bias), d_skip
        c = (kind == BlockKind::mamba1 ? di * n : di) + 2 * n * di + di * di + di + di;
        break;
      case StructureKind::mha_module: c = d + 4 * d * d; break;
      case StructureKind::mlp_module: c = d + 3 * d * desc.mlp_widths[static_cast<std::size_t>(e.block_index)]; break;
      default: break;
    }
    pc.owned.push_back(c);
  }
  return pc;
}

double prune_ratio(const ArchDescriptor& desc, std::span<const StructureId> removed) {
  const auto layout = registry_layout(desc);
  const auto counts = analytic_param_counts(desc);
  std::vector<bool> dead(layout.size(), false);
  for (const auto& s : removed) {
    bool found = false;
    for (std::size_t i = 0; i < layout.size(); ++i) {
      if (layout[i].kind == s.kind && layout[i].block_index == s.block_index) {
        dead[i] = true;
        found = true;
      }
    }
    if (!found) {
      throw ValidationError("no " + std::string(to_string(s.kind)) + " at block " + std::to_string(s.block_index));
    }
  }
  std::int64_t gone = 0;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const bool parent_dead = layout[i].parent >= 0 && dead[static_cast<std::size_t>(layout[i].parent)];
    if (dead[i] || parent_dead) gone += counts.owned[i];
  }
  return static_cast<double>(gone) / static_cast<double>(counts.total());
}

}  // namespace mshed::model
