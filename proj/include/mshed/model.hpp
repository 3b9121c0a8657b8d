#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "mshed/layers.hpp"
#include "mshed/ssm.hpp"

namespace mshed::model {

enum class BlockKind { mamba1, mamba2, transformer };

// Ordered as the tie-break order used by the pruning search.
enum class StructureKind { mamba_block, transformer_block, ssm_module, mha_module, mlp_module, mlp_channel_group };

std::string_view to_string(BlockKind kind);
std::string_view to_string(StructureKind kind);
BlockKind parse_block_kind(std::string_view text);
StructureKind parse_structure_kind(std::string_view text);

// Declarative description of a model stack.
struct ArchDescriptor {
  std::int64_t vocab = 96;
  std::int64_t d_model = 64;
  std::int64_t d_inner = 128;  // Mamba expansion width (SSM channels)
  std::int64_t ssm_state = 16;
  std::int64_t conv_width = layers::kDefaultConvWidth;
  std::int64_t n_heads = 4;
  bool tie_embeddings = true;
  std::int64_t n_blocks = 0;
  std::vector<BlockKind> block_kinds;
  std::vector<std::int64_t> mlp_widths;  // per block; 0 for Mamba blocks

  // Every violation, empty when the descriptor is consistent.
  std::vector<std::string> violations() const;
  void validate() const;  // throws ValidationError listing violations()

  std::string to_json() const;
  static ArchDescriptor from_json(std::string_view text);

  bool operator==(const ArchDescriptor&) const = default;

  // Toy stacks: vocab 96, d_model 64, N 16, MLP width 256.
  static ArchDescriptor uniform(BlockKind kind, std::int64_t n_blocks);
  // Mamba-2 stack with Transformer blocks at the given positions.
  static ArchDescriptor hybrid(std::int64_t n_blocks, std::vector<std::int64_t> transformer_positions,
                               BlockKind mamba_kind = BlockKind::mamba2);
};

// One removable structure. param_count is the number of parameters the
// structure owns directly (sub-structures count separately, so the registry
// partitions every learnable tensor except embedding/head/final norm).
struct StructureId {
  StructureKind kind = StructureKind::mamba_block;
  std::int64_t block_index = 0;
  bool alive = true;
  std::int64_t param_count = 0;

  bool operator==(const StructureId& o) const { return kind == o.kind && block_index == o.block_index; }
};

// Alive flags (per registry entry) and effective MLP widths (per block).
// Copying a PruneState is cheap; candidate scoring works on copies so the
// model's weights are never touched.
struct PruneState {
  std::vector<std::uint8_t> alive;
  std::vector<std::int64_t> mlp_width;

  bool operator==(const PruneState&) const = default;
};

// Static shape of the registry: which structures exist and their nesting.
struct RegistryEntry {
  StructureKind kind;
  std::int64_t block_index;
  std::int64_t parent;  // registry index or -1
};

std::vector<RegistryEntry> registry_layout(const ArchDescriptor& desc);

// Parameter counts computed from the descriptor alone (no allocation).
struct ParamCounts {
  std::vector<std::int64_t> owned;  // per registry entry
  std::int64_t global = 0;          // embedding, head, final norm
  std::int64_t total() const;
};

ParamCounts analytic_param_counts(const ArchDescriptor& desc);

// removed/dense parameter fraction for a descriptor with the given
// structures removed (descendants of removed structures count as removed).
double prune_ratio(const ArchDescriptor& desc, std::span<const StructureId> removed);

struct MambaBlock {
  layers::RmsNorm norm;
  layers::Linear in_x;
  layers::Linear in_z;
  layers::CausalConv1d conv;
  ssm::SsmParams ssm;
  std::optional<layers::RmsNorm> inner_norm;  // Mamba-2 gated norm before out
  layers::Linear out;
};

struct TransformerBlock {
  layers::RmsNorm attn_norm;
  layers::MultiHeadAttention mha;
  layers::RmsNorm mlp_norm;
  layers::GatedMlp mlp;
};

struct Block {
  BlockKind kind;
  std::variant<MambaBlock, TransformerBlock> body;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
  std::int64_t owner;  // registry index, -1 for embedding/head/final norm
};

// Per-block recurrent state used by token-at-a-time decoding.
struct BlockCache {
  layers::ConvState conv;
  ssm::ScanState scan;
  layers::KvCache kv;
};

class Session;

class Model {
 public:
  // Deterministic initialization from seed. Every block is residual,
  // x + f(norm(x)), so bypassing a structure is an exact identity.
  static Model build(const ArchDescriptor& desc, std::uint64_t seed);

  Model() = default;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  // Copies would alias weights; use clone() for an independent model.
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ArchDescriptor& descriptor() const { return desc_; }
  const std::vector<Block>& blocks() const { return blocks_; }
  std::vector<Block>& blocks() { return blocks_; }
  const std::vector<RegistryEntry>& layout() const { return layout_; }
  const PruneState& state() const { return state_; }
  PruneState& mutable_state() { return state_; }

  const Tensor& embedding() const { return embedding_; }
  const Tensor& head() const { return tie_ ? embedding_ : head_; }
  const layers::RmsNorm& final_norm() const { return final_norm_; }

  // Registry entries with current alive flags and parameter counts.
  std::vector<StructureId> registry() const;
  std::int64_t index_of(StructureKind kind, std::int64_t block_index) const;
  // Alive and not inside a removed structure.
  bool is_active(std::int64_t registry_index, const PruneState& state) const;
  bool is_active(std::int64_t registry_index) const { return is_active(registry_index, state_); }

  // Logits [T × vocab] under the model's own state or an overlay.
  Tensor forward(std::span<const std::int32_t> tokens) const { return forward(tokens, state_); }
  Tensor forward(std::span<const std::int32_t> tokens, const PruneState& state,
                 std::vector<BlockCache>* capture = nullptr) const;

  // Marks a structure removed. Throws StateError if already removed.
  void remove(StructureKind kind, std::int64_t block_index);
  void remove(const StructureId& s) { remove(s.kind, s.block_index); }
  // Physically drops the trailing g channels of a block's MLP.
  void slice_mlp(std::int64_t block_index, std::int64_t g);

  std::int64_t dense_param_count() const { return dense_params_; }
  std::int64_t active_param_count() const { return active_param_count(state_); }
  std::int64_t active_param_count(const PruneState& state) const;
  double prune_ratio() const;

  // Every tensor in the model, dead structures included.
  std::vector<NamedTensor> named_tensors() const;
  // Tensors of active structures plus the globals.
  std::vector<Tensor> trainable_parameters() const;

  Model clone() const;
  // Copy without dead structures: removed blocks are dropped from the stack
  // and removed sub-modules lose their tensors. Logits are unchanged.
  Model compact() const;

  Session session() const;

 private:
  friend Model load_checkpoint(const std::string& path, std::string* metadata_json);

  struct BlockSlots {
    std::int64_t block = -1, ssm = -1, mha = -1, mlp = -1;
  };
  void index_layout();
  void refresh_counts();
  std::int64_t owned_count(std::int64_t registry_index, const PruneState& state) const;
  void check_state(const PruneState& state) const;

  ArchDescriptor desc_;
  bool tie_ = true;
  Tensor embedding_;
  Tensor head_;
  layers::RmsNorm final_norm_;
  std::vector<Block> blocks_;
  std::vector<RegistryEntry> layout_;
  PruneState state_;
  std::int64_t dense_params_ = 0;
  std::vector<BlockSlots> slots_;
  std::vector<std::int64_t> owned_static_;  // per entry; MLP linears excluded
};

// Incremental decoder: prefill a prompt with the full-sequence path, then
// extend one token at a time from the captured recurrent state.
class Session {
 public:
  explicit Session(const Model& model);

  // Returns logits of the last prompt token.
  std::vector<float> prefill(std::span<const std::int32_t> tokens);
  std::vector<float> step(std::int32_t token);
  std::int64_t position() const { return position_; }

 private:
  const Model* model_;
  std::vector<BlockCache> caches_;
  std::int64_t position_ = 0;
};

// Checkpoint file. Layout (all integers little-endian):
//   char[4]  magic "MSHC"
//   u32      format version (1)
//   u32 len, bytes   descriptor JSON
//   u32 len, bytes   metadata JSON (free-form run information)
//   u64      dense parameter count
//   u32 S, u8[S]     alive flag per registry entry
//   u32 B, u32[B]    MLP width per block
//   u32 K, then K tensors: u32 name len, name, u32 rank, u32[rank] dims,
//                          f32[numel] row-major
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Model& m, const std::string& path, const std::string& metadata_json = "{}");
Model load_checkpoint(const std::string& path, std::string* metadata_json = nullptr);

}  // namespace mshed::model
