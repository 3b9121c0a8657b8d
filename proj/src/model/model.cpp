#include "mshed/model.hpp"

#include <cmath>
#include <functional>

#include "mshed/errors.hpp"
#include "mshed/numerics/kernels.hpp"

namespace mshed::model {
namespace {

enum class Slot { block, ssm, mha, mlp };

// Visits every tensor slot of a block with its name suffix and owning slot.
template <typename BlockT, typename Fn>
void for_each_block_tensor(BlockT& block, Fn&& fn) {
  if (auto* mb = std::get_if<MambaBlock>(&block.body)) {
    fn("norm.scale", mb->norm.scale, Slot::block);
    fn("in_x.weight", mb->in_x.weight, Slot::block);
    fn("in_z.weight", mb->in_z.weight, Slot::block);
    fn("conv.kernel", mb->conv.kernel, Slot::block);
    fn("conv.bias", mb->conv.bias, Slot::block);
    fn("ssm.a_log", mb->ssm.a_log, Slot::ssm);
    fn("ssm.x_to_b.weight", mb->ssm.x_to_b.weight, Slot::ssm);
    fn("ssm.x_to_c.weight", mb->ssm.x_to_c.weight, Slot::ssm);
    fn("ssm.x_to_dt.weight", mb->ssm.x_to_dt.weight, Slot::ssm);
    fn("ssm.x_to_dt.bias", mb->ssm.x_to_dt.bias, Slot::ssm);
    fn("ssm.d_skip", mb->ssm.d_skip, Slot::ssm);
    if (mb->inner_norm) fn("inner_norm.scale", mb->inner_norm->scale, Slot::block);
    fn("out.weight", mb->out.weight, Slot::block);
  } else {
    auto& tb = std::get<TransformerBlock>(block.body);
    fn("attn_norm.scale", tb.attn_norm.scale, Slot::mha);
    fn("mha.q.weight", tb.mha.q.weight, Slot::mha);
    fn("mha.k.weight", tb.mha.k.weight, Slot::mha);
    fn("mha.v.weight", tb.mha.v.weight, Slot::mha);
    fn("mha.o.weight", tb.mha.o.weight, Slot::mha);
    fn("mlp_norm.scale", tb.mlp_norm.scale, Slot::mlp);
    fn("mlp.up.weight", tb.mlp.up.weight, Slot::mlp);
    fn("mlp.gate.weight", tb.mlp.gate.weight, Slot::mlp);
    fn("mlp.down.weight", tb.mlp.down.weight, Slot::mlp);
  }
}

Tensor mamba_forward(const MambaBlock& mb, BlockKind kind, const Tensor& x, bool ssm_active, BlockCache* cache) {
  const Tensor h = mb.norm.forward(x);
  const Tensor xi = mb.in_x.forward(h);
  const Tensor z = mb.in_z.forward(h);
  const Tensor xc = silu(layers::causal_conv1d(xi, mb.conv.kernel, mb.conv.bias));
  Tensor y = xc;
  if (ssm_active) y = ssm::selective_scan(mb.ssm, xc, cache ? &cache->scan : nullptr);
  Tensor gated = mul(y, silu(z));
  if (kind == BlockKind::mamba2) gated = mb.inner_norm->forward(gated);
  if (cache) {
    const auto steps = xi.dim(0), ch = xi.dim(1), keep = mb.conv.width() - 1;
    cache->conv.history.assign(static_cast<std::size_t>(keep * ch), 0.0f);
    const auto xd = xi.data();
    for (std::int64_t j = 0; j < keep; ++j) {
      const std::int64_t src = steps - keep + j;
      if (src < 0) continue;
      std::copy_n(xd.begin() + src * ch, ch, cache->conv.history.begin() + j * ch);
    }
  }
  return mb.out.forward(gated);
}

void mamba_step(const MambaBlock& mb, BlockKind kind, bool ssm_active, BlockCache& cache, std::vector<float>& x) {
  const auto d = static_cast<std::int64_t>(x.size());
  const auto di = mb.in_x.out();
  std::vector<float> h(static_cast<std::size_t>(d)), xi(static_cast<std::size_t>(di)), z(xi.size()), xc(xi.size()),
      y(xi.size()), out(h.size());
  mb.norm.apply(x.data(), h.data());
  mb.in_x.apply(h.data(), xi.data());
  mb.in_z.apply(h.data(), z.data());
  layers::conv_step(mb.conv, cache.conv, xi.data(), xc.data());
  for (auto& v : xc) v = static_cast<float>(silu_value(v));
  if (ssm_active) {
    ssm::scan_step(mb.ssm, cache.scan, xc.data(), y.data());
  } else {
    y = xc;
  }
  for (std::int64_t i = 0; i < di; ++i) y[i] = static_cast<float>(double(y[i]) * static_cast<float>(silu_value(z[i])));
  if (kind == BlockKind::mamba2) {
    std::vector<float> normed(y.size());
    mb.inner_norm->apply(y.data(), normed.data());
    y.swap(normed);
  }
  mb.out.apply(y.data(), out.data());
  for (std::int64_t i = 0; i < d; ++i) x[i] += out[i];
}

void mlp_step(const layers::GatedMlp& mlp, std::int64_t width, const float* x, float* y) {
  const auto d = mlp.up.in();
  const auto full = mlp.width();
  std::vector<float> act(static_cast<std::size_t>(width));
  const float* up = mlp.up.weight.data().data();
  const float* gate = mlp.gate.weight.data().data();
  for (std::int64_t j = 0; j < width; ++j) {
    const auto u = static_cast<float>(kernels::dot(up + j * d, x, d));
    const auto g = static_cast<float>(kernels::dot(gate + j * d, x, d));
    act[j] = static_cast<float>(double(static_cast<float>(silu_value(g))) * u);
  }
  const float* down = mlp.down.weight.data().data();
  for (std::int64_t o = 0; o < d; ++o) y[o] = static_cast<float>(kernels::dot(down + o * full, act.data(), width));
}

}  // namespace

Model Model::build(const ArchDescriptor& desc, std::uint64_t seed) {
  desc.validate();
  Model m;
  m.desc_ = desc;
  m.tie_ = desc.tie_embeddings;
  Rng rng(seed);
  const auto d = desc.d_model, di = desc.d_inner;
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double depth_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(std::max<std::int64_t>(desc.n_blocks, 1)));

  m.embedding_ = Tensor::zeros({desc.vocab, d}, true);
  for (auto& v : m.embedding_.mutable_data()) v = static_cast<float>(rng.normal() * emb_std);
  if (!m.tie_) m.head_ = layers::Linear::create(d, desc.vocab, false, rng, emb_std).weight;
  m.final_norm_ = layers::RmsNorm::create(d);

  for (std::int64_t i = 0; i < desc.n_blocks; ++i) {
    const auto kind = desc.block_kinds[static_cast<std::size_t>(i)];
    if (kind == BlockKind::transformer) {
      const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
      TransformerBlock tb;
      tb.attn_norm = layers::RmsNorm::create(d);
      tb.mha = layers::make_mha(d, desc.n_heads, rng, in_std, in_std * depth_scale);
      tb.mlp_norm = layers::RmsNorm::create(d);
      const auto width = desc.mlp_widths[static_cast<std::size_t>(i)];
      tb.mlp = layers::make_gated_mlp(d, width, rng, in_std,
                                      depth_scale / std::sqrt(static_cast<double>(std::max<std::int64_t>(width, 1))));
      m.blocks_.push_back(Block{kind, std::move(tb)});
    } else {
      MambaBlock mb;
      const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
      mb.norm = layers::RmsNorm::create(d);
      mb.in_x = layers::Linear::create(d, di, false, rng, in_std);
      mb.in_z = layers::Linear::create(d, di, false, rng, in_std);
      mb.conv = layers::CausalConv1d::create(di, desc.conv_width, rng);
      mb.ssm = ssm::SsmParams::create(kind == BlockKind::mamba1 ? ssm::Variant::s6 : ssm::Variant::ssd, di,
                                      desc.ssm_state, rng);
      if (kind == BlockKind::mamba2) mb.inner_norm = layers::RmsNorm::create(di);
      mb.out = layers::Linear::create(di, d, false, rng, depth_scale / std::sqrt(static_cast<double>(di)));
      m.blocks_.push_back(Block{kind, std::move(mb)});
    }
  }
  m.layout_ = registry_layout(desc);
  m.state_.alive.assign(m.layout_.size(), 1);
  m.state_.mlp_width = desc.mlp_widths;
  m.index_layout();
  m.refresh_counts();
  m.dense_params_ = m.active_param_count();
  return m;
}

void Model::index_layout() {
  slots_.assign(blocks_.size(), BlockSlots{});
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    auto& s = slots_[static_cast<std::size_t>(layout_[i].block_index)];
    const auto idx = static_cast<std::int64_t>(i);
    switch (layout_[i].kind) {
      case StructureKind::mamba_block:
      case StructureKind::transformer_block: s.block = idx; break;
      case StructureKind::ssm_module: s.ssm = idx; break;
      case StructureKind::mha_module: s.mha = idx; break;
      case StructureKind::mlp_module: s.mlp = idx; break;
      default: break;
    }
  }
}

void Model::refresh_counts() {
  owned_static_.assign(layout_.size(), 0);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const auto& slots = slots_[b];
    for_each_block_tensor(blocks_[b], [&](const char* name, const Tensor& t, Slot slot) {
      const std::string_view n(name);
      if (slot == Slot::mlp && n != "mlp_norm.scale") return;  // width-dependent, counted on demand
      const std::int64_t idx = slot == Slot::block ? slots.block
                               : slot == Slot::ssm ? slots.ssm
                               : slot == Slot::mha ? slots.mha
                                                   : slots.mlp;
      owned_static_[static_cast<std::size_t>(idx)] += t.numel();
    });
  }
}

std::int64_t Model::owned_count(std::int64_t idx, const PruneState& state) const {
  auto c = owned_static_[static_cast<std::size_t>(idx)];
  const auto& e = layout_[static_cast<std::size_t>(idx)];
  if (e.kind == StructureKind::mlp_module) {
    c += 3 * desc_.d_model * state.mlp_width[static_cast<std::size_t>(e.block_index)];
  }
  return c;
}

void Model::check_state(const PruneState& state) const {
  if (state.alive.size() != layout_.size() || state.mlp_width.size() != blocks_.size()) {
    throw ContractError("prune state does not match the model registry");
  }
}

std::vector<StructureId> Model::registry() const {
  std::vector<StructureId> out;
  out.reserve(layout_.size());
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    const auto idx = static_cast<std::int64_t>(i);
    out.push_back({layout_[i].kind, layout_[i].block_index, is_active(idx), owned_count(idx, state_)});
  }
  return out;
}

std::int64_t Model::index_of(StructureKind kind, std::int64_t block_index) const {
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    if (layout_[i].kind == kind && layout_[i].block_index == block_index) return static_cast<std::int64_t>(i);
  }
  throw ValidationError("model has no " + std::string(to_string(kind)) + " at block " + std::to_string(block_index));
}

bool Model::is_active(std::int64_t idx, const PruneState& state) const {
  const auto& e = layout_[static_cast<std::size_t>(idx)];
  if (!state.alive[static_cast<std::size_t>(idx)]) return false;
  return e.parent < 0 || state.alive[static_cast<std::size_t>(e.parent)];
}

Tensor Model::forward(std::span<const std::int32_t> tokens, const PruneState& state,
                      std::vector<BlockCache>* capture) const {
  if (tokens.empty()) throw ContractError("forward needs at least one token");
  check_state(state);
  Tensor x = mshed::embedding(embedding_, tokens);
  if (capture) capture->assign(blocks_.size(), BlockCache{});
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const auto& slots = slots_[b];
    if (!state.alive[static_cast<std::size_t>(slots.block)]) continue;
    BlockCache* cache = capture ? &(*capture)[b] : nullptr;
    const auto& block = blocks_[b];
    if (const auto* mb = std::get_if<MambaBlock>(&block.body)) {
      x = add(x, mamba_forward(*mb, block.kind, x, is_active(slots.ssm, state), cache));
    } else {
      const auto& tb = std::get<TransformerBlock>(block.body);
      if (is_active(slots.mha, state)) {
        x = add(x, layers::mha_forward(tb.mha, tb.attn_norm.forward(x), cache ? &cache->kv : nullptr));
      }
      const auto width = state.mlp_width[b];
      if (is_active(slots.mlp, state) && width > 0) {
        x = add(x, layers::gated_mlp_forward(tb.mlp, tb.mlp_norm.forward(x), width));
      }
    }
  }
  return linear(final_norm_.forward(x), head());
}

void Model::remove(StructureKind kind, std::int64_t block_index) {
  if (kind == StructureKind::mlp_channel_group) {
    throw ContractError("channel groups are removed with slice_mlp");
  }
  const auto idx = index_of(kind, block_index);
  if (!is_active(idx)) {
    throw StateError(std::string(to_string(kind)) + " at block " + std::to_string(block_index) + " is already removed");
  }
  state_.alive[static_cast<std::size_t>(idx)] = 0;
}

void Model::slice_mlp(std::int64_t block_index, std::int64_t g) {
  if (block_index < 0 || block_index >= static_cast<std::int64_t>(blocks_.size())) {
    throw ValidationError("no block " + std::to_string(block_index));
  }
  auto* tb = std::get_if<TransformerBlock>(&blocks_[static_cast<std::size_t>(block_index)].body);
  if (!tb) throw ValidationError("block " + std::to_string(block_index) + " has no MLP");
  if (g <= 0) throw ContractError("channel group size must be positive");
  if (!is_active(slots_[static_cast<std::size_t>(block_index)].mlp)) {
    throw StateError("MLP at block " + std::to_string(block_index) + " is removed");
  }
  const auto width = tb->mlp.width();
  if (width < g) {
    throw CapacityError("MLP at block " + std::to_string(block_index) + " has " + std::to_string(width) +
                        " channels, cannot slice " + std::to_string(g));
  }
  NoGradGuard no_grad;
  auto keep_rows = [](const Tensor& t, std::int64_t rows) {
    Tensor out = narrow_rows(t, rows);
    out.set_requires_grad(true);
    return out;
  };
  auto keep_cols = [](const Tensor& t, std::int64_t cols) {
    Tensor out = narrow_cols(t, cols);
    out.set_requires_grad(true);
    return out;
  };
  tb->mlp.up.weight = keep_rows(tb->mlp.up.weight, width - g);
  tb->mlp.gate.weight = keep_rows(tb->mlp.gate.weight, width - g);
  tb->mlp.down.weight = keep_cols(tb->mlp.down.weight, width - g);
  state_.mlp_width[static_cast<std::size_t>(block_index)] = width - g;
}

std::int64_t Model::active_param_count(const PruneState& state) const {
  check_state(state);
  std::int64_t total = embedding_.numel() + final_norm_.scale.numel() + (tie_ ? 0 : head_.numel());
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    const auto idx = static_cast<std::int64_t>(i);
    if (is_active(idx, state)) total += owned_count(idx, state);
  }
  return total;
}

double Model::prune_ratio() const {
  return static_cast<double>(dense_params_ - active_param_count()) / static_cast<double>(dense_params_);
}

std::vector<NamedTensor> Model::named_tensors() const {
  std::vector<NamedTensor> out;
  out.push_back({"embedding.weight", embedding_, -1});
  if (!tie_) out.push_back({"head.weight", head_, -1});
  out.push_back({"final_norm.scale", final_norm_.scale, -1});
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const auto& slots = slots_[b];
    const std::string prefix = "blocks." + std::to_string(b) + ".";
    for_each_block_tensor(blocks_[b], [&](const char* name, const Tensor& t, Slot slot) {
      if (!t.defined()) return;
      const std::int64_t owner = slot == Slot::block ? slots.block
                                 : slot == Slot::ssm ? slots.ssm
                                 : slot == Slot::mha ? slots.mha
                                                     : slots.mlp;
      out.push_back({prefix + name, t, owner});
    });
  }
  return out;
}

std::vector<Tensor> Model::trainable_parameters() const {
  std::vector<Tensor> out;
  for (auto& nt : named_tensors()) {
    if (nt.owner < 0 || is_active(nt.owner)) out.push_back(nt.tensor);
  }
  return out;
}

Model Model::clone() const {
  Model m;
  m.desc_ = desc_;
  m.tie_ = tie_;
  m.embedding_ = embedding_.clone();
  m.head_ = head_.clone();
  m.final_norm_.scale = final_norm_.scale.clone();
  m.blocks_ = blocks_;
  for (auto& block : m.blocks_) {
    for_each_block_tensor(block, [](const char*, Tensor& t, Slot) { t = t.clone(); });
  }
  m.layout_ = layout_;
  m.state_ = state_;
  m.dense_params_ = dense_params_;
  m.slots_ = slots_;
  m.owned_static_ = owned_static_;
  return m;
}

Model Model::compact() const {
  Model m;
  m.desc_ = desc_;
  m.desc_.block_kinds.clear();
  m.desc_.mlp_widths.clear();
  m.tie_ = tie_;
  m.embedding_ = embedding_.clone();
  m.head_ = head_.clone();
  m.final_norm_.scale = final_norm_.scale.clone();
  std::vector<std::size_t> kept;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    if (!state_.alive[static_cast<std::size_t>(slots_[b].block)]) continue;
    kept.push_back(b);
    m.desc_.block_kinds.push_back(blocks_[b].kind);
    m.desc_.mlp_widths.push_back(blocks_[b].kind == BlockKind::transformer ? state_.mlp_width[b] : 0);
    Block copy = blocks_[b];
    for_each_block_tensor(copy, [](const char*, Tensor& t, Slot) { t = t.clone(); });
    m.blocks_.push_back(std::move(copy));
  }
  m.desc_.n_blocks = static_cast<std::int64_t>(kept.size());
  m.layout_ = registry_layout(m.desc_);
  m.state_.alive.assign(m.layout_.size(), 1);
  m.state_.mlp_width = m.desc_.mlp_widths;
  m.index_layout();
  for (std::size_t nb = 0; nb < kept.size(); ++nb) {
    const auto& old_slots = slots_[kept[nb]];
    const auto& new_slots = m.slots_[nb];
    auto carry = [&](std::int64_t old_idx, std::int64_t new_idx) {
      if (old_idx >= 0) m.state_.alive[static_cast<std::size_t>(new_idx)] = state_.alive[static_cast<std::size_t>(old_idx)];
    };
    carry(old_slots.ssm, new_slots.ssm);
    carry(old_slots.mha, new_slots.mha);
    carry(old_slots.mlp, new_slots.mlp);
    // MLP weights may still be wider than the effective width under an overlay.
    if (auto* tb = std::get_if<TransformerBlock>(&m.blocks_[nb].body)) {
      const auto width = m.state_.mlp_width[nb];
      if (tb->mlp.width() > width) {
        NoGradGuard no_grad;
        tb->mlp.up.weight = narrow_rows(tb->mlp.up.weight, width);
        tb->mlp.gate.weight = narrow_rows(tb->mlp.gate.weight, width);
        tb->mlp.down.weight = narrow_cols(tb->mlp.down.weight, width);
        for (auto* t : {&tb->mlp.up.weight, &tb->mlp.gate.weight, &tb->mlp.down.weight}) t->set_requires_grad(true);
      }
    }
    for_each_block_tensor(m.blocks_[nb], [&](const char*, Tensor& t, Slot slot) {
      const std::int64_t idx = slot == Slot::block ? new_slots.block
                               : slot == Slot::ssm ? new_slots.ssm
                               : slot == Slot::mha ? new_slots.mha
                                                   : new_slots.mlp;
      if (!m.is_active(idx)) t = Tensor{};
    });
  }
  m.refresh_counts();
  m.dense_params_ = dense_params_;
  return m;
}

Session Model::session() const { return Session(*this); }

Session::Session(const Model& model) : model_(&model) {}

std::vector<float> Session::prefill(std::span<const std::int32_t> tokens) {
  NoGradGuard no_grad;
  const Tensor logits = model_->forward(tokens, model_->state(), &caches_);
  position_ = static_cast<std::int64_t>(tokens.size());
  const auto vocab = logits.dim(1);
  const auto data = logits.data();
  return {data.end() - vocab, data.end()};
}

std::vector<float> Session::step(std::int32_t token) {
  const auto& desc = model_->descriptor();
  const auto& state = model_->state();
  if (token < 0 || token >= desc.vocab) {
    throw InputError("token id " + std::to_string(token) + " outside vocabulary", position_);
  }
  if (caches_.empty()) caches_.assign(model_->blocks().size(), BlockCache{});
  const auto d = desc.d_model;
  const auto emb = model_->embedding().data();
  std::vector<float> x(emb.begin() + token * d, emb.begin() + (token + 1) * d);
  std::vector<float> h(static_cast<std::size_t>(d)), out(static_cast<std::size_t>(d));
  std::int64_t entry = 0;
  for (std::size_t b = 0; b < model_->blocks().size(); ++b) {
    const auto& block = model_->blocks()[b];
    auto& cache = caches_[b];
    const std::int64_t block_idx = entry;
    const bool block_alive = state.alive[static_cast<std::size_t>(block_idx)];
    if (const auto* mb = std::get_if<MambaBlock>(&block.body)) {
      entry += 2;
      if (!block_alive) continue;
      const bool ssm_active = model_->is_active(block_idx + 1);
      if (ssm_active && cache.scan.h.empty()) cache.scan = ssm::ScanState::zeros(mb->ssm.channels(), mb->ssm.state_size());
      mamba_step(*mb, block.kind, ssm_active, cache, x);
    } else {
      entry += 3;
      if (!block_alive) continue;
      const auto& tb = std::get<TransformerBlock>(block.body);
      if (model_->is_active(block_idx + 1)) {
        tb.attn_norm.apply(x.data(), h.data());
        layers::mha_step(tb.mha, cache.kv, h.data(), out.data());
        for (std::int64_t i = 0; i < d; ++i) x[i] += out[i];
      }
      const auto width = state.mlp_width[b];
      if (model_->is_active(block_idx + 2) && width > 0) {
        tb.mlp_norm.apply(x.data(), h.data());
        mlp_step(tb.mlp, width, h.data(), out.data());
        for (std::int64_t i = 0; i < d; ++i) x[i] += out[i];
      }
    }
  }
  model_->final_norm().apply(x.data(), h.data());
  std::vector<float> logits(static_cast<std::size_t>(desc.vocab));
  kernels::matvec(model_->head().data().data(), h.data(), nullptr, logits.data(), desc.vocab, d);
  ++position_;
  return logits;
}

}  // namespace mshed::model
