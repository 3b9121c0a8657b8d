#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "mshed/errors.hpp"
#include "mshed/model.hpp"
#include "support/test_support.hpp"

using namespace mshed;
using namespace mshed::model;
using mshed::testing::max_abs_diff;

namespace {

ArchDescriptor small_hybrid() {
  ArchDescriptor d = ArchDescriptor::hybrid(4, {1, 3});
  d.d_model = 16;
  d.d_inner = 24;
  d.ssm_state = 4;
  d.n_heads = 2;
  for (std::size_t i = 0; i < d.mlp_widths.size(); ++i) {
    if (d.block_kinds[i] == BlockKind::transformer) d.mlp_widths[i] = 32;
  }
  return d;
}

ArchDescriptor small_uniform(BlockKind kind, std::int64_t n) {
  ArchDescriptor d = ArchDescriptor::uniform(kind, n);
  d.d_model = 16;
  d.d_inner = 24;
  d.ssm_state = 4;
  d.n_heads = 2;
  for (auto& w : d.mlp_widths) w = w ? 32 : 0;
  return d;
}

std::vector<std::int32_t> some_tokens(std::size_t n, std::int32_t vocab) {
  std::vector<std::int32_t> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<std::int32_t>((i * 37 + 11) % vocab);
  return t;
}

// Builds a fresh model holding only the blocks/sub-modules that are active in
// `src` and copies their weights by name.
Model rebuild_active(const Model& src) {
  const auto& d0 = src.descriptor();
  ArchDescriptor d = d0;
  d.block_kinds.clear();
  d.mlp_widths.clear();
  std::vector<std::int64_t> kept;
  for (std::int64_t b = 0; b < d0.n_blocks; ++b) {
    const auto kind = d0.block_kinds[static_cast<std::size_t>(b)];
    const auto top = src.index_of(kind == BlockKind::transformer ? StructureKind::transformer_block
                                                                 : StructureKind::mamba_block,
                                  b);
    if (!src.is_active(top)) continue;
    kept.push_back(b);
    d.block_kinds.push_back(kind);
    d.mlp_widths.push_back(kind == BlockKind::transformer ? src.state().mlp_width[static_cast<std::size_t>(b)] : 0);
  }
  d.n_blocks = static_cast<std::int64_t>(kept.size());
  Model m = Model::build(d, 999);
  std::map<std::string, Tensor> by_name;
  for (const auto& nt : src.named_tensors()) by_name[nt.name] = nt.tensor;
  for (std::size_t nb = 0; nb < kept.size(); ++nb) {
    const std::string from = "blocks." + std::to_string(kept[nb]) + ".";
    const std::string to = "blocks." + std::to_string(nb) + ".";
    for (const auto& nt : m.named_tensors()) {
      if (nt.name.rfind(to, 0) != 0) continue;
      const Tensor& s = by_name.at(from + nt.name.substr(to.size()));
      auto dst = nt.tensor.mutable_data();
      const auto sd = s.data();
      // MLP weights may be wider in src under a width overlay; copy the leading part.
      const auto rows = nt.tensor.rank() == 2 ? nt.tensor.dim(0) : 1;
      const auto cols = nt.tensor.rank() == 2 ? nt.tensor.dim(1) : nt.tensor.numel();
      const auto scols = s.rank() == 2 ? s.dim(1) : s.numel();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t c = 0; c < cols; ++c) dst[r * cols + c] = sd[r * scols + c];
    }
    // Removed sub-modules: mark removed in the rebuilt model too.
    const auto kind = d.block_kinds[nb];
    if (kind == BlockKind::transformer) {
      for (auto sk : {StructureKind::mha_module, StructureKind::mlp_module}) {
        if (!src.is_active(src.index_of(sk, kept[nb]))) m.remove(sk, static_cast<std::int64_t>(nb));
      }
    } else if (!src.is_active(src.index_of(StructureKind::ssm_module, kept[nb]))) {
      m.remove(StructureKind::ssm_module, static_cast<std::int64_t>(nb));
    }
  }
  for (const auto& name : {"embedding.weight", "final_norm.scale"}) {
    for (const auto& nt : m.named_tensors()) {
      if (nt.name != name) continue;
      const auto sd = by_name.at(name).data();
      std::copy(sd.begin(), sd.end(), nt.tensor.mutable_data().begin());
    }
  }
  return m;
}

}  // namespace

TEST_CASE("descriptor validation and serialization") {
  ArchDescriptor d = small_hybrid();
  CHECK(d.violations().empty());
  CHECK(ArchDescriptor::from_json(d.to_json()) == d);
  ArchDescriptor bad = d;
  bad.block_kinds.pop_back();
  bad.d_model = 0;
  CHECK(bad.violations().size() >= 2);
  CHECK_THROWS_AS(Model::build(bad, 1), ValidationError);
  CHECK_THROWS_AS(ArchDescriptor::from_json("{oops"), ValidationError);
  CHECK_THROWS_AS(parse_structure_kind("attention"), ValidationError);
  CHECK(parse_structure_kind("mlp_channel") == StructureKind::mlp_channel_group);
}

TEST_CASE("build is deterministic per seed") {
  const auto d = small_hybrid();
  const Model a = Model::build(d, 5), b = Model::build(d, 5), c = Model::build(d, 6);
  const auto ta = a.named_tensors(), tb = b.named_tensors(), tc = c.named_tensors();
  REQUIRE(ta.size() == tb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    CHECK(ta[i].name == tb[i].name);
    CHECK(max_abs_diff(ta[i].tensor.data(), tb[i].tensor.data()) == 0.0);
    any_diff |= max_abs_diff(ta[i].tensor.data(), tc[i].tensor.data()) > 0.0;
  }
  CHECK(any_diff);
}

TEST_CASE("empty stack still runs") {
  ArchDescriptor d = small_uniform(BlockKind::mamba1, 0);
  const Model m = Model::build(d, 1);
  const auto tokens = some_tokens(5, 96);
  const Tensor logits = m.forward(tokens);
  CHECK(logits.dim(0) == 5);
  CHECK(logits.dim(1) == 96);
  CHECK(m.registry().empty());
}

TEST_CASE("registry partitions all block parameters") {
  for (const auto& d : {small_hybrid(), small_uniform(BlockKind::mamba1, 3), small_uniform(BlockKind::mamba2, 3)}) {
    const Model m = Model::build(d, 2);
    const auto reg = m.registry();
    std::vector<std::int64_t> per_owner(reg.size(), 0);
    std::int64_t globals = 0, total = 0;
    for (const auto& nt : m.named_tensors()) {
      total += nt.tensor.numel();
      if (nt.owner < 0) {
        globals += nt.tensor.numel();
      } else {
        per_owner[static_cast<std::size_t>(nt.owner)] += nt.tensor.numel();
      }
    }
    const auto analytic = analytic_param_counts(d);
    CHECK(globals == analytic.global);
    for (std::size_t i = 0; i < reg.size(); ++i) {
      CHECK(reg[i].param_count == per_owner[i]);
      CHECK(analytic.owned[i] == per_owner[i]);
    }
    CHECK(m.dense_param_count() == total);
    CHECK(analytic.total() == total);
    CHECK(m.prune_ratio() == 0.0);
  }
}

TEST_CASE("prune ratio equals a brute-force tensor count") {
  Model m = Model::build(small_hybrid(), 3);
  m.remove(StructureKind::mamba_block, 0);
  m.remove(StructureKind::mha_module, 1);
  m.slice_mlp(3, 8);
  std::int64_t alive = 0, dense = m.dense_param_count();
  for (const auto& nt : m.named_tensors()) {
    if (nt.owner < 0 || m.is_active(nt.owner)) alive += nt.tensor.numel();
  }
  CHECK(m.prune_ratio() == doctest::Approx(double(dense - alive) / double(dense)).epsilon(1e-15));
  const std::vector<StructureId> removed{{StructureKind::mamba_block, 0}, {StructureKind::mha_module, 1}};
  // The descriptor-level ratio ignores slicing, so compare against an unsliced model.
  Model u = Model::build(small_hybrid(), 3);
  u.remove(StructureKind::mamba_block, 0);
  u.remove(StructureKind::mha_module, 1);
  CHECK(prune_ratio(small_hybrid(), removed) == doctest::Approx(u.prune_ratio()).epsilon(1e-15));
}

TEST_CASE("ratio at large-model proportions") {
  ArchDescriptor d = ArchDescriptor::uniform(BlockKind::mamba1, 64);
  d.vocab = 50280;
  d.d_model = 2048;
  d.d_inner = 4096;
  d.ssm_state = 16;
  const auto counts = analytic_param_counts(d);
  CHECK(counts.owned[0] + counts.owned[1] == doctest::Approx(0.04e9).epsilon(0.1));
  CHECK(counts.total() == doctest::Approx(2.8e9).epsilon(0.01));
  std::vector<StructureId> removed;
  for (int i = 0; i < 7; ++i) removed.push_back({StructureKind::mamba_block, i});
  const double ratio = prune_ratio(d, removed);
  CHECK(ratio >= 0.100);
  CHECK(ratio <= 0.109);
}

TEST_CASE("removal is an identity bypass") {
  const auto d = small_hybrid();
  const auto tokens = some_tokens(9, 96);
  SUBCASE("zeroed output projection changes nothing") {
    Model m = Model::build(d, 4);
    auto& mb = std::get<MambaBlock>(m.blocks()[2].body);
    for (auto& v : mb.out.weight.mutable_data()) v = 0.0f;
    const Tensor before = m.forward(tokens);
    m.remove(StructureKind::mamba_block, 2);
    CHECK(max_abs_diff(before.data(), m.forward(tokens).data()) <= 1e-6);
  }
  SUBCASE("removing a branch subtracts its contribution") {
    Model m = Model::build(d, 4);
    Model zeroed = m.clone();
    auto& tb = std::get<TransformerBlock>(zeroed.blocks()[1].body);
    for (auto& v : tb.mha.o.weight.mutable_data()) v = 0.0f;
    m.remove(StructureKind::mha_module, 1);
    CHECK(max_abs_diff(m.forward(tokens).data(), zeroed.forward(tokens).data()) <= 1e-6);
  }
  SUBCASE("removing the SSM passes the convolved input through") {
    Model m = Model::build(d, 4);
    Model ident = m.clone();
    auto& mb = std::get<MambaBlock>(ident.blocks()[0].body);
    for (auto& v : mb.ssm.x_to_b.weight.mutable_data()) v = 0.0f;
    for (auto& v : mb.ssm.d_skip.mutable_data()) v = 1.0f;
    m.remove(StructureKind::ssm_module, 0);
    CHECK(max_abs_diff(m.forward(tokens).data(), ident.forward(tokens).data()) <= 1e-6);
  }
  SUBCASE("all blocks removed leaves a per-token bigram") {
    Model m = Model::build(d, 4);
    for (std::int64_t b = 0; b < 4; ++b) {
      m.remove(d.block_kinds[b] == BlockKind::transformer ? StructureKind::transformer_block
                                                          : StructureKind::mamba_block,
               b);
    }
    const std::vector<std::int32_t> a{5, 7, 9}, b{1, 2, 9};
    const Tensor la = m.forward(a), lb = m.forward(b);
    CHECK(max_abs_diff(la.data().subspan(2 * 96), lb.data().subspan(2 * 96)) == 0.0);
  }
}

TEST_CASE("overlay forward equals a rebuilt model with copied weights") {
  const auto d = small_hybrid();
  const auto tokens = some_tokens(11, 96);
  Model m = Model::build(d, 7);
  m.remove(StructureKind::mamba_block, 2);
  m.remove(StructureKind::ssm_module, 0);
  m.remove(StructureKind::mlp_module, 1);
  m.slice_mlp(3, 10);
  const Model rebuilt = rebuild_active(m);
  CHECK(max_abs_diff(m.forward(tokens).data(), rebuilt.forward(tokens).data()) <= 1e-6);
  const Model compacted = m.compact();
  CHECK(compacted.descriptor().n_blocks == 3);
  CHECK(max_abs_diff(m.forward(tokens).data(), compacted.forward(tokens).data()) <= 1e-6);
  CHECK(compacted.active_param_count() == m.active_param_count());
}

TEST_CASE("remove and slice errors") {
  Model m = Model::build(small_hybrid(), 8);
  m.remove(StructureKind::mamba_block, 0);
  CHECK_THROWS_AS(m.remove(StructureKind::mamba_block, 0), StateError);
  CHECK_THROWS_AS(m.remove(StructureKind::ssm_module, 0), StateError);
  CHECK_THROWS_AS(m.remove(StructureKind::mha_module, 0), ValidationError);
  CHECK_THROWS_AS(m.slice_mlp(1, 33), CapacityError);
  CHECK_THROWS_AS(m.slice_mlp(0, 4), ValidationError);
  const std::vector<std::int32_t> bad{1, 2, 300};
  try {
    m.forward(bad);
    FAIL("expected InputError");
  } catch (const InputError& e) {
    CHECK(e.position() == 2);
  }
}

TEST_CASE("MLP slicing semantics") {
  const auto d = small_hybrid();
  const auto tokens = some_tokens(8, 96);
  SUBCASE("full slice equals removing the MLP") {
    Model a = Model::build(d, 9), b = Model::build(d, 9);
    a.slice_mlp(1, 32);
    b.remove(StructureKind::mlp_module, 1);
    CHECK(max_abs_diff(a.forward(tokens).data(), b.forward(tokens).data()) <= 1e-6);
  }
  SUBCASE("two slices of two equal one slice of four") {
    Model a = Model::build(d, 9), b = Model::build(d, 9);
    a.slice_mlp(3, 2);
    a.slice_mlp(3, 2);
    b.slice_mlp(3, 4);
    CHECK(max_abs_diff(a.forward(tokens).data(), b.forward(tokens).data()) == 0.0);
    CHECK(std::get<TransformerBlock>(a.blocks()[3].body).mlp.width() == 28);
  }
  SUBCASE("slice equals width overlay and updates counts") {
    Model a = Model::build(d, 9);
    PruneState overlay = a.state();
    overlay.mlp_width[3] = 20;
    const Tensor masked = a.forward(tokens, overlay);
    const auto before = a.registry()[a.index_of(StructureKind::mlp_module, 3)].param_count;
    a.slice_mlp(3, 12);
    CHECK(max_abs_diff(masked.data(), a.forward(tokens).data()) <= 1e-6);
    CHECK(a.registry()[a.index_of(StructureKind::mlp_module, 3)].param_count == before - 3 * 16 * 12);
  }
}

TEST_CASE("decode session matches full forward") {
  for (const auto& d : {small_hybrid(), small_uniform(BlockKind::mamba1, 2), small_uniform(BlockKind::mamba2, 2)}) {
    Model m = Model::build(d, 10);
    m.remove(m.registry()[1]);  // a sub-module of block 0
    const auto tokens = some_tokens(12, 96);
    const Tensor full = m.forward(tokens);
    Session s = m.session();
    const auto first = s.prefill(std::span(tokens).first(7));
    CHECK(max_abs_diff(first, full.data().subspan(6 * 96, 96)) < 1e-5);
    for (std::size_t t = 7; t < tokens.size(); ++t) {
      const auto logits = s.step(tokens[t]);
      CHECK(max_abs_diff(logits, full.data().subspan(t * 96, 96)) < 1e-4);
    }
    CHECK(s.position() == 12);
  }
}

TEST_CASE("checkpoint round trip is bit identical") {
  const auto dir = std::filesystem::temp_directory_path() / "mshed_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "m.ckpt").string();
  const auto tokens = some_tokens(10, 96);
  Model m = Model::build(small_hybrid(), 11);
  m.remove(StructureKind::ssm_module, 2);
  m.slice_mlp(3, 6);
  save_checkpoint(m, path, R"({"note":"x"})");
  std::string meta;
  const Model back = load_checkpoint(path, &meta);
  CHECK(meta == R"({"note":"x"})");
  CHECK(back.descriptor() == m.descriptor());
  CHECK(back.state() == m.state());
  CHECK(back.dense_param_count() == m.dense_param_count());
  CHECK(max_abs_diff(m.forward(tokens).data(), back.forward(tokens).data()) == 0.0);

  const Model c = m.compact();
  save_checkpoint(c, path);
  const Model cb = load_checkpoint(path);
  CHECK(max_abs_diff(c.forward(tokens).data(), cb.forward(tokens).data()) == 0.0);

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    const std::uint32_t v = 99;
    f.write(reinterpret_cast<const char*>(&v), 4);
  }
  CHECK_THROWS_AS(load_checkpoint(path), IoError);
  CHECK_THROWS_AS(load_checkpoint((dir / "missing").string()), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("trainable parameters exclude removed structures") {
  Model m = Model::build(small_hybrid(), 12);
  const auto all = m.trainable_parameters().size();
  m.remove(StructureKind::transformer_block, 1);
  const auto fewer = m.trainable_parameters().size();
  CHECK(fewer == all - 9);
  const auto& tb = std::get<TransformerBlock>(m.blocks()[1].body);
  for (const auto& t : m.trainable_parameters()) CHECK_FALSE(t.same_storage(tb.mha.q.weight));
}
