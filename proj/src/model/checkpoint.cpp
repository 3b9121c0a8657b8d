#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "mshed/errors.hpp"
#include "mshed/model.hpp"

namespace mshed::model {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

constexpr char kMagic[4] = {'M', 'S', 'H', 'C'};

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
    if (!out_) throw IoError("cannot open '" + path + "' for writing");
  }
  void bytes(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw IoError("write failed on '" + path_ + "'");
  }
  template <typename T>
  void pod(T v) {
    bytes(&v, sizeof v);
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void close() {
    out_.close();
    if (!out_) throw IoError("closing '" + path_ + "' failed");
  }

 private:
  std::ofstream out_;
  std::string path_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw IoError("cannot open checkpoint '" + path + "'");
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw IoError("checkpoint '" + path_ + "' is truncated");
  }
  template <typename T>
  T pod() {
    T v;
    bytes(&v, sizeof v);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    if (n > (1u << 28)) throw IoError("checkpoint '" + path_ + "' has an implausible string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

 private:
  std::ifstream in_;
  std::string path_;
};

}  // namespace

void save_checkpoint(const Model& m, const std::string& path, const std::string& metadata_json) {
  Writer w(path);
  w.bytes(kMagic, 4);
  w.pod(kCheckpointVersion);
  w.str(m.descriptor().to_json());
  w.str(metadata_json);
  w.pod(static_cast<std::uint64_t>(m.dense_param_count()));
  const auto& st = m.state();
  w.pod(static_cast<std::uint32_t>(st.alive.size()));
  w.bytes(st.alive.data(), st.alive.size());
  w.pod(static_cast<std::uint32_t>(st.mlp_width.size()));
  for (auto v : st.mlp_width) w.pod(static_cast<std::uint32_t>(v));
  const auto tensors = m.named_tensors();
  w.pod(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& nt : tensors) {
    w.str(nt.name);
    w.pod(static_cast<std::uint32_t>(nt.tensor.rank()));
    for (auto d : nt.tensor.shape()) w.pod(static_cast<std::uint32_t>(d));
    const auto data = nt.tensor.data();
    w.bytes(data.data(), data.size() * sizeof(float));
  }
  w.close();
}

Model load_checkpoint(const std::string& path, std::string* metadata_json) {
  Reader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw IoError("'" + path + "' is not a checkpoint");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint '" + path + "' has format version " + std::to_string(version) + ", expected " +
                  std::to_string(kCheckpointVersion));
  }
  const auto desc = ArchDescriptor::from_json(r.str());
  desc.validate();
  auto metadata = r.str();
  if (metadata_json) *metadata_json = std::move(metadata);
  const auto dense = r.pod<std::uint64_t>();

  PruneState state;
  state.alive.resize(r.pod<std::uint32_t>());
  r.bytes(state.alive.data(), state.alive.size());
  state.mlp_width.resize(r.pod<std::uint32_t>());
  for (auto& v : state.mlp_width) v = r.pod<std::uint32_t>();
  if (state.alive.size() != registry_layout(desc).size() ||
      static_cast<std::int64_t>(state.mlp_width.size()) != desc.n_blocks) {
    throw IoError("checkpoint '" + path + "' state does not match its descriptor");
  }

  std::map<std::string, Tensor> stored;
  const auto count = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.str();
    Shape shape(r.pod<std::uint32_t>());
    for (auto& d : shape) d = r.pod<std::uint32_t>();
    std::vector<float> data(static_cast<std::size_t>(shape_numel(shape)));
    r.bytes(data.data(), data.size() * sizeof(float));
    stored.emplace(std::move(name), Tensor::from_data(shape, std::move(data)));
  }

  // Build with the physical MLP widths found in the file, then overwrite.
  ArchDescriptor physical = desc;
  for (std::int64_t b = 0; b < desc.n_blocks; ++b) {
    auto it = stored.find("blocks." + std::to_string(b) + ".mlp.up.weight");
    if (it != stored.end()) physical.mlp_widths[static_cast<std::size_t>(b)] = it->second.dim(0);
  }
  Model m = Model::build(physical, 0);
  for (const auto& nt : m.named_tensors()) {
    auto it = stored.find(nt.name);
    if (it == stored.end()) continue;  // dropped by compaction
    if (it->second.shape() != nt.tensor.shape()) {
      throw IoError("checkpoint tensor '" + nt.name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                    shape_str(nt.tensor.shape()));
    }
    auto dst = Tensor(nt.tensor).mutable_data();
    const auto src = it->second.data();
    std::copy(src.begin(), src.end(), dst.begin());
    stored.erase(it);
  }
  if (!stored.empty()) throw IoError("checkpoint holds unknown tensor '" + stored.begin()->first + "'");
  m.desc_ = desc;
  m.state_ = std::move(state);
  m.dense_params_ = static_cast<std::int64_t>(dense);
  m.refresh_counts();
  return m;
}

}  // namespace mshed::model
