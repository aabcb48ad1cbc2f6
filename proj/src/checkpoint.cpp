#include "bvit/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "bvit/error.hpp"

namespace bvit {
namespace {

constexpr char kMagic[8] = {'B', 'V', 'I', 'T', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw DataError("checkpoint truncated reading " + what);
  return v;
}

std::string get_string(std::istream& is, std::uint64_t n, const std::string& what) {
  if (n > (1ull << 32)) throw DataError("checkpoint corrupt: implausible length for " + what);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) {
    throw DataError("checkpoint truncated reading " + what);
  }
  return s;
}

}  // namespace

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

Checkpoint make_checkpoint(const BilateralViT& model, nlohmann::json meta) {
  Checkpoint c;
  c.config = model.config();
  c.meta = std::move(meta);
  for (const auto& p : model.parameters()) {
    c.tensors.push_back({p.name, p.tensor.shape(), {p.tensor.values().begin(), p.tensor.values().end()}});
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json meta = ckpt.meta;
  meta["network"] = ckpt.config;
  meta["format_version"] = ckpt.format_version;
  const std::string text = meta.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write checkpoint '" + path.string() + "'");
    os.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(os, ckpt.format_version);
    put<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& t : ckpt.tensors) {
      put<std::uint32_t>(os, static_cast<std::uint32_t>(t.name.size()));
      os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
      for (int d : t.shape) put<std::int32_t>(os, d);
      os.write(reinterpret_cast<const char*>(t.values.data()),
               static_cast<std::streamsize>(t.values.size() * sizeof(float)));
    }
    if (!os) throw DataError("error while writing checkpoint '" + path.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("cannot move checkpoint into place: " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint not found: '" + path.string() + "'");
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw DataError("'" + path.string() + "' is not a checkpoint file");
  }
  Checkpoint c;
  c.format_version = get<std::uint32_t>(is, "version");
  if (c.format_version != kCheckpointFormatVersion) {
    throw DataError("unsupported checkpoint format version " + std::to_string(c.format_version));
  }
  const auto meta_len = get<std::uint64_t>(is, "metadata length");
  try {
    c.meta = nlohmann::json::parse(get_string(is, meta_len, "metadata"));
    c.config = c.meta.at("network").get<NetworkConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint metadata invalid: ") + e.what());
  }
  c.meta.erase("network");
  c.meta.erase("format_version");

  const auto count = get<std::uint32_t>(is, "tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = get_string(is, get<std::uint32_t>(is, "name length"), "tensor name");
    const auto ndim = get<std::uint32_t>(is, "ndim");
    if (ndim > 8) throw DataError("checkpoint corrupt: tensor '" + t.name + "' has ndim " + std::to_string(ndim));
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const auto dim = get<std::int32_t>(is, "dims");
      if (dim < 0) throw DataError("checkpoint corrupt: negative dimension");
      t.shape.push_back(dim);
    }
    t.values.resize(static_cast<std::size_t>(nn::shape_numel(t.shape)));
    if (!is.read(reinterpret_cast<char*>(t.values.data()),
                 static_cast<std::streamsize>(t.values.size() * sizeof(float)))) {
      throw DataError("checkpoint truncated in tensor '" + t.name + "'");
    }
    c.tensors.push_back(std::move(t));
  }
  return c;
}

void load_parameters(BilateralViT& model, const Checkpoint& ckpt) {
  for (auto& p : model.parameters()) {
    const NamedTensor* t = ckpt.find(p.name);
    if (!t) throw DataError("checkpoint lacks parameter '" + p.name + "'");
    if (t->shape != p.tensor.shape()) {
      throw DataError("parameter '" + p.name + "' has shape " + nn::shape_str(t->shape) +
                      " in checkpoint, model expects " + nn::shape_str(p.tensor.shape()));
    }
    std::copy(t->values.begin(), t->values.end(), p.tensor.values().begin());
  }
}

BilateralViT model_from_checkpoint(const Checkpoint& ckpt) {
  BilateralViT model(ckpt.config);
  load_parameters(model, ckpt);
  return model;
}

}  // namespace bvit
