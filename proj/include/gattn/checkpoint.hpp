#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "gattn/tensor.hpp"

namespace gattn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

/// A tensor staged for serialization: float32 payload regardless of the
/// in-memory scalar type.
struct NamedTensorData {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct CheckpointData {
  std::string manifest;
  std::vector<NamedTensorData> tensors;
};

// Container layout (all integers little-endian):
//   bytes 0..7   magic "GATNCKPT"
//   u32          version (1)
//   u64          manifest length, then manifest bytes (UTF-8)
//   u64          tensor count
//   per tensor:  u32 name length, name bytes,
//                u32 rank, u64*rank extents,
//                f32*numel row-major payload
inline constexpr char kCheckpointMagic[8] = {'G', 'A', 'T', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename V>
void write_pod(std::ofstream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::ifstream& in, const std::string& path) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw FormatError("checkpoint: truncated file " + path);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const CheckpointData& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  out.write(kCheckpointMagic, 8);
  detail::write_pod(out, kCheckpointVersion);
  detail::write_pod(out, static_cast<std::uint64_t>(ckpt.manifest.size()));
  out.write(ckpt.manifest.data(), static_cast<std::streamsize>(ckpt.manifest.size()));
  detail::write_pod(out, static_cast<std::uint64_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    detail::write_pod(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::write_pod(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) detail::write_pod(out, static_cast<std::uint64_t>(d));
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  }
  if (!out) throw IoError("short write on checkpoint: " + path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw FormatError("checkpoint: bad magic in " + path);
  const auto version = detail::read_pod<std::uint32_t>(in, path);
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " in " +
                      path);
  CheckpointData ckpt;
  const auto mlen = detail::read_pod<std::uint64_t>(in, path);
  ckpt.manifest.resize(mlen);
  in.read(ckpt.manifest.data(), static_cast<std::streamsize>(mlen));
  if (!in) throw FormatError("checkpoint: truncated manifest in " + path);
  const auto count = detail::read_pod<std::uint64_t>(in, path);
  ckpt.tensors.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensorData t;
    const auto nlen = detail::read_pod<std::uint32_t>(in, path);
    t.name.resize(nlen);
    in.read(t.name.data(), nlen);
    const auto rank = detail::read_pod<std::uint32_t>(in, path);
    t.shape.resize(rank);
    std::int64_t numel = 1;
    for (auto& d : t.shape) {
      d = static_cast<std::int64_t>(detail::read_pod<std::uint64_t>(in, path));
      numel *= d;
    }
    t.data.resize(static_cast<std::size_t>(numel));
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!in) throw FormatError("checkpoint: truncated tensor '" + t.name + "' in " + path);
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

/// Reference to a live, named model tensor (parameter or state).
template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
CheckpointData stage_checkpoint(const std::string& manifest,
                                const std::vector<ParamRef<T>>& refs) {
  CheckpointData ckpt;
  ckpt.manifest = manifest;
  ckpt.tensors.reserve(refs.size());
  for (const auto& r : refs) {
    NamedTensorData t;
    t.name = r.name;
    t.shape = r.tensor.shape();
    t.data.reserve(r.tensor.data().size());
    for (auto v : r.tensor.data()) t.data.push_back(static_cast<float>(v));
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

/// Copies checkpoint tensors into live refs by name; every ref must be
/// present with a matching shape, and no checkpoint tensor may be left over.
template <typename T>
void assign_checkpoint(const CheckpointData& ckpt, const std::vector<ParamRef<T>>& refs) {
  std::map<std::string, const NamedTensorData*> by_name;
  for (const auto& t : ckpt.tensors) by_name[t.name] = &t;
  for (const auto& r : refs) {
    const auto it = by_name.find(r.name);
    if (it == by_name.end())
      throw FormatError("checkpoint: missing tensor '" + r.name + "'");
    const NamedTensorData& t = *it->second;
    if (t.shape != r.tensor.shape())
      throw FormatError("checkpoint: tensor '" + r.name + "' has shape " + shape_str(t.shape) +
                        ", model expects " + shape_str(r.tensor.shape()));
    auto& dst = const_cast<Tensor<T>&>(r.tensor).data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(t.data[i]);
    by_name.erase(it);
  }
  if (!by_name.empty())
    throw FormatError("checkpoint: unexpected tensor '" + by_name.begin()->first + "'");
}

}  // namespace gattn
