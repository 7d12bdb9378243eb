#pragma once

#include "m3/tensor.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

// Model checkpoints: a small versioned binary container holding a config
// echo (free-form JSON text) and named float32 parameter blocks. Values
// round-trip bit-exactly. Layout (little-endian throughout):
//
//   char[4]  magic "M3CK"
//   u32      format version (currently 1)
//   u64      config length, then that many bytes of JSON text
//   u64      entry count
//   entry:   u32 name length, name bytes,
//            u32 ndim, i64[ndim] dims,
//            f32[prod(dims)] row-major values

namespace m3 {

using NamedParams = std::vector<std::pair<std::string, Tensor<float>>>;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  Array<float> values;
};

struct Checkpoint {
  uint32_t version = 0;
  std::string config_json;
  std::vector<CheckpointEntry> entries;
};

namespace detail {

constexpr char kCheckpointMagic[4] = {'M', '3', 'C', 'K'};
constexpr uint32_t kCheckpointVersion = 1;

template <class T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const std::string& path, const char* what) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  require(static_cast<bool>(is), "checkpoint: truncated file reading " + std::string(what) +
                                     " from " + path);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const std::string& config_json,
                            const NamedParams& params) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), "checkpoint: cannot open " + path + " for writing");
  os.write(detail::kCheckpointMagic, 4);
  detail::write_pod(os, detail::kCheckpointVersion);
  detail::write_pod(os, static_cast<uint64_t>(config_json.size()));
  os.write(config_json.data(), static_cast<std::streamsize>(config_json.size()));
  detail::write_pod(os, static_cast<uint64_t>(params.size()));
  for (const auto& [name, t] : params) {
    detail::write_pod(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod(os, static_cast<uint32_t>(t.ndim()));
    for (int i = 0; i < t.ndim(); ++i) detail::write_pod(os, static_cast<int64_t>(t.dim(i)));
    os.write(reinterpret_cast<const char*>(t.value().data()),
             static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(t.size())));
  }
  require(static_cast<bool>(os), "checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), "checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  require(static_cast<bool>(is) && std::memcmp(magic, detail::kCheckpointMagic, 4) == 0,
          "checkpoint: " + path + " is not a checkpoint file (bad magic)");
  Checkpoint ck;
  ck.version = detail::read_pod<uint32_t>(is, path, "version");
  require(ck.version == detail::kCheckpointVersion,
          "checkpoint: " + path + " has unsupported version " + std::to_string(ck.version));
  const auto cfg_len = detail::read_pod<uint64_t>(is, path, "config length");
  ck.config_json.resize(cfg_len);
  is.read(ck.config_json.data(), static_cast<std::streamsize>(cfg_len));
  require(static_cast<bool>(is), "checkpoint: truncated config in " + path);
  const auto n_entries = detail::read_pod<uint64_t>(is, path, "entry count");
  ck.entries.reserve(n_entries);
  for (uint64_t e = 0; e < n_entries; ++e) {
    CheckpointEntry entry;
    const auto name_len = detail::read_pod<uint32_t>(is, path, "name length");
    entry.name.resize(name_len);
    is.read(entry.name.data(), name_len);
    require(static_cast<bool>(is), "checkpoint: truncated entry name in " + path);
    const auto ndim = detail::read_pod<uint32_t>(is, path, "ndim");
    for (uint32_t i = 0; i < ndim; ++i) {
      const auto d = detail::read_pod<int64_t>(is, path, "dim");
      require(d > 0, "checkpoint: non-positive dimension in " + path);
      entry.shape.push_back(static_cast<Dim>(d));
    }
    const Dim count = shape_size(entry.shape);
    entry.values.resize(count);
    is.read(reinterpret_cast<char*>(entry.values.data()),
            static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(count)));
    require(static_cast<bool>(is), "checkpoint: truncated values for '" + entry.name + "' in " +
                                       path);
    ck.entries.push_back(std::move(entry));
  }
  return ck;
}

// Copy checkpoint values onto an existing parameter registry. Strict: the
// name sets must match exactly and every shape must agree.
inline void apply_checkpoint(const Checkpoint& ck, NamedParams& params) {
  require(ck.entries.size() == params.size(),
          "checkpoint: entry count " + std::to_string(ck.entries.size()) +
              " does not match parameter count " + std::to_string(params.size()));
  for (auto& [name, t] : params) {
    const CheckpointEntry* found = nullptr;
    for (const auto& e : ck.entries)
      if (e.name == name) {
        found = &e;
        break;
      }
    require(found != nullptr, "checkpoint: missing entry '" + name + "'");
    require(found->shape == t.shape(), "checkpoint: shape mismatch for '" + name + "': file has " +
                                           shape_str(found->shape) + ", model has " +
                                           shape_str(t.shape()));
    t.value() = found->values;
  }
}

}  // namespace m3
