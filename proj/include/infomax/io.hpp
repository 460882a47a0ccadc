#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "infomax/tensor.hpp"

namespace infomax {

enum class DType : std::uint8_t { Float32 = 1, Float64 = 2 };

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::Float32;
  else return DType::Float64;
}

inline const char* dtype_name(DType d) { return d == DType::Float32 ? "float32" : "float64"; }

// ---------------------------------------------------------------------------
// "DIMT" binary tensor file: magic 44 49 4D 54, version byte (1), dtype byte
// (1 = float32, 2 = float64), ndim byte, ndim little-endian u32 extents, then
// row-major little-endian scalars.

namespace detail {

inline void put_u32_le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                        static_cast<unsigned char>((v >> 8) & 0xFF),
                        static_cast<unsigned char>((v >> 16) & 0xFF),
                        static_cast<unsigned char>((v >> 24) & 0xFF)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

template <typename S, typename D>
void write_scalars_le(std::ostream& os, const std::vector<D>& data) {
  static_assert(sizeof(S) == 4 || sizeof(S) == 8);
  for (const auto v : data) {
    S s = static_cast<S>(v);
    std::uint64_t bits = 0;
    std::memcpy(&bits, &s, sizeof(S));
    for (std::size_t i = 0; i < sizeof(S); ++i) {
      const auto byte = static_cast<unsigned char>((bits >> (8 * i)) & 0xFF);
      os.put(static_cast<char>(byte));
    }
  }
}

template <typename S, typename D>
void read_scalars_le(std::istream& is, std::vector<D>& out, std::size_t count) {
  out.resize(count);
  for (std::size_t k = 0; k < count; ++k) {
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(S); ++i) {
      const int c = is.get();
      if (c == EOF) throw std::runtime_error("DIMT: truncated scalar data");
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
    }
    S s;
    std::memcpy(&s, &bits, sizeof(S));
    out[k] = static_cast<D>(s);
  }
}

}  // namespace detail

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("DIMT: cannot open for write: " + path.string());
  const char magic[4] = {0x44, 0x49, 0x4D, 0x54};
  os.write(magic, 4);
  os.put(1);  // version
  os.put(static_cast<char>(dtype_of<T>()));
  os.put(static_cast<char>(t.shape.size()));
  for (const auto e : t.shape) detail::put_u32_le(os, static_cast<std::uint32_t>(e));
  if constexpr (std::is_same_v<T, float>)
    detail::write_scalars_le<float>(os, *t.data);
  else
    detail::write_scalars_le<double>(os, *t.data);
  if (!os) throw std::runtime_error("DIMT: write failed: " + path.string());
}

// Loads a DIMT file, converting to the requested scalar type if the stored
// dtype differs.
template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("DIMT: cannot open: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "DIMT", 4) != 0)
    throw std::runtime_error("DIMT: bad magic in " + path.string());
  const int version = is.get();
  if (version != 1) throw std::runtime_error("DIMT: unsupported version");
  const int dtype = is.get();
  if (dtype != 1 && dtype != 2) throw std::runtime_error("DIMT: unknown dtype byte");
  const int ndim = is.get();
  if (ndim < 0) throw std::runtime_error("DIMT: truncated header");
  Shape shape(static_cast<std::size_t>(ndim));
  for (auto& e : shape) e = static_cast<std::int64_t>(detail::get_u32_le(is));
  const auto count = static_cast<std::size_t>(shape_numel(shape));
  std::vector<T> data;
  if (dtype == 1)
    detail::read_scalars_le<float>(is, data, count);
  else
    detail::read_scalars_le<double>(is, data, count);
  return Tensor<T>::from(std::move(shape), std::move(data));
}

// ---------------------------------------------------------------------------
// Checkpoints: a directory of DIMT files plus a plain-text manifest with one
// line per tensor: name shape dtype file.

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::string dtype;
  std::string file;
};

template <typename T>
void save_checkpoint(const std::filesystem::path& dir,
                     const std::vector<std::pair<std::string, const Tensor<T>*>>& tensors) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw std::runtime_error("checkpoint: cannot write manifest");
  for (const auto& [name, t] : tensors) {
    const std::string file = name + ".dimt";
    save_tensor(dir / file, *t);
    manifest << name << " ";
    for (std::size_t i = 0; i < t->shape.size(); ++i)
      manifest << (i ? "x" : "") << t->shape[i];
    if (t->shape.empty()) manifest << "scalar";
    manifest << " " << dtype_name(dtype_of<T>()) << " " << file << "\n";
  }
}

inline std::vector<CheckpointEntry> read_checkpoint_manifest(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw std::runtime_error("checkpoint: missing manifest in " + dir.string());
  std::vector<CheckpointEntry> entries;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    CheckpointEntry e;
    std::string shape_text;
    ss >> e.name >> shape_text >> e.dtype >> e.file;
    if (!ss) throw std::runtime_error("checkpoint: malformed manifest line: " + line);
    if (shape_text != "scalar") {
      std::int64_t v = 0;
      for (const char c : shape_text + "x") {
        if (c == 'x') {
          e.shape.push_back(v);
          v = 0;
        } else if (c >= '0' && c <= '9') {
          v = v * 10 + (c - '0');
        } else {
          throw std::runtime_error("checkpoint: bad shape field: " + shape_text);
        }
      }
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

template <typename T>
void load_checkpoint(const std::filesystem::path& dir,
                     const std::vector<std::pair<std::string, Tensor<T>*>>& tensors) {
  const auto entries = read_checkpoint_manifest(dir);
  for (const auto& [name, dst] : tensors) {
    const CheckpointEntry* found = nullptr;
    for (const auto& e : entries)
      if (e.name == name) {
        found = &e;
        break;
      }
    if (!found) throw std::runtime_error("checkpoint: tensor not in manifest: " + name);
    Tensor<T> loaded = load_tensor<T>(dir / found->file);
    if (loaded.shape != dst->shape)
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    *dst->data = *loaded.data;
  }
}

// FNV-1a 64-bit digest, used for the run-manifest file checksums.
inline std::uint64_t fnv1a64(const void* bytes, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checksum: cannot open " + path.string());
  std::uint64_t h = 0xCBF29CE484222325ULL;
  char buf[4096];
  while (is) {
    is.read(buf, sizeof(buf));
    const auto got = static_cast<std::size_t>(is.gcount());
    for (std::size_t i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001B3ULL;
    }
  }
  return h;
}

}  // namespace infomax
