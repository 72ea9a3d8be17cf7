#pragma once

// Checkpoint container:
//   "SMTCKPT1" | u32 version | u32 len + config JSON | u32 count |
//   count x (u16 len + name | u8 dtype | u8 rank | rank x u32 dims | payload) |
//   u32 CRC32 of everything before it.
// Optimizer and loop state travel as ordinary records under "opt/".

#include <zlib.h>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "smt/io.hpp"
#include "smt/tensor.hpp"

namespace smt {

inline constexpr std::string_view kCheckpointMagic = "SMTCKPT1";
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::string_view kOptPrefix = "opt/";

inline std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks to stay clear of the limit.
  constexpr std::size_t kChunk = 1u << 30;
  for (std::size_t off = 0; off < bytes.size(); off += kChunk) {
    const auto n = static_cast<uInt>(std::min(kChunk, bytes.size() - off));
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + off), n);
  }
  return static_cast<std::uint32_t>(crc);
}

/// A stored tensor, kept as raw little-endian bytes so a load/save cycle
/// reproduces the file exactly.
struct StoredTensor {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::string payload;

  template <typename T>
  static StoredTensor from(std::string name, const Tensor<T>& t) {
    StoredTensor s{std::move(name), dtype_of<T>(), t.shape(), {}};
    s.payload.assign(reinterpret_cast<const char*>(t.ptr()), static_cast<std::size_t>(t.numel()) * sizeof(T));
    return s;
  }

  static StoredTensor scalars(std::string name, const std::vector<double>& values) {
    return from(std::move(name), Tensor<double>(Shape{static_cast<Index>(values.size())}, values));
  }

  template <typename T>
  Tensor<T> as() const {
    if (dtype != dtype_of<T>())
      throw ConfigError("checkpoint tensor " + name + " is " + (dtype == DType::f32 ? "f32" : "f64") + ", expected " +
                        (dtype_of<T>() == DType::f32 ? "f32" : "f64"));
    Tensor<T> t(shape);
    std::memcpy(t.ptr(), payload.data(), payload.size());
    return t;
  }
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string config_json;
  std::vector<StoredTensor> tensors;

  const StoredTensor* find(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
  const StoredTensor& at(std::string_view name) const {
    if (auto* t = find(name)) return *t;
    throw CorruptionError("checkpoint has no tensor named " + std::string(name));
  }
};

inline std::string encode_checkpoint(const Checkpoint& c) {
  io::ByteWriter w;
  w.put_bytes(kCheckpointMagic);
  w.put<std::uint32_t>(c.version);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.config_json.size()));
  w.put_bytes(c.config_json);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    if (t.name.size() > 0xffff) throw UsageError("tensor name too long: " + t.name.substr(0, 64) + "...");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    w.put_bytes(t.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dtype));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.shape.size()));
    for (Index d : t.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.put_bytes(t.payload);
  }
  w.put<std::uint32_t>(crc32_of(w.bytes()));
  return w.bytes();
}

/// Checks run in order: magic, checksum, version, then structure. Nothing is
/// returned unless the whole file is valid.
inline Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < kCheckpointMagic.size() || bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic)
    throw CorruptionError("not a checkpoint: missing SMTCKPT1 magic");
  if (bytes.size() < kCheckpointMagic.size() + 4 + 4)
    throw CorruptionError("checkpoint truncated: " + std::to_string(bytes.size()) + " bytes");
  const auto body = bytes.substr(0, bytes.size() - 4);
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), 4);
  const std::uint32_t actual = crc32_of(body);
  if (stored != actual) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "stored %08x, computed %08x", stored, actual);
    throw CorruptionError(std::string("checkpoint checksum mismatch (") + buf + "); file is truncated or corrupted");
  }
  io::ByteReader r(body);
  r.get_bytes(kCheckpointMagic.size());
  Checkpoint c;
  c.version = r.get<std::uint32_t>();
  if (c.version != kCheckpointVersion)
    throw UnsupportedVersionError("checkpoint format version " + std::to_string(c.version) + " is not supported (this build reads " +
                                  std::to_string(kCheckpointVersion) + ")");
  try {
    c.config_json = std::string(r.get_bytes(r.get<std::uint32_t>()));
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
      StoredTensor t;
      t.name = std::string(r.get_bytes(r.get<std::uint16_t>()));
      const auto dtype = r.get<std::uint8_t>();
      if (dtype > 1) throw ParseError("tensor " + t.name + ": unknown dtype code " + std::to_string(dtype), r.offset() - 1);
      t.dtype = static_cast<DType>(dtype);
      const auto rank = r.get<std::uint8_t>();
      for (int k = 0; k < rank; ++k) t.shape.push_back(r.get<std::uint32_t>());
      const std::size_t elem = t.dtype == DType::f32 ? 4 : 8;
      t.payload = std::string(r.get_bytes(static_cast<std::size_t>(numel(t.shape)) * elem));
      c.tensors.push_back(std::move(t));
    }
    if (r.remaining() != 0) throw ParseError("trailing bytes before checksum", r.offset());
  } catch (const ParseError& e) {
    throw CorruptionError(std::string("checkpoint structure invalid: ") + e.what());
  }
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) { io::atomic_write(path, encode_checkpoint(c)); }

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(io::read_file(path));
  } catch (const CorruptionError& e) {
    throw CorruptionError(path.string() + ": " + e.what());
  }
}

/// Names whose presence or shape differ between the checkpoint's model
/// tensors and `expected` (name -> shape). Empty when they line up.
inline std::vector<std::string> checkpoint_mismatches(const Checkpoint& c, const std::map<std::string, Shape>& expected) {
  std::vector<std::string> out;
  std::map<std::string, Shape> stored;
  for (const auto& t : c.tensors)
    if (!t.name.starts_with(kOptPrefix)) stored[t.name] = t.shape;
  for (const auto& [name, shape] : expected) {
    auto it = stored.find(name);
    if (it == stored.end())
      out.push_back(name + " (missing from checkpoint)");
    else if (it->second != shape)
      out.push_back(name + " (checkpoint " + shape_str(it->second) + ", model " + shape_str(shape) + ")");
  }
  for (const auto& [name, shape] : stored)
    if (!expected.contains(name)) out.push_back(name + " (not in model)");
  return out;
}

}  // namespace smt
