#pragma once

// VTNS1 tensor container.
//
//   bytes 0..5   magic "VTNS1\0"
//   bytes 6..13  manifest length, unsigned 64-bit little-endian
//   manifest     UTF-8 JSON: {format_version, metadata, tensors[]}
//   payload      raw little-endian tensor buffers
//
// Each tensors[] entry is {name, dtype ("f32"|"i32"), shape, offset, length};
// offsets count from the first payload byte. The writer lays buffers out in
// entry order and serializes the manifest with sorted keys, so writing the
// same container twice yields identical bytes.

#include <algorithm>
#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vitlens/error.hpp"
#include "vitlens/tensor.hpp"

namespace vitlens {

static_assert(std::endian::native == std::endian::little,
              "VTNS1 buffers are read in place; big-endian hosts unsupported");

inline constexpr std::array<char, 6> kContainerMagic = {'V', 'T', 'N', 'S', '1', '\0'};
inline constexpr int kContainerFormatVersion = 1;

enum class DType { f32, i32 };

inline const char* dtype_name(DType t) { return t == DType::f32 ? "f32" : "i32"; }

struct TensorEntry {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<std::uint8_t> bytes;

  std::size_t numel() const { return shape_numel(shape); }
};

class TensorContainer {
 public:
  int format_version = kContainerFormatVersion;
  std::map<std::string, std::string> metadata;

  const std::vector<TensorEntry>& entries() const noexcept { return entries_; }

  bool contains(const std::string& name) const { return find(name) != nullptr; }

  const TensorEntry* find(const std::string& name) const {
    auto it = std::find_if(entries_.begin(), entries_.end(),
                           [&](const TensorEntry& e) { return e.name == name; });
    return it == entries_.end() ? nullptr : &*it;
  }

  void add(TensorEntry entry) {
    if (contains(entry.name)) {
      fail(ErrorCode::duplicate_name, "duplicate tensor name: " + entry.name);
    }
    entries_.push_back(std::move(entry));
  }

  void add_f32(const std::string& name, const Tensor& t) {
    TensorEntry e{name, DType::f32, t.shape(), {}};
    e.bytes.resize(t.size() * sizeof(float));
    std::memcpy(e.bytes.data(), t.storage().data(), e.bytes.size());
    add(std::move(e));
  }

  void add_i32(const std::string& name, const Shape& shape,
               std::span<const std::int32_t> values) {
    if (shape_numel(shape) != values.size()) {
      fail(ErrorCode::length_mismatch, "i32 tensor length mismatch: " + name);
    }
    TensorEntry e{name, DType::i32, shape, {}};
    e.bytes.resize(values.size() * sizeof(std::int32_t));
    std::memcpy(e.bytes.data(), values.data(), e.bytes.size());
    add(std::move(e));
  }

  const TensorEntry& require(const std::string& name) const {
    const TensorEntry* e = find(name);
    if (!e) fail(ErrorCode::missing_tensor, "missing tensor: " + name);
    return *e;
  }

  Tensor get_f32(const std::string& name) const {
    const TensorEntry& e = require(name);
    if (e.dtype != DType::f32) {
      fail(ErrorCode::bad_dtype, "expected f32 tensor: " + name);
    }
    std::vector<float> data(e.numel());
    std::memcpy(data.data(), e.bytes.data(), e.bytes.size());
    return Tensor(e.shape, std::move(data));
  }

  std::vector<std::int32_t> get_i32(const std::string& name) const {
    const TensorEntry& e = require(name);
    if (e.dtype != DType::i32) {
      fail(ErrorCode::bad_dtype, "expected i32 tensor: " + name);
    }
    std::vector<std::int32_t> data(e.numel());
    std::memcpy(data.data(), e.bytes.data(), e.bytes.size());
    return data;
  }

  std::optional<std::string> meta(const std::string& key) const {
    auto it = metadata.find(key);
    if (it == metadata.end()) return std::nullopt;
    return it->second;
  }

 private:
  std::vector<TensorEntry> entries_;
};

// ---------------------------------------------------------------------------
// Serialization

inline std::vector<std::uint8_t> serialize_container(const TensorContainer& c) {
  nlohmann::json manifest;
  manifest["format_version"] = c.format_version;
  manifest["metadata"] = nlohmann::json::object();
  for (const auto& [k, v] : c.metadata) manifest["metadata"][k] = v;
  manifest["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const TensorEntry& e : c.entries()) {
    manifest["tensors"].push_back({{"name", e.name},
                                   {"dtype", dtype_name(e.dtype)},
                                   {"shape", e.shape},
                                   {"offset", offset},
                                   {"length", e.bytes.size()}});
    offset += e.bytes.size();
  }
  const std::string text = manifest.dump();
  std::vector<std::uint8_t> out;
  out.reserve(14 + text.size() + offset);
  out.insert(out.end(), kContainerMagic.begin(), kContainerMagic.end());
  const std::uint64_t len = text.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
  out.insert(out.end(), text.begin(), text.end());
  for (const TensorEntry& e : c.entries()) {
    out.insert(out.end(), e.bytes.begin(), e.bytes.end());
  }
  return out;
}

/// Parses and fully validates a container held in memory.
inline TensorContainer parse_container(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t header = 14;
  if (bytes.size() < header ||
      !std::equal(kContainerMagic.begin(), kContainerMagic.end(), bytes.begin())) {
    fail(ErrorCode::bad_magic, "bad magic: not a VTNS1 container");
  }
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= std::uint64_t(bytes[6 + i]) << (8 * i);
  if (len > bytes.size() - header) {
    fail(ErrorCode::manifest_parse, "manifest length exceeds file size");
  }
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + header,
                                     bytes.begin() + header + len);
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorCode::manifest_parse, std::string("manifest parse failure: ") + ex.what());
  }
  const auto payload = bytes.subspan(header + len);

  TensorContainer c;
  struct Span {
    std::uint64_t offset, length;
    std::string name;
  };
  std::vector<Span> spans;
  try {
    if (!manifest.is_object()) fail(ErrorCode::manifest_parse, "manifest is not an object");
    c.format_version = manifest.at("format_version").get<int>();
    if (c.format_version != kContainerFormatVersion) {
      fail(ErrorCode::bad_version,
           "unsupported format_version " + std::to_string(c.format_version));
    }
    if (manifest.contains("metadata")) {
      for (const auto& [k, v] : manifest.at("metadata").items()) {
        c.metadata[k] = v.get<std::string>();
      }
    }
    for (const auto& t : manifest.at("tensors")) {
      TensorEntry e;
      e.name = t.at("name").get<std::string>();
      const std::string dtype = t.at("dtype").get<std::string>();
      if (dtype == "f32") {
        e.dtype = DType::f32;
      } else if (dtype == "i32") {
        e.dtype = DType::i32;
      } else {
        fail(ErrorCode::bad_dtype, "unknown dtype '" + dtype + "': " + e.name);
      }
      for (const auto& d : t.at("shape")) {
        const auto v = d.get<std::int64_t>();
        if (v < 1) fail(ErrorCode::length_mismatch, "non-positive dimension: " + e.name);
        e.shape.push_back(static_cast<std::size_t>(v));
      }
      if (e.shape.empty()) fail(ErrorCode::length_mismatch, "empty shape: " + e.name);
      const auto offset = t.at("offset").get<std::uint64_t>();
      const auto length = t.at("length").get<std::uint64_t>();
      if (length != e.numel() * 4) {
        fail(ErrorCode::length_mismatch, "length mismatch: " + e.name);
      }
      if (offset > payload.size() || length > payload.size() - offset) {
        fail(ErrorCode::payload_overrun, "payload overrun: " + e.name);
      }
      if (c.contains(e.name)) fail(ErrorCode::duplicate_name, "duplicate tensor name: " + e.name);
      e.bytes.assign(payload.begin() + offset, payload.begin() + offset + length);
      spans.push_back({offset, length, e.name});
      c.add(std::move(e));
    }
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorCode::manifest_parse, std::string("manifest parse failure: ") + ex.what());
  }
  std::sort(spans.begin(), spans.end(),
            [](const Span& a, const Span& b) { return a.offset < b.offset; });
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i].offset < spans[i - 1].offset + spans[i - 1].length) {
      fail(ErrorCode::overlap, "overlapping tensors: " + spans[i - 1].name + ", " +
                                   spans[i].name);
    }
  }
  return c;
}

inline TensorContainer read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return parse_container(bytes);
}

inline void write_container(const TensorContainer& c, const std::filesystem::path& path) {
  const auto bytes = serialize_container(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::io, "write failed: " + path.string());
}

}  // namespace vitlens
