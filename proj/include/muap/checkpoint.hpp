// SPDX-License-Identifier: Apache-2.0
//
// Tensor container format, all integers little-endian:
//
//   "MUAP" | u32 version (1) | u32 tensor count
//   per tensor: u16 name length | name bytes (UTF-8) | u8 ndim | u32 dims[ndim]
//               | float32 data
//   u64 sum of every data byte, modulo 2^64
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "muap/error.hpp"
#include "muap/tensor.hpp"

namespace muap {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { raw(&v, 2); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& in) : in_(in) {}

  template <class T>
  T read(const std::string& what) {
    T v;
    need(sizeof(T), what);
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  const std::uint8_t* take(std::size_t n, const std::string& what) {
    need(n, what);
    const std::uint8_t* p = in_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n, const std::string& what) {
    if (in_.size() - pos_ < n) throw CheckpointError(CheckpointError::Kind::kTruncated, "checkpoint truncated in " + what);
  }
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_tensors(const NamedTensors& tensors) {
  detail::ByteWriter w;
  w.raw("MUAP", 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  std::uint64_t checksum = 0;
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xffff) throw InvalidArgument("tensor name too long: " + name.substr(0, 32) + "...");
    if (t.dim() > 0xff) throw InvalidArgument("too many dimensions in tensor " + name);
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.raw(name.data(), name.size());
    w.u8(static_cast<std::uint8_t>(t.dim()));
    for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    const auto* bytes = reinterpret_cast<const std::uint8_t*>(t.data().data());
    const std::size_t nbytes = t.numel() * sizeof(float);
    for (std::size_t i = 0; i < nbytes; ++i) checksum += bytes[i];
    w.raw(bytes, nbytes);
  }
  w.u64(checksum);
  return w.take();
}

inline NamedTensors decode_tensors(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  const std::uint8_t* magic = r.take(4, "header");
  if (std::memcmp(magic, "MUAP", 4) != 0) throw CheckpointError(CheckpointError::Kind::kBadMagic, "not a checkpoint (bad magic)");
  const auto version = r.read<std::uint32_t>("header");
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointError::Kind::kVersionMismatch,
                          "checkpoint version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(kCheckpointVersion) + ")");
  }
  const auto count = r.read<std::uint32_t>("header");
  NamedTensors out;
  std::uint64_t checksum = 0;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string entry = "tensor #" + std::to_string(k);
    const auto len = r.read<std::uint16_t>(entry + " name");
    const auto* nm = r.take(len, entry + " name");
    std::string name(reinterpret_cast<const char*>(nm), len);
    const std::string where = "tensor '" + name + "'";
    const auto ndim = r.read<std::uint8_t>(where);
    Shape shape(ndim);
    for (auto& d : shape) {
      d = r.read<std::uint32_t>(where);
      if (d == 0) throw CheckpointError(CheckpointError::Kind::kMalformed, where + " has a zero dimension");
    }
    const std::size_t n = shape_numel(shape);
    if (n > r.remaining() / sizeof(float)) {
      throw CheckpointError(CheckpointError::Kind::kTruncated, "checkpoint truncated in " + where);
    }
    const auto* data = r.take(n * sizeof(float), where);
    for (std::size_t i = 0; i < n * sizeof(float); ++i) checksum += data[i];
    std::vector<float> values(n);
    std::memcpy(values.data(), data, n * sizeof(float));
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  const auto stored = r.read<std::uint64_t>("checksum");
  if (stored != checksum) throw CheckpointError(CheckpointError::Kind::kChecksum, "checkpoint checksum mismatch");
  if (r.remaining() != 0) throw CheckpointError(CheckpointError::Kind::kMalformed, "trailing bytes after checkpoint");
  return out;
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "short write to " + path.string());
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors) {
  write_bytes(path, encode_tensors(tensors));
}

inline NamedTensors load_tensors(const std::filesystem::path& path) { return decode_tensors(read_bytes(path)); }

/// Looks up a tensor by name.
inline const Tensor& find_tensor(const NamedTensors& tensors, const std::string& name) {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw CheckpointError(CheckpointError::Kind::kMalformed, "checkpoint has no tensor named '" + name + "'");
}

}  // namespace muap
