// Copyright 2026 The ISALux Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "isalux/tensor.hpp"

// ISAT1 binary tensor container.
//
//   magic "ISAT" | version u8 = 1 | record count u32
//   per record: name length u16 | UTF-8 name | rank u8 | extents u32 x rank | f32 payload
//
// All integers and floats are little-endian.

namespace isalux::isat {

inline constexpr std::array<char, 4> kMagic{'I', 'S', 'A', 'T'};
inline constexpr std::uint8_t kVersion = 1;

struct Record {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

namespace detail {

template <class U>
void put(std::vector<std::uint8_t>& out, U value) {
  static_assert(std::is_trivially_copyable_v<U>);
  std::array<std::uint8_t, sizeof(U)> bytes{};
  std::memcpy(bytes.data(), &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.insert(out.end(), bytes.begin(), bytes.end());
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  template <class U>
  U get() {
    need(sizeof(U));
    std::array<std::uint8_t, sizeof(U)> raw{};
    std::memcpy(raw.data(), bytes_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    pos_ += sizeof(U);
    U value;
    std::memcpy(&value, raw.data(), sizeof(U));
    return value;
  }

  std::string string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw DataError(source_ + ": truncated ISAT1 container");
  }

  const std::vector<std::uint8_t>& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode(const std::vector<Record>& records) {
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  out.push_back(kVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    if (r.name.size() > 0xFFFF) throw DataError("isat: record name too long: " + r.name.substr(0, 64));
    if (r.shape.size() > 0xFF) throw DataError("isat: rank too large for record " + r.name);
    if (numel_of(r.shape) != r.data.size()) {
      throw ShapeError("isat: record " + r.name + " has shape " + shape_str(r.shape) + " but " +
                       std::to_string(r.data.size()) + " values");
    }
    detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(r.name.size()));
    out.insert(out.end(), r.name.begin(), r.name.end());
    out.push_back(static_cast<std::uint8_t>(r.shape.size()));
    for (auto e : r.shape) {
      if (e > 0xFFFFFFFFu) throw DataError("isat: extent too large in record " + r.name);
      detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    }
    for (float v : r.data) detail::put<float>(out, v);
  }
  return out;
}

inline std::vector<Record> decode(const std::vector<std::uint8_t>& bytes, const std::string& source = "isat") {
  detail::Reader in(bytes, source);
  if (in.string(4) != std::string(kMagic.begin(), kMagic.end())) {
    throw DataError(source + ": not an ISAT1 container (bad magic)");
  }
  const auto version = in.get<std::uint8_t>();
  if (version != kVersion) {
    throw DataError(source + ": unsupported ISAT version " + std::to_string(version));
  }
  const auto count = in.get<std::uint32_t>();
  std::vector<Record> records;
  for (std::uint32_t i = 0; i < count; ++i) {
    Record r;
    r.name = in.string(in.get<std::uint16_t>());
    const auto rank = in.get<std::uint8_t>();
    for (std::uint8_t d = 0; d < rank; ++d) r.shape.push_back(in.get<std::uint32_t>());
    const std::size_t n = numel_of(r.shape);
    if (n > bytes.size()) throw DataError(source + ": record " + r.name + " claims more data than the file holds");
    r.data.resize(n);
    for (auto& v : r.data) v = in.get<float>();
    records.push_back(std::move(r));
  }
  if (!in.done()) throw DataError(source + ": trailing bytes after last record");
  return records;
}

inline std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("short write to " + path);
}

inline std::vector<Record> read_file(const std::string& path) { return decode(read_bytes(path), path); }

inline void write_file(const std::string& path, const std::vector<Record>& records) {
  write_bytes(path, encode(records));
}

inline const Record* find(const std::vector<Record>& records, const std::string& name) {
  for (const auto& r : records) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

/// Text payloads (embedded configs) are stored one byte per f32 element.
inline Record text_record(std::string name, const std::string& text) {
  Record r{std::move(name), Shape{text.size()}, {}};
  r.data.reserve(text.size());
  for (unsigned char c : text) r.data.push_back(static_cast<float>(c));
  return r;
}

inline std::string record_text(const Record& r) {
  std::string s;
  s.reserve(r.data.size());
  for (float v : r.data) {
    if (!(v >= 0.0f && v <= 255.0f) || v != static_cast<float>(static_cast<int>(v))) {
      throw DataError("isat: record " + r.name + " is not a text payload");
    }
    s.push_back(static_cast<char>(static_cast<unsigned char>(v)));
  }
  return s;
}

template <class T>
Record to_record(std::string name, const BasicTensor<T>& t) {
  Record r{std::move(name), t.shape(), {}};
  r.data.reserve(t.numel());
  for (std::size_t i = 0; i < t.numel(); ++i) r.data.push_back(static_cast<float>(t[i]));
  return r;
}

template <class T>
BasicTensor<T> to_tensor(const Record& r) {
  std::vector<T> v(r.data.begin(), r.data.end());
  return BasicTensor<T>(r.shape, std::move(v));
}

}  // namespace isalux::isat
