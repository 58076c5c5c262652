// Copyright 2026 The weakdns Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

// Named-tensor container:
//   "WDNS" | u32 version | records...
//   record = u32 name_len | name (UTF-8) | u32 rank | u64 dims[rank] | f32 payload
// All integers and floats little-endian. Records run to end of file.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "weakdns/error.hpp"

namespace weakdns {

inline constexpr std::uint32_t kContainerVersion = 1;

struct NamedArray {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<float> values;
  bool operator==(const NamedArray&) const = default;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}
  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError("tensor container: truncated record");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_container(const std::vector<NamedArray>& arrays) {
  std::string out = "WDNS";
  detail::put<std::uint32_t>(out, kContainerVersion);
  for (const auto& a : arrays) {
    std::uint64_t count = 1;
    for (auto d : a.dims) count *= d;
    if (count != a.values.size()) throw DomainError("tensor container: payload size mismatch for '" + a.name + "'");
    detail::put<std::uint32_t>(out, std::uint32_t(a.name.size()));
    out += a.name;
    detail::put<std::uint32_t>(out, std::uint32_t(a.dims.size()));
    for (auto d : a.dims) detail::put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(a.values.data()), a.values.size() * sizeof(float));
  }
  return out;
}

inline std::vector<NamedArray> decode_container(const std::string& bytes) {
  if (bytes.size() < 8 || bytes.compare(0, 4, "WDNS") != 0) throw DataError("tensor container: bad magic");
  detail::Reader r(bytes);
  r.take(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kContainerVersion)
    throw DataError("tensor container: unsupported version " + std::to_string(version));
  std::vector<NamedArray> out;
  while (!r.done()) {
    NamedArray a;
    a.name = r.take(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      a.dims.push_back(r.get<std::uint64_t>());
      count *= a.dims.back();
    }
    const std::string payload = r.take(count * sizeof(float));
    a.values.resize(count);
    std::memcpy(a.values.data(), payload.data(), payload.size());
    out.push_back(std::move(a));
  }
  return out;
}

inline void write_container(const std::filesystem::path& path, const std::vector<NamedArray>& arrays) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  const auto bytes = encode_container(arrays);
  f.write(bytes.data(), std::streamsize(bytes.size()));
}

inline std::vector<NamedArray> read_container(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_container(bytes);
}

inline const NamedArray* find_array(const std::vector<NamedArray>& arrays, const std::string& name) {
  for (const auto& a : arrays)
    if (a.name == name) return &a;
  return nullptr;
}

}  // namespace weakdns
