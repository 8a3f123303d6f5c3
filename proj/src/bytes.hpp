#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "patchseg/error.hpp"

namespace patchseg::detail {

template <typename T>
T byteswap_value(T value) {
  auto raw = std::bit_cast<std::array<std::byte, sizeof(T)>>(value);
  std::reverse(raw.begin(), raw.end());
  return std::bit_cast<T>(raw);
}

/// Reads a scalar stored little-endian (or big-endian when `big` is set).
template <typename T>
T load_scalar(std::span<const std::byte> bytes, std::size_t offset, bool big = false) {
  if (offset + sizeof(T) > bytes.size())
    throw FormatError("truncated data at byte " + std::to_string(offset));
  T value;
  std::memcpy(&value, bytes.data() + offset, sizeof(T));
  const bool native_big = std::endian::native == std::endian::big;
  if (big != native_big) value = byteswap_value(value);
  return value;
}

class ByteWriter {
 public:
  template <typename T>
  void put(T value) {
    if constexpr (std::endian::native == std::endian::big) value = byteswap_value(value);
    const auto* p = reinterpret_cast<const std::byte*>(&value);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }

  void put_bytes(std::span<const std::byte> raw) {
    bytes_.insert(bytes_.end(), raw.begin(), raw.end());
  }

  void pad_to(std::size_t size) {
    if (bytes_.size() < size) bytes_.resize(size, std::byte{0});
  }

  std::size_t size() const noexcept { return bytes_.size(); }
  std::vector<std::byte>& bytes() noexcept { return bytes_; }

 private:
  std::vector<std::byte> bytes_;
};

}  // namespace patchseg::detail
