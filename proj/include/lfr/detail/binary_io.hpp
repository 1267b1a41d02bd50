#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <type_traits>
#include <vector>

namespace lfr::detail {

// Little-endian encoding for the on-disk formats. Hosts are assumed to be
// little-endian or big-endian; mixed-endian targets are not supported.
template <typename T>
    requires std::is_trivially_copyable_v<T>
void put_le(std::vector<std::uint8_t>& out, T value) {
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(raw[sizeof(T) - 1 - i]);
    } else {
        out.insert(out.end(), raw, raw + sizeof(T));
    }
}

template <typename T>
    requires std::is_trivially_copyable_v<T>
T get_le(std::span<const std::uint8_t> in, std::size_t offset) {
    std::uint8_t raw[sizeof(T)];
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = 0; i < sizeof(T); ++i) raw[i] = in[offset + sizeof(T) - 1 - i];
    } else {
        std::memcpy(raw, in.data() + offset, sizeof(T));
    }
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
}

}  // namespace lfr::detail
