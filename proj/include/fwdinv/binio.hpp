// Little-endian POD helpers for the binary matrix formats.
#pragma once

#include "fwdinv/core.hpp"

#include <bit>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

namespace fwdinv::binio {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

template <class T>
void put(std::ostream& os, const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const char* what) {
    static_assert(std::is_trivially_copyable_v<T>);
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
        throw FormatError(std::string("file truncated while reading ") + what);
    }
    return v;
}

inline void put_bytes(std::ostream& os, const void* data, std::size_t n) {
    os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

inline void get_bytes(std::istream& is, void* data, std::size_t n, const char* what) {
    if (!is.read(static_cast<char*>(data), static_cast<std::streamsize>(n))) {
        throw FormatError(std::string("file truncated while reading ") + what);
    }
}

/// Fixed-width, NUL-padded ASCII tag.
template <std::size_t N>
void put_tag(std::ostream& os, const std::string& s) {
    if (s.size() > N) throw InvalidInput("tag '" + s + "' longer than " + std::to_string(N) + " bytes");
    char buf[N] = {};
    std::memcpy(buf, s.data(), s.size());
    os.write(buf, N);
}

template <std::size_t N>
std::string get_tag(std::istream& is, const char* what) {
    char buf[N] = {};
    get_bytes(is, buf, N, what);
    return std::string(buf, strnlen(buf, N));
}

}  // namespace fwdinv::binio
