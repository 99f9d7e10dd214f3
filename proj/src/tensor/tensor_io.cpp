// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0

#include "ntrm/tensor_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>

namespace ntrm {

namespace {

template <typename U>
void write_le(std::ostream& os, U v) {
    std::array<char, sizeof(U)> bytes{};
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    }
    os.write(bytes.data(), bytes.size());
}

template <typename U>
U read_le(std::istream& is) {
    std::array<unsigned char, sizeof(U)> bytes{};
    is.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
    if (!is) {
        throw FormatError("unexpected end of stream");
    }
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        v |= static_cast<U>(bytes[i]) << (8 * i);
    }
    return v;
}

template <typename T, typename Bits>
void write_values(std::ostream& os, std::span<const T> values) {
    for (T v : values) {
        write_le<Bits>(os, std::bit_cast<Bits>(v));
    }
}

template <typename T, typename Bits>
std::vector<T> read_values(std::istream& is, std::size_t n) {
    std::vector<T> out(n);
    for (auto& v : out) {
        v = std::bit_cast<T>(read_le<Bits>(is));
    }
    return out;
}

}  // namespace

void write_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }
void write_u32(std::ostream& os, std::uint32_t v) { write_le(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { write_le(os, v); }
std::uint8_t read_u8(std::istream& is) { return read_le<std::uint8_t>(is); }
std::uint32_t read_u32(std::istream& is) { return read_le<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return read_le<std::uint64_t>(is); }

void write_tensor(std::ostream& os, const Tensor& t) {
    os.write(kTensorMagic, sizeof(kTensorMagic));
    write_u8(os, kTensorFormatVersion);
    write_u8(os, static_cast<std::uint8_t>(t.dtype()));
    write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) {
        write_u64(os, static_cast<std::uint64_t>(d));
    }
    if (t.dtype() == DType::f32) {
        write_values<float, std::uint32_t>(os, t.data<float>());
    } else {
        write_values<double, std::uint64_t>(os, t.data<double>());
    }
    if (!os) {
        throw FormatError("failed writing tensor");
    }
}

Tensor read_tensor(std::istream& is) {
    char magic[sizeof(kTensorMagic)] = {};
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kTensorMagic, sizeof(magic)) != 0) {
        throw FormatError("bad tensor magic (expected NTRMT)");
    }
    const auto version = read_u8(is);
    if (version != kTensorFormatVersion) {
        throw FormatError("unsupported tensor format version " + std::to_string(version));
    }
    const auto dtype_code = read_u8(is);
    if (dtype_code > 1) {
        throw FormatError("unknown dtype code " + std::to_string(dtype_code));
    }
    const auto rank = read_u32(is);
    if (rank > 16) {
        throw FormatError("implausible tensor rank " + std::to_string(rank));
    }
    Shape shape(rank);
    for (auto& d : shape) {
        d = static_cast<std::int64_t>(read_u64(is));
    }
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    if (dtype_code == 1) {
        impl->dtype = DType::f32;
        impl->data = Buffer(read_values<float, std::uint32_t>(is, n));
    } else {
        impl->dtype = DType::f64;
        impl->data = Buffer(read_values<double, std::uint64_t>(is, n));
    }
    return Tensor(std::move(impl));
}

}  // namespace ntrm
