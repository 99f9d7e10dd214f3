// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary tensor dump:
//   "NTRMT" | u8 version (1) | u8 dtype (0 = f64, 1 = f32) | u32 rank |
//   u64 dims[rank] | raw little-endian values
// All integers are little-endian.

#pragma once

#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "ntrm/tensor.hpp"

namespace ntrm {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr char kTensorMagic[5] = {'N', 'T', 'R', 'M', 'T'};
inline constexpr std::uint8_t kTensorFormatVersion = 1;

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

// Little-endian primitives shared with the checkpoint container.
void write_u8(std::ostream& os, std::uint8_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
std::uint8_t read_u8(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);

}  // namespace ntrm
