// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ntrm {

/// Per-pixel class indices, batch x height x width, row-major.
struct LabelMap {
    std::int64_t batch = 1;
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::vector<std::int32_t> data;

    LabelMap() = default;
    LabelMap(std::int64_t b, std::int64_t h, std::int64_t w, std::vector<std::int32_t> values)
        : batch(b), height(h), width(w), data(std::move(values)) {
        if (static_cast<std::int64_t>(data.size()) != b * h * w) {
            throw std::invalid_argument("LabelMap: " + std::to_string(data.size()) +
                                        " labels for " + std::to_string(b) + "x" +
                                        std::to_string(h) + "x" + std::to_string(w));
        }
    }

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    std::int32_t& at(std::int64_t b, std::int64_t y, std::int64_t x) {
        return data[static_cast<std::size_t>((b * height + y) * width + x)];
    }
    std::int32_t at(std::int64_t b, std::int64_t y, std::int64_t x) const {
        return data[static_cast<std::size_t>((b * height + y) * width + x)];
    }
    /// Throws unless every label lies in [0, classes).
    void check_range(int classes) const {
        for (auto v : data) {
            if (v < 0 || v >= classes) {
                throw std::invalid_argument("label " + std::to_string(v) + " outside [0, " +
                                            std::to_string(classes) + ")");
            }
        }
    }
};

}  // namespace ntrm
