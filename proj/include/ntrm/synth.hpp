// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic tissue-like dataset: Voronoi partitions into contiguous class
// regions, per-class color and texture, flips/rotations, overlapping tiles,
// and binary PPM/PGM storage.

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ntrm/label_map.hpp"
#include "ntrm/tensor.hpp"
#include "ntrm/tensor_io.hpp"

namespace ntrm {

inline constexpr int kMaxClasses = 12;

struct SynthConfig {
    int num_classes = 5;
    int image_size = 64;
    std::uint64_t seed = 1234;
    int min_regions = 6;
    int max_regions = 12;
    double noise_sigma = 0.06;
    double texture_amplitude = 0.05;
    int min_component_area = 16;
    // Class pairs that prefer to border each other. Empty selects a ring:
    // class c borders c - 1 and c + 1 (mod K).
    std::vector<std::pair<int, int>> adjacency;
    int train_count = 200;
    int val_count = 40;
    int test_count = 40;

    void validate() const;
    /// Symmetric K x K preference matrix (diagonal true).
    std::vector<bool> adjacency_matrix() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

/// 3 x H x W floats in [0, 1], channel-major.
struct Image {
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::vector<double> data;

    double& at(int ch, std::int64_t y, std::int64_t x) {
        return data[static_cast<std::size_t>((ch * height + y) * width + x)];
    }
    double at(int ch, std::int64_t y, std::int64_t x) const {
        return data[static_cast<std::size_t>((ch * height + y) * width + x)];
    }
};

struct Sample {
    Image image;
    LabelMap label;  // batch 1
    std::int64_t id = 0;
    std::uint64_t seed = 0;
};

/// Deterministic in (config, id).
Sample generate(const SynthConfig& config, std::int64_t id);

/// Connected components (4-neighborhood) as (class, area) pairs, in scan order.
std::vector<std::pair<int, std::int64_t>> connected_components(const LabelMap& label);

Sample flip_horizontal(const Sample& s);
Sample flip_vertical(const Sample& s);
/// Rotates counter-clockwise by quarter_turns * 90 degrees.
Sample rotate90(const Sample& s, int quarter_turns);
/// Random horizontal/vertical flip and a random multiple of 90 degrees.
Sample augment(const Sample& s, std::mt19937_64& rng);

/// Top-left corners along one axis: 0, stride, 2*stride, ..., clamped so the
/// last tile ends at the border.
std::vector<std::int64_t> tile_offsets(std::int64_t extent, std::int64_t patch, std::int64_t stride);
std::vector<Sample> tile(const Sample& s, std::int64_t patch, std::int64_t stride);

void write_image(const std::filesystem::path& path, const Image& image);
Image read_image(const std::filesystem::path& path);
void write_label(const std::filesystem::path& path, const LabelMap& label);
LabelMap read_label(const std::filesystem::path& path, int classes);

/// Batches samples into a B x 3 x H x W tensor and a B x H x W label map.
Tensor stack_images(const std::vector<const Sample*>& samples, DType dtype = DType::f64);
LabelMap stack_labels(const std::vector<const Sample*>& samples);

struct Dataset {
    SynthConfig config;
    std::vector<Sample> train, val, test;
    const std::vector<Sample>& split(const std::string& name) const;
};

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t h = 14695981039346656037ULL);
std::uint64_t config_checksum(const SynthConfig& config);

/// Writes <root>/{train,val,test}/img_<id>.ppm and lab_<id>.pgm plus
/// <root>/manifest. Returns the manifest document.
nlohmann::json write_dataset(const std::filesystem::path& root, const SynthConfig& config);
nlohmann::json read_manifest(const std::filesystem::path& root);
Dataset load_dataset(const std::filesystem::path& root);

}  // namespace ntrm
