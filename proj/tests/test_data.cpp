// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "ntrm/synth.hpp"

using namespace ntrm;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("ntrm_test_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void spit(const fs::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << bytes;
}

std::map<int, std::int64_t> histogram(const LabelMap& y) {
    std::map<int, std::int64_t> h;
    for (auto v : y.data) ++h[v];
    return h;
}

SynthConfig small_synth() {
    SynthConfig cfg;
    cfg.train_count = 3;
    cfg.val_count = 2;
    cfg.test_count = 1;
    return cfg;
}

}  // namespace

TEST_CASE("generation is a function of config and id") {
    const SynthConfig cfg;
    const Sample a = generate(cfg, 7), b = generate(cfg, 7), c = generate(cfg, 8);
    CHECK(a.image.data == b.image.data);
    CHECK(a.label.data == b.label.data);
    CHECK(a.label.data != c.label.data);
    SynthConfig other = cfg;
    other.seed = 99;
    CHECK(generate(other, 7).label.data != a.label.data);
}

TEST_CASE("generated samples are well formed") {
    SynthConfig cfg;
    for (std::int64_t id = 0; id < 40; ++id) {
        CAPTURE(id);
        const Sample s = generate(cfg, id);
        CHECK(s.image.height == 64);
        CHECK(s.image.width == 64);
        CHECK(s.image.data.size() == 3 * 64 * 64);
        for (double v : s.image.data) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
        for (auto v : s.label.data) {
            CHECK(v >= 0);
            CHECK(v < cfg.num_classes);
        }
        // Each present class owns at least one component of area >= 16.
        std::map<int, std::int64_t> largest;
        for (const auto& [cls, area] : connected_components(s.label)) largest[cls] = std::max(largest[cls], area);
        for (const auto& [cls, count] : histogram(s.label)) {
            CAPTURE(cls);
            CHECK(largest[cls] >= 16);
        }
    }
}

TEST_CASE("single-class configuration") {
    SynthConfig cfg;
    cfg.num_classes = 1;
    const Sample s = generate(cfg, 0);
    for (auto v : s.label.data) CHECK(v == 0);
}

TEST_CASE("synth config validation") {
    SynthConfig cfg;
    cfg.num_classes = 13;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.num_classes = 12;
    CHECK_NOTHROW(cfg.validate());
    cfg.image_size = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    SynthConfig adj;
    adj.adjacency = {{0, 7}};
    CHECK_THROWS_AS(adj.validate(), std::invalid_argument);

    const SynthConfig ring;
    const auto m = ring.adjacency_matrix();
    CHECK(m[0 * 5 + 1]);
    CHECK(m[0 * 5 + 4]);
    CHECK_FALSE(m[0 * 5 + 2]);
    CHECK(m[3 * 5 + 3]);

    const nlohmann::json j = small_synth();
    CHECK(nlohmann::json(j.get<SynthConfig>()) == j);
}

TEST_CASE("connected components use the 4-neighborhood") {
    // Diagonal pixels of class 1 are two components.
    const LabelMap y(1, 2, 2, {1, 0, 0, 1});
    const auto cc = connected_components(y);
    REQUIRE(cc.size() == 4);
    CHECK(cc[0] == std::make_pair(1, std::int64_t{1}));
    CHECK(cc[1] == std::make_pair(0, std::int64_t{1}));
}

TEST_CASE("augmentation") {
    const Sample s = generate(SynthConfig{}, 3);
    SUBCASE("flips are involutions; four quarter turns are the identity") {
        CHECK(flip_horizontal(flip_horizontal(s)).image.data == s.image.data);
        CHECK(flip_vertical(flip_vertical(s)).label.data == s.label.data);
        const Sample r = rotate90(rotate90(rotate90(rotate90(s, 1), 1), 1), 1);
        CHECK(r.image.data == s.image.data);
        CHECK(r.label.data == s.label.data);
        CHECK(rotate90(s, 2).label.data == flip_vertical(flip_horizontal(s)).label.data);
    }
    SUBCASE("a quarter turn is counter-clockwise") {
        Sample t;
        t.image = Image{2, 2, std::vector<double>(12, 0.0)};
        t.label = LabelMap(1, 2, 2, {0, 1, 2, 3});
        // [[0 1] [2 3]] turned counter-clockwise is [[1 3] [0 2]].
        CHECK(rotate90(t, 1).label.data == std::vector<std::int32_t>{1, 3, 0, 2});
    }
    SUBCASE("pixel pairs and histograms survive random augmentation") {
        std::mt19937_64 rng(4);
        // Tag each pixel: the red channel encodes the label.
        Sample t = s;
        for (std::int64_t y = 0; y < 64; ++y) {
            for (std::int64_t x = 0; x < 64; ++x) t.image.at(0, y, x) = t.label.at(0, y, x) / 10.0;
        }
        for (int i = 0; i < 20; ++i) {
            const Sample a = augment(t, rng);
            CHECK(histogram(a.label) == histogram(t.label));
            for (std::int64_t y = 0; y < 64; ++y) {
                for (std::int64_t x = 0; x < 64; ++x) REQUIRE(a.image.at(0, y, x) == a.label.at(0, y, x) / 10.0);
            }
        }
    }
}

TEST_CASE("tiling") {
    const Sample s = generate(SynthConfig{}, 5);
    CHECK(tile(s, 64, 64).size() == 1);
    CHECK(tile_offsets(64, 32, 16) == std::vector<std::int64_t>{0, 16, 32});
    CHECK(tile_offsets(70, 32, 16) == std::vector<std::int64_t>{0, 16, 32, 38});
    const auto tiles = tile(s, 32, 16);
    REQUIRE(tiles.size() == 9);
    CHECK(tiles[4].label.at(0, 0, 0) == s.label.at(0, 16, 16));
    CHECK(tiles[8].image.at(2, 31, 31) == s.image.at(2, 63, 63));
    // Stride equal to patch partitions the canvas; every footprint union covers it.
    std::vector<int> cover(64 * 64, 0);
    for (auto oy : tile_offsets(64, 16, 16)) {
        for (auto ox : tile_offsets(64, 16, 16)) {
            for (int y = 0; y < 16; ++y) {
                for (int x = 0; x < 16; ++x) ++cover[static_cast<std::size_t>((oy + y) * 64 + ox + x)];
            }
        }
    }
    for (int c : cover) CHECK(c == 1);
    CHECK_THROWS_AS(tile(s, 65, 16), std::invalid_argument);
    CHECK_THROWS_AS(tile(s, 32, 33), std::invalid_argument);
}

TEST_CASE("PPM and PGM round trips") {
    TempDir dir("io");
    const Sample s = generate(SynthConfig{}, 11);
    write_image(dir.path / "a.ppm", s.image);
    write_label(dir.path / "a.pgm", s.label);
    const std::string header = slurp(dir.path / "a.ppm").substr(0, 13);
    CHECK(header == "P6\n64 64\n255\n");
    const Image img = read_image(dir.path / "a.ppm");
    CHECK(img.height == 64);
    CHECK(img.width == 64);
    CHECK(img.data == s.image.data);
    CHECK(read_label(dir.path / "a.pgm", 5).data == s.label.data);
    write_image(dir.path / "b.ppm", img);
    CHECK(slurp(dir.path / "a.ppm") == slurp(dir.path / "b.ppm"));

    spit(dir.path / "c.ppm", "P6 # note\n2 1 255\n" + std::string("\x01\x02\x03\x04\x05\x06", 6));
    CHECK(read_image(dir.path / "c.ppm").data == std::vector<double>{1 / 255.0, 4 / 255.0, 2 / 255.0, 5 / 255.0,
                                                                     3 / 255.0, 6 / 255.0});
}

TEST_CASE("malformed image files name the byte offset") {
    TempDir dir("bad");
    auto message = [&](const std::string& bytes, bool label) {
        spit(dir.path / "x", bytes);
        try {
            if (label) {
                read_label(dir.path / "x", 3);
            } else {
                read_image(dir.path / "x");
            }
        } catch (const FormatError& e) {
            return std::string(e.what());
        }
        return std::string("no error");
    };
    CHECK(message("P3\n1 1\n255\nabc", false).find("offset 0") != std::string::npos);
    CHECK(message("P6\n1 1\n65535\nabc", false).find("offset 7") != std::string::npos);
    CHECK(message("P6\nx 1\n255\nabc", false).find("offset 3") != std::string::npos);
    CHECK(message("P6\n2 2\n255\nabc", false).find("raster") != std::string::npos);
    CHECK(message("P5\n2 1\n255\n\x01\x03", true).find("class index 3") != std::string::npos);
    CHECK_THROWS_AS(read_image(dir.path / "missing.ppm"), FormatError);
}

TEST_CASE("dataset directory") {
    TempDir dir("dataset");
    const SynthConfig cfg = small_synth();
    const nlohmann::json m = write_dataset(dir.path, cfg);
    CHECK(fs::exists(dir.path / "train" / "img_00000.ppm"));
    CHECK(fs::exists(dir.path / "val" / "lab_00003.pgm"));
    CHECK(fs::exists(dir.path / "test" / "img_00005.ppm"));
    CHECK(m["num_classes"] == 5);
    CHECK(m["splits"]["val"] == nlohmann::json::array({3, 4}));
    CHECK(read_manifest(dir.path) == m);

    const Dataset d = load_dataset(dir.path);
    REQUIRE(d.train.size() == 3);
    CHECK(d.val.size() == 2);
    CHECK(d.split("test").size() == 1);
    CHECK_THROWS_AS(d.split("dev"), std::invalid_argument);
    const Sample g = generate(cfg, 4);
    CHECK(d.val[1].label.data == g.label.data);
    CHECK(d.val[1].image.data == g.image.data);

    // Regenerating gives the same checksums.
    TempDir again("dataset2");
    const nlohmann::json m2 = write_dataset(again.path, cfg);
    CHECK(m2["data_checksum"] == m["data_checksum"]);
    CHECK(m2["config_checksum"] == m["config_checksum"]);
    SynthConfig changed = cfg;
    changed.seed = 1;
    CHECK(config_checksum(changed) != config_checksum(cfg));
}

TEST_CASE("batching") {
    const Sample a = generate(SynthConfig{}, 0), b = generate(SynthConfig{}, 1);
    const Tensor x = stack_images({&a, &b});
    CHECK(x.shape() == Shape{2, 3, 64, 64});
    CHECK(x.values()[3 * 64 * 64] == b.image.data[0]);
    const LabelMap y = stack_labels({&a, &b});
    CHECK(y.batch == 2);
    CHECK(y.at(1, 5, 6) == b.label.at(0, 5, 6));
    CHECK(fnv1a64("a", 1) == 0xaf63dc4c8601ec8cULL);
}
