// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary PPM (P6) / PGM (P5) with maxval 255, and the dataset directory.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "ntrm/synth.hpp"

namespace ntrm {

namespace fs = std::filesystem;

namespace {

struct Header {
    std::int64_t width = 0, height = 0;
    std::size_t data_offset = 0;
};

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("failed writing " + path.string());
}

// Parses "P5"/"P6", width, height, maxval (255) with '#' comments, followed
// by exactly one whitespace byte before the raster.
Header parse_header(const std::string& bytes, const char* magic, const fs::path& path) {
    auto fail = [&](std::size_t at, const std::string& what) -> FormatError {
        return FormatError(path.string() + ": malformed header at byte offset " + std::to_string(at) + ": " + what);
    };
    if (bytes.size() < 2 || bytes.compare(0, 2, magic) != 0) {
        throw fail(0, std::string("expected magic '") + magic + "'");
    }
    std::size_t pos = 2;
    std::size_t field_at = pos;
    auto next_int = [&](const char* field) {
        for (;;) {
            while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
            if (pos < bytes.size() && bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
                continue;
            }
            break;
        }
        const std::size_t start = pos;
        field_at = start;
        std::int64_t v = 0;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
            v = v * 10 + (bytes[pos] - '0');
            if (v > (1 << 24)) throw fail(start, std::string(field) + " too large");
            ++pos;
        }
        if (pos == start) throw fail(start, std::string("expected ") + field);
        return v;
    };
    Header h;
    h.width = next_int("width");
    h.height = next_int("height");
    const auto maxval = next_int("maxval");
    if (maxval != 255) throw fail(field_at, "maxval must be 255");
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        throw fail(pos, "expected whitespace before raster");
    }
    if (h.width < 1 || h.height < 1) throw fail(2, "zero image dimension");
    h.data_offset = pos + 1;
    return h;
}

std::string id_name(std::int64_t id) {
    std::ostringstream os;
    os << std::setw(5) << std::setfill('0') << id;
    return os.str();
}

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

}  // namespace

void write_image(const fs::path& path, const Image& image) {
    std::string bytes = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
    const auto plane = image.height * image.width;
    for (std::int64_t p = 0; p < plane; ++p) {
        for (int ch = 0; ch < 3; ++ch) {
            const double v = std::clamp(image.data[static_cast<std::size_t>(ch * plane + p)], 0.0, 1.0);
            bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
        }
    }
    spit(path, bytes);
}

Image read_image(const fs::path& path) {
    const std::string bytes = slurp(path);
    const Header h = parse_header(bytes, "P6", path);
    const auto plane = h.width * h.height;
    if (bytes.size() - h.data_offset != static_cast<std::size_t>(3 * plane)) {
        throw FormatError(path.string() + ": raster at byte offset " + std::to_string(h.data_offset) +
                          " holds " + std::to_string(bytes.size() - h.data_offset) + " bytes, expected " +
                          std::to_string(3 * plane));
    }
    Image img;
    img.height = h.height;
    img.width = h.width;
    img.data.assign(static_cast<std::size_t>(3 * plane), 0.0);
    for (std::int64_t p = 0; p < plane; ++p) {
        for (int ch = 0; ch < 3; ++ch) {
            const auto byte = static_cast<unsigned char>(bytes[h.data_offset + static_cast<std::size_t>(3 * p + ch)]);
            img.data[static_cast<std::size_t>(ch * plane + p)] = static_cast<double>(byte) / 255.0;
        }
    }
    return img;
}

void write_label(const fs::path& path, const LabelMap& label) {
    if (label.batch != 1) throw std::invalid_argument("write_label: expects a single label map");
    std::string bytes = "P5\n" + std::to_string(label.width) + " " + std::to_string(label.height) + "\n255\n";
    for (auto v : label.data) {
        if (v < 0 || v > 255) throw std::invalid_argument("write_label: class index " + std::to_string(v) + " does not fit a byte");
        bytes.push_back(static_cast<char>(static_cast<unsigned char>(v)));
    }
    spit(path, bytes);
}

LabelMap read_label(const fs::path& path, int classes) {
    const std::string bytes = slurp(path);
    const Header h = parse_header(bytes, "P5", path);
    const auto n = h.width * h.height;
    if (bytes.size() - h.data_offset != static_cast<std::size_t>(n)) {
        throw FormatError(path.string() + ": raster at byte offset " + std::to_string(h.data_offset) +
                          " holds " + std::to_string(bytes.size() - h.data_offset) + " bytes, expected " +
                          std::to_string(n));
    }
    std::vector<std::int32_t> v(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        v[static_cast<std::size_t>(i)] = static_cast<unsigned char>(bytes[h.data_offset + static_cast<std::size_t>(i)]);
        if (v[static_cast<std::size_t>(i)] >= classes) {
            throw FormatError(path.string() + ": class index " + std::to_string(v[static_cast<std::size_t>(i)]) +
                              " at byte offset " + std::to_string(h.data_offset + static_cast<std::size_t>(i)) +
                              " is not below K = " + std::to_string(classes));
        }
    }
    return LabelMap(1, h.height, h.width, std::move(v));
}

nlohmann::json write_dataset(const fs::path& root, const SynthConfig& config) {
    config.validate();
    const std::pair<const char*, int> splits[] = {
        {"train", config.train_count}, {"val", config.val_count}, {"test", config.test_count}};
    nlohmann::json manifest;
    manifest["format"] = "ntrm-synth";
    manifest["version"] = 1;
    manifest["num_classes"] = config.num_classes;
    manifest["config"] = config;
    manifest["config_checksum"] = hex64(config_checksum(config));
    std::uint64_t data_sum = 14695981039346656037ULL;
    std::int64_t id = 0;
    for (const auto& [name, count] : splits) {
        fs::create_directories(root / name);
        nlohmann::json ids = nlohmann::json::array();
        for (int i = 0; i < count; ++i, ++id) {
            const Sample s = generate(config, id);
            const auto img = root / name / ("img_" + id_name(id) + ".ppm");
            const auto lab = root / name / ("lab_" + id_name(id) + ".pgm");
            write_image(img, s.image);
            write_label(lab, s.label);
            for (const auto& f : {img, lab}) {
                const std::string bytes = slurp(f);
                data_sum = fnv1a64(bytes.data(), bytes.size(), data_sum);
            }
            ids.push_back(id);
        }
        manifest["splits"][name] = ids;
    }
    manifest["data_checksum"] = hex64(data_sum);
    std::ofstream out(root / "manifest", std::ios::trunc);
    out << manifest.dump(2) << "\n";
    if (!out) throw FormatError("cannot write " + (root / "manifest").string());
    return manifest;
}

nlohmann::json read_manifest(const fs::path& root) {
    std::ifstream in(root / "manifest");
    if (!in) throw FormatError("no manifest in " + root.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError((root / "manifest").string() + ": " + e.what());
    }
    if (j.value("format", "") != "ntrm-synth") throw FormatError((root / "manifest").string() + ": not a dataset manifest");
    return j;
}

Dataset load_dataset(const fs::path& root) {
    const auto manifest = read_manifest(root);
    Dataset ds;
    ds.config = manifest.at("config").get<SynthConfig>();
    const int k = manifest.at("num_classes").get<int>();
    const std::pair<const char*, std::vector<Sample>*> splits[] = {
        {"train", &ds.train}, {"val", &ds.val}, {"test", &ds.test}};
    for (const auto& [name, dst] : splits) {
        for (const auto& jid : manifest.at("splits").at(name)) {
            const auto id = jid.get<std::int64_t>();
            Sample s;
            s.id = id;
            s.image = read_image(root / name / ("img_" + id_name(id) + ".ppm"));
            s.label = read_label(root / name / ("lab_" + id_name(id) + ".pgm"), k);
            if (s.label.height != s.image.height || s.label.width != s.image.width) {
                throw FormatError("sample " + std::to_string(id) + ": image and label sizes differ");
            }
            dst->push_back(std::move(s));
        }
    }
    return ds;
}

}  // namespace ntrm
