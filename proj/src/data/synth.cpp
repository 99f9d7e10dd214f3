// Copyright 2026 The NTRM Authors
// SPDX-License-Identifier: Apache-2.0

#include "ntrm/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "ntrm/json_util.hpp"

namespace ntrm {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// HSV with s, v fixed; hue spread evenly over the classes.
std::array<double, 3> class_color(int c, int classes) {
    const double h = 6.0 * static_cast<double>(c) / static_cast<double>(std::max(classes, 1));
    const double s = 0.55, v = 0.85;
    const int sector = static_cast<int>(std::floor(h)) % 6;
    const double f = h - std::floor(h);
    const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    switch (sector) {
        case 0: return {v, t, p};
        case 1: return {q, v, p};
        case 2: return {p, v, t};
        case 3: return {p, q, v};
        case 4: return {t, p, v};
        default: return {v, p, q};
    }
}

// Relabels components smaller than min_area to their most common neighbor
// label until none remain (or the whole map is one class).
void merge_small_components(LabelMap& lab, int min_area) {
    const auto h = lab.height, w = lab.width, n = h * w;
    // Each pass folds one component away, so this terminates.
    for (;;) {
        std::vector<std::int64_t> comp(static_cast<std::size_t>(n), -1);
        std::vector<std::vector<std::int64_t>> members;
        std::vector<std::int64_t> stack;
        for (std::int64_t start = 0; start < n; ++start) {
            if (comp[static_cast<std::size_t>(start)] >= 0) continue;
            const auto id = static_cast<std::int64_t>(members.size());
            members.emplace_back();
            const auto cls = lab.data[static_cast<std::size_t>(start)];
            stack.assign(1, start);
            comp[static_cast<std::size_t>(start)] = id;
            while (!stack.empty()) {
                const auto p = stack.back();
                stack.pop_back();
                members.back().push_back(p);
                const std::int64_t y = p / w, x = p % w;
                const std::int64_t nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
                for (const auto& q : nb) {
                    if (q[0] < 0 || q[0] >= h || q[1] < 0 || q[1] >= w) continue;
                    const auto qi = q[0] * w + q[1];
                    if (comp[static_cast<std::size_t>(qi)] < 0 && lab.data[static_cast<std::size_t>(qi)] == cls) {
                        comp[static_cast<std::size_t>(qi)] = id;
                        stack.push_back(qi);
                    }
                }
            }
        }
        // Smallest component first so slivers fold into their surroundings.
        std::int64_t victim = -1;
        for (std::size_t c = 0; c < members.size(); ++c) {
            const auto sz = static_cast<std::int64_t>(members[c].size());
            if (sz < min_area && (victim < 0 || sz < static_cast<std::int64_t>(members[static_cast<std::size_t>(victim)].size()))) {
                victim = static_cast<std::int64_t>(c);
            }
        }
        if (victim < 0 || members.size() == 1) return;
        std::vector<std::int64_t> votes(kMaxClasses + 1, 0);
        for (auto p : members[static_cast<std::size_t>(victim)]) {
            const std::int64_t y = p / w, x = p % w;
            const std::int64_t nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
            for (const auto& q : nb) {
                if (q[0] < 0 || q[0] >= h || q[1] < 0 || q[1] >= w) continue;
                const auto qi = q[0] * w + q[1];
                if (comp[static_cast<std::size_t>(qi)] != victim) ++votes[static_cast<std::size_t>(lab.data[static_cast<std::size_t>(qi)])];
            }
        }
        const auto best = static_cast<std::int32_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
        for (auto p : members[static_cast<std::size_t>(victim)]) lab.data[static_cast<std::size_t>(p)] = best;
    }
}

}  // namespace

void SynthConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("synth config: " + m); };
    if (num_classes < 1 || num_classes > kMaxClasses) {
        fail("num_classes must lie in [1, " + std::to_string(kMaxClasses) + "], got " + std::to_string(num_classes));
    }
    if (image_size < 8) fail("image_size must be >= 8");
    if (min_regions < 1 || max_regions < min_regions) fail("need 1 <= min_regions <= max_regions");
    if (noise_sigma < 0 || texture_amplitude < 0) fail("noise_sigma and texture_amplitude must be >= 0");
    if (min_component_area < 1) fail("min_component_area must be >= 1");
    if (train_count < 0 || val_count < 0 || test_count < 0) fail("split counts must be >= 0");
    for (const auto& [a, b] : adjacency) {
        if (a < 0 || b < 0 || a >= num_classes || b >= num_classes) fail("adjacency pair out of range");
    }
}

std::vector<bool> SynthConfig::adjacency_matrix() const {
    const int k = num_classes;
    std::vector<bool> m(static_cast<std::size_t>(k * k), false);
    for (int c = 0; c < k; ++c) m[static_cast<std::size_t>(c * k + c)] = true;
    if (adjacency.empty()) {
        for (int c = 0; c < k; ++c) {
            const int n = (c + 1) % k;
            m[static_cast<std::size_t>(c * k + n)] = m[static_cast<std::size_t>(n * k + c)] = true;
        }
    } else {
        for (const auto& [a, b] : adjacency) {
            m[static_cast<std::size_t>(a * k + b)] = m[static_cast<std::size_t>(b * k + a)] = true;
        }
    }
    return m;
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
    nlohmann::json adj = nlohmann::json::array();
    for (const auto& [a, b] : c.adjacency) adj.push_back({a, b});
    j = nlohmann::json{{"num_classes", c.num_classes},       {"image_size", c.image_size},
                       {"seed", c.seed},                     {"min_regions", c.min_regions},
                       {"max_regions", c.max_regions},       {"noise_sigma", c.noise_sigma},
                       {"texture_amplitude", c.texture_amplitude},
                       {"min_component_area", c.min_component_area},
                       {"adjacency", adj},                   {"train_count", c.train_count},
                       {"val_count", c.val_count},           {"test_count", c.test_count}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
    reject_unknown_keys(j,
                        {"num_classes", "image_size", "seed", "min_regions", "max_regions", "noise_sigma",
                         "texture_amplitude", "min_component_area", "adjacency", "train_count",
                         "val_count", "test_count"},
                        "synth");
    read_key(j, "num_classes", c.num_classes);
    read_key(j, "image_size", c.image_size);
    read_key(j, "seed", c.seed);
    read_key(j, "min_regions", c.min_regions);
    read_key(j, "max_regions", c.max_regions);
    read_key(j, "noise_sigma", c.noise_sigma);
    read_key(j, "texture_amplitude", c.texture_amplitude);
    read_key(j, "min_component_area", c.min_component_area);
    if (j.contains("adjacency")) {
        c.adjacency.clear();
        for (const auto& p : j.at("adjacency")) c.adjacency.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
    }
    read_key(j, "train_count", c.train_count);
    read_key(j, "val_count", c.val_count);
    read_key(j, "test_count", c.test_count);
}

Sample generate(const SynthConfig& config, std::int64_t id) {
    config.validate();
    const int k = config.num_classes;
    const std::int64_t size = config.image_size;
    Sample s;
    s.id = id;
    s.seed = splitmix64(config.seed ^ splitmix64(static_cast<std::uint64_t>(id)));
    std::mt19937_64 rng(s.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    // Voronoi seeds with a smooth coordinate warp for irregular borders.
    const int regions = std::uniform_int_distribution<int>(config.min_regions, config.max_regions)(rng);
    std::vector<std::array<double, 2>> seeds(static_cast<std::size_t>(regions));
    for (auto& p : seeds) p = {unit(rng) * static_cast<double>(size), unit(rng) * static_cast<double>(size)};
    const double warp = 0.08 * static_cast<double>(size);
    const double fy = 2 * std::numbers::pi / static_cast<double>(size) * (1 + 2 * unit(rng));
    const double fx = 2 * std::numbers::pi / static_cast<double>(size) * (1 + 2 * unit(rng));
    const double py = 2 * std::numbers::pi * unit(rng), px = 2 * std::numbers::pi * unit(rng);

    std::vector<int> cell(static_cast<std::size_t>(size * size));
    for (std::int64_t y = 0; y < size; ++y) {
        for (std::int64_t x = 0; x < size; ++x) {
            const double wy = static_cast<double>(y) + 0.5 + warp * std::sin(fx * static_cast<double>(x) + px);
            const double wx = static_cast<double>(x) + 0.5 + warp * std::sin(fy * static_cast<double>(y) + py);
            int best = 0;
            double bd = INFINITY;
            for (int r = 0; r < regions; ++r) {
                const double dy = wy - seeds[static_cast<std::size_t>(r)][0], dx = wx - seeds[static_cast<std::size_t>(r)][1];
                const double dist = dy * dy + dx * dx;
                if (dist < bd) {
                    bd = dist;
                    best = r;
                }
            }
            cell[static_cast<std::size_t>(y * size + x)] = best;
        }
    }

    // Cell adjacency, then greedy class assignment preferring template pairs.
    std::vector<bool> touch(static_cast<std::size_t>(regions * regions), false);
    for (std::int64_t y = 0; y < size; ++y) {
        for (std::int64_t x = 0; x < size; ++x) {
            const int a = cell[static_cast<std::size_t>(y * size + x)];
            if (x + 1 < size) {
                const int b = cell[static_cast<std::size_t>(y * size + x + 1)];
                touch[static_cast<std::size_t>(a * regions + b)] = touch[static_cast<std::size_t>(b * regions + a)] = true;
            }
            if (y + 1 < size) {
                const int b = cell[static_cast<std::size_t>((y + 1) * size + x)];
                touch[static_cast<std::size_t>(a * regions + b)] = touch[static_cast<std::size_t>(b * regions + a)] = true;
            }
        }
    }
    const auto allowed = config.adjacency_matrix();
    std::vector<int> cls(static_cast<std::size_t>(regions), -1);
    for (int r = 0; r < regions; ++r) {
        std::vector<int> ok;
        for (int c = 0; c < k; ++c) {
            bool fits = true;
            for (int o = 0; o < r; ++o) {
                if (touch[static_cast<std::size_t>(r * regions + o)] &&
                    !allowed[static_cast<std::size_t>(c * k + cls[static_cast<std::size_t>(o)])]) {
                    fits = false;
                }
            }
            if (fits) ok.push_back(c);
        }
        if (ok.empty()) {
            for (int c = 0; c < k; ++c) ok.push_back(c);
        }
        cls[static_cast<std::size_t>(r)] = ok[static_cast<std::size_t>(std::uniform_int_distribution<std::size_t>(0, ok.size() - 1)(rng))];
    }

    s.label = LabelMap(1, size, size, std::vector<std::int32_t>(static_cast<std::size_t>(size * size)));
    for (std::size_t p = 0; p < cell.size(); ++p) s.label.data[p] = cls[static_cast<std::size_t>(cell[p])];
    merge_small_components(s.label, config.min_component_area);

    // Per-class color plus an oriented stripe texture and pixel noise.
    s.image.height = s.image.width = size;
    s.image.data.assign(static_cast<std::size_t>(3 * size * size), 0.0);
    std::normal_distribution<double> noise(0.0, 1.0);
    const double phase = 2 * std::numbers::pi * unit(rng);
    for (std::int64_t y = 0; y < size; ++y) {
        for (std::int64_t x = 0; x < size; ++x) {
            const int c = s.label.at(0, y, x);
            const auto base = class_color(c, k);
            const double theta = std::numbers::pi * static_cast<double>(c) / static_cast<double>(k);
            const double freq = 0.4 + 0.25 * static_cast<double>(c % 4);
            const double tex = config.texture_amplitude *
                               std::sin(freq * (static_cast<double>(x) * std::cos(theta) + static_cast<double>(y) * std::sin(theta)) + phase);
            for (int ch = 0; ch < 3; ++ch) {
                const double v = base[static_cast<std::size_t>(ch)] + tex + config.noise_sigma * noise(rng);
                // Stored at 8-bit precision so the in-memory sample equals its file form.
                s.image.at(ch, y, x) = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
            }
        }
    }
    return s;
}

std::vector<std::pair<int, std::int64_t>> connected_components(const LabelMap& lab) {
    const auto h = lab.height, w = lab.width, n = h * w;
    std::vector<bool> seen(static_cast<std::size_t>(n), false);
    std::vector<std::pair<int, std::int64_t>> out;
    std::vector<std::int64_t> stack;
    for (std::int64_t start = 0; start < n; ++start) {
        if (seen[static_cast<std::size_t>(start)]) continue;
        const auto cls = lab.data[static_cast<std::size_t>(start)];
        std::int64_t area = 0;
        stack.assign(1, start);
        seen[static_cast<std::size_t>(start)] = true;
        while (!stack.empty()) {
            const auto p = stack.back();
            stack.pop_back();
            ++area;
            const std::int64_t y = p / w, x = p % w;
            const std::int64_t nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
            for (const auto& q : nb) {
                if (q[0] < 0 || q[0] >= h || q[1] < 0 || q[1] >= w) continue;
                const auto qi = q[0] * w + q[1];
                if (!seen[static_cast<std::size_t>(qi)] && lab.data[static_cast<std::size_t>(qi)] == cls) {
                    seen[static_cast<std::size_t>(qi)] = true;
                    stack.push_back(qi);
                }
            }
        }
        out.emplace_back(cls, area);
    }
    return out;
}

namespace {

// Applies a pixel coordinate map (dst y, x) -> (src y, x) to image and label together.
template <typename Map>
Sample remap(const Sample& s, std::int64_t out_h, std::int64_t out_w, Map src_of) {
    Sample r;
    r.id = s.id;
    r.seed = s.seed;
    r.image.height = out_h;
    r.image.width = out_w;
    r.image.data.assign(static_cast<std::size_t>(3 * out_h * out_w), 0.0);
    r.label = LabelMap(1, out_h, out_w, std::vector<std::int32_t>(static_cast<std::size_t>(out_h * out_w)));
    for (std::int64_t y = 0; y < out_h; ++y) {
        for (std::int64_t x = 0; x < out_w; ++x) {
            const auto [sy, sx] = src_of(y, x);
            r.label.at(0, y, x) = s.label.at(0, sy, sx);
            for (int ch = 0; ch < 3; ++ch) r.image.at(ch, y, x) = s.image.at(ch, sy, sx);
        }
    }
    return r;
}

}  // namespace

Sample flip_horizontal(const Sample& s) {
    const auto w = s.image.width;
    return remap(s, s.image.height, w, [w](std::int64_t y, std::int64_t x) { return std::pair{y, w - 1 - x}; });
}

Sample flip_vertical(const Sample& s) {
    const auto h = s.image.height;
    return remap(s, h, s.image.width, [h](std::int64_t y, std::int64_t x) { return std::pair{h - 1 - y, x}; });
}

Sample rotate90(const Sample& s, int quarter_turns) {
    const int q = ((quarter_turns % 4) + 4) % 4;
    Sample r = s;
    for (int i = 0; i < q; ++i) {
        const auto h = r.image.height, w = r.image.width;
        // Counter-clockwise: dst(y, x) = src(x, w - 1 - y), output is w x h.
        r = remap(r, w, h, [w](std::int64_t y, std::int64_t x) { return std::pair{x, w - 1 - y}; });
    }
    return r;
}

Sample augment(const Sample& s, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> coin(0, 1);
    std::uniform_int_distribution<int> turns(0, 3);
    const bool fh = coin(rng) == 1;
    const bool fv = coin(rng) == 1;
    const int q = turns(rng);
    Sample r = fh ? flip_horizontal(s) : s;
    if (fv) r = flip_vertical(r);
    return rotate90(r, q);
}

std::vector<std::int64_t> tile_offsets(std::int64_t extent, std::int64_t patch, std::int64_t stride) {
    if (patch > extent) {
        throw std::invalid_argument("tile: patch " + std::to_string(patch) + " larger than image extent " +
                                    std::to_string(extent));
    }
    if (stride < 1 || stride > patch) {
        throw std::invalid_argument("tile: stride must lie in [1, patch]");
    }
    std::vector<std::int64_t> off{0};
    while (off.back() + patch < extent) off.push_back(std::min(off.back() + stride, extent - patch));
    return off;
}

std::vector<Sample> tile(const Sample& s, std::int64_t patch, std::int64_t stride) {
    std::vector<Sample> out;
    for (auto oy : tile_offsets(s.image.height, patch, stride)) {
        for (auto ox : tile_offsets(s.image.width, patch, stride)) {
            out.push_back(remap(s, patch, patch, [oy, ox](std::int64_t y, std::int64_t x) {
                return std::pair{y + oy, x + ox};
            }));
        }
    }
    return out;
}

Tensor stack_images(const std::vector<const Sample*>& samples, DType dtype) {
    if (samples.empty()) throw std::invalid_argument("stack_images: empty batch");
    const auto h = samples[0]->image.height, w = samples[0]->image.width;
    std::vector<double> v;
    v.reserve(samples.size() * static_cast<std::size_t>(3 * h * w));
    for (const auto* s : samples) {
        if (s->image.height != h || s->image.width != w) throw ShapeError("stack_images: mixed image sizes");
        v.insert(v.end(), s->image.data.begin(), s->image.data.end());
    }
    return Tensor::from_values({static_cast<std::int64_t>(samples.size()), 3, h, w}, v, dtype);
}

LabelMap stack_labels(const std::vector<const Sample*>& samples) {
    if (samples.empty()) throw std::invalid_argument("stack_labels: empty batch");
    const auto h = samples[0]->label.height, w = samples[0]->label.width;
    std::vector<std::int32_t> v;
    for (const auto* s : samples) {
        if (s->label.height != h || s->label.width != w) throw ShapeError("stack_labels: mixed label sizes");
        v.insert(v.end(), s->label.data.begin(), s->label.data.end());
    }
    return LabelMap(static_cast<std::int64_t>(samples.size()), h, w, std::move(v));
}

const std::vector<Sample>& Dataset::split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw std::invalid_argument("unknown split '" + name + "' (expected train, val or test)");
}

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

std::uint64_t config_checksum(const SynthConfig& config) {
    const std::string s = nlohmann::json(config).dump();
    return fnv1a64(s.data(), s.size());
}

}  // namespace ntrm
