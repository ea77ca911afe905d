#include "crayonbox/panoptic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "crayonbox/errors.hpp"
#include "crayonbox/rng.hpp"

namespace crayonbox {

namespace {

float round2(float v) { return std::round(v * 100.0f) / 100.0f; }

}  // namespace

void class_color(int class_id, float rgb[3]) {
    // Hash the id into a stable, well-separated palette entry.
    uint64_t h = fnv1a64("class-color") ^ (static_cast<uint64_t>(class_id) * 0x9e3779b97f4a7c15ULL);
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ULL;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebULL;
    for (int c = 0; c < 3; ++c) {
        rgb[c] = 0.1f + 0.8f * static_cast<float>((h >> (c * 21)) & 0x1fffff) / 2097151.0f;
    }
}

Scene synth_generate(uint64_t seed, const SceneConfig& cfg) {
    if (cfg.min_objects < 0 || cfg.max_objects > 8 || cfg.min_objects > cfg.max_objects)
        throw ArgumentError("scene_config: object count must lie in 0..8");
    if (cfg.grid_h < 8 || cfg.grid_w < 8) throw ArgumentError("scene_config: grid too small");
    Rng rng = derive_rng(seed, "synth-scene");
    const auto& vocab = ClassVocabulary::instance();
    const std::vector<int>& pool =
        cfg.class_pool.empty() ? vocab.thing_ids() : cfg.class_pool;
    for (int cid : pool)
        if (!vocab.is_thing(cid))
            throw ArgumentError("scene_config: class_pool must contain thing class ids");

    RawInstanceMap raw;
    raw.h = cfg.grid_h;
    raw.w = cfg.grid_w;
    const int background = vocab.stuff_ids()[static_cast<size_t>(rng.uniform_int(
        static_cast<int>(vocab.stuff_ids().size())))];
    raw.class_id.assign(static_cast<size_t>(raw.h) * raw.w, static_cast<uint8_t>(background));
    raw.raw_id.assign(static_cast<size_t>(raw.h) * raw.w, 9000);  // background instance

    Scene scene;
    scene.requested_classes.push_back(background);

    const int n_objects = cfg.min_objects + rng.uniform_int(cfg.max_objects - cfg.min_objects + 1);
    std::vector<uint8_t> occupied(static_cast<size_t>(raw.h) * raw.w, 0);
    for (int obj = 0; obj < n_objects; ++obj) {
        const int cid = pool[static_cast<size_t>(rng.uniform_int(static_cast<int>(pool.size())))];
        bool placed = false;
        for (int attempt = 0; attempt < cfg.max_retries && !placed; ++attempt) {
            const int rh = 3 + rng.uniform_int(std::max(1, raw.h / 3));
            const int rw = 3 + rng.uniform_int(std::max(1, raw.w / 3));
            if (rh > raw.h || rw > raw.w) continue;
            const int r0 = rng.uniform_int(raw.h - rh + 1);
            const int c0 = rng.uniform_int(raw.w - rw + 1);
            bool clear = true;
            for (int r = r0; r < r0 + rh && clear; ++r)
                for (int c = c0; c < c0 + rw; ++c)
                    if (occupied[static_cast<size_t>(r) * raw.w + c]) { clear = false; break; }
            if (!clear) continue;
            for (int r = r0; r < r0 + rh; ++r) {
                for (int c = c0; c < c0 + rw; ++c) {
                    const size_t i = static_cast<size_t>(r) * raw.w + c;
                    occupied[i] = 1;
                    raw.class_id[i] = static_cast<uint8_t>(cid);
                    raw.raw_id[i] = 100 + obj;
                }
            }
            placed = true;
        }
        if (!placed) throw GenerationError("synth_generate: rectangle placement retries exhausted");
        scene.requested_classes.push_back(cid);
    }

    scene.grid = assign_numbering(raw);

    Rng noise = derive_rng(seed, "synth-noise");
    std::vector<float> img(static_cast<size_t>(raw.h) * raw.w * 3);
    for (int r = 0; r < raw.h; ++r) {
        for (int c = 0; c < raw.w; ++c) {
            float rgb[3];
            class_color(scene.grid.cls(r, c), rgb);
            for (int ch = 0; ch < 3; ++ch) {
                float v = rgb[ch] + noise.normal() * cfg.noise_std;
                img[(static_cast<size_t>(r) * raw.w + c) * 3 + ch] = std::clamp(v, 0.0f, 1.0f);
            }
        }
    }
    scene.image = Tensor({raw.h, raw.w, 3}, std::move(img));
    return scene;
}

PanopticGrid assign_numbering(const RawInstanceMap& raw) {
    PanopticGrid grid;
    grid.h = raw.h;
    grid.w = raw.w;
    grid.class_id = raw.class_id;
    grid.number.assign(raw.class_id.size(), 0);

    // Raster-scan first appearance: per class, instances get 1, 2, ...
    std::map<std::pair<int, int>, int> assigned;  // (class, raw_id) -> number
    std::vector<int> next_number(ClassVocabulary::kNumClasses, 1);
    bool warned = false;
    for (size_t i = 0; i < raw.class_id.size(); ++i) {
        const int cid = raw.class_id[i];
        if (cid == ClassVocabulary::kUnk) {
            grid.number[i] = 0;
            continue;
        }
        const auto key = std::make_pair(cid, raw.raw_id[i]);
        auto it = assigned.find(key);
        if (it == assigned.end()) {
            int n = next_number[static_cast<size_t>(cid)]++;
            if (n > 20) {
                n = 20;  // clamp; >20 instances of one class collapse together
                if (!warned) {
                    std::cerr << "assign_numbering: more than 20 instances of class "
                              << ClassVocabulary::instance().name(cid) << ", clamping to 20\n";
                    warned = true;
                }
            }
            it = assigned.emplace(key, n).first;
        }
        grid.number[i] = static_cast<uint8_t>(it->second);
    }
    return grid;
}

PanopticGrid downsample(const PanopticGrid& grid, int h, int w) {
    if (h <= 0 || w <= 0) throw ArgumentError("downsample: target size must be positive");
    if (h > grid.h || w > grid.w) throw ArgumentError("downsample: target larger than source");
    PanopticGrid out;
    out.h = h;
    out.w = w;
    out.class_id.resize(static_cast<size_t>(h) * w);
    out.number.resize(static_cast<size_t>(h) * w);
    constexpr int kKeys = ClassVocabulary::kNumClasses * 21;
    std::vector<int> counts(kKeys, 0);
    std::vector<int> touched;
    for (int i = 0; i < h; ++i) {
        const int r0 = i * grid.h / h, r1 = (i + 1) * grid.h / h;
        for (int j = 0; j < w; ++j) {
            const int c0 = j * grid.w / w, c1 = (j + 1) * grid.w / w;
            touched.clear();
            for (int r = r0; r < r1; ++r) {
                for (int c = c0; c < c1; ++c) {
                    const int key = grid.cls(r, c) * 21 + grid.num(r, c);
                    if (counts[static_cast<size_t>(key)]++ == 0) touched.push_back(key);
                }
            }
            // Majority; ties to the smallest (class, number) key.
            std::sort(touched.begin(), touched.end());
            int best_key = touched.front();
            int best_count = counts[static_cast<size_t>(best_key)];
            for (int key : touched) {
                if (counts[static_cast<size_t>(key)] > best_count) {
                    best_count = counts[static_cast<size_t>(key)];
                    best_key = key;
                }
            }
            out.set(i, j, best_key / 21, best_key % 21);
            for (int key : touched) counts[static_cast<size_t>(key)] = 0;
        }
    }
    return out;
}

std::vector<ObjectEntry> extract_objects(const PanopticGrid& grid) {
    struct Box {
        int min_r, min_c, max_r, max_c;
    };
    std::map<std::pair<int, int>, Box> boxes;
    std::vector<std::pair<int, int>> order;  // raster-scan first appearance
    for (int r = 0; r < grid.h; ++r) {
        for (int c = 0; c < grid.w; ++c) {
            const auto key = std::make_pair(grid.cls(r, c), grid.num(r, c));
            auto it = boxes.find(key);
            if (it == boxes.end()) {
                boxes.emplace(key, Box{r, c, r, c});
                order.push_back(key);
            } else {
                Box& b = it->second;
                b.min_r = std::min(b.min_r, r);
                b.min_c = std::min(b.min_c, c);
                b.max_r = std::max(b.max_r, r);
                b.max_c = std::max(b.max_c, c);
            }
        }
    }
    std::vector<ObjectEntry> entries;
    for (const auto& key : order) {
        const Box& b = boxes.at(key);
        ObjectEntry e;
        e.class_id = key.first;
        e.number = key.second;
        e.x_min = round2(static_cast<float>(b.min_c) / static_cast<float>(grid.w));
        e.y_min = round2(static_cast<float>(b.min_r) / static_cast<float>(grid.h));
        e.x_max = round2(static_cast<float>(b.max_c + 1) / static_cast<float>(grid.w));
        e.y_max = round2(static_cast<float>(b.max_r + 1) / static_cast<float>(grid.h));
        entries.push_back(e);
    }
    return entries;
}

std::string format_coord(float v) {
    const int c = static_cast<int>(std::lround(static_cast<double>(v) * 100.0));
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%d.%02d", c / 100, c % 100);
    return buf;
}

std::string render_entry(const ObjectEntry& entry) {
    std::ostringstream os;
    os << "(#" << entry.number << " " << ClassVocabulary::instance().name(entry.class_id) << ") ["
       << format_coord(entry.x_min) << ", " << format_coord(entry.y_min) << ", "
       << format_coord(entry.x_max) << ", " << format_coord(entry.y_max) << "]";
    return os.str();
}

void save_grid(const PanopticGrid& grid, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArtifactError("cannot write grid file: " + path);
    out << "PGRID v1 " << grid.h << " " << grid.w << "\n";
    for (int r = 0; r < grid.h; ++r) {
        for (int c = 0; c < grid.w; ++c) {
            if (c) out << " ";
            out << grid.cls(r, c) << ":" << grid.num(r, c);
        }
        out << "\n";
    }
    out << "CLASSES\n";
    const auto& vocab = ClassVocabulary::instance();
    for (int i = 0; i < vocab.size(); ++i) out << i << " " << vocab.name(i) << "\n";
}

PanopticGrid load_grid(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactError("cannot read grid file: " + path);
    std::string magic, version;
    PanopticGrid grid;
    in >> magic >> version >> grid.h >> grid.w;
    if (magic != "PGRID" || version != "v1" || grid.h <= 0 || grid.w <= 0)
        throw ArtifactError("bad grid header in " + path);
    grid.class_id.resize(static_cast<size_t>(grid.h) * grid.w);
    grid.number.resize(grid.class_id.size());
    for (size_t i = 0; i < grid.class_id.size(); ++i) {
        std::string pair;
        if (!(in >> pair)) throw ArtifactError("truncated grid file: " + path);
        const auto colon = pair.find(':');
        if (colon == std::string::npos) throw ArtifactError("bad cell in grid file: " + path);
        const int cid = std::stoi(pair.substr(0, colon));
        const int num = std::stoi(pair.substr(colon + 1));
        if (cid < 0 || cid >= ClassVocabulary::kNumClasses || num < 0 || num > 20)
            throw ArtifactError("cell out of range in grid file: " + path);
        grid.class_id[i] = static_cast<uint8_t>(cid);
        grid.number[i] = static_cast<uint8_t>(num);
    }
    std::string sentinel;
    in >> sentinel;
    if (sentinel != "CLASSES") throw ArtifactError("missing CLASSES sentinel in " + path);
    return grid;
}

void save_ppm(const Tensor& image, const std::string& path) {
    if (image.shape().size() != 3 || image.dim(2) != 3)
        throw ShapeError("save_ppm expects an [H, W, 3] image");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArtifactError("cannot write image file: " + path);
    out << "P6\n" << image.dim(1) << " " << image.dim(0) << "\n255\n";
    for (float v : image.data()) {
        const int byte = static_cast<int>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
        out.put(static_cast<char>(byte));
    }
}

Tensor load_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactError("cannot read image file: " + path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255)
        throw ArtifactError("bad ppm header in " + path);
    in.get();  // single whitespace after header
    std::vector<float> data(static_cast<size_t>(h) * w * 3);
    for (auto& v : data) {
        const int byte = in.get();
        if (byte < 0) throw ArtifactError("truncated ppm file: " + path);
        v = static_cast<float>(byte) / 255.0f;
    }
    return Tensor({h, w, 3}, std::move(data));
}

}  // namespace crayonbox
