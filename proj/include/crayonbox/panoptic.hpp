#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crayonbox/tensor.hpp"
#include "crayonbox/vocab.hpp"

namespace crayonbox {

// Per-cell class/instance map standing in for a panoptic color map.
// unk cells carry instance number 0; everything else 1..20.
struct PanopticGrid {
    int h = 0;
    int w = 0;
    std::vector<uint8_t> class_id;
    std::vector<uint8_t> number;

    int cls(int r, int c) const { return class_id[static_cast<size_t>(r) * w + c]; }
    int num(int r, int c) const { return number[static_cast<size_t>(r) * w + c]; }
    void set(int r, int c, int cid, int n) {
        class_id[static_cast<size_t>(r) * w + c] = static_cast<uint8_t>(cid);
        number[static_cast<size_t>(r) * w + c] = static_cast<uint8_t>(n);
    }
    bool operator==(const PanopticGrid&) const = default;
};

// Instance labels as a segmentation model would emit them: arbitrary
// distinct ids, not yet normalized to per-class numbering.
struct RawInstanceMap {
    int h = 0;
    int w = 0;
    std::vector<uint8_t> class_id;
    std::vector<int> raw_id;
};

struct ObjectEntry {
    int class_id;
    int number;
    // Normalized [x_min, y_min, x_max, y_max], exclusive max edges,
    // rounded half-away-from-zero to 2 decimals.
    float x_min, y_min, x_max, y_max;
    bool operator==(const ObjectEntry&) const = default;
};

struct SceneConfig {
    int grid_h = 32;
    int grid_w = 32;
    int min_objects = 0;
    int max_objects = 5;  // hard bound 8
    int max_retries = 200;
    float noise_std = 0.04f;
    // Restrict object classes to this set (thing ids); empty = all things.
    // A small pool makes repeated classes, and hence counts > 1, common.
    std::vector<int> class_pool;
};

struct Scene {
    PanopticGrid grid;
    Tensor image;  // [H, W, 3] floats in [0, 1]
    std::vector<int> requested_classes;
};

Scene synth_generate(uint64_t seed, const SceneConfig& cfg);
PanopticGrid assign_numbering(const RawInstanceMap& raw);
PanopticGrid downsample(const PanopticGrid& grid, int h, int w);
std::vector<ObjectEntry> extract_objects(const PanopticGrid& grid);

// "(#1 horse) [0.06, 0.38, 0.27, 0.91]"
std::string render_entry(const ObjectEntry& entry);
std::string format_coord(float v);  // "0.00".."1.00"

// Fixed per-class color so classes are learnable from pixels alone.
void class_color(int class_id, float rgb[3]);

// "PGRID v1" line format with a CLASSES name table.
void save_grid(const PanopticGrid& grid, const std::string& path);
PanopticGrid load_grid(const std::string& path);

void save_ppm(const Tensor& image, const std::string& path);
Tensor load_ppm(const std::string& path);

}  // namespace crayonbox
