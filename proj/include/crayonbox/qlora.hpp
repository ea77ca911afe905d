#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "crayonbox/tensor.hpp"

namespace crayonbox {

// The 16 NF4 code values: standard-normal quantiles normalized to [-1, 1]
// with an exact zero, ascending.
const std::array<float, 16>& nf4_codebook();

constexpr int kQuantBlockSize = 64;    // elements per absmax block
constexpr int kQuantGroupSize = 256;   // absmax values per double-quant group

// NF4 block-quantized weight. Codes are packed two per byte, little-endian:
// low nibble holds the even-index element. The per-block absmax vector is
// itself quantized to 8-bit affine codes with per-group float32 scale/offset.
struct QuantizedLinear {
    std::vector<int> shape;  // original [out, in]
    std::vector<uint8_t> packed;
    std::vector<uint8_t> absmax_codes;
    std::vector<float> group_scale;
    std::vector<float> group_offset;
    float max_absmax_error = 0.0f;  // |absmax - reconstructed|, recorded at quantize time

    size_t numel() const {
        size_t n = 1;
        for (int d : shape) n *= static_cast<size_t>(d);
        return n;
    }
    size_t block_count() const { return (numel() + kQuantBlockSize - 1) / kQuantBlockSize; }
    std::vector<float> reconstructed_absmax() const;
    uint8_t code_at(size_t i) const {
        return (packed[i / 2] >> (4 * (i % 2))) & 0xF;
    }
};

QuantizedLinear quantize(const Tensor& weights);
Tensor dequantize(const QuantizedLinear& q);

struct LoRAAdapter {
    Tensor a;     // [r, in]
    Tensor b;     // [out, r], zero at init
    float scale;  // alpha / r

    static LoRAAdapter init(int in, int out, int r, float alpha, Rng& rng);
};

enum class CitMode { ImageCIT, VLCIT, InferenceBoth };

// One frozen NF4 base with two adapter pairs. With dual=false (Table 3
// ablation) the image adapter serves both record kinds.
struct QLoraLinear {
    QuantizedLinear base;
    Tensor base_dequant;  // cached dense view, never trainable
    LoRAAdapter image;
    LoRAAdapter vl;
    bool dual = true;

    static QLoraLinear from_dense(const Tensor& dense, int rank, float alpha, Rng& rng, bool dual);
};

// dequant(W)x + sum over the mode's active adapters of (alpha/r) B(Ax).
Tensor qlora_forward(const Tensor& x, const QLoraLinear& layer, CitMode mode);

// Sets trainable flags per the alternating-freeze contract.
void route(QLoraLinear& layer, CitMode mode);

}  // namespace crayonbox
