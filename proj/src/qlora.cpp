#include "crayonbox/qlora.hpp"

#include <algorithm>
#include <cmath>

#include "crayonbox/errors.hpp"

namespace crayonbox {

const std::array<float, 16>& nf4_codebook() {
    // Equal-area standard-normal quantile construction (offset 0.9677083),
    // normalized so the endpoints are exactly -1 and +1; code 7 is exactly 0.
    static const std::array<float, 16> codes = {
        -1.0f,
        -0.6961928009986877f,
        -0.5250730514526367f,
        -0.39491748809814453f,
        -0.28444138169288635f,
        -0.18477343022823334f,
        -0.09105003625154495f,
        0.0f,
        0.07958029955625534f,
        0.16093020141124725f,
        0.24611230194568634f,
        0.33791524171829224f,
        0.44070982933044434f,
        0.5626170039176941f,
        0.7229568362236023f,
        1.0f,
    };
    return codes;
}

namespace {

uint8_t nearest_code(float t) {
    const auto& codes = nf4_codebook();
    uint8_t best = 0;
    float best_dist = std::fabs(t - codes[0]);
    for (uint8_t i = 1; i < 16; ++i) {
        const float d = std::fabs(t - codes[i]);
        if (d < best_dist) {  // strict: ties keep the lower index
            best_dist = d;
            best = i;
        }
    }
    return best;
}

}  // namespace

std::vector<float> QuantizedLinear::reconstructed_absmax() const {
    std::vector<float> out(absmax_codes.size());
    for (size_t i = 0; i < out.size(); ++i) {
        const size_t g = i / kQuantGroupSize;
        out[i] = group_offset[g] + group_scale[g] * static_cast<float>(absmax_codes[i]);
    }
    return out;
}

QuantizedLinear quantize(const Tensor& weights) {
    QuantizedLinear q;
    q.shape = weights.shape();
    const size_t n = weights.numel();
    const size_t blocks = q.block_count();
    q.packed.assign((n + 1) / 2, 0);

    std::vector<float> absmax(blocks, 0.0f);
    for (size_t b = 0; b < blocks; ++b) {
        const size_t lo = b * kQuantBlockSize;
        const size_t hi = std::min(n, lo + kQuantBlockSize);
        for (size_t i = lo; i < hi; ++i)
            absmax[b] = std::max(absmax[b], std::fabs(weights.data()[i]));
    }

    // First level: nearest NF4 code of x/absmax.
    for (size_t i = 0; i < n; ++i) {
        const size_t b = i / kQuantBlockSize;
        uint8_t code = 7;  // exact zero when the whole block is zero
        if (absmax[b] > 0.0f) code = nearest_code(weights.data()[i] / absmax[b]);
        q.packed[i / 2] |= static_cast<uint8_t>(code << (4 * (i % 2)));
    }

    // Second level: 8-bit affine quantization of the absmax vector per group.
    const size_t groups = (blocks + kQuantGroupSize - 1) / kQuantGroupSize;
    q.absmax_codes.resize(blocks);
    q.group_scale.resize(groups);
    q.group_offset.resize(groups);
    for (size_t g = 0; g < groups; ++g) {
        const size_t lo = g * kQuantGroupSize;
        const size_t hi = std::min(blocks, lo + kQuantGroupSize);
        float mn = absmax[lo], mx = absmax[lo];
        for (size_t i = lo; i < hi; ++i) {
            mn = std::min(mn, absmax[i]);
            mx = std::max(mx, absmax[i]);
        }
        const float scale = (mx - mn) / 255.0f;
        q.group_offset[g] = mn;
        q.group_scale[g] = scale;
        for (size_t i = lo; i < hi; ++i) {
            int code = 0;
            if (scale > 0.0f)
                code = std::clamp(static_cast<int>(std::lround((absmax[i] - mn) / scale)), 0, 255);
            q.absmax_codes[i] = static_cast<uint8_t>(code);
            const float rec = mn + scale * static_cast<float>(code);
            q.max_absmax_error = std::max(q.max_absmax_error, std::fabs(rec - absmax[i]));
        }
    }
    return q;
}

Tensor dequantize(const QuantizedLinear& q) {
    const auto& codes = nf4_codebook();
    const std::vector<float> absmax = q.reconstructed_absmax();
    std::vector<float> out(q.numel());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = absmax[i / kQuantBlockSize] * codes[q.code_at(i)];
    return Tensor(q.shape, std::move(out));
}

LoRAAdapter LoRAAdapter::init(int in, int out, int r, float alpha, Rng& rng) {
    LoRAAdapter ad;
    ad.a = Tensor::randn({r, in}, rng, 1.0f / std::sqrt(static_cast<float>(in)), true);
    ad.b = Tensor::zeros({out, r}, true);
    ad.scale = alpha / static_cast<float>(r);
    return ad;
}

QLoraLinear QLoraLinear::from_dense(const Tensor& dense, int rank, float alpha, Rng& rng,
                                    bool dual) {
    if (dense.shape().size() != 2) throw ShapeError("QLoraLinear expects a [out, in] matrix");
    QLoraLinear layer;
    layer.base = quantize(dense);
    layer.base_dequant = dequantize(layer.base);
    layer.image = LoRAAdapter::init(dense.dim(1), dense.dim(0), rank, alpha, rng);
    layer.vl = LoRAAdapter::init(dense.dim(1), dense.dim(0), rank, alpha, rng);
    layer.dual = dual;
    return layer;
}

Tensor qlora_forward(const Tensor& x, const QLoraLinear& layer, CitMode mode) {
    if (x.shape().size() != 2 || x.dim(1) != layer.base.shape[1])
        throw ShapeError("qlora_forward width mismatch");
    Tensor y = matmul_nt(x, layer.base_dequant);
    auto contribution = [&x](const LoRAAdapter& ad) {
        return scale(matmul_nt(matmul_nt(x, ad.a), ad.b), ad.scale);
    };
    const bool image_active = mode == CitMode::ImageCIT || mode == CitMode::InferenceBoth ||
                              (!layer.dual && mode == CitMode::VLCIT);
    const bool vl_active = layer.dual && (mode == CitMode::VLCIT || mode == CitMode::InferenceBoth);
    if (image_active) y = add(y, contribution(layer.image));
    if (vl_active) y = add(y, contribution(layer.vl));
    return y;
}

void route(QLoraLinear& layer, CitMode mode) {
    const bool train_image =
        mode == CitMode::ImageCIT || (!layer.dual && mode == CitMode::VLCIT);
    const bool train_vl = layer.dual && mode == CitMode::VLCIT;
    layer.image.a.set_requires_grad(train_image);
    layer.image.b.set_requires_grad(train_image);
    layer.vl.a.set_requires_grad(train_vl);
    layer.vl.b.set_requires_grad(train_vl);
    layer.base_dequant.set_requires_grad(false);
}

}  // namespace crayonbox
