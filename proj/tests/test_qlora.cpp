#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "crayonbox/errors.hpp"
#include "crayonbox/optim.hpp"
#include "crayonbox/qlora.hpp"

using namespace crayonbox;

namespace {

// High-precision standard-normal quantile oracle: Acklam's rational
// approximation refined with one Halley step against erfc.
double normal_ppf(double p) {
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    const double plow = 0.02425, phigh = 1 - plow;
    double x;
    if (p < plow) {
        const double q = std::sqrt(-2 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
    } else if (p <= phigh) {
        const double q = p - 0.5, r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
    } else {
        const double q = std::sqrt(-2 * std::log(1 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
    }
    const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
    const double u = e * std::sqrt(2 * M_PI) * std::exp(x * x / 2);
    return x - u / (1 + x * u / 2);
}

// QLoRA equal-area construction: 8 positive quantiles, zero, 7 negative.
std::vector<double> nf4_oracle() {
    const double offset = 0.9677083;
    std::vector<double> vals;
    for (int i = 0; i < 8; ++i) vals.push_back(normal_ppf(offset + (0.5 - offset) * i / 8.0));
    vals.push_back(0.0);
    for (int i = 0; i < 7; ++i) vals.push_back(-normal_ppf(offset + (0.5 - offset) * i / 7.0));
    std::sort(vals.begin(), vals.end());
    const double mx = vals.back();
    for (auto& v : vals) v /= mx;
    return vals;
}

float max_adjacent_gap() {
    const auto& codes = nf4_codebook();
    float g = 0.0f;
    for (size_t i = 1; i < codes.size(); ++i) g = std::max(g, codes[i] - codes[i - 1]);
    return g;
}

}  // namespace

TEST_CASE("nf4 codebook") {
    const auto& codes = nf4_codebook();
    CHECK(codes.front() == -1.0f);
    CHECK(codes.back() == 1.0f);
    CHECK(codes[7] == 0.0f);
    for (size_t i = 1; i < codes.size(); ++i) CHECK(codes[i] > codes[i - 1]);

    SUBCASE("matches the normal-quantile construction") {
        const auto oracle = nf4_oracle();
        REQUIRE(oracle.size() == 16);
        CHECK(oracle.front() == doctest::Approx(-1.0).epsilon(1e-9));
        for (size_t i = 0; i < 16; ++i)
            CHECK(static_cast<double>(codes[i]) == doctest::Approx(oracle[i]).epsilon(2e-7));
        // Symmetric in construction: the same offset anchors both tails.
        CHECK(oracle.front() == doctest::Approx(-oracle.back()).epsilon(1e-12));
    }
}

TEST_CASE("quantize / dequantize") {
    SUBCASE("all-zero block dequantizes to exact zeros") {
        QuantizedLinear q = quantize(Tensor::zeros({8, 16}));
        Tensor back = dequantize(q);
        for (float v : back.data()) CHECK(v == 0.0f);
    }
    SUBCASE("codebook fixed points round-trip exactly at the 4-bit level") {
        const float absmax = 0.75f;
        std::vector<float> vals;
        for (float c : nf4_codebook()) vals.push_back(absmax * c);
        Tensor w({1, 16}, vals);
        Tensor back = dequantize(quantize(w));
        for (size_t i = 0; i < vals.size(); ++i) CHECK(back.data()[i] == vals[i]);
    }
    SUBCASE("per-block reconstruction bound on random Gaussian tensors") {
        Rng rng(5);
        Tensor w = Tensor::randn({200, 200}, rng, 0.3f);  // 625 blocks, 3 groups
        QuantizedLinear q = quantize(w);
        CHECK(q.block_count() == 625);
        Tensor back = dequantize(q);
        const auto rec_absmax = q.reconstructed_absmax();
        const float half_gap = max_adjacent_gap() / 2.0f;
        for (size_t b = 0; b < q.block_count(); ++b) {
            const size_t lo = b * kQuantBlockSize;
            const size_t hi = std::min(w.numel(), lo + kQuantBlockSize);
            float true_absmax = 0.0f;
            for (size_t i = lo; i < hi; ++i)
                true_absmax = std::max(true_absmax, std::fabs(w.data()[i]));
            const float bound =
                rec_absmax[b] * half_gap + std::fabs(true_absmax - rec_absmax[b]) + 1e-6f;
            for (size_t i = lo; i < hi; ++i)
                CHECK(std::fabs(back.data()[i] - w.data()[i]) <= bound);
        }
        CHECK(q.max_absmax_error <= *std::max_element(q.group_scale.begin(), q.group_scale.end()) / 2.0f + 1e-7f);
    }
    SUBCASE("quantize is pure and idempotent at the code level") {
        Rng rng(6);
        Tensor w = Tensor::randn({64, 64}, rng, 0.2f);
        QuantizedLinear q1 = quantize(w);
        QuantizedLinear q2 = quantize(w);
        CHECK(q1.packed == q2.packed);
        CHECK(q1.absmax_codes == q2.absmax_codes);
        Tensor d1 = dequantize(q1);
        CHECK(dequantize(quantize(d1)).data() == d1.data());
    }
    SUBCASE("packing layout: low nibble holds the even-index element") {
        std::vector<float> vals(4, 0.0f);
        vals[0] = 1.0f;   // code 15
        vals[1] = -1.0f;  // code 0
        vals[2] = 0.0f;   // code 7
        vals[3] = 1.0f;   // code 15
        QuantizedLinear q = quantize(Tensor({1, 4}, vals));
        CHECK(q.packed[0] == 0x0F);
        CHECK(q.packed[1] == 0xF7);
    }
}

TEST_CASE("qlora_forward") {
    Rng rng(7);
    const int in = 12, out = 10, r = 3;
    Tensor dense = Tensor::randn({out, in}, rng, 0.3f);
    QLoraLinear layer = QLoraLinear::from_dense(dense, r, static_cast<float>(r), rng, true);
    Tensor x = Tensor::randn({5, in}, rng, 1.0f);

    SUBCASE("fresh adapters (B=0) equal the base dequantized linear exactly") {
        Tensor y = qlora_forward(x, layer, CitMode::InferenceBoth);
        Tensor base = matmul_nt(x, layer.base_dequant);
        CHECK(y.data() == base.data());
    }
    SUBCASE("constructed rank-1 adapter adds e*x on one output") {
        // A picks input 2, B routes it to output 4 with unit scale.
        layer.image.a = Tensor::zeros({r, in}, true);
        layer.image.a.data()[0 * in + 2] = 1.0f;
        layer.image.b = Tensor::zeros({out, r}, true);
        layer.image.b.data()[4 * r + 0] = 2.0f / layer.image.scale;
        Tensor y = qlora_forward(x, layer, CitMode::ImageCIT);
        Tensor base = matmul_nt(x, layer.base_dequant);
        for (int i = 0; i < 5; ++i)
            for (int j = 0; j < out; ++j) {
                const float expect = base.data()[i * out + j] +
                                     (j == 4 ? 2.0f * x.data()[i * in + 2] : 0.0f);
                CHECK(y.data()[i * out + j] == doctest::Approx(expect).epsilon(1e-6));
            }
    }
    SUBCASE("matches a dense reference with nonzero adapters") {
        layer.image.b = Tensor::randn({out, r}, rng, 0.3f, true);
        layer.vl.b = Tensor::randn({out, r}, rng, 0.3f, true);
        Tensor y = qlora_forward(x, layer, CitMode::InferenceBoth);
        for (int i = 0; i < 5; ++i) {
            for (int j = 0; j < out; ++j) {
                double s = 0.0;
                for (int k = 0; k < in; ++k)
                    s += static_cast<double>(x.data()[i * in + k]) * layer.base_dequant.data()[j * in + k];
                for (const LoRAAdapter* ad : {&layer.image, &layer.vl}) {
                    for (int rr = 0; rr < r; ++rr) {
                        double ax = 0.0;
                        for (int k = 0; k < in; ++k)
                            ax += static_cast<double>(x.data()[i * in + k]) * ad->a.data()[rr * in + k];
                        s += static_cast<double>(ad->scale) * ad->b.data()[j * r + rr] * ax;
                    }
                }
                CHECK(y.data()[i * out + j] == doctest::Approx(s).epsilon(1e-5));
            }
        }
    }
    SUBCASE("width mismatch is a shape error") {
        CHECK_THROWS_AS(qlora_forward(Tensor::zeros({2, in + 1}), layer, CitMode::ImageCIT),
                        ShapeError);
    }
}

TEST_CASE("route freeze contract") {
    Rng rng(8);
    const int in = 8, out = 8, r = 2;
    Tensor dense = Tensor::randn({out, in}, rng, 0.3f);
    QLoraLinear layer = QLoraLinear::from_dense(dense, r, 2.0f, rng, true);
    Tensor x = Tensor::randn({4, in}, rng, 1.0f);

    auto one_step = [&](CitMode mode) {
        route(layer, mode);
        AdamW opt;
        opt.add_param("image.a", layer.image.a);
        opt.add_param("image.b", layer.image.b);
        opt.add_param("vl.a", layer.vl.a);
        opt.add_param("vl.b", layer.vl.b);
        opt.zero_grad();
        GradTape tape;
        Tensor y = qlora_forward(x, layer, mode);
        tape.backward(mean(mul(y, y)));
        opt.step(0.05f);
    };

    SUBCASE("ImageCIT step leaves adapter_vl bit-identical") {
        // Nonzero B so gradients reach A as well.
        layer.image.b = Tensor::randn({out, r}, rng, 0.3f, true);
        layer.vl.b = Tensor::randn({out, r}, rng, 0.3f, true);
        const auto vl_a = layer.vl.a.data();
        const auto vl_b = layer.vl.b.data();
        const auto packed = layer.base.packed;
        const auto img_a = layer.image.a.data();
        one_step(CitMode::ImageCIT);
        CHECK(layer.vl.a.data() == vl_a);
        CHECK(layer.vl.b.data() == vl_b);
        CHECK(layer.base.packed == packed);
        CHECK(layer.image.a.data() != img_a);

        SUBCASE("gradient isolation: frozen adapters receive no gradient") {
            for (float g : layer.vl.a.grad()) CHECK(g == 0.0f);
            for (float g : layer.vl.b.grad()) CHECK(g == 0.0f);
        }
    }
    SUBCASE("VLCIT step leaves adapter_image bit-identical") {
        layer.image.b = Tensor::randn({out, r}, rng, 0.3f, true);
        layer.vl.b = Tensor::randn({out, r}, rng, 0.3f, true);
        const auto img_a = layer.image.a.data();
        const auto img_b = layer.image.b.data();
        one_step(CitMode::VLCIT);
        CHECK(layer.image.a.data() == img_a);
        CHECK(layer.image.b.data() == img_b);
    }
    SUBCASE("single-adapter ablation trains the image adapter on VL batches") {
        layer.dual = false;
        layer.image.b = Tensor::randn({out, r}, rng, 0.3f, true);
        const auto img_a = layer.image.a.data();
        one_step(CitMode::VLCIT);
        CHECK(layer.image.a.data() != img_a);
    }
    SUBCASE("base dequant never trainable in any mode") {
        for (CitMode m : {CitMode::ImageCIT, CitMode::VLCIT, CitMode::InferenceBoth}) {
            route(layer, m);
            CHECK_FALSE(layer.base_dequant.requires_grad());
        }
    }
}
