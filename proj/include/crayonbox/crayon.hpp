#pragma once

#include "crayonbox/panoptic.hpp"
#include "crayonbox/tensor.hpp"

namespace crayonbox {

// Learnable semantic (134 x d) and numbering (21 x d) query tables.
struct CrayonCodebooks {
    Tensor semantic;
    Tensor numbering;

    static CrayonCodebooks init(int d, Rng& rng, float std_dev = 0.02f);
    int width() const { return semantic.dim(1); }
};

// Two affine layers with GELU between. The output layer is zero-initialized
// so the initial injection is exactly zero.
struct Connector {
    Tensor w1;  // [hidden, d]
    Tensor b1;  // [hidden]
    Tensor w2;  // [d_model, hidden], zero at init
    Tensor b2;  // [d_model], zero at init

    static Connector init(int d, int hidden, int d_model, Rng& rng);
    int in_width() const { return w1.dim(1); }
    int out_width() const { return w2.dim(0); }
};

// Table 2 ablation switches: semantic-query / numbering-query on or off.
struct CrayonFlags {
    bool sem_query = true;
    bool num_query = true;
};

// P[cell] = S[class(cell)] + N[number(cell)], flattened row-major to (h*w, d).
Tensor build_prompt(const PanopticGrid& grid, const CrayonCodebooks& cb, CrayonFlags flags = {});

// affine -> GELU -> affine per cell; output (h*w, d_model).
Tensor connect(const Tensor& prompt, const Connector& conn);

// Element-wise sum onto image-token features; same connected tensor is
// re-added at every layer by the model (no per-layer parameters).
Tensor inject(const Tensor& image_tokens, const Tensor& connected);

}  // namespace crayonbox
