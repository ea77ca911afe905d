#include "crayonbox/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "crayonbox/errors.hpp"

namespace crayonbox {

namespace {

thread_local GradTape* g_active_tape = nullptr;

size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw ShapeError("negative dimension");
        n *= static_cast<size_t>(d);
    }
    return n;
}

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
    for (const Tensor* t : inputs) {
        if (t->defined() && t->requires_grad()) return true;
    }
    return false;
}

// Builds the result node; records it when a tape is active and a gradient
// path exists. `bp` may be empty when the op is not differentiable.
Tensor make_result(std::vector<int> shape, std::vector<float> value,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(TensorNode&)> bp) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    if (g_active_tape != nullptr && any_requires_grad(inputs) && bp) {
        node->requires_grad = true;
        node->backprop = std::move(bp);
        g_active_tape->record(node);
    }
    return Tensor(node);
}

void accumulate(const NodePtr& parent, size_t idx, float v) {
    parent->grad[idx] += v;
}

constexpr float kInvSqrt2 = 0.70710678118654752440f;
constexpr float kInvSqrt2Pi = 0.39894228040143267794f;

}  // namespace

Tensor::Tensor(std::vector<int> shape, std::vector<float> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) throw ShapeError("shape/data length mismatch");
    node_ = std::make_shared<TensorNode>();
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, float v, bool requires_grad) {
    size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<float>(n, v), requires_grad);
}

Tensor Tensor::scalar(float v, bool requires_grad) {
    return Tensor({1}, {v}, requires_grad);
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, float std_dev, bool requires_grad) {
    size_t n = shape_numel(shape);
    std::vector<float> data(n);
    for (auto& x : data) x = rng.normal() * std_dev;
    return Tensor(std::move(shape), std::move(data), requires_grad);
}

float Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor");
    return node_->value[0];
}

GradTape::GradTape() {
    previous_ = g_active_tape;
    g_active_tape = this;
}

GradTape::~GradTape() { g_active_tape = previous_; }

GradTape* GradTape::active() { return g_active_tape; }

void GradTape::backward(const Tensor& loss) {
    if (consumed_) throw StateError("backward called twice on a consumed tape");
    if (loss.numel() != 1) throw ShapeError("backward expects a scalar loss");
    consumed_ = true;
    loss.node()->ensure_grad();
    loss.node()->grad[0] = 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        TensorNode& n = **it;
        if (n.backprop && n.grad.size() == n.value.size()) n.backprop(n);
    }
}

// ---------------------------------------------------------------- matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul dimension mismatch");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<float> out(static_cast<size_t>(m) * n, 0.0f);
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    for (int i = 0; i < m; ++i) {
        float* po = out.data() + static_cast<size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const float aik = pa[static_cast<size_t>(i) * k + kk];
            if (aik == 0.0f) continue;
            const float* pbr = pb + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) po[j] += aik * pbr[j];
        }
    }
    NodePtr na = a.node(), nb = b.node();
    return make_result({m, n}, std::move(out), {&a, &b}, [na, nb, m, k, n](TensorNode& o) {
        const float* g = o.grad.data();
        if (na->requires_grad) {
            na->ensure_grad();
            const float* pb = nb->value.data();
            for (int i = 0; i < m; ++i) {
                for (int kk = 0; kk < k; ++kk) {
                    const float* pbr = pb + static_cast<size_t>(kk) * n;
                    const float* gr = g + static_cast<size_t>(i) * n;
                    float s = 0.0f;
                    for (int j = 0; j < n; ++j) s += gr[j] * pbr[j];
                    na->grad[static_cast<size_t>(i) * k + kk] += s;
                }
            }
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            const float* pa = na->value.data();
            for (int i = 0; i < m; ++i) {
                const float* gr = g + static_cast<size_t>(i) * n;
                for (int kk = 0; kk < k; ++kk) {
                    const float aik = pa[static_cast<size_t>(i) * k + kk];
                    if (aik == 0.0f) continue;
                    float* gb = nb->grad.data() + static_cast<size_t>(kk) * n;
                    for (int j = 0; j < n; ++j) gb[j] += aik * gr[j];
                }
            }
        }
    });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(1))
        throw ShapeError("matmul_nt dimension mismatch");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    std::vector<float> out(static_cast<size_t>(m) * n);
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    for (int i = 0; i < m; ++i) {
        const float* ar = pa + static_cast<size_t>(i) * k;
        for (int j = 0; j < n; ++j) {
            const float* br = pb + static_cast<size_t>(j) * k;
            float s = 0.0f;
            for (int kk = 0; kk < k; ++kk) s += ar[kk] * br[kk];
            out[static_cast<size_t>(i) * n + j] = s;
        }
    }
    NodePtr na = a.node(), nb = b.node();
    return make_result({m, n}, std::move(out), {&a, &b}, [na, nb, m, k, n](TensorNode& o) {
        const float* g = o.grad.data();
        if (na->requires_grad) {
            na->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const float* gr = g + static_cast<size_t>(i) * n;
                float* ga = na->grad.data() + static_cast<size_t>(i) * k;
                for (int j = 0; j < n; ++j) {
                    const float gij = gr[j];
                    if (gij == 0.0f) continue;
                    const float* br = nb->value.data() + static_cast<size_t>(j) * k;
                    for (int kk = 0; kk < k; ++kk) ga[kk] += gij * br[kk];
                }
            }
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const float* gr = g + static_cast<size_t>(i) * n;
                const float* ar = na->value.data() + static_cast<size_t>(i) * k;
                for (int j = 0; j < n; ++j) {
                    const float gij = gr[j];
                    if (gij == 0.0f) continue;
                    float* gb = nb->grad.data() + static_cast<size_t>(j) * k;
                    for (int kk = 0; kk < k; ++kk) gb[kk] += gij * ar[kk];
                }
            }
        }
    });
}

// --------------------------------------------------------- elementwise ops

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("add shape mismatch");
    std::vector<float> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    NodePtr na = a.node(), nb = b.node();
    return make_result(a.shape(), std::move(out), {&a, &b}, [na, nb](TensorNode& o) {
        if (na->requires_grad) {
            na->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) accumulate(na, i, o.grad[i]);
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) accumulate(nb, i, o.grad[i]);
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("sub shape mismatch");
    std::vector<float> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    NodePtr na = a.node(), nb = b.node();
    return make_result(a.shape(), std::move(out), {&a, &b}, [na, nb](TensorNode& o) {
        if (na->requires_grad) {
            na->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) accumulate(na, i, o.grad[i]);
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) accumulate(nb, i, -o.grad[i]);
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw ShapeError("mul shape mismatch");
    std::vector<float> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    NodePtr na = a.node(), nb = b.node();
    return make_result(a.shape(), std::move(out), {&a, &b}, [na, nb](TensorNode& o) {
        if (na->requires_grad) {
            na->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) accumulate(na, i, o.grad[i] * nb->value[i]);
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) accumulate(nb, i, o.grad[i] * na->value[i]);
        }
    });
}

Tensor scale(const Tensor& a, float c) {
    std::vector<float> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    NodePtr na = a.node();
    return make_result(a.shape(), std::move(out), {&a}, [na, c](TensorNode& o) {
        if (!na->requires_grad) return;
        na->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) accumulate(na, i, o.grad[i] * c);
    });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    if (x.shape().size() != 2 || bias.shape().size() != 1 || x.dim(1) != bias.dim(0))
        throw ShapeError("add_row_bias shape mismatch");
    const int m = x.dim(0), n = x.dim(1);
    std::vector<float> out(x.numel());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<size_t>(i) * n + j] = x.data()[static_cast<size_t>(i) * n + j] + bias.data()[static_cast<size_t>(j)];
    NodePtr nx = x.node(), nb = bias.node();
    return make_result(x.shape(), std::move(out), {&x, &bias}, [nx, nb, m, n](TensorNode& o) {
        if (nx->requires_grad) {
            nx->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) accumulate(nx, i, o.grad[i]);
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    nb->grad[static_cast<size_t>(j)] += o.grad[static_cast<size_t>(i) * n + j];
        }
    });
}

Tensor gelu(const Tensor& x) {
    std::vector<float> out(x.numel());
    for (size_t i = 0; i < out.size(); ++i) {
        const float v = x.data()[i];
        out[i] = v * 0.5f * (1.0f + std::erf(v * kInvSqrt2));
    }
    NodePtr nx = x.node();
    return make_result(x.shape(), std::move(out), {&x}, [nx](TensorNode& o) {
        if (!nx->requires_grad) return;
        nx->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) {
            const float v = nx->value[i];
            const float cdf = 0.5f * (1.0f + std::erf(v * kInvSqrt2));
            const float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
            accumulate(nx, i, o.grad[i] * (cdf + v * pdf));
        }
    });
}

Tensor softmax_rows(const Tensor& x) {
    if (x.shape().size() != 2) throw ShapeError("softmax_rows expects a matrix");
    const int m = x.dim(0), n = x.dim(1);
    std::vector<float> out(x.numel());
    for (int i = 0; i < m; ++i) {
        const float* xr = x.data().data() + static_cast<size_t>(i) * n;
        float* orow = out.data() + static_cast<size_t>(i) * n;
        float mx = xr[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
        float z = 0.0f;
        for (int j = 0; j < n; ++j) {
            orow[j] = std::exp(xr[j] - mx);
            z += orow[j];
        }
        const float inv = 1.0f / z;
        for (int j = 0; j < n; ++j) orow[j] *= inv;
    }
    NodePtr nx = x.node();
    return make_result(x.shape(), std::move(out), {&x}, [nx, m, n](TensorNode& o) {
        if (!nx->requires_grad) return;
        nx->ensure_grad();
        for (int i = 0; i < m; ++i) {
            const float* p = o.value.data() + static_cast<size_t>(i) * n;
            const float* g = o.grad.data() + static_cast<size_t>(i) * n;
            float dot = 0.0f;
            for (int j = 0; j < n; ++j) dot += p[j] * g[j];
            float* gx = nx->grad.data() + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) gx[j] += p[j] * (g[j] - dot);
        }
    });
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps) {
    if (x.shape().size() != 2 || gain.shape().size() != 1 || x.dim(1) != gain.dim(0))
        throw ShapeError("rms_norm shape mismatch");
    const int m = x.dim(0), n = x.dim(1);
    std::vector<float> out(x.numel());
    std::vector<float> inv_rms(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
        const float* xr = x.data().data() + static_cast<size_t>(i) * n;
        float ss = 0.0f;
        for (int j = 0; j < n; ++j) ss += xr[j] * xr[j];
        const float inv = 1.0f / std::sqrt(ss / static_cast<float>(n) + eps);
        inv_rms[static_cast<size_t>(i)] = inv;
        for (int j = 0; j < n; ++j)
            out[static_cast<size_t>(i) * n + j] = xr[j] * inv * gain.data()[static_cast<size_t>(j)];
    }
    NodePtr nx = x.node(), ng = gain.node();
    return make_result(x.shape(), std::move(out), {&x, &gain},
                       [nx, ng, m, n, inv_rms = std::move(inv_rms)](TensorNode& o) {
        for (int i = 0; i < m; ++i) {
            const float inv = inv_rms[static_cast<size_t>(i)];
            const float* xr = nx->value.data() + static_cast<size_t>(i) * n;
            const float* g = o.grad.data() + static_cast<size_t>(i) * n;
            if (ng->requires_grad) {
                ng->ensure_grad();
                for (int j = 0; j < n; ++j) ng->grad[static_cast<size_t>(j)] += g[j] * xr[j] * inv;
            }
            if (nx->requires_grad) {
                nx->ensure_grad();
                float dot = 0.0f;
                for (int j = 0; j < n; ++j) dot += g[j] * ng->value[static_cast<size_t>(j)] * xr[j];
                const float coef = dot * inv * inv * inv / static_cast<float>(n);
                float* gx = nx->grad.data() + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j)
                    gx[j] += g[j] * ng->value[static_cast<size_t>(j)] * inv - coef * xr[j];
            }
        }
    });
}

Tensor embedding_rows(const Tensor& table, const std::vector<int>& indices) {
    if (table.shape().size() != 2) throw ShapeError("embedding_rows expects a matrix table");
    const int rows = table.dim(0), cols = table.dim(1);
    for (int idx : indices)
        if (idx < 0 || idx >= rows) throw ArgumentError("embedding index out of range");
    std::vector<float> out(indices.size() * static_cast<size_t>(cols));
    for (size_t i = 0; i < indices.size(); ++i)
        std::copy_n(table.data().data() + static_cast<size_t>(indices[i]) * cols, cols,
                    out.data() + i * static_cast<size_t>(cols));
    NodePtr nt = table.node();
    return make_result({static_cast<int>(indices.size()), cols}, std::move(out), {&table},
                       [nt, cols, indices](TensorNode& o) {
        if (!nt->requires_grad) return;
        nt->ensure_grad();
        for (size_t i = 0; i < indices.size(); ++i) {
            float* gr = nt->grad.data() + static_cast<size_t>(indices[i]) * cols;
            const float* g = o.grad.data() + i * static_cast<size_t>(cols);
            for (int j = 0; j < cols; ++j) gr[j] += g[j];
        }
    });
}

Tensor transpose(const Tensor& x) {
    if (x.shape().size() != 2) throw ShapeError("transpose expects a matrix");
    const int m = x.dim(0), n = x.dim(1);
    std::vector<float> out(x.numel());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<size_t>(j) * m + i] = x.data()[static_cast<size_t>(i) * n + j];
    NodePtr nx = x.node();
    return make_result({n, m}, std::move(out), {&x}, [nx, m, n](TensorNode& o) {
        if (!nx->requires_grad) return;
        nx->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                nx->grad[static_cast<size_t>(i) * n + j] += o.grad[static_cast<size_t>(j) * m + i];
    });
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
    if (shape_numel(shape) != x.numel()) throw ShapeError("reshape numel mismatch");
    NodePtr nx = x.node();
    return make_result(std::move(shape), x.data(), {&x}, [nx](TensorNode& o) {
        if (!nx->requires_grad) return;
        nx->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i) nx->grad[i] += o.grad[i];
    });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows of nothing");
    const int n = parts[0].dim(1);
    int m = 0;
    for (const auto& p : parts) {
        if (p.shape().size() != 2 || p.dim(1) != n) throw ShapeError("concat_rows width mismatch");
        m += p.dim(0);
    }
    std::vector<float> out;
    out.reserve(static_cast<size_t>(m) * n);
    bool track = false;
    for (const auto& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
        track = track || p.requires_grad();
    }
    std::vector<NodePtr> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    auto node = std::make_shared<TensorNode>();
    node->shape = {m, n};
    node->value = std::move(out);
    if (GradTape::active() != nullptr && track) {
        node->requires_grad = true;
        node->backprop = [nodes, n](TensorNode& o) {
            size_t off = 0;
            for (const auto& p : nodes) {
                const size_t cnt = p->value.size();
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (size_t i = 0; i < cnt; ++i) p->grad[i] += o.grad[off + i];
                }
                off += cnt;
            }
        };
        GradTape::active()->record(node);
    }
    return Tensor(node);
}

Tensor slice_cols(const Tensor& x, int col0, int width) {
    if (x.shape().size() != 2 || col0 < 0 || width <= 0 || col0 + width > x.dim(1))
        throw ShapeError("slice_cols out of range");
    const int m = x.dim(0), n = x.dim(1);
    std::vector<float> out(static_cast<size_t>(m) * width);
    for (int i = 0; i < m; ++i)
        std::copy_n(x.data().data() + static_cast<size_t>(i) * n + col0, width,
                    out.data() + static_cast<size_t>(i) * width);
    NodePtr nx = x.node();
    return make_result({m, width}, std::move(out), {&x}, [nx, col0, width, m, n](TensorNode& o) {
        if (!nx->requires_grad) return;
        nx->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < width; ++j)
                nx->grad[static_cast<size_t>(i) * n + col0 + j] += o.grad[static_cast<size_t>(i) * width + j];
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols of nothing");
    const int m = parts[0].dim(0);
    int n = 0;
    bool track = false;
    for (const auto& p : parts) {
        if (p.shape().size() != 2 || p.dim(0) != m) throw ShapeError("concat_cols height mismatch");
        n += p.dim(1);
        track = track || p.requires_grad();
    }
    std::vector<float> out(static_cast<size_t>(m) * n);
    int coff = 0;
    for (const auto& p : parts) {
        const int w = p.dim(1);
        for (int i = 0; i < m; ++i)
            std::copy_n(p.data().data() + static_cast<size_t>(i) * w, w,
                        out.data() + static_cast<size_t>(i) * n + coff);
        coff += w;
    }
    std::vector<NodePtr> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    auto node = std::make_shared<TensorNode>();
    node->shape = {m, n};
    node->value = std::move(out);
    if (GradTape::active() != nullptr && track) {
        node->requires_grad = true;
        node->backprop = [nodes, m, n](TensorNode& o) {
            int coff = 0;
            for (const auto& p : nodes) {
                const int w = p->shape[1];
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < w; ++j)
                            p->grad[static_cast<size_t>(i) * w + j] +=
                                o.grad[static_cast<size_t>(i) * n + coff + j];
                }
                coff += w;
            }
        };
        GradTape::active()->record(node);
    }
    return Tensor(node);
}

Tensor slice_rows(const Tensor& x, int row0, int rows) {
    if (x.shape().size() != 2 || row0 < 0 || rows <= 0 || row0 + rows > x.dim(0))
        throw ShapeError("slice_rows out of range");
    const int n = x.dim(1);
    std::vector<float> out(static_cast<size_t>(rows) * n);
    std::copy_n(x.data().data() + static_cast<size_t>(row0) * n, out.size(), out.data());
    NodePtr nx = x.node();
    return make_result({rows, n}, std::move(out), {&x}, [nx, row0, n](TensorNode& o) {
        if (!nx->requires_grad) return;
        nx->ensure_grad();
        for (size_t i = 0; i < o.grad.size(); ++i)
            nx->grad[static_cast<size_t>(row0) * n + i] += o.grad[i];
    });
}

Tensor add_to_rows(const Tensor& x, const Tensor& y, int row0) {
    if (x.shape().size() != 2 || y.shape().size() != 2 || x.dim(1) != y.dim(1))
        throw ShapeError("add_to_rows width mismatch");
    if (row0 < 0 || row0 + y.dim(0) > x.dim(0)) throw ShapeError("add_to_rows row range");
    const int n = x.dim(1);
    std::vector<float> out = x.data();
    const size_t base = static_cast<size_t>(row0) * n;
    for (size_t i = 0; i < y.numel(); ++i) out[base + i] += y.data()[i];
    NodePtr nx = x.node(), ny = y.node();
    return make_result(x.shape(), std::move(out), {&x, &y}, [nx, ny, base](TensorNode& o) {
        if (nx->requires_grad) {
            nx->ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) nx->grad[i] += o.grad[i];
        }
        if (ny->requires_grad) {
            ny->ensure_grad();
            for (size_t i = 0; i < ny->grad.size(); ++i) ny->grad[i] += o.grad[base + i];
        }
    });
}

Tensor causal_mask(const Tensor& scores) {
    if (scores.shape().size() != 2 || scores.dim(0) != scores.dim(1))
        throw ShapeError("causal_mask expects a square matrix");
    const int t = scores.dim(0);
    std::vector<float> out = scores.data();
    for (int i = 0; i < t; ++i)
        for (int j = i + 1; j < t; ++j) out[static_cast<size_t>(i) * t + j] = -1e9f;
    NodePtr nx = scores.node();
    return make_result(scores.shape(), std::move(out), {&scores}, [nx, t](TensorNode& o) {
        if (!nx->requires_grad) return;
        nx->ensure_grad();
        for (int i = 0; i < t; ++i)
            for (int j = 0; j <= i; ++j)
                nx->grad[static_cast<size_t>(i) * t + j] += o.grad[static_cast<size_t>(i) * t + j];
    });
}

Tensor sum(const Tensor& x) {
    float s = 0.0f;
    for (float v : x.data()) s += v;
    NodePtr nx = x.node();
    return make_result({1}, {s}, {&x}, [nx](TensorNode& o) {
        if (!nx->requires_grad) return;
        nx->ensure_grad();
        for (auto& g : nx->grad) g += o.grad[0];
    });
}

Tensor mean(const Tensor& x) {
    const float inv = 1.0f / static_cast<float>(x.numel());
    float s = 0.0f;
    for (float v : x.data()) s += v;
    NodePtr nx = x.node();
    return make_result({1}, {s * inv}, {&x}, [nx, inv](TensorNode& o) {
        if (!nx->requires_grad) return;
        nx->ensure_grad();
        for (auto& g : nx->grad) g += o.grad[0] * inv;
    });
}

Tensor masked_cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<uint8_t>& mask) {
    if (logits.shape().size() != 2) throw ShapeError("masked_cross_entropy expects [T,V] logits");
    const int t = logits.dim(0), v = logits.dim(1);
    if (static_cast<int>(targets.size()) != t || static_cast<int>(mask.size()) != t)
        throw ShapeError("targets/mask length mismatch");
    int active = 0;
    for (uint8_t m : mask) active += (m != 0);
    if (active == 0) throw ArgumentError("masked_cross_entropy: all-false mask (empty loss)");
    // Row softmax probabilities cached for backward.
    std::vector<float> probs(logits.numel());
    double loss = 0.0;
    for (int i = 0; i < t; ++i) {
        const float* lr = logits.data().data() + static_cast<size_t>(i) * v;
        float* pr = probs.data() + static_cast<size_t>(i) * v;
        float mx = lr[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, lr[j]);
        float z = 0.0f;
        for (int j = 0; j < v; ++j) {
            pr[j] = std::exp(lr[j] - mx);
            z += pr[j];
        }
        const float inv = 1.0f / z;
        for (int j = 0; j < v; ++j) pr[j] *= inv;
        if (mask[static_cast<size_t>(i)]) {
            if (targets[static_cast<size_t>(i)] < 0 || targets[static_cast<size_t>(i)] >= v)
                throw ArgumentError("target id out of vocabulary range");
            loss -= std::log(std::max(pr[targets[static_cast<size_t>(i)]], 1e-30f));
        }
    }
    const float result = static_cast<float>(loss / active);
    NodePtr nl = logits.node();
    return make_result({1}, {result}, {&logits},
                       [nl, targets, mask, t, v, active, probs = std::move(probs)](TensorNode& o) {
        if (!nl->requires_grad) return;
        nl->ensure_grad();
        const float g = o.grad[0] / static_cast<float>(active);
        for (int i = 0; i < t; ++i) {
            if (!mask[static_cast<size_t>(i)]) continue;
            const float* pr = probs.data() + static_cast<size_t>(i) * v;
            float* gr = nl->grad.data() + static_cast<size_t>(i) * v;
            for (int j = 0; j < v; ++j) gr[j] += g * pr[j];
            gr[targets[static_cast<size_t>(i)]] -= g;
        }
    });
}

void assert_finite(const Tensor& x, const std::string& what) {
    for (float v : x.data())
        if (!std::isfinite(v)) throw StateError("non-finite value in " + what);
}

}  // namespace crayonbox
