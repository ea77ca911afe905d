#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "crayonbox/rng.hpp"

namespace crayonbox {

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

struct TensorNode {
    std::vector<int> shape;
    std::vector<float> value;
    std::vector<float> grad;  // allocated lazily, same length as value
    bool requires_grad = false;
    // Propagates this node's grad into its parents; empty for leaves.
    std::function<void(TensorNode&)> backprop;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
    }
};

// Value-semantics handle over a shared node. Copies alias the same storage;
// forward ops never mutate existing nodes.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}
    Tensor(std::vector<int> shape, std::vector<float> data, bool requires_grad = false);

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, float v, bool requires_grad = false);
    static Tensor scalar(float v, bool requires_grad = false);
    static Tensor randn(std::vector<int> shape, Rng& rng, float std_dev, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    size_t numel() const { return node_->value.size(); }
    std::vector<float>& data() { return node_->value; }
    const std::vector<float>& data() const { return node_->value; }
    std::vector<float>& grad() { return node_->grad; }
    const std::vector<float>& grad() const { return node_->grad; }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }
    float item() const;

    NodePtr node() const { return node_; }

private:
    NodePtr node_;
};

// Dynamic define-by-run tape. Ops record their results on the active tape;
// backward replays in reverse creation order.
class GradTape {
public:
    GradTape();
    ~GradTape();
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    void record(const NodePtr& node) { nodes_.push_back(node); }
    // Seeds grad(loss)=1 and accumulates grads into every reachable
    // requires_grad tensor. A tape can be consumed once.
    void backward(const Tensor& loss);
    bool consumed() const { return consumed_; }
    size_t size() const { return nodes_.size(); }

    static GradTape* active();

private:
    std::vector<NodePtr> nodes_;
    bool consumed_ = false;
    GradTape* previous_ = nullptr;
};

// ---- primitives (all record onto the active tape when gradients are needed)

Tensor matmul(const Tensor& a, const Tensor& b);            // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);         // [m,k]x[n,k]^T -> [m,n]
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);               // elementwise
Tensor scale(const Tensor& a, float c);
Tensor add_row_bias(const Tensor& x, const Tensor& bias);   // [m,n] + [n]
Tensor gelu(const Tensor& x);                               // exact erf form
Tensor softmax_rows(const Tensor& x);
Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps = 1e-5f);
Tensor embedding_rows(const Tensor& table, const std::vector<int>& indices);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, int col0, int width);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, int row0, int rows);
Tensor add_to_rows(const Tensor& x, const Tensor& y, int row0);  // rows [row0, row0+ry)
Tensor causal_mask(const Tensor& scores);                   // col > row -> -1e9
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor masked_cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<uint8_t>& mask);

void assert_finite(const Tensor& x, const std::string& what);

}  // namespace crayonbox
