#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "crayonbox/errors.hpp"
#include "crayonbox/tensor.hpp"

namespace crayonbox {

struct LrSchedule {
    float lr_max;
    float lr_min;
    int total_steps;
};

// lr(t) = lr_min + 0.5*(lr_max - lr_min)*(1 + cos(pi*t/total_steps))
inline float cosine_lr(int t, const LrSchedule& s) {
    if (s.total_steps <= 0) throw ArgumentError("cosine_lr: total_steps must be positive");
    if (t < 0 || t > s.total_steps) throw ArgumentError("cosine_lr: step out of range");
    const double frac = static_cast<double>(t) / static_cast<double>(s.total_steps);
    return static_cast<float>(s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1.0 + std::cos(3.14159265358979323846 * frac)));
}

struct AdamWConfig {
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.01f;
};

// Decoupled weight-decay Adam with bias correction. Parameters whose
// requires_grad flag is off are skipped entirely: no decay, no moment
// advance, so frozen groups stay bit-identical.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    void add_param(const std::string& name, const Tensor& p) {
        slots_.push_back({name, p, std::vector<float>(p.numel(), 0.0f),
                          std::vector<float>(p.numel(), 0.0f), 0});
    }

    void zero_grad() {
        for (auto& s : slots_) {
            auto& g = s.param.node()->grad;
            std::fill(g.begin(), g.end(), 0.0f);
        }
    }

    void step(float lr) {
        for (auto& s : slots_) {
            if (!s.param.requires_grad()) continue;
            s.step_count += 1;
            auto& value = s.param.data();
            s.param.node()->ensure_grad();
            const auto& grad = s.param.grad();
            const float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(s.step_count));
            const float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(s.step_count));
            for (size_t i = 0; i < value.size(); ++i) {
                const float g = grad[i];
                s.m[i] = cfg_.beta1 * s.m[i] + (1.0f - cfg_.beta1) * g;
                s.v[i] = cfg_.beta2 * s.v[i] + (1.0f - cfg_.beta2) * g * g;
                const float mhat = s.m[i] / bc1;
                const float vhat = s.v[i] / bc2;
                value[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * value[i]);
            }
        }
    }

    const AdamWConfig& config() const { return cfg_; }
    size_t param_count() const { return slots_.size(); }

private:
    struct Slot {
        std::string name;
        Tensor param;
        std::vector<float> m;
        std::vector<float> v;
        int step_count;
    };
    AdamWConfig cfg_;
    std::vector<Slot> slots_;
};

}  // namespace crayonbox
