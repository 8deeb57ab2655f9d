#ifndef DYAV_OPTIM_HPP
#define DYAV_OPTIM_HPP

// AdamW with decoupled weight decay and global gradient-norm clipping.

#include "tensor.hpp"

namespace dyav {

struct AdamW {
    struct Slot { std::vector<float> m, v; };

    std::vector<Tensor> params;
    std::vector<Slot> state;
    float lr = 4e-4f;
    float beta1 = 0.9f, beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;
    float clip = 0.1f; // global gradient norm cap; <= 0 disables
    long step_count = 0;
    long skipped_steps = 0; // non-finite gradient events

    explicit AdamW(std::vector<Tensor> p = {}) : params(std::move(p)) { reset_state(); }

    void reset_state() {
        state.clear();
        for (auto& p : params)
            state.push_back({std::vector<float>(p.numel(), 0.0f),
                             std::vector<float>(p.numel(), 0.0f)});
    }

    void zero_grad() {
        for (auto& p : params) { p.grad(); p.zero_grad(); }
    }

    // returns false when the step was skipped because of non-finite gradients
    bool step() {
        double sq = 0.0;
        for (auto& p : params) {
            const float* g = p.grad();
            for (size_t i = 0; i < p.numel(); ++i) {
                if (!std::isfinite(g[i])) { ++skipped_steps; return false; }
                sq += double(g[i]) * g[i];
            }
        }
        float gnorm = float(std::sqrt(sq));
        float gscale = (clip > 0.0f && gnorm > clip) ? clip / gnorm : 1.0f;

        ++step_count;
        float bc1 = 1.0f - std::pow(beta1, float(step_count));
        float bc2 = 1.0f - std::pow(beta2, float(step_count));
        for (size_t k = 0; k < params.size(); ++k) {
            Tensor& p = params[k];
            Slot& s = state[k];
            float* w = p.data();
            const float* g = p.grad();
            for (size_t i = 0; i < p.numel(); ++i) {
                float gi = g[i] * gscale;
                s.m[i] = beta1 * s.m[i] + (1.0f - beta1) * gi;
                s.v[i] = beta2 * s.v[i] + (1.0f - beta2) * gi * gi;
                float mhat = s.m[i] / bc1, vhat = s.v[i] / bc2;
                w[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * w[i]);
            }
        }
        return true;
    }
};

} // namespace dyav

#endif
