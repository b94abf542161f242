#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "masklam/errors.hpp"
#include "masklam/tensor.hpp"

namespace masklam {

struct AdamConfig {
    float lr = 3e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

// Per-parameter first/second moment buffers plus a shared step counter.
class AdamState {
public:
    explicit AdamState(AdamConfig cfg = {}) : cfg_(cfg) {}

    void attach(const std::vector<Tensor>& params) {
        m_.clear();
        v_.clear();
        for (const Tensor& p : params) {
            m_.emplace_back(p.numel(), 0.0f);
            v_.emplace_back(p.numel(), 0.0f);
        }
        step_ = 0;
    }

    std::int64_t step_count() const { return step_; }
    const AdamConfig& config() const { return cfg_; }

    // Bias-corrected Adam update in place; clears parameter grads.
    void step(std::vector<Tensor>& params) {
        if (m_.size() != params.size())
            throw ContractError("AdamState attached to a different parameter set");
        ++step_;
        const double b1 = cfg_.beta1, b2 = cfg_.beta2;
        const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            Tensor& p = params[pi];
            if (!p.has_grad())
                throw ContractError("adam_step: parameter " + std::to_string(pi) +
                                    " has no gradient");
            std::vector<float>& m = m_[pi];
            std::vector<float>& v = v_[pi];
            float* w = p.data();
            float* g = p.grad();
            const std::int64_t n = p.numel();
            for (std::int64_t i = 0; i < n; ++i) {
                const double gi = static_cast<double>(g[i]);
                const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
                const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
                m[i] = static_cast<float>(mi);
                v[i] = static_cast<float>(vi);
                const double mhat = mi / bc1;
                const double vhat = vi / bc2;
                w[i] = static_cast<float>(static_cast<double>(w[i]) -
                                          static_cast<double>(cfg_.lr) * mhat /
                                              (std::sqrt(vhat) + static_cast<double>(cfg_.eps)));
                g[i] = 0.0f;
            }
        }
    }

private:
    AdamConfig cfg_;
    std::vector<std::vector<float>> m_;
    std::vector<std::vector<float>> v_;
    std::int64_t step_ = 0;
};

inline void adam_step(std::vector<Tensor>& params, AdamState& state) { state.step(params); }

}  // namespace masklam
