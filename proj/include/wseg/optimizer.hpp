#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "wseg/segnet.hpp"

// Adam with bias correction. One shared step counter across all parameters.

namespace wseg {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    long step_count = 0;

    void reset(const Parameters& params) {
        m.clear();
        v.clear();
        for (const auto& e : params.entries) {
            m.emplace_back(e.value.size(), 0.0);
            v.emplace_back(e.value.size(), 0.0);
        }
        step_count = 0;
    }

    bool matches(const Parameters& params) const {
        if (m.size() != params.entries.size()) return false;
        for (std::size_t i = 0; i < m.size(); ++i)
            if (m[i].size() != params.entries[i].value.size()) return false;
        return true;
    }
};

inline void adam_step(Parameters& params, const std::vector<std::vector<double>>& grads,
                      AdamState& state, double lr, const AdamConfig& cfg = {}) {
    if (!state.matches(params)) state.reset(params);
    if (grads.size() != params.entries.size())
        throw std::invalid_argument("adam_step: gradient count " + std::to_string(grads.size()) +
                                    " does not match parameter count " +
                                    std::to_string(params.entries.size()));
    state.step_count += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step_count));
    for (std::size_t i = 0; i < params.entries.size(); ++i) {
        auto& p = params.entries[i].value.data;
        const auto& g = grads[i];
        if (g.size() != p.size())
            throw std::invalid_argument("adam_step: gradient shape mismatch for " +
                                        params.entries[i].name);
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            if (!std::isfinite(g[k]))
                throw std::runtime_error("adam_step: non-finite gradient in " +
                                         params.entries[i].name + " at index " +
                                         std::to_string(k));
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            p[k] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

}  // namespace wseg
