#include "tbwm/optim.hpp"

#include <cmath>

namespace tbwm {

void AdamW::step(std::span<ad::Param* const> params) {
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (ad::Param* p : params) {
        double* w = p->value.data();
        const double* g = p->grad.data();
        double* m = p->m.data();
        double* v = p->v.data();
        const std::int64_t n = p->value.size();
        for (std::int64_t i = 0; i < n; ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * w[i]);
        }
    }
}

void zero_grads(std::span<ad::Param* const> params) {
    for (ad::Param* p : params) p->grad.fill(0.0);
}

double clip_grad_norm(std::span<ad::Param* const> params, double max_norm) {
    double sq = 0.0;
    for (ad::Param* p : params) {
        const double* g = p->grad.data();
        for (std::int64_t i = 0; i < p->grad.size(); ++i) sq += g[i] * g[i];
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (ad::Param* p : params) {
            double* g = p->grad.data();
            for (std::int64_t i = 0; i < p->grad.size(); ++i) g[i] *= s;
        }
    }
    return norm;
}

Tensor init_uniform(int rows, int cols, double lo, double hi, Rng& rng) {
    Tensor t(rows, cols);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

Tensor init_fan_in(int rows, int cols, Rng& rng, double gain) {
    const double bound = gain * std::sqrt(3.0 / static_cast<double>(rows));
    return init_uniform(rows, cols, -bound, bound, rng);
}

Tensor init_normal(int rows, int cols, double stddev, Rng& rng) {
    Tensor t(rows, cols);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
    return t;
}

}  // namespace tbwm
