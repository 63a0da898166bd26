#pragma once

// AdamW with decoupled weight decay, plus global-norm gradient clipping.

#include <span>
#include <vector>

#include "tbwm/autodiff.hpp"
#include "tbwm/rng.hpp"
#include "tbwm/tensor.hpp"

namespace tbwm {

struct AdamW {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    long step_count = 0;

    void step(std::span<ad::Param* const> params);
};

void zero_grads(std::span<ad::Param* const> params);

inline void zero_grads(std::initializer_list<ad::Param*> params) {
    zero_grads(std::span<ad::Param* const>(params.begin(), params.size()));
}

// Scales all grads so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
double clip_grad_norm(std::span<ad::Param* const> params, double max_norm);

// Weight initializers.
Tensor init_uniform(int rows, int cols, double lo, double hi, Rng& rng);
// Kaiming-style fan-in scaling, uniform in +/- sqrt(3 / fan_in) * gain.
Tensor init_fan_in(int rows, int cols, Rng& rng, double gain = 1.0);
Tensor init_normal(int rows, int cols, double stddev, Rng& rng);

}  // namespace tbwm
