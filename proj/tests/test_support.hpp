#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "tbwm/autodiff.hpp"
#include "tbwm/optim.hpp"
#include "tbwm/rng.hpp"
#include "tbwm/tensor.hpp"

namespace tbwm::test {

inline Tensor random_tensor(int rows, int cols, Rng& rng, double s = 1.0) {
    Tensor t(rows, cols);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, s);
    return t;
}

// Central-difference gradient check: `forward` must rebuild the graph from
// the current parameter values on every call.
inline void check_gradients(std::vector<ad::Param*> params,
                            const std::function<ad::Var()>& forward,
                            double rel_tol = 1e-5, double eps = 1e-6,
                            double abs_floor = 1e-7) {
    zero_grads(params);
    ad::Var loss = forward();
    ad::backward(loss);
    for (ad::Param* p : params) {
        for (std::int64_t i = 0; i < p->value.size(); ++i) {
            const double orig = p->value[i];
            p->value[i] = orig + eps;
            const double up = forward().value()[0];
            p->value[i] = orig - eps;
            const double down = forward().value()[0];
            p->value[i] = orig;
            const double fd = (up - down) / (2.0 * eps);
            const double an = p->grad[i];
            const double denom = std::max({std::abs(fd), std::abs(an), abs_floor});
            const double rel = std::abs(fd - an) / denom;
            if (rel > rel_tol) {
                CAPTURE(p->name);
                CAPTURE(i);
                CAPTURE(fd);
                CAPTURE(an);
            }
            REQUIRE(rel <= rel_tol);
        }
    }
}

inline double max_abs_diff(const double* a, const double* b, std::int64_t n) {
    double m = 0.0;
    for (std::int64_t i = 0; i < n; ++i)
        m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace tbwm::test
