#pragma once

// Regression-as-classification shared by the reward head and the critic:
// symlog/symexp transforms, uniform symlog-space bins, Gaussian-smoothed
// histogram targets (HL-Gauss), the cross-entropy loss, and value decoding.
// All functions are pure and thread-safe.

#include <vector>

namespace tbwm::rac {

double symlog(double x);
double symexp(double x);

struct BinSpec {
    int m = 0;                      // bin count
    std::vector<double> endpoints;  // m + 1, strictly increasing
    std::vector<double> centers;    // m, midpoints of adjacent endpoints

    double width() const { return endpoints[1] - endpoints[0]; }
};

// m uniform bins spanning [lo, hi] in symlog space.
BinSpec build_bins(int m, double lo, double hi);

// Gaussian CDF differences per bin around symlog(y), renormalized so the
// result is a proper distribution even when tails fall outside the range.
std::vector<double> hl_gauss_target(double y, const BinSpec& bins,
                                    double sigma);

// Cross-entropy between hl_gauss_target(y) and softmax(logits).
double hl_gauss_loss(const std::vector<double>& logits, double y,
                     const BinSpec& bins, double sigma);

// d(loss)/d(logits) = softmax(logits) - target.
std::vector<double> hl_gauss_loss_grad(const std::vector<double>& logits,
                                       double y, const BinSpec& bins,
                                       double sigma);

// symexp of the expected bin center under softmax(logits).
double decode_value(const std::vector<double>& logits, const BinSpec& bins);

}  // namespace tbwm::rac
