#include "tbwm/rac.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace tbwm::rac {

namespace {

double std_normal_cdf(double x) {
    return 0.5 * std::erfc(-x / std::numbers::sqrt2);
}

void check_finite(double x, const char* what) {
    if (!std::isfinite(x))
        throw std::invalid_argument(std::string(what) + ": non-finite input");
}

std::vector<double> softmax(const std::vector<double>& logits) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - mx);
        sum += p[i];
    }
    for (double& v : p) v /= sum;
    return p;
}

}  // namespace

double symlog(double x) {
    check_finite(x, "symlog");
    return x >= 0.0 ? std::log1p(x) : -std::log1p(-x);
}

double symexp(double x) {
    check_finite(x, "symexp");
    return x >= 0.0 ? std::expm1(x) : -std::expm1(-x);
}

BinSpec build_bins(int m, double lo, double hi) {
    if (m < 2) throw std::invalid_argument("build_bins: m must be >= 2");
    if (!(lo < hi)) throw std::invalid_argument("build_bins: need lo < hi");
    BinSpec b;
    b.m = m;
    b.endpoints.resize(m + 1);
    const double w = (hi - lo) / m;
    for (int i = 0; i <= m; ++i) b.endpoints[i] = lo + w * i;
    b.endpoints[m] = hi;  // exact upper endpoint
    b.centers.resize(m);
    for (int i = 0; i < m; ++i)
        b.centers[i] = 0.5 * (b.endpoints[i] + b.endpoints[i + 1]);
    return b;
}

std::vector<double> hl_gauss_target(double y, const BinSpec& bins,
                                    double sigma) {
    if (!(sigma > 0.0))
        throw std::invalid_argument("hl_gauss_target: sigma must be positive");
    const double ly = symlog(y);
    const int m = bins.m;
    std::vector<double> probs(m);
    double total = 0.0;
    double prev = std_normal_cdf((bins.endpoints[0] - ly) / sigma);
    for (int i = 0; i < m; ++i) {
        const double cur = std_normal_cdf((bins.endpoints[i + 1] - ly) / sigma);
        probs[i] = std::max(cur - prev, 0.0);
        total += probs[i];
        prev = cur;
    }
    if (total <= 0.0) {
        // Entire Gaussian lies outside the range: concentrate on the edge bin.
        const int edge = ly <= bins.endpoints[0] ? 0 : m - 1;
        for (double& p : probs) p = 0.0;
        probs[edge] = 1.0;
        return probs;
    }
    for (double& p : probs) p /= total;
    return probs;
}

double hl_gauss_loss(const std::vector<double>& logits, double y,
                     const BinSpec& bins, double sigma) {
    if (static_cast<int>(logits.size()) != bins.m)
        throw std::invalid_argument("hl_gauss_loss: logit count mismatch");
    const auto target = hl_gauss_target(y, bins, sigma);
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    double loss = 0.0;
    for (int i = 0; i < bins.m; ++i) loss -= target[i] * (logits[i] - lse);
    return loss;
}

std::vector<double> hl_gauss_loss_grad(const std::vector<double>& logits,
                                       double y, const BinSpec& bins,
                                       double sigma) {
    const auto target = hl_gauss_target(y, bins, sigma);
    auto grad = softmax(logits);
    for (int i = 0; i < bins.m; ++i) grad[i] -= target[i];
    return grad;
}

double decode_value(const std::vector<double>& logits, const BinSpec& bins) {
    if (static_cast<int>(logits.size()) != bins.m)
        throw std::invalid_argument("decode_value: logit count mismatch");
    const auto p = softmax(logits);
    double e = 0.0;
    for (int i = 0; i < bins.m; ++i) e += p[i] * bins.centers[i];
    return symexp(e);
}

}  // namespace tbwm::rac
