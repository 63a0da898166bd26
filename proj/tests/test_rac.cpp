#include "doctest.h"

#include <cmath>
#include <numbers>

#include "tbwm/rac.hpp"
#include "tbwm/rng.hpp"

using namespace tbwm;
using rac::BinSpec;

namespace {

double phi(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

}  // namespace

TEST_CASE("symlog fixed points and oracle values") {
    CHECK(rac::symlog(0.0) == 0.0);
    CHECK(rac::symlog(std::numbers::e - 1.0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rac::symlog(-3.0) == doctest::Approx(-std::log(4.0)).epsilon(1e-12));
    CHECK(rac::symexp(0.0) == 0.0);
    CHECK(rac::symexp(1.0) == doctest::Approx(std::numbers::e - 1.0).epsilon(1e-12));
    CHECK_THROWS(rac::symlog(std::numeric_limits<double>::infinity()));
    CHECK_THROWS(rac::symexp(std::nan("")));
}

TEST_CASE("symlog/symexp are mutually inverse, odd, strictly monotone") {
    Rng rng(5);
    CHECK(rac::symexp(rac::symlog(-123.456)) == doctest::Approx(-123.456).epsilon(1e-12));
    double prev_y = -1e18;
    for (int i = 0; i < 2000; ++i) {
        const double mag = std::pow(10.0, rng.uniform(-6.0, 6.0));
        const double x = (rng.bernoulli(0.5) ? 1.0 : -1.0) * mag;
        const double y = rac::symlog(x);
        CHECK(rac::symexp(y) == doctest::Approx(x).epsilon(1e-12));
        CHECK(rac::symlog(-x) == doctest::Approx(-y).epsilon(1e-12));
    }
    for (double x = -20.0; x < 20.0; x += 0.37) {
        const double y = rac::symlog(x);
        CHECK(y > prev_y);
        prev_y = y;
    }
}

TEST_CASE("build_bins produces uniform endpoints and exact centers") {
    const BinSpec b = rac::build_bins(2, -1.0, 1.0);
    CHECK(b.endpoints == std::vector<double>{-1.0, 0.0, 1.0});
    CHECK(b.centers == std::vector<double>{-0.5, 0.5});

    const BinSpec b128 = rac::build_bins(128, -15.0, 15.0);
    CHECK(b128.width() == doctest::Approx(0.234375).epsilon(1e-15));
    CHECK(0.75 * b128.width() == doctest::Approx(0.17578125).epsilon(1e-15));
    for (int i = 0; i + 1 < 128; ++i) {
        const double w0 = b128.endpoints[i + 1] - b128.endpoints[i];
        const double w1 = b128.endpoints[i + 2] - b128.endpoints[i + 1];
        CHECK(std::abs(w0 - w1) <= 1e-9 * w0);
    }

    const BinSpec b4 = rac::build_bins(4, 0.0, 1.0);
    CHECK(b4.centers[0] == doctest::Approx(0.125).epsilon(1e-15));
    CHECK(b4.centers[1] == doctest::Approx(0.375).epsilon(1e-15));
    CHECK(b4.centers[2] == doctest::Approx(0.625).epsilon(1e-15));
    CHECK(b4.centers[3] == doctest::Approx(0.875).epsilon(1e-15));

    CHECK_THROWS(rac::build_bins(1, -1.0, 1.0));
    CHECK_THROWS(rac::build_bins(4, 2.0, 1.0));
}

TEST_CASE("hl_gauss_target matches the CDF-difference oracle") {
    // m=2, endpoints (-1,0,1), sigma=0.5, symlog(y)=0.25
    const BinSpec b = rac::build_bins(2, -1.0, 1.0);
    const double y = rac::symexp(0.25);
    const auto probs = rac::hl_gauss_target(y, b, 0.5);
    const double p0 = phi(-0.5) - phi(-2.5);
    const double p1 = phi(1.5) - phi(-0.5);
    const double z = p0 + p1;
    CHECK(probs[0] == doctest::Approx(p0 / z).epsilon(1e-12));
    CHECK(probs[1] == doctest::Approx(p1 / z).epsilon(1e-12));
}

TEST_CASE("hl_gauss_target symmetry, concentration, and normalization") {
    const BinSpec b = rac::build_bins(8, -2.0, 2.0);
    const auto sym = rac::hl_gauss_target(0.0, b, 0.3);
    for (int i = 0; i < 8; ++i)
        CHECK(sym[i] == doctest::Approx(sym[7 - i]).epsilon(1e-9));

    // sigma -> 0 at a bin center concentrates all mass in that bin
    const double center_y = rac::symexp(b.centers[3]);
    const auto point = rac::hl_gauss_target(center_y, b, 1e-6 * b.width());
    CHECK(point[3] >= 1.0 - 1e-9);

    Rng rng(6);
    for (int trial = 0; trial < 200; ++trial) {
        const double y = rng.normal(0.0, 50.0);
        const auto p = rac::hl_gauss_target(y, b, 0.3);
        double s = 0.0;
        for (double v : p) {
            CHECK(v >= 0.0);
            s += v;
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }

    // far out-of-range values concentrate on the edge bin
    const auto lo = rac::hl_gauss_target(-1e9, b, 0.3);
    CHECK(lo[0] == doctest::Approx(1.0).epsilon(1e-9));
    const auto hi = rac::hl_gauss_target(1e9, b, 0.3);
    CHECK(hi[7] == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("hl_gauss_loss floors, uniform value, and summation oracle") {
    const BinSpec b2 = rac::build_bins(2, -1.0, 1.0);
    // uniform logits with a symmetric target -> ln 2
    CHECK(rac::hl_gauss_loss({0.7, 0.7}, 0.0, b2, 0.5) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // logits = log(target) -> loss = entropy of target
    const BinSpec b8 = rac::build_bins(8, -3.0, 3.0);
    const auto target = rac::hl_gauss_target(0.4, b8, 0.4);
    std::vector<double> logt(8);
    double entropy = 0.0;
    for (int i = 0; i < 8; ++i) {
        logt[i] = std::log(std::max(target[i], 1e-300));
        if (target[i] > 0.0) entropy -= target[i] * std::log(target[i]);
    }
    CHECK(rac::hl_gauss_loss(logt, 0.4, b8, 0.4) ==
          doctest::Approx(entropy).epsilon(1e-9));

    // random logits vs an independent direct-summation oracle
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> logits(8);
        for (auto& v : logits) v = rng.normal(0.0, 2.0);
        const double y = rng.normal(0.0, 3.0);
        const auto t = rac::hl_gauss_target(y, b8, 0.4);
        double mx = logits[0];
        for (double v : logits) mx = std::max(mx, v);
        double zsum = 0.0;
        for (double v : logits) zsum += std::exp(v - mx);
        double oracle = 0.0;
        for (int i = 0; i < 8; ++i)
            oracle -= t[i] * std::log(std::exp(logits[i] - mx) / zsum);
        CHECK(rac::hl_gauss_loss(logits, y, b8, 0.4) ==
              doctest::Approx(oracle).epsilon(1e-9));
    }
}

TEST_CASE("hl_gauss_loss gradient equals softmax minus target") {
    const BinSpec b = rac::build_bins(16, -5.0, 5.0);
    Rng rng(8);
    std::vector<double> logits(16);
    for (auto& v : logits) v = rng.normal();
    const double y = 1.3;
    const auto grad = rac::hl_gauss_loss_grad(logits, y, b, 0.3);
    const double eps = 1e-6;
    for (int i = 0; i < 16; ++i) {
        auto up = logits, dn = logits;
        up[i] += eps;
        dn[i] -= eps;
        const double fd = (rac::hl_gauss_loss(up, y, b, 0.3) -
                           rac::hl_gauss_loss(dn, y, b, 0.3)) /
                          (2.0 * eps);
        CHECK(std::abs(fd - grad[i]) <= 1e-5);
    }
}

TEST_CASE("decode_value degenerate and symmetric cases") {
    const BinSpec b = rac::build_bins(8, -2.0, 2.0);
    // one-hot mass on bin i -> symexp(center_i)
    for (int i = 0; i < 8; ++i) {
        std::vector<double> logits(8, -1e3);
        logits[i] = 1e3;
        CHECK(rac::decode_value(logits, b) ==
              doctest::Approx(rac::symexp(b.centers[i])).epsilon(1e-9));
    }
    // uniform logits on symmetric bins -> 0
    CHECK(rac::decode_value(std::vector<double>(8, 0.37), b) ==
          doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("decode of the target recovers y within one bin width") {
    const BinSpec b = rac::build_bins(128, -15.0, 15.0);
    const double sigma = 0.17578125;
    // worked example: y = 3.7
    std::vector<double> logt(128);
    const auto t37 = rac::hl_gauss_target(3.7, b, sigma);
    for (int i = 0; i < 128; ++i) logt[i] = std::log(std::max(t37[i], 1e-300));
    const double dec = rac::decode_value(logt, b);
    CHECK(std::abs(rac::symlog(dec) - rac::symlog(3.7)) <= b.width());

    // round trip property across the safe range
    Rng rng(9);
    for (int trial = 0; trial < 500; ++trial) {
        const double ly = rng.uniform(b.endpoints[0] + 3.0 * sigma,
                                      b.endpoints[128] - 3.0 * sigma);
        const double y = rac::symexp(ly);
        const auto tt = rac::hl_gauss_target(y, b, sigma);
        std::vector<double> lg(128);
        for (int i = 0; i < 128; ++i) lg[i] = std::log(std::max(tt[i], 1e-300));
        const double v = rac::decode_value(lg, b);
        CHECK(std::abs(rac::symlog(v) - ly) <= 0.5 * b.width() + 1e-6);
    }
}
