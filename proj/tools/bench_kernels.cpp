// Compares the serial reference kernels against the OpenMP variants and
// reports throughput for representative shapes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <vector>

#include "tbwm/kernels.hpp"
#include "tbwm/rng.hpp"

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <typename F>
double time_best_of(F&& fn, int reps) {
    double best = 1e30;
    for (int r = 0; r < reps; ++r) {
        const auto t0 = Clock::now();
        fn();
        best = std::min(best, seconds_since(t0));
    }
    return best;
}

void bench_matmul(int m, int k, int n) {
    tbwm::Rng rng(7);
    std::vector<double> a(static_cast<std::size_t>(m) * k);
    std::vector<double> b(static_cast<std::size_t>(k) * n);
    std::vector<double> c_serial(static_cast<std::size_t>(m) * n);
    std::vector<double> c_omp(static_cast<std::size_t>(m) * n);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();

    const double flops = 2.0 * m * k * n;
    const int reps = std::max(1, static_cast<int>(2e8 / flops));
    const double ts = time_best_of(
        [&] {
            tbwm::kernels::matmul_serial(a.data(), b.data(), c_serial.data(),
                                         m, k, n);
        },
        reps);
    const double tp = time_best_of(
        [&] {
            tbwm::kernels::matmul_omp(a.data(), b.data(), c_omp.data(), m, k,
                                      n);
        },
        reps);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < c_serial.size(); ++i)
        max_diff = std::max(max_diff, std::abs(c_serial[i] - c_omp[i]));
    std::printf(
        "matmul %5dx%4dx%4d  serial %8.2f MFLOP/s  omp %8.2f MFLOP/s  "
        "speedup %4.2fx  max|diff| %.1e\n",
        m, k, n, flops / ts / 1e6, flops / tp / 1e6, ts / tp, max_diff);
}

void bench_softmax(int rows, int cols) {
    tbwm::Rng rng(11);
    std::vector<double> x(static_cast<std::size_t>(rows) * cols);
    std::vector<double> y1(x.size()), y2(x.size());
    for (auto& v : x) v = rng.normal();
    const int reps = 20;
    const double ts = time_best_of(
        [&] {
            tbwm::kernels::softmax_rows_serial(x.data(), y1.data(), rows,
                                               cols);
        },
        reps);
    const double tp = time_best_of(
        [&] {
            tbwm::kernels::softmax_rows_omp(x.data(), y2.data(), rows, cols);
        },
        reps);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < y1.size(); ++i)
        max_diff = std::max(max_diff, std::abs(y1[i] - y2[i]));
    std::printf(
        "softmax %5dx%4d       serial %8.3f ms        omp %8.3f ms        "
        "speedup %4.2fx  max|diff| %.1e\n",
        rows, cols, ts * 1e3, tp * 1e3, ts / tp, max_diff);
}

}  // namespace

int main() {
    std::printf("kernel benchmark: serial reference vs OpenMP\n\n");
    bench_matmul(64, 64, 64);
    bench_matmul(256, 64, 64);
    bench_matmul(1024, 64, 64);
    bench_matmul(2048, 64, 128);
    bench_matmul(512, 512, 512);
    std::printf("\n");
    bench_softmax(1024, 128);
    bench_softmax(8192, 128);
    return 0;
}
