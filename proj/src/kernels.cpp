#include "tbwm/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <cstring>

namespace tbwm::kernels {

namespace {

bool initial_parallel() {
    const char* v = std::getenv("TBWM_DETERMINISTIC");
    if (v && std::strcmp(v, "1") == 0) return false;
    return true;
}

std::atomic<bool> g_parallel{initial_parallel()};

}  // namespace

bool parallel_enabled() { return g_parallel.load(std::memory_order_relaxed); }

void set_parallel(bool on) { g_parallel.store(on, std::memory_order_relaxed); }

}  // namespace tbwm::kernels
