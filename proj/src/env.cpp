#include "tbwm/env.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace tbwm::env {

namespace {

constexpr int kDR[5] = {-1, 1, 0, 0, 0};  // up, down, left, right, stay
constexpr int kDC[5] = {0, 0, -1, 1, 0};

}  // namespace

MultiModalGrid::MultiModalGrid() {
    tok::ModalitySpec coords;
    coords.kind = tok::ModalityKind::continuous_vector;
    coords.vocab_sizes = {125};
    coords.token_count = 4;
    coords.bounded = true;  // normalized coordinates live in [0, 1]

    tok::ModalitySpec view;
    view.kind = tok::ModalityKind::categorical_2d;
    view.vocab_sizes = {4, 3};  // terrain, entity
    view.channels = 2;
    view.grid_m = kView;
    view.grid_n = kView;
    view.token_count = kView * kView;

    specs_ = {coords, view};
    action_.kind = tok::ActionKind::discrete;
    action_.count = 5;
    hazards_.assign(kSize * kSize, 0);
}

tok::Observation MultiModalGrid::reset(std::optional<std::uint64_t> seed) {
    if (seed) rng_.seed(*seed);
    for (auto& h : hazards_) h = 0;
    // agent and goal sampled jointly, at least kMinGoalDistance apart, so
    // episodes are never trivial (random walks rarely stumble onto the goal)
    do {
        ar_ = static_cast<int>(rng_.uniform_int(kSize));
        ac_ = static_cast<int>(rng_.uniform_int(kSize));
        gr_ = static_cast<int>(rng_.uniform_int(kSize));
        gc_ = static_cast<int>(rng_.uniform_int(kSize));
    } while (std::abs(gr_ - ar_) + std::abs(gc_ - ac_) < kMinGoalDistance);
    for (int r = 0; r < kSize; ++r)
        for (int c = 0; c < kSize; ++c) {
            const bool special = (r == ar_ && c == ac_) || (r == gr_ && c == gc_);
            if (!special && rng_.bernoulli(kHazardDensity))
                hazards_[r * kSize + c] = 1;
        }
    steps_ = 0;
    done_ = false;
    return observe();
}

tok::Observation MultiModalGrid::observe() const {
    tok::Observation obs;
    obs.values.resize(2);
    const double denom = kSize - 1;
    obs.values[0].reals = {ar_ / denom, ac_ / denom, gr_ / denom, gc_ / denom};

    auto& grid = obs.values[1].ints;
    grid.resize(kView * kView * 2);
    const int half = kView / 2;
    for (int vr = 0; vr < kView; ++vr)
        for (int vc = 0; vc < kView; ++vc) {
            const int r = ar_ + vr - half;
            const int c = ac_ + vc - half;
            int terrain = kOutside;
            int entity = kNone;
            if (r >= 0 && r < kSize && c >= 0 && c < kSize) {
                terrain = hazards_[r * kSize + c] ? kHazard : kFloor;
                if (r == gr_ && c == gc_) {
                    terrain = kGoal;
                    entity = kGoalMark;
                }
                if (r == ar_ && c == ac_) entity = kAgent;
            }
            const int p = (vr * kView + vc) * 2;
            grid[p] = terrain;
            grid[p + 1] = entity;
        }
    return obs;
}

StepResult MultiModalGrid::step(const tok::ActionValue& action) {
    if (done_) throw std::logic_error("grid-v0: step after done");
    if (action.discrete < 0 || action.discrete >= action_.count)
        throw std::invalid_argument("grid-v0: invalid action");
    const int nr = ar_ + kDR[action.discrete];
    const int nc = ac_ + kDC[action.discrete];
    if (nr >= 0 && nr < kSize && nc >= 0 && nc < kSize) {
        ar_ = nr;
        ac_ = nc;
    }
    ++steps_;
    StepResult res;
    if (ar_ == gr_ && ac_ == gc_) {
        res.reward = 1.0;
        done_ = true;
    } else if (hazards_[ar_ * kSize + ac_]) {
        res.reward = -0.1;
    }
    if (steps_ >= kMaxSteps) done_ = true;
    res.done = done_;
    res.obs = observe();
    return res;
}

void MultiModalGrid::save(std::ostream& os) const {
    rng_.save(os);
    os << ' ' << ar_ << ' ' << ac_ << ' ' << gr_ << ' ' << gc_ << ' ' << steps_
       << ' ' << static_cast<int>(done_);
    for (auto h : hazards_) os << ' ' << static_cast<int>(h);
    os << '\n';
}

void MultiModalGrid::load(std::istream& is) {
    rng_.load(is);
    int done = 0;
    is >> ar_ >> ac_ >> gr_ >> gc_ >> steps_ >> done;
    done_ = done != 0;
    for (auto& h : hazards_) {
        int v;
        is >> v;
        h = static_cast<std::uint8_t>(v);
    }
}

ContinuousChain::ContinuousChain() {
    tok::ModalitySpec state;
    state.kind = tok::ModalityKind::continuous_vector;
    state.vocab_sizes = {125};
    state.token_count = 2;
    state.bounded = false;  // symlog-compressed before quantization
    specs_ = {state};
    action_.kind = tok::ActionKind::continuous;
    action_.count = 1;
    action_.quant_values = 51;
}

tok::Observation ContinuousChain::reset(std::optional<std::uint64_t> seed) {
    if (seed) rng_.seed(*seed);
    pos_ = 0.0;
    vel_ = 0.0;
    steps_ = 0;
    done_ = false;
    return observe();
}

tok::Observation ContinuousChain::observe() const {
    tok::Observation obs;
    obs.values.resize(1);
    obs.values[0].reals = {pos_, vel_};
    return obs;
}

StepResult ContinuousChain::step(const tok::ActionValue& action) {
    if (done_) throw std::logic_error("chain-v0: step after done");
    if (action.continuous.size() != 1)
        throw std::invalid_argument("chain-v0: expected a 1-dim action");
    const double a = std::clamp(action.continuous[0], -1.0, 1.0);
    vel_ += 0.1 * a - 0.01 * vel_;
    vel_ = std::clamp(vel_, -5.0, 5.0);
    pos_ = std::clamp(pos_ + vel_, -5.0, 5.0);
    ++steps_;
    StepResult res;
    res.reward = std::clamp(1.0 - std::abs(pos_ - kTarget), 0.0, 1.0);
    if (steps_ >= kHorizon) done_ = true;
    res.done = done_;
    res.obs = observe();
    return res;
}

void ContinuousChain::save(std::ostream& os) const {
    rng_.save(os);
    os.precision(17);
    os << ' ' << pos_ << ' ' << vel_ << ' ' << steps_ << ' '
       << static_cast<int>(done_) << '\n';
}

void ContinuousChain::load(std::istream& is) {
    rng_.load(is);
    int done = 0;
    is >> pos_ >> vel_ >> steps_ >> done;
    done_ = done != 0;
}

std::unique_ptr<EnvInterface> make_env(const std::string& id) {
    if (id == "grid-v0") return std::make_unique<MultiModalGrid>();
    if (id == "chain-v0") return std::make_unique<ContinuousChain>();
    throw std::invalid_argument("unknown environment id: " + id);
}

tok::ActionValue grid_expert_action(const MultiModalGrid& env) {
    const int ar = env.agent_row(), ac = env.agent_col();
    const int gr = env.goal_row(), gc = env.goal_col();
    const int dist = std::abs(gr - ar) + std::abs(gc - ac);
    int best = 4;  // stay
    int best_score = -1;
    for (int a = 0; a < 4; ++a) {
        const int nr = ar + kDR[a], nc = ac + kDC[a];
        if (nr < 0 || nr >= MultiModalGrid::kSize || nc < 0 ||
            nc >= MultiModalGrid::kSize)
            continue;
        const int nd = std::abs(gr - nr) + std::abs(gc - nc);
        if (nd >= dist) continue;
        // among distance-reducing moves prefer hazard-free cells
        const int score = env.hazard_at(nr, nc) ? 1 : 2;
        if (score > best_score) {
            best_score = score;
            best = a;
        }
    }
    tok::ActionValue out;
    out.discrete = best;
    return out;
}

}  // namespace tbwm::env
