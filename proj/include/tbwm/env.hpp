#pragma once

// Desk-scale environments exercising the multi-modal observation paths, plus
// the abstract interface the trainer drives. Layouts and dynamics are fully
// determined by the seed.

#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tbwm/rng.hpp"
#include "tbwm/tokenizers.hpp"

namespace tbwm::env {

struct StepResult {
    tok::Observation obs;
    double reward = 0.0;
    bool done = false;
};

class EnvInterface {
public:
    virtual ~EnvInterface() = default;

    virtual const std::string& id() const = 0;
    virtual const std::vector<tok::ModalitySpec>& obs_specs() const = 0;
    virtual const tok::ActionSpec& action_spec() const = 0;

    virtual tok::Observation reset(std::optional<std::uint64_t> seed = {}) = 0;
    // Throws if called after done without an intervening reset.
    virtual StepResult step(const tok::ActionValue& action) = 0;

    virtual void save(std::ostream& os) const = 0;
    virtual void load(std::istream& is) = 0;
};

// G x G world with an agent, a goal, and hazards. Observation: a continuous
// 4-vector of normalized agent/goal coordinates plus an egocentric V x V
// 2-channel categorical view (terrain, entity) padded at the boundary.
// Discrete actions {up, down, left, right, stay}. Reward +1 on reaching the
// goal (episode ends), -0.1 on a hazard cell, 0 otherwise; 100-step cap.
class MultiModalGrid final : public EnvInterface {
public:
    static constexpr int kSize = 5;
    static constexpr int kView = 5;
    static constexpr int kMaxSteps = 100;
    static constexpr double kHazardDensity = 0.1;
    static constexpr int kMinGoalDistance = 4;

    // terrain channel vocabulary
    enum Terrain { kFloor = 0, kHazard = 1, kGoal = 2, kOutside = 3 };
    // entity channel vocabulary
    enum Entity { kNone = 0, kAgent = 1, kGoalMark = 2 };

    MultiModalGrid();

    const std::string& id() const override { return id_; }
    const std::vector<tok::ModalitySpec>& obs_specs() const override {
        return specs_;
    }
    const tok::ActionSpec& action_spec() const override { return action_; }

    tok::Observation reset(std::optional<std::uint64_t> seed = {}) override;
    StepResult step(const tok::ActionValue& action) override;

    void save(std::ostream& os) const override;
    void load(std::istream& is) override;

    // exposed for the hand-coded reference policies and exploration metrics
    int agent_row() const { return ar_; }
    int agent_col() const { return ac_; }
    int goal_row() const { return gr_; }
    int goal_col() const { return gc_; }
    bool hazard_at(int r, int c) const { return hazards_[r * kSize + c]; }

private:
    tok::Observation observe() const;

    std::string id_ = "grid-v0";
    std::vector<tok::ModalitySpec> specs_;
    tok::ActionSpec action_;
    Rng rng_;
    std::vector<std::uint8_t> hazards_;
    int ar_ = 0, ac_ = 0, gr_ = 0, gc_ = 0;
    int steps_ = 0;
    bool done_ = true;
};

// 1D point-mass task: continuous 1-dim action in [-1, 1], state (position,
// velocity) clipped to [-5, 5], reward = clip(1 - |position - target|, 0, 1)
// with a fixed target, 200-step horizon.
class ContinuousChain final : public EnvInterface {
public:
    static constexpr int kHorizon = 200;
    static constexpr double kTarget = 1.0;

    ContinuousChain();

    const std::string& id() const override { return id_; }
    const std::vector<tok::ModalitySpec>& obs_specs() const override {
        return specs_;
    }
    const tok::ActionSpec& action_spec() const override { return action_; }

    tok::Observation reset(std::optional<std::uint64_t> seed = {}) override;
    StepResult step(const tok::ActionValue& action) override;

    void save(std::ostream& os) const override;
    void load(std::istream& is) override;

    double position() const { return pos_; }
    double velocity() const { return vel_; }

private:
    tok::Observation observe() const;

    std::string id_ = "chain-v0";
    std::vector<tok::ModalitySpec> specs_;
    tok::ActionSpec action_;
    Rng rng_;
    double pos_ = 0.0, vel_ = 0.0;
    int steps_ = 0;
    bool done_ = true;
};

std::unique_ptr<EnvInterface> make_env(const std::string& id);

// Greedy Manhattan reference policy for grid-v0 (prefers hazard-free moves
// among the distance-reducing ones). Establishes the learnability gap.
tok::ActionValue grid_expert_action(const MultiModalGrid& env);

}  // namespace tbwm::env
