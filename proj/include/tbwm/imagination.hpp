#pragma once

// Closed-loop rollouts inside the world model: warm both the WM recurrent
// state and the controller on a real context segment, then interact for H
// steps entirely in token space. The world model runs on its raw inference
// snapshot (no gradients); the controller builds its training tape. This
// module has no environment access by construction.

#include <vector>

#include "tbwm/controller.hpp"
#include "tbwm/replay.hpp"
#include "tbwm/rng.hpp"
#include "tbwm/worldmodel.hpp"

namespace tbwm::imag {

struct ImaginationConfig {
    int horizon = 8;
    double wm_temperature = 1.0;      // next-token sampling
    double action_temperature = 1.0;  // controller sampling
    double alpha_int = 1.0;           // intrinsic (disagreement) weight
    double alpha_ext = 1.0;           // environment-reward weight
};

struct ImaginedTrajectory {
    int lanes = 0;
    int horizon = 0;
    // per step t (0-based), quantities for all lanes:
    std::vector<ad::Var> log_probs;     // (B x 1)
    std::vector<ad::Var> entropies;     // (B x 1)
    std::vector<ad::Var> value_logits;  // (B x bins)
    std::vector<std::vector<double>> values;        // [t][lane]
    std::vector<std::vector<double>> rewards;       // mixed r_bar
    std::vector<std::vector<double>> reward_pred;   // extrinsic estimate
    std::vector<std::vector<double>> disagreement;  // u_t
    std::vector<std::vector<std::uint8_t>> dones;   // sampled terminations
    std::vector<std::vector<double>> mask;          // 1 while the lane is live
    // sampled tokens, [t][lane]
    std::vector<std::vector<tok::TokenSequence>> action_tokens;
    std::vector<std::vector<std::vector<tok::TokenSequence>>> obs_tokens;

    // steps alive for a lane (index of first done + 1, or horizon)
    int lane_length(int lane) const;
};

// init segments come from replay.sample_init_segment (>= 1 step each). The
// caller must have called wm.sync_raw() after the last WM update.
ImaginedTrajectory imagine_rollout(
    wm::WorldModel& wm, ctrl::Controller& controller,
    const std::vector<replay::TrajectorySegment>& inits,
    const ImaginationConfig& cfg, Rng& rng);

}  // namespace tbwm::imag
