#include "tbwm/imagination.hpp"

#include <cmath>
#include <stdexcept>

namespace tbwm::imag {

using ad::Var;

int ImaginedTrajectory::lane_length(int lane) const {
    for (int t = 0; t < horizon; ++t)
        if (dones[t][lane]) return t + 1;
    return horizon;
}

namespace {

// Samples one token from a categorical distribution with temperature applied
// to the (log) probabilities.
int sample_from(const std::vector<double>& probs, double temperature,
                Rng& rng) {
    if (temperature == 1.0) return rng.categorical(probs);
    std::vector<double> w(probs.size());
    double mx = -1e300;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        w[i] = probs[i] > 0.0 ? std::log(probs[i]) / temperature : -1e300;
        mx = std::max(mx, w[i]);
    }
    for (auto& v : w) v = std::exp(v - mx);
    return rng.categorical(w);
}

}  // namespace

ImaginedTrajectory imagine_rollout(
    wm::WorldModel& wm, ctrl::Controller& controller,
    const std::vector<replay::TrajectorySegment>& inits,
    const ImaginationConfig& cfg, Rng& rng) {
    const int B = static_cast<int>(inits.size());
    if (B == 0) throw std::invalid_argument("imagine_rollout: no init segments");
    if (cfg.horizon < 1)
        throw std::invalid_argument("imagine_rollout: horizon must be >= 1");
    for (const auto& seg : inits)
        if (seg.length() < 1)
            throw std::invalid_argument(
                "imagine_rollout: context shorter than one block");
    if (!wm.raw().stack)
        throw std::logic_error("imagine_rollout: world model raw snapshot not synced");

    const auto& raw = wm.raw();
    const int d = wm.config().seq.d_model;
    const int K = wm.obs_positions();
    const int len = wm.block_len();

    // --- per-lane warm-up ---
    // WM: replay all full (obs, action) blocks except the last observation;
    // controller: consume the context alternation, keeping the last StepOut.
    std::vector<seq::StackState<double>> wm_states;
    wm_states.reserve(B);
    std::vector<Var> h_parts, c_parts;  // per tower handled below
    const int towers = controller.num_towers();
    std::vector<std::vector<Var>> tower_h(towers), tower_c(towers);
    std::vector<Var> first_actor_rows, first_value_rows;
    std::vector<std::vector<tok::TokenSequence>> cur_obs(B);

    std::vector<double> block(static_cast<std::size_t>(len) * d);
    std::vector<double> block_out(block.size());
    for (int lane = 0; lane < B; ++lane) {
        const auto& seg = inits[lane];
        const int L = seg.length();
        wm_states.push_back(raw.stack->make_state());
        for (int i = 0; i + 1 < L; ++i) {
            wm.embedder().assemble_block_raw(seg.obs[i], seg.act[i], block.data());
            raw.stack->forward_chunk(wm_states[lane], block.data(), len,
                                     block_out.data());
        }
        auto state = controller.initial_state(1);
        ctrl::Controller::StepOut step_out;
        for (int i = 0; i < L; ++i) {
            std::vector<tok::TokenSequence> prev;
            if (i > 0) prev = {seg.act[i - 1]};
            step_out = controller.step(state, {seg.obs[i]}, prev);
            state = step_out.state;
        }
        for (int tw = 0; tw < towers; ++tw) {
            tower_h[tw].push_back(state.towers[tw].first);
            tower_c[tw].push_back(state.towers[tw].second);
        }
        first_actor_rows.push_back(step_out.actor_logits);
        first_value_rows.push_back(step_out.value_logits);
        cur_obs[lane] = seg.obs[L - 1];
    }

    ctrl::Controller::State state;
    state.towers.resize(towers);
    for (int tw = 0; tw < towers; ++tw)
        state.towers[tw] = {ad::concat_rows(tower_h[tw]),
                            ad::concat_rows(tower_c[tw])};
    Var actor_logits = ad::concat_rows(first_actor_rows);
    Var value_logits = ad::concat_rows(first_value_rows);

    ImaginedTrajectory traj;
    traj.lanes = B;
    traj.horizon = cfg.horizon;
    traj.obs_tokens.push_back(cur_obs);

    std::vector<double> lane_live(B, 1.0);
    std::vector<seq::StackState<double>*> state_ptrs(B);
    for (int lane = 0; lane < B; ++lane) state_ptrs[lane] = &wm_states[lane];

    std::vector<double> blocks(static_cast<std::size_t>(B) * len * d);
    std::vector<double> blocks_out(blocks.size());
    std::vector<double> pop_out(static_cast<std::size_t>(B) * K * d);

    for (int t = 0; t < cfg.horizon; ++t) {
        // 1. controller samples actions for the current observations
        auto sampled =
            controller.sample_actions(actor_logits, cfg.action_temperature, rng);
        traj.log_probs.push_back(sampled.log_prob);
        traj.entropies.push_back(sampled.entropy);
        traj.value_logits.push_back(value_logits);
        traj.values.push_back(controller.decode_values(value_logits));
        traj.mask.push_back(lane_live);
        traj.action_tokens.push_back(sampled.tokens);

        // 2. the world model advances one block and predicts the next tokens
        for (int lane = 0; lane < B; ++lane)
            wm.embedder().assemble_block_raw(
                cur_obs[lane], sampled.tokens[lane],
                blocks.data() + static_cast<std::int64_t>(lane) * len * d);
        raw.stack->forward_chunk_batched(state_ptrs, blocks.data(), len,
                                         blocks_out.data());
        raw.stack->pop_forward_batched(state_ptrs, raw.u.data(), K, 0,
                                       pop_out.data());

        traj.rewards.emplace_back(B);
        traj.reward_pred.emplace_back(B);
        traj.disagreement.emplace_back(B);
        traj.dones.emplace_back(B);
        std::vector<std::vector<tok::TokenSequence>> next_obs(B);
        for (int lane = 0; lane < B; ++lane) {
            const double* y =
                pop_out.data() + static_cast<std::int64_t>(lane) * K * d;
            const auto dists = wm.predict_obs_tokens(y, K);
            // sample next observation tokens modality by modality
            std::vector<tok::TokenSequence> obs(wm.specs().size());
            int pos = 0;
            for (std::size_t m = 0; m < wm.specs().size(); ++m) {
                const auto& spec = wm.specs()[m];
                tok::TokenSequence seq;
                seq.modality = static_cast<int>(m);
                seq.channels = spec.channels;
                seq.tokens.resize(static_cast<std::size_t>(spec.token_count) *
                                  spec.channels);
                for (int j = 0; j < spec.token_count; ++j)
                    for (int c = 0; c < spec.channels; ++c)
                        seq.tokens[j * spec.channels + c] = sample_from(
                            dists[pos + j][c], cfg.wm_temperature, rng);
                pos += spec.token_count;
                obs[m] = std::move(seq);
            }
            next_obs[lane] = std::move(obs);

            const auto ens = wm.predict_ensemble_tokens(y, K);
            const double u = wm::disagreement_signal(ens);
            const auto [r_ext, p_done] = wm.predict_reward_termination(
                y + static_cast<std::int64_t>(K - 1) * d);
            const bool done = rng.bernoulli(p_done);
            traj.reward_pred[t][lane] = r_ext;
            traj.disagreement[t][lane] = u;
            traj.rewards[t][lane] =
                wm::mix_rewards(u, r_ext, cfg.alpha_int, cfg.alpha_ext);
            traj.dones[t][lane] = done ? 1 : 0;
        }
        if (t + 1 < cfg.horizon) traj.obs_tokens.push_back(next_obs);

        // 3. lanes that terminated stay masked from here on
        for (int lane = 0; lane < B; ++lane)
            if (traj.dones[t][lane]) lane_live[lane] = 0.0;

        // 4. controller consumes (a_t, z_{t+1}) for the next decision
        if (t + 1 < cfg.horizon) {
            cur_obs = next_obs;
            auto step_out = controller.step(state, cur_obs, sampled.tokens);
            state = step_out.state;
            actor_logits = step_out.actor_logits;
            value_logits = step_out.value_logits;
        }
    }
    return traj;
}

}  // namespace tbwm::imag
