#pragma once

// Training orchestrator: the repeated cycle of data collection,
// representation learning, world-model learning, and control learning in
// imagination, plus evaluation, metrics, and checkpointing.

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tbwm/config.hpp"
#include "tbwm/controller.hpp"
#include "tbwm/env.hpp"
#include "tbwm/imagination.hpp"
#include "tbwm/metrics.hpp"
#include "tbwm/optim.hpp"
#include "tbwm/replay.hpp"
#include "tbwm/tokenizers.hpp"
#include "tbwm/vqvae.hpp"
#include "tbwm/worldmodel.hpp"

namespace tbwm {

// (agent - random) / (human - random); rejects human == random.
double human_normalized_score(double agent, double random_score, double human);

class Trainer {
public:
    explicit Trainer(RunConfig cfg);

    // Full training run: epochs, periodic evaluation, metrics under out_dir,
    // final checkpoint and evaluation.
    void run(const std::string& out_dir, const std::string& resume_path = "",
             bool force_resume = false);

    void attach_metrics(const std::string& path);

    // One cycle: collection, then each module's training steps (respecting
    // their start epochs), then the epoch metrics record.
    void train_epoch();

    // Exactly `steps` environment steps (capped by the interaction budget);
    // episodes split at termination, truncated at the call boundary.
    void collect_experience(int steps);

    // Environment-only rollouts with the current controller.
    double evaluate(int episodes, double temperature,
                    std::vector<double>* per_episode = nullptr);

    void save_checkpoint(const std::string& path) const;
    void load_checkpoint(const std::string& path, bool force = false);

    const RunConfig& config() const { return cfg_; }
    int epoch() const { return epoch_; }
    std::int64_t env_steps() const { return env_steps_; }
    replay::ReplayBuffer& buffer() { return replay_; }
    wm::WorldModel& world_model() { return *wm_; }
    ctrl::Controller& controller() { return *controller_; }
    env::EnvInterface& environment() { return *env_; }
    const MetricsRecord& last_epoch_record() const { return last_record_; }
    ctrl::ReturnScaleTracker& return_scale_tracker() { return tracker_; }

private:
    struct EpochStats;

    tok::ActionValue act_for_collection(
        const std::vector<tok::TokenSequence>& obs_tokens,
        ctrl::Controller::State& state,
        std::optional<tok::TokenSequence>& prev_act,
        tok::TokenSequence& act_tokens_out);
    void wm_train_step(EpochStats& stats);
    void controller_train_step(EpochStats& stats);
    std::vector<ad::Param*> all_params() const;

    RunConfig cfg_;
    std::unique_ptr<env::EnvInterface> env_;
    std::unique_ptr<tok::Tokenizer> tokenizer_;
    std::unique_ptr<tok::VqVae> vqvae_;  // only for image observations
    std::unique_ptr<wm::WorldModel> wm_;
    std::unique_ptr<ctrl::Controller> controller_;
    replay::ReplayBuffer replay_;
    ctrl::ReturnScaleTracker tracker_;
    AdamW opt_tok_, opt_wm_, opt_ctrl_;
    Rng rng_collect_, rng_wm_sample_, rng_wm_dropout_, rng_ctrl_, rng_tok_;
    int epoch_ = 0;
    std::int64_t env_steps_ = 0;
    std::int64_t eval_count_ = 0;
    std::vector<double> last_collect_returns_;
    MetricsWriter metrics_;
    MetricsRecord last_record_;
};

}  // namespace tbwm
