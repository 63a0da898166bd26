#include "tbwm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "tbwm/io.hpp"

namespace tbwm {

double human_normalized_score(double agent, double random_score, double human) {
    if (human == random_score)
        throw std::invalid_argument(
            "human_normalized_score: human and random scores coincide");
    return (agent - random_score) / (human - random_score);
}

namespace {

// fixed stream ids for the per-subsystem rngs
enum StreamId : std::uint64_t {
    kStreamEnv = 1,
    kStreamCollect = 2,
    kStreamWmSample = 3,
    kStreamWmDropout = 4,
    kStreamCtrl = 5,
    kStreamTok = 6,
    kStreamEval = 7,
    kStreamInit = 8,
};

}  // namespace

struct Trainer::EpochStats {
    double wm_total = 0, wm_obs = 0, wm_reward = 0, wm_done = 0, wm_ens = 0;
    int wm_steps = 0;
    double actor = 0, critic = 0, entropy = 0, disagreement = 0, scale = 1.0;
    double imag_reward = 0;
    int ctrl_steps = 0;
    double tok_loss = 0;
    int tok_steps = 0;
    double collect_return = 0;
    int episodes_done = 0;
};

Trainer::Trainer(RunConfig cfg)
    : cfg_(std::move(cfg)),
      replay_(cfg_.training.horizon, cfg_.controller.imagination_context_length,
              cfg_.shared.prioritized_replay_initial_loss_value),
      tracker_(cfg_.controller.return_scale_window) {
    cfg_.validate();
    env_ = env::make_env(cfg_.env);

    tok::ActionSpec action = env_->action_spec();
    action.quant_values = cfg_.controller.continuous_action_quantization_values;
    tokenizer_ = std::make_unique<tok::Tokenizer>(env_->obs_specs(), action);

    Rng init(derive_seed(cfg_.seed, kStreamInit));

    ad::Param* codebook = nullptr;
    bool has_image = false;
    for (const auto& s : env_->obs_specs())
        if (s.kind == tok::ModalityKind::image) has_image = true;
    if (has_image) {
        tok::VqVaeConfig vcfg;
        vcfg.base_channels = cfg_.tokenizer.vqvae_base_channels;
        vcfg.latent_channels = cfg_.world_model.embedding_dimension;
        vcfg.blocks = cfg_.tokenizer.vqvae_blocks;
        vcfg.vocab_size = cfg_.tokenizer.vqvae_vocab_size;
        vcfg.gn_groups = cfg_.tokenizer.vqvae_gn_groups;
        vqvae_ = std::make_unique<tok::VqVae>(vcfg, init);
        codebook = vqvae_->codebook();
    }

    wm::WorldModelConfig wcfg;
    wcfg.seq.d_model = cfg_.world_model.embedding_dimension;
    wcfg.seq.layers = cfg_.world_model.num_layers;
    wcfg.seq.heads = cfg_.world_model.num_heads;
    wcfg.seq.ffn_mult = cfg_.world_model.ffn_multiplier;
    wcfg.seq.eta_min = cfg_.world_model.retention_decay_min;
    wcfg.seq.eta_max = cfg_.world_model.retention_decay_max;
    wcfg.seq.dropout = cfg_.world_model.dropout;
    wcfg.ensemble_size = cfg_.shared.wm_ensemble_size;
    wcfg.reward_bins = cfg_.shared.hl_gauss_num_bins;
    wcfg.reward_lo = -cfg_.shared.hl_gauss_range;
    wcfg.reward_hi = cfg_.shared.hl_gauss_range;
    wcfg.sigma = cfg_.shared.label_smoothing_sigma;
    wm_ = std::make_unique<wm::WorldModel>(wcfg, env_->obs_specs(), action,
                                           init, codebook);

    ctrl::ControllerConfig ccfg;
    ccfg.latent_dim = cfg_.controller.latent_dim;
    ccfg.fusion_hidden = cfg_.controller.encoder_mlp_hidden_sizes;
    ccfg.cat_embed_dim = cfg_.controller.categoricals_embedding_dimension;
    ccfg.image_encoder_dim = cfg_.controller.image_encoder_dim;
    ccfg.shared_backbone = cfg_.controller.shared_backbone;
    ccfg.gamma = cfg_.controller.gamma;
    ccfg.lambda = cfg_.controller.lambda;
    ccfg.entropy_weight = cfg_.controller.entropy_weight;
    ccfg.percentile_window = cfg_.controller.return_scale_window;
    ccfg.value_bins = cfg_.shared.hl_gauss_num_bins;
    ccfg.value_lo = -cfg_.shared.hl_gauss_range;
    ccfg.value_hi = cfg_.shared.hl_gauss_range;
    ccfg.sigma = cfg_.shared.label_smoothing_sigma;
    controller_ = std::make_unique<ctrl::Controller>(ccfg, env_->obs_specs(),
                                                     action, init, codebook);

    opt_tok_ = {cfg_.shared.learning_rate.tokenizer, cfg_.shared.adamw_beta1,
                cfg_.shared.adamw_beta2, 1e-8,
                cfg_.shared.weight_decay.tokenizer, 0};
    opt_wm_ = {cfg_.shared.learning_rate.world_model, cfg_.shared.adamw_beta1,
               cfg_.shared.adamw_beta2, 1e-8,
               cfg_.shared.weight_decay.world_model, 0};
    opt_ctrl_ = {cfg_.shared.learning_rate.controller, cfg_.shared.adamw_beta1,
                 cfg_.shared.adamw_beta2, 1e-8,
                 cfg_.shared.weight_decay.controller, 0};

    env_->reset(derive_seed(cfg_.seed, kStreamEnv));
    rng_collect_.seed(derive_seed(cfg_.seed, kStreamCollect));
    rng_wm_sample_.seed(derive_seed(cfg_.seed, kStreamWmSample));
    rng_wm_dropout_.seed(derive_seed(cfg_.seed, kStreamWmDropout));
    rng_ctrl_.seed(derive_seed(cfg_.seed, kStreamCtrl));
    rng_tok_.seed(derive_seed(cfg_.seed, kStreamTok));
}

void Trainer::attach_metrics(const std::string& path) {
    metrics_ = MetricsWriter(path);
}

tok::ActionValue Trainer::act_for_collection(
    const std::vector<tok::TokenSequence>& obs_tokens,
    ctrl::Controller::State& state, std::optional<tok::TokenSequence>& prev_act,
    tok::TokenSequence& act_tokens_out) {
    const auto& aspec = tokenizer_->action_spec();
    // uniform policy until the controller has completed a training step
    // (collection precedes training within an epoch)
    const bool controller_ready = opt_ctrl_.step_count > 0;
    if (!controller_ready) {
        // cold start: uniform policy
        tok::ActionValue a;
        tok::TokenSequence seq;
        seq.modality = -1;
        if (aspec.kind == tok::ActionKind::discrete) {
            a.discrete = static_cast<int>(rng_collect_.uniform_int(aspec.count));
            seq.tokens = {a.discrete};
        } else {
            for (int j = 0; j < aspec.count; ++j) {
                const int t =
                    static_cast<int>(rng_collect_.uniform_int(aspec.quant_values));
                seq.tokens.push_back(t);
                a.continuous.push_back(
                    tok::action_grid_value(t, aspec.quant_values));
            }
        }
        act_tokens_out = seq;
        return a;
    }
    ad::NoGradGuard guard;
    std::vector<tok::TokenSequence> prev;
    if (prev_act) prev = {*prev_act};
    auto out = controller_->step(state, {obs_tokens}, prev);
    state = out.state;
    auto sampled = controller_->sample_actions(out.actor_logits, 1.0, rng_collect_);
    act_tokens_out = sampled.tokens[0];
    return sampled.actions[0];
}

void Trainer::collect_experience(int steps) {
    int collected = 0;
    last_collect_returns_.clear();
    while (collected < steps &&
           env_steps_ < cfg_.training.interaction_budget) {
        tok::Observation obs = env_->reset();
        auto state = controller_->initial_state(1);
        std::optional<tok::TokenSequence> prev_act;
        replay::Episode ep;
        bool done = false;
        while (!done && collected < steps &&
               env_steps_ < cfg_.training.interaction_budget) {
            auto obs_tokens = tokenizer_->tokenize_observation(obs);
            tok::TokenSequence act_tokens;
            const auto action =
                act_for_collection(obs_tokens, state, prev_act, act_tokens);
            const auto res = env_->step(action);
            ep.obs_tokens.push_back(obs_tokens);
            ep.actions.push_back(action);
            ep.act_tokens.push_back(act_tokens);
            ep.rewards.push_back(res.reward);
            ep.dones.push_back(res.done ? 1 : 0);
            prev_act = act_tokens;
            obs = res.obs;
            done = res.done;
            ++collected;
            ++env_steps_;
        }
        if (ep.length() > 0) {
            if (done) {
                double ret = 0.0;
                for (double r : ep.rewards) ret += r;
                last_collect_returns_.push_back(ret);
            }
            replay_.append_episode(std::move(ep));
        }
    }
}

void Trainer::wm_train_step(EpochStats& stats) {
    const int B = cfg_.training.batch_size.world_model;
    const auto ids = replay_.sample_wm_batch(
        B, cfg_.shared.prioritized_replay_fraction, rng_wm_sample_);
    std::vector<replay::TrajectorySegment> batch;
    batch.reserve(ids.size());
    for (int id : ids) batch.push_back(replay_.example(id));

    auto params = wm_->params();
    zero_grads(params);
    auto loss = wm_->loss(batch, cfg_.world_model.dropout > 0.0
                                     ? &rng_wm_dropout_
                                     : nullptr);
    if (!std::isfinite(loss.total_value))
        throw std::runtime_error("world-model loss diverged (non-finite)");
    ad::backward(loss.total);
    clip_grad_norm(params, cfg_.shared.gradient_clipping_threshold.world_model);
    opt_wm_.step(params);
    replay_.update_priorities(ids, loss.per_example);

    stats.wm_total += loss.total_value;
    stats.wm_obs += loss.obs;
    stats.wm_reward += loss.reward;
    stats.wm_done += loss.done;
    stats.wm_ens += loss.ensemble;
    ++stats.wm_steps;
}

void Trainer::controller_train_step(EpochStats& stats) {
    const int B = cfg_.training.batch_size.controller;
    std::vector<replay::TrajectorySegment> inits;
    inits.reserve(B);
    for (int i = 0; i < B; ++i)
        inits.push_back(replay_.sample_init_segment(rng_ctrl_));

    imag::ImaginationConfig icfg;
    icfg.horizon = cfg_.training.horizon;
    icfg.wm_temperature = cfg_.world_model.imagination_temperature;
    icfg.action_temperature = 1.0;
    icfg.alpha_int = cfg_.controller.intrinsic_reward_weight;
    icfg.alpha_ext = cfg_.controller.environment_reward_weight;

    auto traj = imag::imagine_rollout(*wm_, *controller_, inits, icfg, rng_ctrl_);
    const int H = traj.horizon;

    // lambda-return targets per lane
    std::vector<std::vector<double>> returns(H, std::vector<double>(B, 0.0));
    std::vector<double> batch_returns;
    for (int lane = 0; lane < B; ++lane) {
        std::vector<double> r(H), v(H);
        std::vector<std::uint8_t> d(H);
        for (int t = 0; t < H; ++t) {
            r[t] = traj.rewards[t][lane];
            v[t] = traj.values[t][lane];
            d[t] = traj.dones[t][lane];
        }
        const auto g = ctrl::lambda_returns(r, d, v, cfg_.controller.gamma,
                                            cfg_.controller.lambda);
        for (int t = 0; t < H; ++t) {
            returns[t][lane] = g[t];
            if (traj.mask[t][lane] > 0.0) batch_returns.push_back(g[t]);
        }
    }
    tracker_.update(batch_returns);
    const double scale_c = tracker_.scale();

    std::vector<std::vector<double>> advantages(H, std::vector<double>(B, 0.0));
    for (int t = 0; t < H; ++t)
        for (int lane = 0; lane < B; ++lane)
            advantages[t][lane] = returns[t][lane] - traj.values[t][lane];

    auto params = controller_->params();
    zero_grads(params);
    ad::Var pol = controller_->policy_loss(traj.log_probs, traj.entropies,
                                           advantages, traj.mask, scale_c);
    ad::Var cri =
        controller_->critic_loss(traj.value_logits, returns, traj.mask);
    ad::Var total = ad::add(pol, cri);
    if (!std::isfinite(total.value()[0]))
        throw std::runtime_error("controller loss diverged (non-finite)");
    ad::backward(total);
    clip_grad_norm(params, cfg_.shared.gradient_clipping_threshold.controller);
    opt_ctrl_.step(params);

    // stats
    double ent = 0.0, dis = 0.0, rew = 0.0;
    double n = 0.0;
    for (int t = 0; t < H; ++t)
        for (int lane = 0; lane < B; ++lane) {
            if (traj.mask[t][lane] == 0.0) continue;
            ent += traj.entropies[t].value()[lane];
            dis += traj.disagreement[t][lane];
            rew += traj.rewards[t][lane];
            n += 1.0;
        }
    stats.actor += pol.value()[0];
    stats.critic += cri.value()[0];
    stats.entropy += n > 0 ? ent / n : 0.0;
    stats.disagreement += n > 0 ? dis / n : 0.0;
    stats.imag_reward += n > 0 ? rew / n : 0.0;
    stats.scale = scale_c;
    ++stats.ctrl_steps;
}

void Trainer::train_epoch() {
    ++epoch_;
    EpochStats stats;

    // 1. data collection
    if (epoch_ <= cfg_.training.experience_collection_epochs &&
        env_steps_ < cfg_.training.interaction_budget)
        collect_experience(cfg_.training.environment_steps_per_epoch);

    // 3. world model learning
    if (epoch_ > cfg_.training.training_start_after_epoch.world_model &&
        replay_.example_count() > 0) {
        for (int s = 0; s < cfg_.training.training_steps_per_epoch.world_model;
             ++s)
            wm_train_step(stats);
    }

    // 4. control learning in imagination
    if (epoch_ > cfg_.training.training_start_after_epoch.controller &&
        replay_.example_count() > 0 &&
        cfg_.training.training_steps_per_epoch.controller > 0) {
        wm_->sync_raw();
        for (int s = 0; s < cfg_.training.training_steps_per_epoch.controller;
             ++s)
            controller_train_step(stats);
    }

    MetricsRecord rec;
    rec.type = "epoch";
    rec.epoch = epoch_;
    rec.env_steps = env_steps_;
    rec.values["replay_episodes"] = replay_.episode_count();
    rec.values["replay_examples"] = replay_.example_count();
    if (stats.wm_steps > 0) {
        rec.values["wm_total"] = stats.wm_total / stats.wm_steps;
        rec.values["wm_obs"] = stats.wm_obs / stats.wm_steps;
        rec.values["wm_reward"] = stats.wm_reward / stats.wm_steps;
        rec.values["wm_done"] = stats.wm_done / stats.wm_steps;
        rec.values["wm_ensemble"] = stats.wm_ens / stats.wm_steps;
    }
    if (stats.ctrl_steps > 0) {
        rec.values["actor_loss"] = stats.actor / stats.ctrl_steps;
        rec.values["critic_loss"] = stats.critic / stats.ctrl_steps;
        rec.values["policy_entropy"] = stats.entropy / stats.ctrl_steps;
        rec.values["mean_disagreement"] = stats.disagreement / stats.ctrl_steps;
        rec.values["imagined_reward"] = stats.imag_reward / stats.ctrl_steps;
        rec.values["return_scale"] = stats.scale;
    }
    if (stats.tok_steps > 0)
        rec.values["tokenizer_loss"] = stats.tok_loss / stats.tok_steps;
    if (!last_collect_returns_.empty()) {
        double sum = 0.0;
        for (double r : last_collect_returns_) sum += r;
        rec.values["collect_return_mean"] =
            sum / static_cast<double>(last_collect_returns_.size());
        rec.values["collect_episodes"] =
            static_cast<double>(last_collect_returns_.size());
    }
    last_record_ = rec;
    if (!metrics_.path().empty()) metrics_.write(rec);
}

double Trainer::evaluate(int episodes, double temperature,
                         std::vector<double>* per_episode) {
    ad::NoGradGuard guard;
    auto eval_env = env::make_env(cfg_.env);
    Rng eval_rng(derive_seed(cfg_.seed, kStreamEval + 64 * eval_count_));
    ++eval_count_;
    double total = 0.0;
    if (per_episode) per_episode->clear();
    for (int e = 0; e < episodes; ++e) {
        tok::Observation obs = eval_env->reset(eval_rng.next_u64());
        auto state = controller_->initial_state(1);
        std::optional<tok::TokenSequence> prev;
        double ep_return = 0.0;
        bool done = false;
        while (!done) {
            const auto obs_tokens = tokenizer_->tokenize_observation(obs);
            std::vector<tok::TokenSequence> prev_vec;
            if (prev) prev_vec = {*prev};
            auto out = controller_->step(state, {obs_tokens}, prev_vec);
            state = out.state;
            auto sampled =
                controller_->sample_actions(out.actor_logits, temperature, eval_rng);
            const auto res = eval_env->step(sampled.actions[0]);
            prev = sampled.tokens[0];
            ep_return += res.reward;
            obs = res.obs;
            done = res.done;
        }
        total += ep_return;
        if (per_episode) per_episode->push_back(ep_return);
    }
    return total / episodes;
}

void Trainer::run(const std::string& out_dir, const std::string& resume_path,
                  bool force_resume) {
    std::filesystem::create_directories(out_dir);
    if (!resume_path.empty()) load_checkpoint(resume_path, force_resume);
    attach_metrics(out_dir + "/metrics.jsonl");
    cfg_.save(out_dir + "/config.json");

    while (epoch_ < cfg_.training.epochs) {
        train_epoch();
        const bool last = epoch_ == cfg_.training.epochs;
        if (epoch_ % cfg_.training.eval_every_epochs == 0 || last) {
            const int n = last ? cfg_.training.eval_episodes
                               : std::min(cfg_.training.eval_episodes, 20);
            std::vector<double> per_episode;
            const double mean_return = evaluate(
                n, cfg_.shared.eval_sampling_temperature, &per_episode);
            MetricsRecord rec;
            rec.type = "eval";
            rec.epoch = epoch_;
            rec.env_steps = env_steps_;
            rec.values["eval_return"] = mean_return;
            rec.values["eval_episodes"] = n;
            if (!metrics_.path().empty()) metrics_.write(rec);
        }
        if (epoch_ % 25 == 0 || last)
            save_checkpoint(out_dir + "/checkpoint.bin");
    }
}

std::vector<ad::Param*> Trainer::all_params() const {
    std::vector<ad::Param*> out = wm_->params();
    for (auto* p : controller_->params()) out.push_back(p);
    if (vqvae_)
        for (auto* p : vqvae_->params()) out.push_back(p);
    return out;
}

namespace {
constexpr std::uint64_t kCheckpointMagic = 0x54425743'4b505431ull;
constexpr std::uint64_t kCheckpointVersion = 1;
}  // namespace

void Trainer::save_checkpoint(const std::string& path) const {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("checkpoint: cannot write " + tmp);
        io::write_u64(os, kCheckpointMagic);
        io::write_u64(os, kCheckpointVersion);
        io::write_u64(os, cfg_.hash());
        io::write_string(os, cfg_.canonical_json());
        io::write_i64(os, epoch_);
        io::write_i64(os, env_steps_);
        io::write_i64(os, eval_count_);
        io::write_i64(os, opt_tok_.step_count);
        io::write_i64(os, opt_wm_.step_count);
        io::write_i64(os, opt_ctrl_.step_count);

        const auto params = all_params();
        io::write_u64(os, params.size());
        for (const ad::Param* p : params) {
            io::write_string(os, p->name);
            io::write_tensor(os, p->value);
            io::write_tensor(os, p->m);
            io::write_tensor(os, p->v);
        }
        if (vqvae_) {
            io::write_tensor(os, const_cast<tok::VqVae&>(*vqvae_).bn_running_mean());
            io::write_tensor(os, const_cast<tok::VqVae&>(*vqvae_).bn_running_var());
        }

        std::ostringstream rng_blob;
        rng_collect_.save(rng_blob);
        rng_blob << ' ';
        rng_wm_sample_.save(rng_blob);
        rng_blob << ' ';
        rng_wm_dropout_.save(rng_blob);
        rng_blob << ' ';
        rng_ctrl_.save(rng_blob);
        rng_blob << ' ';
        rng_tok_.save(rng_blob);
        io::write_string(os, rng_blob.str());

        std::ostringstream env_blob;
        env_->save(env_blob);
        io::write_string(os, env_blob.str());

        std::ostringstream tracker_blob;
        tracker_.save(tracker_blob);
        io::write_string(os, tracker_blob.str());

        replay_.save(os);
        io::write_u64(os, kCheckpointMagic);  // trailer guards truncation
        if (!os) throw std::runtime_error("checkpoint: write failed");
    }
    std::filesystem::rename(tmp, path);
}

void Trainer::load_checkpoint(const std::string& path, bool force) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);

    if (io::read_u64(is) != kCheckpointMagic)
        throw std::runtime_error("checkpoint: bad magic (corrupted file?)");
    if (io::read_u64(is) != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported version");
    const std::uint64_t hash = io::read_u64(is);
    const std::string cfg_json = io::read_string(is);
    (void)cfg_json;
    if (hash != cfg_.hash() && !force)
        throw std::runtime_error(
            "checkpoint: config hash mismatch (pass --force to override)");

    // stage everything before mutating the trainer
    const auto epoch = io::read_i64(is);
    const auto env_steps = io::read_i64(is);
    const auto evals = io::read_i64(is);
    const auto tok_steps = io::read_i64(is);
    const auto wm_steps = io::read_i64(is);
    const auto ctrl_steps = io::read_i64(is);

    struct Staged {
        std::string name;
        Tensor value, m, v;
    };
    const auto n_params = io::read_u64(is);
    std::vector<Staged> staged(n_params);
    for (auto& s : staged) {
        s.name = io::read_string(is);
        s.value = io::read_tensor(is);
        s.m = io::read_tensor(is);
        s.v = io::read_tensor(is);
    }
    Tensor bn_mean, bn_var;
    if (vqvae_) {
        bn_mean = io::read_tensor(is);
        bn_var = io::read_tensor(is);
    }
    const std::string rng_blob = io::read_string(is);
    const std::string env_blob = io::read_string(is);
    const std::string tracker_blob = io::read_string(is);

    replay::ReplayBuffer staged_replay(cfg_.training.horizon,
                                       cfg_.controller.imagination_context_length,
                                       cfg_.shared.prioritized_replay_initial_loss_value);
    staged_replay.load(is);
    if (io::read_u64(is) != kCheckpointMagic)
        throw std::runtime_error("checkpoint: truncated file (missing trailer)");

    // commit
    auto params = all_params();
    if (params.size() != staged.size())
        throw std::runtime_error("checkpoint: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->name != staged[i].name)
            throw std::runtime_error("checkpoint: parameter order mismatch at " +
                                     staged[i].name);
        if (!params[i]->value.same_shape(staged[i].value))
            throw std::runtime_error("checkpoint: shape mismatch at " +
                                     staged[i].name);
        params[i]->value = staged[i].value;
        params[i]->m = staged[i].m;
        params[i]->v = staged[i].v;
    }
    if (vqvae_) {
        vqvae_->bn_running_mean() = bn_mean;
        vqvae_->bn_running_var() = bn_var;
    }
    epoch_ = static_cast<int>(epoch);
    env_steps_ = env_steps;
    eval_count_ = evals;
    opt_tok_.step_count = tok_steps;
    opt_wm_.step_count = wm_steps;
    opt_ctrl_.step_count = ctrl_steps;
    {
        std::istringstream ss(rng_blob);
        rng_collect_.load(ss);
        rng_wm_sample_.load(ss);
        rng_wm_dropout_.load(ss);
        rng_ctrl_.load(ss);
        rng_tok_.load(ss);
    }
    {
        std::istringstream ss(env_blob);
        env_->load(ss);
    }
    {
        std::istringstream ss(tracker_blob);
        tracker_.load(ss);
    }
    replay_ = std::move(staged_replay);
}

}  // namespace tbwm
