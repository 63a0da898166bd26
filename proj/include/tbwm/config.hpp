#pragma once

// Run configuration mirroring the training-recipe hyperparameter tables by
// name. Loaded from hierarchical JSON; every field is range-checked and
// unknown keys are rejected.

#include <cstdint>
#include <string>
#include <vector>

namespace tbwm {

struct PerModule {
    double tokenizer = 0.0;
    double world_model = 0.0;
    double controller = 0.0;
};

struct PerModuleInt {
    int tokenizer = 0;
    int world_model = 0;
    int controller = 0;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string env = "grid-v0";

    struct Shared {
        double eval_sampling_temperature = 0.5;
        std::string optimizer = "adamw";
        PerModule learning_rate{1e-4, 2e-4, 2e-4};
        double adamw_beta1 = 0.9;
        double adamw_beta2 = 0.999;
        PerModule gradient_clipping_threshold{10.0, 3.0, 3.0};
        PerModule weight_decay{0.01, 0.05, 0.01};
        double prioritized_replay_fraction = 0.3;
        double prioritized_replay_initial_loss_value = 10.0;
        int wm_ensemble_size = 4;
        int hl_gauss_num_bins = 128;
        double hl_gauss_range = 15.0;  // symlog bins span [-range, range]
        double label_smoothing_sigma = 0.17578125;
    } shared;

    struct Training {
        int horizon = 8;
        int epochs = 100;
        int experience_collection_epochs = 100;
        int environment_steps_per_epoch = 200;
        PerModuleInt batch_size{16, 8, 16};
        PerModuleInt training_steps_per_epoch{0, 20, 15};
        PerModuleInt training_start_after_epoch{0, 2, 6};
        std::int64_t interaction_budget = 20000;
        int eval_episodes = 100;
        int eval_every_epochs = 10;
    } training;

    struct WorldModel {
        int num_layers = 2;
        int num_heads = 2;
        int embedding_dimension = 64;
        double dropout = 0.0;
        double retention_decay_min = 4.0;
        double retention_decay_max = 16.0;
        int ffn_multiplier = 2;
        double imagination_temperature = 1.0;
    } world_model;

    struct Controller {
        double environment_reward_weight = 1.0;
        double intrinsic_reward_weight = 1.0;
        std::vector<int> encoder_mlp_hidden_sizes{128};
        bool shared_backbone = true;
        int continuous_action_quantization_values = 51;
        int categoricals_embedding_dimension = 64;
        int latent_dim = 128;
        int image_encoder_dim = 128;
        double gamma = 0.997;
        double lambda = 0.95;
        double entropy_weight = 1e-3;
        int return_scale_window = 500;
        int imagination_context_length = 4;
    } controller;

    struct TokenizerCfg {
        // image tokenizer (used only when the environment has image
        // observations)
        int vqvae_base_channels = 8;
        int vqvae_latent_channels = 64;
        int vqvae_blocks = 2;
        int vqvae_vocab_size = 32;
        int vqvae_gn_groups = 4;
    } tokenizer;

    void validate() const;

    std::string canonical_json() const;
    std::uint64_t hash() const;

    static RunConfig from_json_text(const std::string& text);
    static RunConfig load(const std::string& path);
    void save(const std::string& path) const;
};

}  // namespace tbwm
