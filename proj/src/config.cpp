#include "tbwm/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace tbwm {

using nlohmann::json;

namespace {

void require_keys(const json& obj, const std::string& where,
                  const std::set<std::string>& allowed) {
    for (const auto& [key, value] : obj.items()) {
        (void)value;
        if (!allowed.count(key))
            throw std::invalid_argument("config: unknown key '" + where + key +
                                        "'");
    }
}

PerModule per_module(const json& j, const std::string& where) {
    require_keys(j, where, {"tokenizer", "world_model", "controller"});
    PerModule p;
    p.tokenizer = j.value("tokenizer", 0.0);
    p.world_model = j.value("world_model", 0.0);
    p.controller = j.value("controller", 0.0);
    return p;
}

PerModuleInt per_module_int(const json& j, const std::string& where) {
    require_keys(j, where, {"tokenizer", "world_model", "controller"});
    PerModuleInt p;
    p.tokenizer = j.value("tokenizer", 0);
    p.world_model = j.value("world_model", 0);
    p.controller = j.value("controller", 0);
    return p;
}

json per_module_json(const PerModule& p) {
    return json{{"tokenizer", p.tokenizer},
                {"world_model", p.world_model},
                {"controller", p.controller}};
}

json per_module_json(const PerModuleInt& p) {
    return json{{"tokenizer", p.tokenizer},
                {"world_model", p.world_model},
                {"controller", p.controller}};
}

}  // namespace

void RunConfig::validate() const {
    const auto positive = [](double v, const char* what) {
        if (!(v > 0.0))
            throw std::invalid_argument(std::string("config: ") + what +
                                        " must be positive");
    };
    const auto in01 = [](double v, const char* what) {
        if (v < 0.0 || v > 1.0)
            throw std::invalid_argument(std::string("config: ") + what +
                                        " must lie in [0, 1]");
    };
    if (shared.optimizer != "adamw")
        throw std::invalid_argument("config: only the adamw optimizer is supported");
    positive(shared.eval_sampling_temperature, "eval_sampling_temperature");
    positive(shared.learning_rate.world_model, "world_model learning rate");
    positive(shared.learning_rate.controller, "controller learning rate");
    in01(shared.adamw_beta1, "adamw_beta1");
    in01(shared.adamw_beta2, "adamw_beta2");
    in01(shared.prioritized_replay_fraction, "prioritized_replay_fraction");
    if (shared.prioritized_replay_initial_loss_value < 0.0)
        throw std::invalid_argument("config: initial loss value must be >= 0");
    if (shared.wm_ensemble_size < 2)
        throw std::invalid_argument("config: ensemble size must be >= 2");
    if (shared.hl_gauss_num_bins < 2)
        throw std::invalid_argument("config: need at least 2 bins");
    positive(shared.hl_gauss_range, "hl_gauss_range");
    positive(shared.label_smoothing_sigma, "label_smoothing_sigma");

    if (training.horizon < 1)
        throw std::invalid_argument("config: horizon must be >= 1");
    if (training.epochs < 1)
        throw std::invalid_argument("config: epochs must be >= 1");
    if (training.environment_steps_per_epoch < 1)
        throw std::invalid_argument("config: env steps per epoch must be >= 1");
    if (training.batch_size.world_model < 1 || training.batch_size.controller < 1)
        throw std::invalid_argument("config: batch sizes must be >= 1");
    if (training.interaction_budget < 1)
        throw std::invalid_argument("config: interaction budget must be >= 1");
    if (training.eval_episodes < 1)
        throw std::invalid_argument("config: eval episodes must be >= 1");
    if (training.eval_every_epochs < 1)
        throw std::invalid_argument("config: eval cadence must be >= 1");
    if (training.training_steps_per_epoch.tokenizer < 0 ||
        training.training_steps_per_epoch.world_model < 0 ||
        training.training_steps_per_epoch.controller < 0)
        throw std::invalid_argument("config: training steps must be >= 0");

    if (world_model.num_layers < 1 || world_model.num_heads < 1 ||
        world_model.embedding_dimension < 1 || world_model.ffn_multiplier < 1)
        throw std::invalid_argument("config: world model dims must be positive");
    if (world_model.embedding_dimension % world_model.num_heads != 0)
        throw std::invalid_argument("config: heads must divide the embedding dim");
    if (world_model.dropout < 0.0 || world_model.dropout >= 1.0)
        throw std::invalid_argument("config: dropout must lie in [0, 1)");
    if (!(world_model.retention_decay_min > 0.0) ||
        world_model.retention_decay_max < world_model.retention_decay_min)
        throw std::invalid_argument("config: bad retention decay range");
    positive(world_model.imagination_temperature, "imagination_temperature");

    if (controller.environment_reward_weight < 0.0 ||
        controller.intrinsic_reward_weight < 0.0)
        throw std::invalid_argument("config: reward weights must be >= 0");
    if (controller.latent_dim < 1 ||
        controller.categoricals_embedding_dimension < 1)
        throw std::invalid_argument("config: controller dims must be positive");
    if (controller.continuous_action_quantization_values < 2)
        throw std::invalid_argument("config: need >= 2 action quantization values");
    in01(controller.gamma, "gamma");
    in01(controller.lambda, "lambda");
    if (controller.entropy_weight < 0.0)
        throw std::invalid_argument("config: entropy weight must be >= 0");
    if (controller.return_scale_window < 1)
        throw std::invalid_argument("config: return scale window must be >= 1");
    if (controller.imagination_context_length < 1)
        throw std::invalid_argument("config: imagination context must be >= 1");

    if (tokenizer.vqvae_base_channels < 1 || tokenizer.vqvae_latent_channels < 1 ||
        tokenizer.vqvae_blocks < 1 || tokenizer.vqvae_vocab_size < 2)
        throw std::invalid_argument("config: bad tokenizer settings");
}

std::string RunConfig::canonical_json() const {
    json j;
    j["seed"] = seed;
    j["env"] = env;
    j["shared"] = {
        {"eval_sampling_temperature", shared.eval_sampling_temperature},
        {"optimizer", shared.optimizer},
        {"learning_rate", per_module_json(shared.learning_rate)},
        {"adamw_beta1", shared.adamw_beta1},
        {"adamw_beta2", shared.adamw_beta2},
        {"gradient_clipping_threshold",
         per_module_json(shared.gradient_clipping_threshold)},
        {"weight_decay", per_module_json(shared.weight_decay)},
        {"prioritized_replay_fraction", shared.prioritized_replay_fraction},
        {"prioritized_replay_initial_loss_value",
         shared.prioritized_replay_initial_loss_value},
        {"wm_ensemble_size", shared.wm_ensemble_size},
        {"hl_gauss_num_bins", shared.hl_gauss_num_bins},
        {"hl_gauss_range", shared.hl_gauss_range},
        {"label_smoothing_sigma", shared.label_smoothing_sigma}};
    j["training"] = {
        {"horizon", training.horizon},
        {"epochs", training.epochs},
        {"experience_collection_epochs", training.experience_collection_epochs},
        {"environment_steps_per_epoch", training.environment_steps_per_epoch},
        {"batch_size", per_module_json(training.batch_size)},
        {"training_steps_per_epoch",
         per_module_json(training.training_steps_per_epoch)},
        {"training_start_after_epoch",
         per_module_json(training.training_start_after_epoch)},
        {"interaction_budget", training.interaction_budget},
        {"eval_episodes", training.eval_episodes},
        {"eval_every_epochs", training.eval_every_epochs}};
    j["world_model"] = {
        {"num_layers", world_model.num_layers},
        {"num_heads", world_model.num_heads},
        {"embedding_dimension", world_model.embedding_dimension},
        {"dropout", world_model.dropout},
        {"retention_decay_range",
         json::array({world_model.retention_decay_min,
                      world_model.retention_decay_max})},
        {"ffn_multiplier", world_model.ffn_multiplier},
        {"imagination_temperature", world_model.imagination_temperature}};
    j["controller"] = {
        {"environment_reward_weight", controller.environment_reward_weight},
        {"intrinsic_reward_weight", controller.intrinsic_reward_weight},
        {"encoder_mlp_hidden_sizes", controller.encoder_mlp_hidden_sizes},
        {"shared_backbone", controller.shared_backbone},
        {"continuous_action_quantization_values",
         controller.continuous_action_quantization_values},
        {"categoricals_embedding_dimension",
         controller.categoricals_embedding_dimension},
        {"latent_dim", controller.latent_dim},
        {"image_encoder_dim", controller.image_encoder_dim},
        {"gamma", controller.gamma},
        {"lambda", controller.lambda},
        {"entropy_weight", controller.entropy_weight},
        {"return_scale_window", controller.return_scale_window},
        {"imagination_context_length", controller.imagination_context_length}};
    j["tokenizer"] = {{"vqvae_base_channels", tokenizer.vqvae_base_channels},
                      {"vqvae_latent_channels", tokenizer.vqvae_latent_channels},
                      {"vqvae_blocks", tokenizer.vqvae_blocks},
                      {"vqvae_vocab_size", tokenizer.vqvae_vocab_size},
                      {"vqvae_gn_groups", tokenizer.vqvae_gn_groups}};
    return j.dump(2);
}

std::uint64_t RunConfig::hash() const {
    // FNV-1a over the canonical serialization
    const std::string s = canonical_json();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

RunConfig RunConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(std::string("config: parse error: ") +
                                    e.what());
    }
    RunConfig cfg;
    require_keys(j, "",
                 {"seed", "env", "shared", "training", "world_model",
                  "controller", "tokenizer"});
    cfg.seed = j.value("seed", cfg.seed);
    cfg.env = j.value("env", cfg.env);

    if (j.contains("shared")) {
        const auto& s = j["shared"];
        require_keys(s, "shared.",
                     {"eval_sampling_temperature", "optimizer", "learning_rate",
                      "adamw_beta1", "adamw_beta2",
                      "gradient_clipping_threshold", "weight_decay",
                      "prioritized_replay_fraction",
                      "prioritized_replay_initial_loss_value",
                      "wm_ensemble_size", "hl_gauss_num_bins", "hl_gauss_range",
                      "label_smoothing_sigma"});
        auto& d = cfg.shared;
        d.eval_sampling_temperature =
            s.value("eval_sampling_temperature", d.eval_sampling_temperature);
        d.optimizer = s.value("optimizer", d.optimizer);
        if (s.contains("learning_rate"))
            d.learning_rate = per_module(s["learning_rate"], "shared.learning_rate.");
        d.adamw_beta1 = s.value("adamw_beta1", d.adamw_beta1);
        d.adamw_beta2 = s.value("adamw_beta2", d.adamw_beta2);
        if (s.contains("gradient_clipping_threshold"))
            d.gradient_clipping_threshold = per_module(
                s["gradient_clipping_threshold"],
                "shared.gradient_clipping_threshold.");
        if (s.contains("weight_decay"))
            d.weight_decay = per_module(s["weight_decay"], "shared.weight_decay.");
        d.prioritized_replay_fraction = s.value("prioritized_replay_fraction",
                                                d.prioritized_replay_fraction);
        d.prioritized_replay_initial_loss_value =
            s.value("prioritized_replay_initial_loss_value",
                    d.prioritized_replay_initial_loss_value);
        d.wm_ensemble_size = s.value("wm_ensemble_size", d.wm_ensemble_size);
        d.hl_gauss_num_bins = s.value("hl_gauss_num_bins", d.hl_gauss_num_bins);
        d.hl_gauss_range = s.value("hl_gauss_range", d.hl_gauss_range);
        d.label_smoothing_sigma =
            s.value("label_smoothing_sigma", d.label_smoothing_sigma);
    }

    if (j.contains("training")) {
        const auto& s = j["training"];
        require_keys(s, "training.",
                     {"horizon", "epochs", "experience_collection_epochs",
                      "environment_steps_per_epoch", "batch_size",
                      "training_steps_per_epoch", "training_start_after_epoch",
                      "interaction_budget", "eval_episodes",
                      "eval_every_epochs"});
        auto& d = cfg.training;
        d.horizon = s.value("horizon", d.horizon);
        d.epochs = s.value("epochs", d.epochs);
        d.experience_collection_epochs =
            s.value("experience_collection_epochs", d.experience_collection_epochs);
        d.environment_steps_per_epoch =
            s.value("environment_steps_per_epoch", d.environment_steps_per_epoch);
        if (s.contains("batch_size"))
            d.batch_size = per_module_int(s["batch_size"], "training.batch_size.");
        if (s.contains("training_steps_per_epoch"))
            d.training_steps_per_epoch = per_module_int(
                s["training_steps_per_epoch"], "training.training_steps_per_epoch.");
        if (s.contains("training_start_after_epoch"))
            d.training_start_after_epoch =
                per_module_int(s["training_start_after_epoch"],
                               "training.training_start_after_epoch.");
        d.interaction_budget = s.value("interaction_budget", d.interaction_budget);
        d.eval_episodes = s.value("eval_episodes", d.eval_episodes);
        d.eval_every_epochs = s.value("eval_every_epochs", d.eval_every_epochs);
    }

    if (j.contains("world_model")) {
        const auto& s = j["world_model"];
        require_keys(s, "world_model.",
                     {"num_layers", "num_heads", "embedding_dimension",
                      "dropout", "retention_decay_range", "ffn_multiplier",
                      "imagination_temperature"});
        auto& d = cfg.world_model;
        d.num_layers = s.value("num_layers", d.num_layers);
        d.num_heads = s.value("num_heads", d.num_heads);
        d.embedding_dimension =
            s.value("embedding_dimension", d.embedding_dimension);
        d.dropout = s.value("dropout", d.dropout);
        if (s.contains("retention_decay_range")) {
            const auto& r = s["retention_decay_range"];
            if (!r.is_array() || r.size() != 2)
                throw std::invalid_argument(
                    "config: retention_decay_range must be [min, max]");
            d.retention_decay_min = r[0].get<double>();
            d.retention_decay_max = r[1].get<double>();
        }
        d.ffn_multiplier = s.value("ffn_multiplier", d.ffn_multiplier);
        d.imagination_temperature =
            s.value("imagination_temperature", d.imagination_temperature);
    }

    if (j.contains("controller")) {
        const auto& s = j["controller"];
        require_keys(s, "controller.",
                     {"environment_reward_weight", "intrinsic_reward_weight",
                      "encoder_mlp_hidden_sizes", "shared_backbone",
                      "continuous_action_quantization_values",
                      "categoricals_embedding_dimension", "latent_dim",
                      "image_encoder_dim", "gamma", "lambda", "entropy_weight",
                      "return_scale_window", "imagination_context_length"});
        auto& d = cfg.controller;
        d.environment_reward_weight =
            s.value("environment_reward_weight", d.environment_reward_weight);
        d.intrinsic_reward_weight =
            s.value("intrinsic_reward_weight", d.intrinsic_reward_weight);
        if (s.contains("encoder_mlp_hidden_sizes"))
            d.encoder_mlp_hidden_sizes =
                s["encoder_mlp_hidden_sizes"].get<std::vector<int>>();
        d.shared_backbone = s.value("shared_backbone", d.shared_backbone);
        d.continuous_action_quantization_values =
            s.value("continuous_action_quantization_values",
                    d.continuous_action_quantization_values);
        d.categoricals_embedding_dimension =
            s.value("categoricals_embedding_dimension",
                    d.categoricals_embedding_dimension);
        d.latent_dim = s.value("latent_dim", d.latent_dim);
        d.image_encoder_dim = s.value("image_encoder_dim", d.image_encoder_dim);
        d.gamma = s.value("gamma", d.gamma);
        d.lambda = s.value("lambda", d.lambda);
        d.entropy_weight = s.value("entropy_weight", d.entropy_weight);
        d.return_scale_window =
            s.value("return_scale_window", d.return_scale_window);
        d.imagination_context_length =
            s.value("imagination_context_length", d.imagination_context_length);
    }

    if (j.contains("tokenizer")) {
        const auto& s = j["tokenizer"];
        require_keys(s, "tokenizer.",
                     {"vqvae_base_channels", "vqvae_latent_channels",
                      "vqvae_blocks", "vqvae_vocab_size", "vqvae_gn_groups"});
        auto& d = cfg.tokenizer;
        d.vqvae_base_channels = s.value("vqvae_base_channels", d.vqvae_base_channels);
        d.vqvae_latent_channels =
            s.value("vqvae_latent_channels", d.vqvae_latent_channels);
        d.vqvae_blocks = s.value("vqvae_blocks", d.vqvae_blocks);
        d.vqvae_vocab_size = s.value("vqvae_vocab_size", d.vqvae_vocab_size);
        d.vqvae_gn_groups = s.value("vqvae_gn_groups", d.vqvae_gn_groups);
    }

    cfg.validate();
    return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str());
}

void RunConfig::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::invalid_argument("config: cannot write " + path);
    out << canonical_json() << '\n';
}

}  // namespace tbwm
