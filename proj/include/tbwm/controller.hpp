#pragma once

// The actor-critic: modality encoders fused by an MLP, an LSTM core, a
// categorical policy (discrete actions or 51-way grids per continuous
// dimension), an HL-Gauss critic, lambda-returns, and the normalized
// REINFORCE objective with a percentile-based return scale.

#include <deque>
#include <optional>
#include <vector>

#include "tbwm/autodiff.hpp"
#include "tbwm/rac.hpp"
#include "tbwm/rng.hpp"
#include "tbwm/tokenizers.hpp"

namespace tbwm::ctrl {

struct ControllerConfig {
    int latent_dim = 128;  // LSTM input and hidden width (d_C)
    std::vector<int> fusion_hidden = {128};
    int cat_embed_dim = 64;
    int image_encoder_dim = 128;  // image-encoder output width, when present
    bool shared_backbone = true;
    double gamma = 0.997;
    double lambda = 0.95;
    double entropy_weight = 1e-3;
    int percentile_window = 500;
    int value_bins = 128;
    double value_lo = -15.0;
    double value_hi = 15.0;
    double sigma = 0.17578125;

    void validate() const;
};

// Backward recursion G_t = r_t + gamma (1 - d_t) ((1 - lambda) V_{t+1}
// + lambda G_{t+1}) with G_H = V_H.
std::vector<double> lambda_returns(const std::vector<double>& rewards,
                                   const std::vector<std::uint8_t>& dones,
                                   const std::vector<double>& values,
                                   double gamma, double lambda);

// Linear-interpolation percentile (q in [0, 100]) of unsorted values.
double percentile(std::vector<double> values, double q);

// Running estimates of the 97.5th/2.5th return percentiles over a window of
// recent batches; scale c = max(1, p97.5 - p2.5).
class ReturnScaleTracker {
public:
    explicit ReturnScaleTracker(int window = 500) : window_(window) {}

    void update(const std::vector<double>& batch_returns);
    double scale() const;
    int size() const { return static_cast<int>(entries_.size()); }

    void save(std::ostream& os) const;
    void load(std::istream& is);

private:
    int window_;
    std::deque<std::pair<double, double>> entries_;  // (p2.5, p97.5)
};

class Controller {
public:
    // image_codebook: the tokenizer's embedding table, required when an image
    // modality is present (tokens embed through it before the CNN encoder).
    Controller(ControllerConfig cfg, std::vector<tok::ModalitySpec> specs,
               tok::ActionSpec action, Rng& init,
               ad::Param* image_codebook = nullptr);

    const ControllerConfig& config() const { return cfg_; }
    const rac::BinSpec& bins() const { return bins_; }
    const tok::ActionSpec& action_spec() const { return action_; }

    // Recurrent state per tower (one, or actor+critic when not shared);
    // zero-initialized at sequence starts, value-passed.
    struct State {
        std::vector<std::pair<ad::Var, ad::Var>> towers;  // (h, c), B x d rows
    };
    State initial_state(int batch) const;

    // Fused observation latent, (B x latent_dim). obs_batch: [lane][modality].
    ad::Var encode_observations(
        const std::vector<std::vector<tok::TokenSequence>>& obs_batch,
        int tower) const;
    // Action latents for the previous step, (B x latent_dim).
    ad::Var encode_actions(const std::vector<tok::TokenSequence>& act_batch,
                           int tower) const;

    struct StepOut {
        State state;
        ad::Var actor_logits;  // (B x |A|) or (B x k*51)
        ad::Var value_logits;  // (B x value_bins)
    };
    // Advances the recurrent core: consumes the previous action latents (when
    // present), then the observation latents, then applies the linear heads.
    StepOut step(const State& state,
                 const std::vector<std::vector<tok::TokenSequence>>& obs_batch,
                 const std::vector<tok::TokenSequence>& prev_actions) const;

    struct SampledAction {
        std::vector<tok::TokenSequence> tokens;  // per lane
        std::vector<tok::ActionValue> actions;   // decoded per lane
        ad::Var log_prob;                        // (B x 1)
        ad::Var entropy;                         // (B x 1)
    };
    SampledAction sample_actions(const ad::Var& actor_logits,
                                 double temperature, Rng& rng) const;

    // Decoded critic values per lane.
    std::vector<double> decode_values(const ad::Var& value_logits) const;

    // Normalized REINFORCE: -(1/B) sum_lanes sum_t [sg(adv/max(1,c)) log pi
    // + eta H]; rows are (lane-major) step entries, masked by weight.
    ad::Var policy_loss(const std::vector<ad::Var>& log_probs,
                        const std::vector<ad::Var>& entropies,
                        const std::vector<std::vector<double>>& advantages,
                        const std::vector<std::vector<double>>& mask,
                        double scale_c) const;

    // Mean HL-Gauss loss of the value logits against the lambda-return
    // targets (masked).
    ad::Var critic_loss(const std::vector<ad::Var>& value_logits,
                        const std::vector<std::vector<double>>& returns,
                        const std::vector<std::vector<double>>& mask) const;

    std::vector<ad::Param*> params();

    int num_towers() const { return cfg_.shared_backbone ? 1 : 2; }
    int actor_tower() const { return 0; }
    int critic_tower() const { return cfg_.shared_backbone ? 0 : 1; }

private:
    struct Linear {
        ad::Param w, b;
        ad::Var forward(const ad::Var& x) const;
    };
    struct Mlp {
        std::vector<Linear> layers;  // SiLU between layers, linear output
        ad::Var forward(const ad::Var& x) const;
    };
    struct ImageEncoder {
        Linear conv1, conv2, out;  // conv weights stored as (Cout, Cin*k*k)
        int c1 = 0, c2 = 0;
    };
    struct Tower {
        // per modality: channel tables (categoricals) or projection (continuous)
        std::vector<std::vector<ad::Param>> tables;
        std::vector<Linear> cont_proj;
        std::vector<ImageEncoder> image_enc;  // aligned with specs
        Mlp fusion;
        ad::Param act_table;   // discrete actions
        Linear act_proj;       // continuous actions
        ad::Param lstm_wx, lstm_wh, lstm_b;
    };

    Tower make_tower(const std::string& prefix, Rng& init);
    std::pair<ad::Var, ad::Var> lstm_cell(const Tower& t, const ad::Var& x,
                                          const ad::Var& h,
                                          const ad::Var& c) const;

    ControllerConfig cfg_;
    std::vector<tok::ModalitySpec> specs_;
    tok::ActionSpec action_;
    rac::BinSpec bins_;
    tok::QuantLevels levels_;
    std::vector<Tower> towers_;
    Linear actor_head_, critic_head_;
    ad::Param* image_codebook_ = nullptr;
    std::vector<int> image_side_;  // latent grid side per modality
};

}  // namespace tbwm::ctrl
