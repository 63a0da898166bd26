#pragma once

// The world model: per-modality token prediction heads on top of the
// retention sequence model, reward and termination heads sharing the critic's
// symlog bins, an N-member disagreement ensemble on stop-gradient features,
// and the full training loss (consumed by the prioritized replay).

#include <memory>
#include <span>
#include <vector>

#include "tbwm/autodiff.hpp"
#include "tbwm/blocks.hpp"
#include "tbwm/rac.hpp"
#include "tbwm/replay.hpp"
#include "tbwm/seqmodel.hpp"
#include "tbwm/tokenizers.hpp"

namespace tbwm::wm {

// Jensen-Shannon divergence H(mean) - mean(H) in nats; 0 <= jsd <= ln(n).
double jsd(std::span<const std::vector<double>> dists);

// Mean per-token JSD across ensemble members. member_dists is indexed
// [member][token position][channel] -> distribution.
using TokenDistributions = std::vector<std::vector<std::vector<double>>>;
double disagreement_signal(std::span<const TokenDistributions> member_dists);

// r_bar = alpha_int * r_int + alpha_ext * r_ext
inline double mix_rewards(double r_int, double r_ext, double alpha_int,
                          double alpha_ext) {
    return alpha_int * r_int + alpha_ext * r_ext;
}

// Single-hidden-layer MLP (raw inference form).
struct MlpRaw {
    int din = 0, dh = 0, dout = 0;
    std::vector<double> w1, b1, w2, b2;

    void forward(const double* x, int rows, double* y) const;
};

// Autodiff MLP head: SiLU hidden of width 2*d_model.
struct MlpHead {
    ad::Param w1, b1, w2, b2;

    MlpHead(const std::string& name, int din, int dh, int dout, Rng& init);
    ad::Var forward(const ad::Var& x) const;
    void export_raw(MlpRaw& out) const;
    void collect(std::vector<ad::Param*>& out);
};

struct WorldModelConfig {
    seq::SeqModelConfig seq;
    int ensemble_size = 4;
    int reward_bins = 128;
    double reward_lo = -15.0;
    double reward_hi = 15.0;
    double sigma = 0.17578125;  // (3/4) * bin width for 128 bins on [-15, 15]

    void validate() const;
};

struct StepPrediction {
    TokenDistributions tokens;  // [position][channel] -> distribution
    double reward = 0.0;
    double p_done = 0.0;
    double disagreement = 0.0;
};

class WorldModel {
public:
    WorldModel(WorldModelConfig cfg, std::vector<tok::ModalitySpec> specs,
               tok::ActionSpec action, Rng& init,
               ad::Param* image_codebook = nullptr);

    const WorldModelConfig& config() const { return cfg_; }
    const rac::BinSpec& bins() const { return bins_; }
    blocks::BlockEmbedder& embedder() { return embedder_; }
    int obs_positions() const { return embedder_.obs_positions(); }
    int block_len() const { return embedder_.block_len(); }

    struct LossOut {
        ad::Var total;           // scalar, mean over batch examples
        ad::Var ensemble_total;  // the ensemble terms alone (same scale)
        double total_value = 0.0;
        double obs = 0.0, reward = 0.0, done = 0.0, ensemble = 0.0;
        std::vector<double> per_example;  // replay priorities
    };
    LossOut loss(const std::vector<replay::TrajectorySegment>& batch,
                 Rng* dropout_rng = nullptr);

    std::vector<ad::Param*> params();           // everything the optimizer sees
    std::vector<ad::Param*> backbone_params();  // no ensemble heads
    std::vector<ad::Param*> ensemble_params();

    // --- raw inference snapshot (imagination path) ---
    struct Raw {
        std::unique_ptr<seq::RetNetStack<double>> stack;
        Tensor u;  // K x d prediction embeddings
        std::vector<std::vector<MlpRaw>> obs_heads;          // [modality][channel]
        std::vector<std::vector<std::vector<MlpRaw>>> ens;   // [member][modality][channel]
        MlpRaw reward_head, done_head;
    };
    void sync_raw();
    const Raw& raw() const { return raw_; }

    // Primary-head categorical distributions for K u-output rows.
    TokenDistributions predict_obs_tokens(const double* y, int positions) const;
    // Ensemble member distributions for the same rows.
    std::vector<TokenDistributions> predict_ensemble_tokens(
        const double* y, int positions) const;
    // Reward estimate and termination probability from the last u-output row.
    std::pair<double, double> predict_reward_termination(
        const double* last_row) const;

    const std::vector<tok::ModalitySpec>& specs() const { return specs_; }
    seq::SeqModelAd& seq_model() { return seq_; }
    ad::Param& prediction_embeddings() { return u_; }

private:
    struct Range {
        int start = 0, count = 0;
    };

    WorldModelConfig cfg_;
    std::vector<tok::ModalitySpec> specs_;
    std::vector<Range> ranges_;
    rac::BinSpec bins_;
    blocks::BlockEmbedder embedder_;
    seq::SeqModelAd seq_;
    ad::Param u_;
    std::vector<std::vector<MlpHead>> obs_heads_;         // [modality][channel]
    std::vector<std::vector<std::vector<MlpHead>>> ens_;  // [member][modality][channel]
    MlpHead reward_head_, done_head_;
    Raw raw_;
};

}  // namespace tbwm::wm
