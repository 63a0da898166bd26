#pragma once

// Embedding tables and assembly of observation-action blocks
// x_t = (obs block, act block) in the canonical modality order.

#include <optional>
#include <vector>

#include "tbwm/autodiff.hpp"
#include "tbwm/tokenizers.hpp"

namespace tbwm::blocks {

// Plain row lookup: out row i = table[tokens[i]].
ad::Var embed_tokens(const std::vector<int>& tokens, const ad::Var& table);

// 2D categoricals: per-position mean of the C channel embeddings.
// tokens layout is position-major, channel-minor (as in TokenSequence).
ad::Var embed_categorical_2d(const std::vector<int>& tokens, int channels,
                             std::span<const ad::Var> tables);

// Owns one embedding table per modality channel plus the action table.
// An externally-owned table (the image codebook) can be attached instead of
// a learned one.
class BlockEmbedder {
public:
    BlockEmbedder(std::vector<tok::ModalitySpec> specs, tok::ActionSpec action,
                  int d_model, Rng& init, const std::string& prefix);

    // Uses `codebook` as the table for image modality `modality_index`
    // instead of a dedicated learned table.
    void attach_external_table(int modality_index, ad::Param* codebook);

    int d_model() const { return d_model_; }
    int obs_positions() const { return obs_positions_; }
    int act_positions() const { return act_.token_count(); }
    int block_len() const { return obs_positions_ + act_positions(); }

    // (K x d_model) concatenated per-modality embeddings in canonical order.
    ad::Var embed_observation(const std::vector<tok::TokenSequence>& obs) const;
    // (K_a x d_model)
    ad::Var embed_action(const tok::TokenSequence& act) const;
    // ((K + K_a) x d_model)
    ad::Var assemble_block(const std::vector<tok::TokenSequence>& obs,
                           const tok::TokenSequence& act) const;

    // Raw lookups for the inference path (row-major out, block_len x d).
    void assemble_block_raw(const std::vector<tok::TokenSequence>& obs,
                            const tok::TokenSequence& act, double* out) const;
    void embed_observation_raw(const std::vector<tok::TokenSequence>& obs,
                               double* out) const;

    std::vector<ad::Param*> params();

private:
    const ad::Param* table_for(int modality, int channel) const;

    std::vector<tok::ModalitySpec> specs_;
    tok::ActionSpec act_;
    int d_model_ = 0;
    int obs_positions_ = 0;
    // tables_[m] holds the learned tables for modality m (empty when an
    // external table is attached); channel-indexed for 2D categoricals.
    std::vector<std::vector<ad::Param>> tables_;
    std::vector<ad::Param*> external_;  // per modality, may be null
    ad::Param action_table_;
};

}  // namespace tbwm::blocks
