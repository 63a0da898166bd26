#include "tbwm/blocks.hpp"

#include <stdexcept>

#include "tbwm/optim.hpp"

namespace tbwm::blocks {

using ad::Param;
using ad::Var;

Var embed_tokens(const std::vector<int>& tokens, const Var& table) {
    return ad::gather_rows(table, tokens);
}

Var embed_categorical_2d(const std::vector<int>& tokens, int channels,
                         std::span<const Var> tables) {
    if (static_cast<int>(tables.size()) != channels)
        throw std::invalid_argument("embed_categorical_2d: channel count mismatch");
    if (tokens.size() % channels != 0)
        throw std::invalid_argument("embed_categorical_2d: ragged token vector");
    const int positions = static_cast<int>(tokens.size()) / channels;
    Var acc;
    for (int c = 0; c < channels; ++c) {
        std::vector<int> chan(positions);
        for (int p = 0; p < positions; ++p) chan[p] = tokens[p * channels + c];
        Var e = ad::gather_rows(tables[c], chan);
        acc = c == 0 ? e : ad::add(acc, e);
    }
    return channels == 1 ? acc : ad::scale(acc, 1.0 / channels);
}

BlockEmbedder::BlockEmbedder(std::vector<tok::ModalitySpec> specs,
                             tok::ActionSpec action, int d_model, Rng& init,
                             const std::string& prefix)
    : specs_(std::move(specs)),
      act_(action),
      d_model_(d_model),
      action_table_(prefix + ".act_table",
                    init_normal(action.vocab(), d_model, 0.02, init)) {
    if (specs_.empty())
        throw std::invalid_argument("BlockEmbedder: empty modality set");
    tables_.resize(specs_.size());
    external_.assign(specs_.size(), nullptr);
    for (std::size_t m = 0; m < specs_.size(); ++m) {
        const auto& spec = specs_[m];
        spec.validate();
        obs_positions_ += spec.token_count;
        for (std::size_t c = 0; c < spec.vocab_sizes.size(); ++c) {
            tables_[m].emplace_back(
                prefix + ".obs" + std::to_string(m) + "_c" + std::to_string(c),
                init_normal(spec.vocab_sizes[c], d_model, 0.02, init));
        }
    }
}

void BlockEmbedder::attach_external_table(int modality_index, Param* codebook) {
    const auto& spec = specs_.at(modality_index);
    if (spec.kind != tok::ModalityKind::image)
        throw std::invalid_argument(
            "attach_external_table: only image modalities share the codebook");
    if (codebook->value.cols() != d_model_ ||
        codebook->value.rows() != spec.vocab())
        throw std::invalid_argument("attach_external_table: table shape mismatch");
    external_[modality_index] = codebook;
    tables_[modality_index].clear();
}

const Param* BlockEmbedder::table_for(int modality, int channel) const {
    if (external_[modality]) return external_[modality];
    return &tables_[modality][channel];
}

Var BlockEmbedder::embed_observation(
    const std::vector<tok::TokenSequence>& obs) const {
    if (obs.size() != specs_.size())
        throw std::invalid_argument("embed_observation: modality count mismatch");
    std::vector<Var> parts;
    parts.reserve(obs.size());
    for (std::size_t m = 0; m < specs_.size(); ++m) {
        const auto& spec = specs_[m];
        const auto& seq = obs[m];
        if (seq.positions() != spec.token_count)
            throw std::invalid_argument("embed_observation: token count mismatch");
        if (spec.kind == tok::ModalityKind::categorical_2d) {
            std::vector<Var> tabs;
            tabs.reserve(spec.channels);
            for (int c = 0; c < spec.channels; ++c)
                tabs.push_back(Var::leaf(const_cast<Param&>(*table_for(m, c))));
            parts.push_back(embed_categorical_2d(seq.tokens, spec.channels, tabs));
        } else {
            parts.push_back(embed_tokens(
                seq.tokens, Var::leaf(const_cast<Param&>(*table_for(m, 0)))));
        }
    }
    return parts.size() == 1 ? parts[0] : ad::concat_rows(parts);
}

Var BlockEmbedder::embed_action(const tok::TokenSequence& act) const {
    if (static_cast<int>(act.tokens.size()) != act_.token_count())
        throw std::invalid_argument("embed_action: token count mismatch");
    return embed_tokens(act.tokens,
                        Var::leaf(const_cast<Param&>(action_table_)));
}

Var BlockEmbedder::assemble_block(const std::vector<tok::TokenSequence>& obs,
                                  const tok::TokenSequence& act) const {
    std::vector<Var> parts{embed_observation(obs), embed_action(act)};
    return ad::concat_rows(parts);
}

void BlockEmbedder::embed_observation_raw(
    const std::vector<tok::TokenSequence>& obs, double* out) const {
    if (obs.size() != specs_.size())
        throw std::invalid_argument("embed_observation_raw: modality count mismatch");
    double* row = out;
    for (std::size_t m = 0; m < specs_.size(); ++m) {
        const auto& spec = specs_[m];
        const auto& seq = obs[m];
        if (seq.positions() != spec.token_count)
            throw std::invalid_argument("embed_observation_raw: token count mismatch");
        for (int p = 0; p < spec.token_count; ++p, row += d_model_) {
            if (spec.kind == tok::ModalityKind::categorical_2d) {
                for (int j = 0; j < d_model_; ++j) row[j] = 0.0;
                for (int c = 0; c < spec.channels; ++c) {
                    const int t = seq.tokens[p * spec.channels + c];
                    const double* src = table_for(m, c)->value.data() +
                                        static_cast<std::int64_t>(t) * d_model_;
                    for (int j = 0; j < d_model_; ++j) row[j] += src[j];
                }
                const double inv = 1.0 / spec.channels;
                for (int j = 0; j < d_model_; ++j) row[j] *= inv;
            } else {
                const int t = seq.tokens[p];
                const double* src = table_for(m, 0)->value.data() +
                                    static_cast<std::int64_t>(t) * d_model_;
                for (int j = 0; j < d_model_; ++j) row[j] = src[j];
            }
        }
    }
}

void BlockEmbedder::assemble_block_raw(
    const std::vector<tok::TokenSequence>& obs, const tok::TokenSequence& act,
    double* out) const {
    embed_observation_raw(obs, out);
    double* row = out + static_cast<std::int64_t>(obs_positions_) * d_model_;
    for (std::size_t i = 0; i < act.tokens.size(); ++i, row += d_model_) {
        const double* src =
            action_table_.value.data() +
            static_cast<std::int64_t>(act.tokens[i]) * d_model_;
        for (int j = 0; j < d_model_; ++j) row[j] = src[j];
    }
}

std::vector<Param*> BlockEmbedder::params() {
    std::vector<Param*> out;
    for (auto& mod : tables_)
        for (auto& t : mod) out.push_back(&t);
    out.push_back(&action_table_);
    return out;
}

}  // namespace tbwm::blocks
