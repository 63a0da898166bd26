#include "tbwm/controller.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tbwm/io.hpp"
#include "tbwm/optim.hpp"

namespace tbwm::ctrl {

using ad::Param;
using ad::Var;

void ControllerConfig::validate() const {
    if (latent_dim < 1 || cat_embed_dim < 1 || image_encoder_dim < 1)
        throw std::invalid_argument("ControllerConfig: positive dims required");
    if (gamma < 0.0 || gamma > 1.0 || lambda < 0.0 || lambda > 1.0)
        throw std::invalid_argument("ControllerConfig: gamma/lambda outside [0, 1]");
    if (entropy_weight < 0.0)
        throw std::invalid_argument("ControllerConfig: negative entropy weight");
    if (percentile_window < 1)
        throw std::invalid_argument("ControllerConfig: percentile window < 1");
    if (value_bins < 2 || !(value_lo < value_hi) || !(sigma > 0.0))
        throw std::invalid_argument("ControllerConfig: bad value bin spec");
}

std::vector<double> lambda_returns(const std::vector<double>& rewards,
                                   const std::vector<std::uint8_t>& dones,
                                   const std::vector<double>& values,
                                   double gamma, double lambda) {
    const std::size_t H = rewards.size();
    if (dones.size() != H || values.size() != H)
        throw std::invalid_argument("lambda_returns: length mismatch");
    if (H == 0) return {};
    // G_H = V_H; G_t = r_t + gamma (1-d_t)((1-lambda) V_{t+1} + lambda G_{t+1}).
    // A terminated step bootstraps nothing through its (1 - d_t) factor.
    std::vector<double> g(H);
    g[H - 1] = values[H - 1];
    for (int t = static_cast<int>(H) - 2; t >= 0; --t)
        g[t] = rewards[t] + gamma * (1.0 - dones[t]) *
                                ((1.0 - lambda) * values[t + 1] +
                                 lambda * g[t + 1]);
    return g;
}

double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw std::invalid_argument("percentile: empty input");
    std::sort(values.begin(), values.end());
    const double rank = std::clamp(q, 0.0, 100.0) / 100.0 *
                        (static_cast<double>(values.size()) - 1.0);
    const std::size_t lo = static_cast<std::size_t>(rank);
    if (lo + 1 >= values.size()) return values.back();
    const double frac = rank - static_cast<double>(lo);
    return values[lo] + (values[lo + 1] - values[lo]) * frac;
}

void ReturnScaleTracker::update(const std::vector<double>& batch_returns) {
    if (batch_returns.empty()) return;
    entries_.emplace_back(percentile(batch_returns, 2.5),
                          percentile(batch_returns, 97.5));
    while (static_cast<int>(entries_.size()) > window_) entries_.pop_front();
}

double ReturnScaleTracker::scale() const {
    if (entries_.empty()) return 1.0;
    double lo = 0.0, hi = 0.0;
    for (const auto& [p25, p975] : entries_) {
        lo += p25;
        hi += p975;
    }
    const double n = static_cast<double>(entries_.size());
    return std::max(1.0, hi / n - lo / n);
}

void ReturnScaleTracker::save(std::ostream& os) const {
    io::write_i64(os, window_);
    io::write_u64(os, entries_.size());
    for (const auto& [a, b] : entries_) {
        io::write_f64(os, a);
        io::write_f64(os, b);
    }
}

void ReturnScaleTracker::load(std::istream& is) {
    window_ = static_cast<int>(io::read_i64(is));
    entries_.clear();
    const auto n = io::read_u64(is);
    for (std::uint64_t i = 0; i < n; ++i) {
        const double a = io::read_f64(is);
        const double b = io::read_f64(is);
        entries_.emplace_back(a, b);
    }
}

// ---------------------------------------------------------------------------

Var Controller::Linear::forward(const Var& x) const {
    return ad::add_rowvec(ad::matmul(x, Var::leaf(const_cast<Param&>(w))),
                          Var::leaf(const_cast<Param&>(b)));
}

Var Controller::Mlp::forward(const Var& x) const {
    Var cur = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        cur = layers[i].forward(cur);
        if (i + 1 < layers.size()) cur = ad::silu(cur);
    }
    return cur;
}

Controller::Controller(ControllerConfig cfg,
                       std::vector<tok::ModalitySpec> specs,
                       tok::ActionSpec action, Rng& init,
                       Param* image_codebook)
    : cfg_(cfg),
      specs_(std::move(specs)),
      action_(action),
      bins_(rac::build_bins(cfg.value_bins, cfg.value_lo, cfg.value_hi)),
      levels_(tok::build_quant_levels()),
      actor_head_{Param("ctrl.actor.w", Tensor(1, 1)),
                  Param("ctrl.actor.b", Tensor(1, 1))},
      critic_head_{Param("ctrl.critic.w", Tensor(1, 1)),
                   Param("ctrl.critic.b", Tensor(1, 1))},
      image_codebook_(image_codebook) {
    cfg_.validate();
    image_side_.assign(specs_.size(), 0);
    for (std::size_t m = 0; m < specs_.size(); ++m) {
        const auto& s = specs_[m];
        s.validate();
        if (s.kind == tok::ModalityKind::image) {
            if (!image_codebook_)
                throw std::invalid_argument(
                    "Controller: image modality requires the codebook table");
            const int side =
                static_cast<int>(std::lround(std::sqrt(s.token_count)));
            if (side * side != s.token_count)
                throw std::invalid_argument(
                    "Controller: image token count must be a square grid");
            image_side_[m] = side;
        }
    }
    towers_.push_back(make_tower("ctrl.t0", init));
    if (!cfg_.shared_backbone) towers_.push_back(make_tower("ctrl.t1", init));

    const int d = cfg_.latent_dim;
    const int n_actions = action_.kind == tok::ActionKind::discrete
                              ? action_.count
                              : action_.count * action_.quant_values;
    // zero-initialized output heads: the policy starts uniform and the
    // critic decodes to exactly 0, so early return targets carry no noise
    actor_head_ = {Param("ctrl.actor.w", Tensor(d, n_actions)),
                   Param("ctrl.actor.b", Tensor(1, n_actions))};
    critic_head_ = {Param("ctrl.critic.w", Tensor(d, cfg_.value_bins)),
                    Param("ctrl.critic.b", Tensor(1, cfg_.value_bins))};
}

Controller::Tower Controller::make_tower(const std::string& prefix, Rng& init) {
    Tower t{{},
            {},
            {},
            {},
            Param(prefix + ".act_table", Tensor(1, 1)),
            {Param(prefix + ".act_proj.w", Tensor(1, 1)),
             Param(prefix + ".act_proj.b", Tensor(1, 1))},
            Param(prefix + ".lstm_wx", Tensor(1, 1)),
            Param(prefix + ".lstm_wh", Tensor(1, 1)),
            Param(prefix + ".lstm_b", Tensor(1, 1))};
    const int d = cfg_.latent_dim;

    int fusion_in = 0;
    for (std::size_t m = 0; m < specs_.size(); ++m) {
        const auto& spec = specs_[m];
        std::vector<Param> tabs;
        Linear proj{Param(prefix + ".none", Tensor(1, 1)),
                    Param(prefix + ".none_b", Tensor(1, 1))};
        ImageEncoder img{{Param(prefix + ".none_i1", Tensor(1, 1)),
                          Param(prefix + ".none_i1b", Tensor(1, 1))},
                         {Param(prefix + ".none_i2", Tensor(1, 1)),
                          Param(prefix + ".none_i2b", Tensor(1, 1))},
                         {Param(prefix + ".none_i3", Tensor(1, 1)),
                          Param(prefix + ".none_i3b", Tensor(1, 1))},
                         0,
                         0};
        switch (spec.kind) {
            case tok::ModalityKind::categorical:
            case tok::ModalityKind::categorical_2d:
                for (std::size_t c = 0; c < spec.vocab_sizes.size(); ++c)
                    tabs.emplace_back(
                        prefix + ".tab" + std::to_string(m) + "_" + std::to_string(c),
                        init_normal(spec.vocab_sizes[c], cfg_.cat_embed_dim, 0.02,
                                    init));
                fusion_in += spec.token_count * cfg_.cat_embed_dim;
                break;
            case tok::ModalityKind::continuous_vector:
                proj = {Param(prefix + ".cont" + std::to_string(m) + ".w",
                              init_fan_in(spec.token_count, cfg_.cat_embed_dim,
                                          init)),
                        Param(prefix + ".cont" + std::to_string(m) + ".b",
                              Tensor(1, cfg_.cat_embed_dim))};
                fusion_in += cfg_.cat_embed_dim;
                break;
            case tok::ModalityKind::image: {
                // two 3x3 stride-1 convolutions narrowing the channels, then
                // a linear layer onto the fusion vector
                const int dcb = image_codebook_->value.cols();
                img.c1 = std::max(4, dcb / 2);
                img.c2 = std::max(4, dcb / 4);
                img.conv1 = {Param(prefix + ".img" + std::to_string(m) + ".c1w",
                                   init_fan_in(dcb * 9, img.c1, init)
                                       .reshaped({img.c1, dcb * 9})),
                             Param(prefix + ".img" + std::to_string(m) + ".c1b",
                                   Tensor(1, img.c1))};
                img.conv2 = {Param(prefix + ".img" + std::to_string(m) + ".c2w",
                                   init_fan_in(img.c1 * 9, img.c2, init)
                                       .reshaped({img.c2, img.c1 * 9})),
                             Param(prefix + ".img" + std::to_string(m) + ".c2b",
                                   Tensor(1, img.c2))};
                img.out = {Param(prefix + ".img" + std::to_string(m) + ".ow",
                                 init_fan_in(img.c2 * spec.token_count,
                                             cfg_.image_encoder_dim, init)),
                           Param(prefix + ".img" + std::to_string(m) + ".ob",
                                 Tensor(1, cfg_.image_encoder_dim))};
                fusion_in += cfg_.image_encoder_dim;
                break;
            }
        }
        t.tables.push_back(std::move(tabs));
        t.cont_proj.push_back(std::move(proj));
        t.image_enc.push_back(std::move(img));
    }

    int in = fusion_in;
    for (std::size_t li = 0; li < cfg_.fusion_hidden.size(); ++li) {
        const int h = cfg_.fusion_hidden[li];
        t.fusion.layers.push_back(
            {Param(prefix + ".fuse" + std::to_string(li) + ".w",
                   init_fan_in(in, h, init)),
             Param(prefix + ".fuse" + std::to_string(li) + ".b", Tensor(1, h))});
        in = h;
    }
    t.fusion.layers.push_back(
        {Param(prefix + ".fuse_out", init_fan_in(in, d, init)),
         Param(prefix + ".fuse_out_b", Tensor(1, d))});

    if (action_.kind == tok::ActionKind::discrete) {
        t.act_table = Param(prefix + ".act_table",
                            init_normal(action_.count, d, 0.02, init));
    } else {
        t.act_proj = {Param(prefix + ".act_proj.w",
                            init_fan_in(action_.count, d, init)),
                      Param(prefix + ".act_proj.b", Tensor(1, d))};
    }

    t.lstm_wx = Param(prefix + ".lstm_wx", init_fan_in(d, 4 * d, init));
    t.lstm_wh = Param(prefix + ".lstm_wh", init_fan_in(d, 4 * d, init));
    Tensor bias(1, 4 * d);
    for (int j = d; j < 2 * d; ++j) bias[j] = 1.0;  // forget-gate bias
    t.lstm_b = Param(prefix + ".lstm_b", bias);
    return t;
}

Controller::State Controller::initial_state(int batch) const {
    State s;
    for (int i = 0; i < num_towers(); ++i)
        s.towers.emplace_back(Var::constant(Tensor(batch, cfg_.latent_dim)),
                              Var::constant(Tensor(batch, cfg_.latent_dim)));
    return s;
}

Var Controller::encode_observations(
    const std::vector<std::vector<tok::TokenSequence>>& obs_batch,
    int tower) const {
    const int B = static_cast<int>(obs_batch.size());
    if (B == 0) throw std::invalid_argument("encode_observations: empty batch");
    const Tower& t = towers_[tower];
    std::vector<Var> parts;
    for (std::size_t m = 0; m < specs_.size(); ++m) {
        const auto& spec = specs_[m];
        switch (spec.kind) {
            case tok::ModalityKind::categorical:
            case tok::ModalityKind::categorical_2d: {
                // per-channel lookup, averaged across channels, flattened
                Var acc;
                for (int c = 0; c < spec.channels; ++c) {
                    std::vector<int> idx;
                    idx.reserve(static_cast<std::size_t>(B) * spec.token_count);
                    for (int b = 0; b < B; ++b) {
                        const auto& seq = obs_batch[b][m];
                        if (seq.positions() != spec.token_count)
                            throw std::invalid_argument(
                                "encode_observations: token count mismatch");
                        for (int j = 0; j < spec.token_count; ++j)
                            idx.push_back(seq.tokens[j * spec.channels + c]);
                    }
                    Var e = ad::gather_rows(
                        Var::leaf(const_cast<Param&>(t.tables[m][c])), idx);
                    acc = c == 0 ? e : ad::add(acc, e);
                }
                if (spec.channels > 1) acc = ad::scale(acc, 1.0 / spec.channels);
                parts.push_back(
                    ad::reshape(acc, B, spec.token_count * cfg_.cat_embed_dim));
                break;
            }
            case tok::ModalityKind::continuous_vector: {
                // reconstruct the continuous vector, then project
                Tensor vals(B, spec.token_count);
                for (int b = 0; b < B; ++b) {
                    const auto x = tok::dequantize_vector(
                        obs_batch[b][m].tokens, levels_, spec.bounded);
                    for (int j = 0; j < spec.token_count; ++j)
                        vals.at(b, j) = x[j];
                }
                parts.push_back(t.cont_proj[m].forward(Var::constant(vals)));
                break;
            }
            case tok::ModalityKind::image: {
                const int side = image_side_[m];
                std::vector<int> idx;
                idx.reserve(static_cast<std::size_t>(B) * spec.token_count);
                for (int b = 0; b < B; ++b)
                    for (int tkn : obs_batch[b][m].tokens) idx.push_back(tkn);
                // the codebook belongs to the tokenizer; the controller
                // never optimizes it
                Var rows = ad::gather_rows(
                    ad::stopgrad(Var::leaf(*image_codebook_)), idx);
                const int dcb = image_codebook_->value.cols();
                Var grid = ad::rows_to_nchw(rows, dcb, side, side);
                const auto& enc = t.image_enc[m];
                Var c1 = ad::silu(ad::conv2d(grid, dcb, side, side,
                                             Var::leaf(const_cast<Param&>(enc.conv1.w)),
                                             Var::leaf(const_cast<Param&>(enc.conv1.b)),
                                             3, 3, 1, 1, 1, 1, 1));
                Var c2 = ad::silu(ad::conv2d(c1, enc.c1, side, side,
                                             Var::leaf(const_cast<Param&>(enc.conv2.w)),
                                             Var::leaf(const_cast<Param&>(enc.conv2.b)),
                                             3, 3, 1, 1, 1, 1, 1));
                parts.push_back(ad::silu(enc.out.forward(c2)));
                break;
            }
        }
    }
    Var cat = parts.size() == 1 ? parts[0] : ad::concat_cols(parts);
    return t.fusion.forward(cat);
}

Var Controller::encode_actions(const std::vector<tok::TokenSequence>& act_batch,
                               int tower) const {
    const int B = static_cast<int>(act_batch.size());
    const Tower& t = towers_[tower];
    if (action_.kind == tok::ActionKind::discrete) {
        std::vector<int> idx(B);
        for (int b = 0; b < B; ++b) {
            if (act_batch[b].tokens.size() != 1)
                throw std::invalid_argument("encode_actions: expected one token");
            idx[b] = act_batch[b].tokens[0];
        }
        return ad::gather_rows(Var::leaf(const_cast<Param&>(t.act_table)), idx);
    }
    Tensor vals(B, action_.count);
    for (int b = 0; b < B; ++b) {
        for (int j = 0; j < action_.count; ++j)
            vals.at(b, j) =
                tok::action_grid_value(act_batch[b].tokens[j], action_.quant_values);
    }
    return t.act_proj.forward(Var::constant(vals));
}

std::pair<Var, Var> Controller::lstm_cell(const Tower& t, const Var& x,
                                          const Var& h, const Var& c) const {
    const int d = cfg_.latent_dim;
    Var gates = ad::add_rowvec(
        ad::add(ad::matmul(x, Var::leaf(const_cast<Param&>(t.lstm_wx))),
                ad::matmul(h, Var::leaf(const_cast<Param&>(t.lstm_wh)))),
        Var::leaf(const_cast<Param&>(t.lstm_b)));
    Var i = ad::sigmoid_v(ad::slice_cols(gates, 0, d));
    Var f = ad::sigmoid_v(ad::slice_cols(gates, d, 2 * d));
    Var g = ad::tanh_v(ad::slice_cols(gates, 2 * d, 3 * d));
    Var o = ad::sigmoid_v(ad::slice_cols(gates, 3 * d, 4 * d));
    Var c2 = ad::add(ad::mul(f, c), ad::mul(i, g));
    Var h2 = ad::mul(o, ad::tanh_v(c2));
    return {h2, c2};
}

Controller::StepOut Controller::step(
    const State& state,
    const std::vector<std::vector<tok::TokenSequence>>& obs_batch,
    const std::vector<tok::TokenSequence>& prev_actions) const {
    StepOut out;
    out.state.towers.resize(num_towers());
    for (int tw = 0; tw < num_towers(); ++tw) {
        Var h = state.towers[tw].first;
        Var c = state.towers[tw].second;
        if (!prev_actions.empty()) {
            Var a = encode_actions(prev_actions, tw);
            std::tie(h, c) = lstm_cell(towers_[tw], a, h, c);
        }
        Var e = encode_observations(obs_batch, tw);
        std::tie(h, c) = lstm_cell(towers_[tw], e, h, c);
        out.state.towers[tw] = {h, c};
    }
    out.actor_logits = actor_head_.forward(out.state.towers[actor_tower()].first);
    out.value_logits =
        critic_head_.forward(out.state.towers[critic_tower()].first);
    return out;
}

Controller::SampledAction Controller::sample_actions(const Var& actor_logits,
                                                     double temperature,
                                                     Rng& rng) const {
    if (!(temperature > 0.0))
        throw std::invalid_argument("sample_actions: temperature must be > 0");
    const int B = actor_logits.rows();
    const bool discrete = action_.kind == tok::ActionKind::discrete;
    const int dims = discrete ? 1 : action_.count;
    const int support = discrete ? action_.count : action_.quant_values;

    Var flat = discrete ? actor_logits
                        : ad::reshape(actor_logits, B * dims, support);
    Var scaled = ad::scale(flat, 1.0 / temperature);
    Var logp = ad::log_softmax_rows(scaled);
    Var probs = ad::softmax_rows(scaled);

    std::vector<int> chosen(static_cast<std::size_t>(B) * dims);
    for (int r = 0; r < B * dims; ++r) {
        std::vector<double> w(support);
        for (int k = 0; k < support; ++k) w[k] = probs.value().at(r, k);
        chosen[r] = rng.categorical(w);
    }

    SampledAction out;
    Var lp_rows = ad::select_cols(logp, chosen);              // (B*dims, 1)
    Var ent_rows = ad::scale(ad::sum_rows(ad::mul(probs, logp)), -1.0);
    if (discrete) {
        out.log_prob = lp_rows;
        out.entropy = ent_rows;
    } else {
        out.log_prob = ad::sum_rows(ad::reshape(lp_rows, B, dims));
        out.entropy = ad::sum_rows(ad::reshape(ent_rows, B, dims));
    }

    out.tokens.resize(B);
    out.actions.resize(B);
    for (int b = 0; b < B; ++b) {
        tok::TokenSequence seq;
        seq.modality = -1;
        for (int j = 0; j < dims; ++j) seq.tokens.push_back(chosen[b * dims + j]);
        if (discrete) {
            out.actions[b].discrete = seq.tokens[0];
        } else {
            for (int t : seq.tokens)
                out.actions[b].continuous.push_back(
                    tok::action_grid_value(t, action_.quant_values));
        }
        out.tokens[b] = std::move(seq);
    }
    return out;
}

std::vector<double> Controller::decode_values(const Var& value_logits) const {
    const int B = value_logits.rows();
    std::vector<double> out(B);
    std::vector<double> logits(cfg_.value_bins);
    for (int b = 0; b < B; ++b) {
        for (int k = 0; k < cfg_.value_bins; ++k)
            logits[k] = value_logits.value().at(b, k);
        out[b] = rac::decode_value(logits, bins_);
    }
    return out;
}

Var Controller::policy_loss(const std::vector<Var>& log_probs,
                            const std::vector<Var>& entropies,
                            const std::vector<std::vector<double>>& advantages,
                            const std::vector<std::vector<double>>& mask,
                            double scale_c) const {
    const std::size_t H = log_probs.size();
    if (entropies.size() != H || advantages.size() != H || mask.size() != H)
        throw std::invalid_argument("policy_loss: length mismatch");
    const double denom = std::max(1.0, scale_c);
    Var total;
    int B = 0;
    for (std::size_t t = 0; t < H; ++t) {
        B = log_probs[t].rows();
        std::vector<double> wa(B), we(B);
        for (int b = 0; b < B; ++b) {
            wa[b] = -mask[t][b] * advantages[t][b] / denom;
            we[b] = -mask[t][b] * cfg_.entropy_weight;
        }
        Var term = ad::add(ad::sum(ad::mul_colvec_const(log_probs[t], wa)),
                           ad::sum(ad::mul_colvec_const(entropies[t], we)));
        total = total.defined() ? ad::add(total, term) : term;
    }
    return ad::scale(total, 1.0 / std::max(1, B));
}

Var Controller::critic_loss(const std::vector<Var>& value_logits,
                            const std::vector<std::vector<double>>& returns,
                            const std::vector<std::vector<double>>& mask) const {
    const std::size_t H = value_logits.size();
    if (returns.size() != H || mask.size() != H)
        throw std::invalid_argument("critic_loss: length mismatch");
    Var total;
    double count = 0.0;
    for (std::size_t t = 0; t < H; ++t) {
        const int B = value_logits[t].rows();
        Tensor targets(B, cfg_.value_bins);
        std::vector<double> w(B);
        for (int b = 0; b < B; ++b) {
            const auto probs = rac::hl_gauss_target(returns[t][b], bins_, cfg_.sigma);
            for (int k = 0; k < cfg_.value_bins; ++k) targets.at(b, k) = probs[k];
            w[b] = mask[t][b];
            count += mask[t][b];
        }
        Var ce = ad::ce_rows_dist(value_logits[t], targets);
        Var term = ad::sum(ad::mul_colvec_const(ce, w));
        total = total.defined() ? ad::add(total, term) : term;
    }
    return ad::scale(total, 1.0 / std::max(1.0, count));
}

std::vector<Param*> Controller::params() {
    std::vector<Param*> out;
    for (auto& t : towers_) {
        for (auto& mod : t.tables)
            for (auto& tab : mod) out.push_back(&tab);
        for (std::size_t m = 0; m < specs_.size(); ++m) {
            if (specs_[m].kind == tok::ModalityKind::continuous_vector) {
                out.push_back(&t.cont_proj[m].w);
                out.push_back(&t.cont_proj[m].b);
            } else if (specs_[m].kind == tok::ModalityKind::image) {
                for (Linear* l :
                     {&t.image_enc[m].conv1, &t.image_enc[m].conv2,
                      &t.image_enc[m].out}) {
                    out.push_back(&l->w);
                    out.push_back(&l->b);
                }
            }
        }
        for (auto& l : t.fusion.layers) {
            out.push_back(&l.w);
            out.push_back(&l.b);
        }
        if (action_.kind == tok::ActionKind::discrete)
            out.push_back(&t.act_table);
        else {
            out.push_back(&t.act_proj.w);
            out.push_back(&t.act_proj.b);
        }
        out.push_back(&t.lstm_wx);
        out.push_back(&t.lstm_wh);
        out.push_back(&t.lstm_b);
    }
    out.push_back(&actor_head_.w);
    out.push_back(&actor_head_.b);
    out.push_back(&critic_head_.w);
    out.push_back(&critic_head_.b);
    return out;
}

}  // namespace tbwm::ctrl
