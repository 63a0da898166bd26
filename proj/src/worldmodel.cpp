#include "tbwm/worldmodel.hpp"

#include <cmath>
#include <stdexcept>

#include "tbwm/kernels.hpp"
#include "tbwm/optim.hpp"

namespace tbwm::wm {

using ad::Param;
using ad::Var;

double jsd(std::span<const std::vector<double>> dists) {
    if (dists.size() < 2)
        throw std::invalid_argument("jsd: need at least two distributions");
    const std::size_t support = dists[0].size();
    for (const auto& d : dists)
        if (d.size() != support)
            throw std::invalid_argument("jsd: support mismatch");
    const double inv_n = 1.0 / static_cast<double>(dists.size());
    double h_mean = 0.0, mean_h = 0.0;
    for (std::size_t k = 0; k < support; ++k) {
        double m = 0.0;
        for (const auto& d : dists) m += d[k];
        m *= inv_n;
        if (m > 0.0) h_mean -= m * std::log(m);
    }
    for (const auto& d : dists) {
        double h = 0.0;
        for (double p : d)
            if (p > 0.0) h -= p * std::log(p);
        mean_h += h;
    }
    mean_h *= inv_n;
    return std::max(0.0, h_mean - mean_h);
}

double disagreement_signal(std::span<const TokenDistributions> member_dists) {
    if (member_dists.size() < 2)
        throw std::invalid_argument("disagreement_signal: need >= 2 members");
    const std::size_t positions = member_dists[0].size();
    double acc = 0.0;
    std::size_t count = 0;
    std::vector<std::vector<double>> stack(member_dists.size());
    for (std::size_t p = 0; p < positions; ++p) {
        const std::size_t channels = member_dists[0][p].size();
        for (std::size_t c = 0; c < channels; ++c) {
            for (std::size_t m = 0; m < member_dists.size(); ++m)
                stack[m] = member_dists[m][p][c];
            acc += jsd(stack);
            ++count;
        }
    }
    return count == 0 ? 0.0 : acc / static_cast<double>(count);
}

void MlpRaw::forward(const double* x, int rows, double* y) const {
    std::vector<double> hid(static_cast<std::size_t>(rows) * dh);
    kernels::linear(x, w1.data(), b1.data(), hid.data(), rows, din, dh);
    for (auto& v : hid) v = v / (1.0 + std::exp(-v));
    kernels::linear(hid.data(), w2.data(), b2.data(), y, rows, dh, dout);
}

MlpHead::MlpHead(const std::string& name, int din, int dh, int dout, Rng& init)
    : w1(name + ".w1", init_fan_in(din, dh, init)),
      b1(name + ".b1", Tensor(1, dh)),
      w2(name + ".w2", init_fan_in(dh, dout, init)),
      b2(name + ".b2", Tensor(1, dout)) {}

Var MlpHead::forward(const Var& x) const {
    Var hid = ad::silu(ad::add_rowvec(
        ad::matmul(x, Var::leaf(const_cast<Param&>(w1))),
        Var::leaf(const_cast<Param&>(b1))));
    return ad::add_rowvec(ad::matmul(hid, Var::leaf(const_cast<Param&>(w2))),
                          Var::leaf(const_cast<Param&>(b2)));
}

void MlpHead::export_raw(MlpRaw& out) const {
    out.din = w1.value.rows();
    out.dh = w1.value.cols();
    out.dout = w2.value.cols();
    out.w1.assign(w1.value.data(), w1.value.data() + w1.value.size());
    out.b1.assign(b1.value.data(), b1.value.data() + b1.value.size());
    out.w2.assign(w2.value.data(), w2.value.data() + w2.value.size());
    out.b2.assign(b2.value.data(), b2.value.data() + b2.value.size());
}

void MlpHead::collect(std::vector<Param*>& out) {
    out.push_back(&w1);
    out.push_back(&b1);
    out.push_back(&w2);
    out.push_back(&b2);
}

void WorldModelConfig::validate() const {
    seq.validate();
    if (ensemble_size < 2)
        throw std::invalid_argument("WorldModelConfig: ensemble size must be >= 2");
    if (reward_bins < 2 || !(reward_lo < reward_hi) || !(sigma > 0.0))
        throw std::invalid_argument("WorldModelConfig: bad reward bin spec");
}

WorldModel::WorldModel(WorldModelConfig cfg,
                       std::vector<tok::ModalitySpec> specs,
                       tok::ActionSpec action, Rng& init,
                       Param* image_codebook)
    : cfg_(cfg),
      specs_(specs),
      bins_(rac::build_bins(cfg.reward_bins, cfg.reward_lo, cfg.reward_hi)),
      embedder_(specs, action, cfg.seq.d_model, init, "wm"),
      // the decay schedule is expressed in block units, so K must be the
      // actual observation sequence length
      seq_((cfg_.seq.tokens_per_obs = embedder_.obs_positions(), cfg_.seq), init),
      u_("wm.u", init_normal(embedder_.obs_positions(), cfg.seq.d_model, 0.02,
                             init)),
      reward_head_("wm.reward", cfg.seq.d_model, 2 * cfg.seq.d_model,
                   cfg.reward_bins, init),
      done_head_("wm.done", cfg.seq.d_model, 2 * cfg.seq.d_model, 2, init) {
    cfg_.validate();
    // zero output layers: reward decodes to 0 and termination starts at 0.5
    // until trained, keeping early imagination targets sane
    reward_head_.w2.value.fill(0.0);
    reward_head_.b2.value.fill(0.0);
    done_head_.w2.value.fill(0.0);
    done_head_.b2.value.fill(0.0);
    int pos = 0;
    for (const auto& s : specs_) {
        ranges_.push_back({pos, s.token_count});
        pos += s.token_count;
    }
    if (image_codebook) {
        for (std::size_t m = 0; m < specs_.size(); ++m)
            if (specs_[m].kind == tok::ModalityKind::image)
                embedder_.attach_external_table(static_cast<int>(m),
                                                image_codebook);
    }
    const int d = cfg_.seq.d_model;
    const int hidden = 2 * d;
    for (std::size_t m = 0; m < specs_.size(); ++m) {
        std::vector<MlpHead> heads;
        for (std::size_t c = 0; c < specs_[m].vocab_sizes.size(); ++c)
            heads.emplace_back("wm.obs" + std::to_string(m) + "_c" +
                                   std::to_string(c),
                               d, hidden, specs_[m].vocab_sizes[c], init);
        obs_heads_.push_back(std::move(heads));
    }
    for (int e = 0; e < cfg_.ensemble_size; ++e) {
        std::vector<std::vector<MlpHead>> member;
        for (std::size_t m = 0; m < specs_.size(); ++m) {
            std::vector<MlpHead> heads;
            for (std::size_t c = 0; c < specs_[m].vocab_sizes.size(); ++c)
                heads.emplace_back("wm.ens" + std::to_string(e) + ".obs" +
                                       std::to_string(m) + "_c" +
                                       std::to_string(c),
                                   d, hidden, specs_[m].vocab_sizes[c], init);
            member.push_back(std::move(heads));
        }
        ens_.push_back(std::move(member));
    }
}

std::vector<Param*> WorldModel::backbone_params() {
    std::vector<Param*> out = seq_.params();
    for (Param* p : embedder_.params()) out.push_back(p);
    out.push_back(&u_);
    for (auto& mod : obs_heads_)
        for (auto& h : mod) h.collect(out);
    reward_head_.collect(out);
    done_head_.collect(out);
    return out;
}

std::vector<Param*> WorldModel::ensemble_params() {
    std::vector<Param*> out;
    for (auto& member : ens_)
        for (auto& mod : member)
            for (auto& h : mod) h.collect(out);
    return out;
}

std::vector<Param*> WorldModel::params() {
    auto out = backbone_params();
    for (Param* p : ensemble_params()) out.push_back(p);
    return out;
}

WorldModel::LossOut WorldModel::loss(
    const std::vector<replay::TrajectorySegment>& batch, Rng* dropout_rng) {
    const int B = static_cast<int>(batch.size());
    if (B == 0) throw std::invalid_argument("wm loss: empty batch");
    const int T = batch[0].length();
    const int K = obs_positions();
    const int len = block_len();
    for (const auto& seg : batch)
        if (seg.length() != T)
            throw std::invalid_argument("wm loss: misaligned horizon");

    // Embed all blocks in (example, step) order.
    std::vector<Var> blocks_v;
    blocks_v.reserve(static_cast<std::size_t>(B) * T);
    for (int e = 0; e < B; ++e)
        for (int t = 0; t < T; ++t)
            blocks_v.push_back(
                embedder_.assemble_block(batch[e].obs[t], batch[e].act[t]));
    Var x = ad::concat_rows(blocks_v);
    if (dropout_rng && cfg_.seq.dropout > 0.0)
        x = ad::dropout(x, cfg_.seq.dropout, *dropout_rng);

    auto pop = seq_.pop_training_pass(x, Var::leaf(u_), B, T, len, dropout_rng);

    LossOut out;
    out.per_example.assign(B, 0.0);
    std::vector<Var> terms;

    // Routes u-output rows of examples [e0, e1) to the given head set and
    // appends the weighted cross-entropy terms. The u-pass p predicts the
    // observation of step p; per-position weight = valid / K.
    const auto obs_terms_for = [&](const std::vector<std::vector<MlpHead>>& heads,
                                   const Var& features, int e0, int e1,
                                   double& value_acc) {
        for (std::size_t m = 0; m < specs_.size(); ++m) {
            const auto& spec = specs_[m];
            const Range r = ranges_[m];
            std::vector<int> rows;
            std::vector<double> weights;
            std::vector<int> exid;
            rows.reserve(static_cast<std::size_t>(e1 - e0) * T * r.count);
            weights.reserve(rows.capacity());
            exid.reserve(rows.capacity());
            for (int e = e0; e < e1; ++e)
                for (int p = 0; p < T; ++p) {
                    const double wv =
                        batch[e].valid[p] ? 1.0 / static_cast<double>(K) : 0.0;
                    for (int j = 0; j < r.count; ++j) {
                        rows.push_back(((e * T) + p) * K + r.start + j);
                        weights.push_back(wv);
                        exid.push_back(e);
                    }
                }
            Var g = ad::gather_rows(features, rows);
            for (int c = 0; c < static_cast<int>(spec.vocab_sizes.size()); ++c) {
                std::vector<int> targets;
                targets.reserve(rows.size());
                for (int e = e0; e < e1; ++e)
                    for (int p = 0; p < T; ++p)
                        for (int j = 0; j < r.count; ++j)
                            targets.push_back(
                                batch[e].obs[p][m].tokens[j * spec.channels + c]);
                Var logits = heads[m][c].forward(g);
                Var ce = ad::ce_rows(logits, targets);
                for (std::size_t i = 0; i < rows.size(); ++i) {
                    const double v = ce.value()[i] * weights[i];
                    out.per_example[exid[i]] += v;
                    value_acc += v;
                }
                terms.push_back(ad::sum(ad::mul_colvec_const(ce, weights)));
            }
        }
    };

    double obs_value = 0.0;
    obs_terms_for(obs_heads_, pop.u_out, 0, B, obs_value);
    out.obs = obs_value / B;

    // --- reward / termination heads on the last u row of each step ---
    {
        Tensor targets(B * T, cfg_.reward_bins);
        std::vector<int> done_targets(static_cast<std::size_t>(B) * T);
        std::vector<double> weights(static_cast<std::size_t>(B) * T);
        for (int e = 0; e < B; ++e)
            for (int p = 0; p < T; ++p) {
                const int row = e * T + p;
                const auto probs =
                    rac::hl_gauss_target(batch[e].reward[p], bins_, cfg_.sigma);
                for (int k = 0; k < cfg_.reward_bins; ++k)
                    targets.at(row, k) = probs[k];
                done_targets[row] = batch[e].done[p] ? 1 : 0;
                weights[row] = batch[e].valid[p] ? 1.0 : 0.0;
            }
        Var rlogits = reward_head_.forward(pop.last_out);
        Var rce = ad::ce_rows_dist(rlogits, targets);
        Var dlogits = done_head_.forward(pop.last_out);
        Var dce = ad::ce_rows(dlogits, done_targets);
        double racc = 0.0, dacc = 0.0;
        for (int row = 0; row < B * T; ++row) {
            racc += rce.value()[row] * weights[row];
            dacc += dce.value()[row] * weights[row];
            out.per_example[row / T] +=
                (rce.value()[row] + dce.value()[row]) * weights[row];
        }
        out.reward = racc / B;
        out.done = dacc / B;
        terms.push_back(ad::sum(ad::mul_colvec_const(rce, weights)));
        terms.push_back(ad::sum(ad::mul_colvec_const(dce, weights)));
    }

    // --- ensemble members on stop-gradient features ---
    // The batch is divided equally among members in contiguous shards.
    {
        Var sg = ad::stopgrad(pop.u_out);
        double ens_value = 0.0;
        const int N = cfg_.ensemble_size;
        const std::size_t first_ens_term = terms.size();
        for (int mbr = 0; mbr < N; ++mbr) {
            const int e0 = static_cast<int>(static_cast<std::int64_t>(mbr) * B / N);
            const int e1 =
                static_cast<int>(static_cast<std::int64_t>(mbr + 1) * B / N);
            if (e0 < e1) obs_terms_for(ens_[mbr], sg, e0, e1, ens_value);
        }
        out.ensemble = ens_value / B;
        Var ens_sum;
        for (std::size_t i = first_ens_term; i < terms.size(); ++i)
            ens_sum = ens_sum.defined() ? ad::add(ens_sum, terms[i]) : terms[i];
        if (ens_sum.defined())
            out.ensemble_total = ad::scale(ens_sum, 1.0 / B);
    }

    Var total;
    for (auto& t : terms) total = total.defined() ? ad::add(total, t) : t;
    out.total = ad::scale(total, 1.0 / B);
    out.total_value = out.total.value()[0];
    return out;
}

void WorldModel::sync_raw() {
    if (!raw_.stack)
        raw_.stack = std::make_unique<seq::RetNetStack<double>>(cfg_.seq);
    seq_.export_weights(raw_.stack->w);
    raw_.u = u_.value.clone();
    raw_.obs_heads.assign(specs_.size(), {});
    for (std::size_t m = 0; m < specs_.size(); ++m) {
        raw_.obs_heads[m].resize(obs_heads_[m].size());
        for (std::size_t c = 0; c < obs_heads_[m].size(); ++c)
            obs_heads_[m][c].export_raw(raw_.obs_heads[m][c]);
    }
    raw_.ens.assign(ens_.size(), {});
    for (std::size_t e = 0; e < ens_.size(); ++e) {
        raw_.ens[e].resize(specs_.size());
        for (std::size_t m = 0; m < specs_.size(); ++m) {
            raw_.ens[e][m].resize(ens_[e][m].size());
            for (std::size_t c = 0; c < ens_[e][m].size(); ++c)
                ens_[e][m][c].export_raw(raw_.ens[e][m][c]);
        }
    }
    reward_head_.export_raw(raw_.reward_head);
    done_head_.export_raw(raw_.done_head);
}

namespace {

TokenDistributions route_heads(
    const std::vector<tok::ModalitySpec>& specs,
    const std::vector<std::vector<MlpRaw>>& heads, const double* y,
    int positions, int d) {
    TokenDistributions dists(positions);
    int pos = 0;
    for (std::size_t m = 0; m < specs.size(); ++m) {
        const auto& spec = specs[m];
        for (int j = 0; j < spec.token_count; ++j) {
            const double* row = y + static_cast<std::int64_t>(pos + j) * d;
            auto& cell = dists[pos + j];
            cell.resize(spec.vocab_sizes.size());
            for (std::size_t c = 0; c < spec.vocab_sizes.size(); ++c) {
                const int vocab = spec.vocab_sizes[c];
                std::vector<double> logits(vocab);
                heads[m][c].forward(row, 1, logits.data());
                cell[c].resize(vocab);
                kernels::softmax_rows(logits.data(), cell[c].data(), 1, vocab);
            }
        }
        pos += spec.token_count;
    }
    if (pos != positions)
        throw std::invalid_argument("route_heads: position/modality mismatch");
    return dists;
}

}  // namespace

TokenDistributions WorldModel::predict_obs_tokens(const double* y,
                                                  int positions) const {
    return route_heads(specs_, raw_.obs_heads, y, positions, cfg_.seq.d_model);
}

std::vector<TokenDistributions> WorldModel::predict_ensemble_tokens(
    const double* y, int positions) const {
    std::vector<TokenDistributions> out;
    out.reserve(raw_.ens.size());
    for (const auto& member : raw_.ens)
        out.push_back(route_heads(specs_, member, y, positions, cfg_.seq.d_model));
    return out;
}

std::pair<double, double> WorldModel::predict_reward_termination(
    const double* last_row) const {
    std::vector<double> rlogits(cfg_.reward_bins);
    raw_.reward_head.forward(last_row, 1, rlogits.data());
    const double reward = rac::decode_value(rlogits, bins_);
    double dlogits[2];
    raw_.done_head.forward(last_row, 1, dlogits);
    const double mx = std::max(dlogits[0], dlogits[1]);
    const double e0 = std::exp(dlogits[0] - mx), e1 = std::exp(dlogits[1] - mx);
    return {reward, e1 / (e0 + e1)};
}

}  // namespace tbwm::wm
