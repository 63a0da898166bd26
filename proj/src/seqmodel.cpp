#include "tbwm/seqmodel.hpp"

#include <cmath>

#include "tbwm/optim.hpp"

namespace tbwm::seq {

DecayConfig compute_decays(int tokens_per_obs, double eta_min, double eta_max,
                           int n_heads) {
    if (tokens_per_obs < 1)
        throw std::invalid_argument("compute_decays: K must be >= 1");
    if (!(eta_min > 0.0) || eta_max < eta_min)
        throw std::invalid_argument("compute_decays: need 0 < eta_min <= eta_max");
    if (n_heads < 1)
        throw std::invalid_argument("compute_decays: need at least one head");
    DecayConfig cfg;
    cfg.eta_min = eta_min;
    cfg.eta_max = eta_max;
    cfg.heads = n_heads;
    const double a = std::log2(tokens_per_obs * eta_min);
    const double b = std::log2(tokens_per_obs * eta_max);
    cfg.eta.resize(n_heads);
    for (int h = 0; h < n_heads; ++h) {
        const double t = n_heads == 1
                             ? a
                             : a + (b - a) * h / static_cast<double>(n_heads - 1);
        cfg.eta[h] = 1.0 - std::exp2(-t);
    }
    return cfg;
}

void SeqModelConfig::validate() const {
    if (d_model < 1 || layers < 1 || heads < 1 || ffn_mult < 1)
        throw std::invalid_argument("SeqModelConfig: dims must be positive");
    if (d_model % heads != 0)
        throw std::invalid_argument("SeqModelConfig: heads must divide d_model");
    if (!(eta_min > 0.0) || eta_max < eta_min)
        throw std::invalid_argument("SeqModelConfig: bad decay range");
    if (tokens_per_obs < 1)
        throw std::invalid_argument("SeqModelConfig: tokens_per_obs must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0)
        throw std::invalid_argument("SeqModelConfig: dropout out of range");
}

namespace {

using ad::Param;
using ad::Var;

Tensor ones_row(int n) {
    Tensor t(1, n);
    t.fill(1.0);
    return t;
}

Tensor decay_mask_tensor(double eta, int len) {
    Tensor m(len, len);
    for (int i = 0; i < len; ++i) {
        double p = 1.0;
        for (int j = i; j >= 0; --j) {
            m.at(i, j) = p;
            p *= eta;
        }
    }
    return m;
}

std::vector<double> cross_powers(double eta, int len) {
    std::vector<double> w(len);
    double p = eta;
    for (int i = 0; i < len; ++i) {
        w[i] = p;
        p *= eta;
    }
    return w;
}

std::vector<double> state_update_weights(double eta, int len) {
    std::vector<double> w(len);
    double p = 1.0;
    for (int i = len - 1; i >= 0; --i) {
        w[i] = p;
        p *= eta;
    }
    return w;
}

}  // namespace

SeqModelAd::SeqModelAd(SeqModelConfig cfg, Rng& init) : cfg_(cfg),
      final_g_("seq.final_g", ones_row(cfg.d_model)),
      final_b_("seq.final_b", Tensor(1, cfg.d_model)) {
    cfg_.validate();
    eta_ = compute_decays(cfg.tokens_per_obs, cfg.eta_min, cfg.eta_max,
                          cfg.heads)
               .eta;
    const int d = cfg_.d_model;
    const int f = cfg_.ffn_mult * d;
    layers_.reserve(cfg_.layers);
    for (int l = 0; l < cfg_.layers; ++l) {
        const std::string p = "seq.l" + std::to_string(l) + ".";
        layers_.push_back(LayerParams{
            Param(p + "ln1_g", ones_row(d)), Param(p + "ln1_b", Tensor(1, d)),
            Param(p + "wq", init_fan_in(d, d, init)),
            Param(p + "wk", init_fan_in(d, d, init)),
            Param(p + "wv", init_fan_in(d, d, init)),
            Param(p + "hn_g", ones_row(d)), Param(p + "hn_b", Tensor(1, d)),
            Param(p + "wg", init_fan_in(d, d, init)),
            Param(p + "wo", init_fan_in(d, d, init)),
            Param(p + "ln2_g", ones_row(d)), Param(p + "ln2_b", Tensor(1, d)),
            Param(p + "w1", init_fan_in(d, f, init)),
            Param(p + "b1", Tensor(1, f)),
            Param(p + "w2", init_fan_in(f, d, init)),
            Param(p + "b2", Tensor(1, d)),
        });
    }
}

std::vector<Param*> SeqModelAd::params() {
    std::vector<Param*> out;
    for (auto& l : layers_) {
        for (Param* p : {&l.ln1_g, &l.ln1_b, &l.wq, &l.wk, &l.wv,
                         &l.headnorm_g, &l.headnorm_b, &l.wg, &l.wo, &l.ln2_g,
                         &l.ln2_b, &l.w1, &l.b1, &l.w2, &l.b2})
            out.push_back(p);
    }
    out.push_back(&final_g_);
    out.push_back(&final_b_);
    return out;
}

Var SeqModelAd::ln_affine(const Var& x, const Param& g, const Param& b) {
    return ad::add_rowvec(
        ad::mul_rowvec(ad::layernorm_rows(x), Var::leaf(const_cast<Param&>(g))),
        Var::leaf(const_cast<Param&>(b)));
}

Var SeqModelAd::headnorm_ad(int layer, const Var& x) {
    const int dh = cfg_.d_head();
    std::vector<Var> parts;
    parts.reserve(cfg_.heads);
    for (int h = 0; h < cfg_.heads; ++h)
        parts.push_back(
            ad::layernorm_rows(ad::slice_cols(x, h * dh, (h + 1) * dh)));
    Var normed = cfg_.heads == 1 ? parts[0] : ad::concat_cols(parts);
    return ad::add_rowvec(
        ad::mul_rowvec(normed, Var::leaf(layers_[layer].headnorm_g)),
        Var::leaf(layers_[layer].headnorm_b));
}

// Chunkwise retention for one lane: q, k, v are (len x d); state is the
// per-head list of (dh x dh) Vars, replaced by the advanced state.
Var SeqModelAd::chunk_retention(const Var& q, const Var& k, const Var& v,
                                std::vector<Var>& state) {
    const int dh = cfg_.d_head();
    const int len = q.rows();
    std::vector<Var> outs;
    outs.reserve(cfg_.heads);
    for (int h = 0; h < cfg_.heads; ++h) {
        const double eta = eta_[h];
        Var qh = ad::slice_cols(q, h * dh, (h + 1) * dh);
        Var kh = ad::slice_cols(k, h * dh, (h + 1) * dh);
        Var vh = ad::slice_cols(v, h * dh, (h + 1) * dh);
        Var scores = ad::mul_mask(ad::matmul(qh, ad::transpose(kh)),
                                  decay_mask_tensor(eta, len));
        Var inner = ad::matmul(scores, vh);
        Var cross = ad::mul_colvec_const(ad::matmul(qh, ad::transpose(state[h])),
                                         cross_powers(eta, len));
        outs.push_back(ad::add(inner, cross));
        // S' = eta^len S + sum_i eta^(len-1-i) v_i k_i^T
        Var contrib = ad::matmul(
            ad::transpose(ad::mul_colvec_const(vh, state_update_weights(eta, len))),
            kh);
        state[h] = ad::add(ad::scale(state[h], std::pow(eta, len)), contrib);
    }
    return cfg_.heads == 1 ? outs[0] : ad::concat_cols(outs);
}

Var SeqModelAd::pop_retention(const Var& q,
                              const std::vector<Var>& state, int row0) {
    const int dh = cfg_.d_head();
    const int rows = q.rows();
    std::vector<Var> outs;
    outs.reserve(cfg_.heads);
    for (int h = 0; h < cfg_.heads; ++h) {
        const double eta = eta_[h];
        std::vector<double> powers(rows);
        double p = std::pow(eta, row0 + 1);
        for (int j = 0; j < rows; ++j) {
            powers[j] = p;
            p *= eta;
        }
        Var qh = ad::slice_cols(q, h * dh, (h + 1) * dh);
        outs.push_back(ad::mul_colvec_const(
            ad::matmul(qh, ad::transpose(state[h])), powers));
    }
    return cfg_.heads == 1 ? outs[0] : ad::concat_cols(outs);
}

SeqModelAd::PopTrainOut SeqModelAd::pop_training_pass(const Var& x,
                                                      const Var& u, int lanes,
                                                      int chunks, int len,
                                                      Rng* dropout_rng) {
    const int d = cfg_.d_model;
    const int K = u.rows();
    if (x.rows() != lanes * chunks * len || x.cols() != d)
        throw std::invalid_argument("pop_training_pass: bad x shape");
    const int R = lanes * chunks * len;      // real rows
    const int U = lanes * chunks * K;        // u rows
    const int L = lanes * chunks;            // last-row reads
    const double qscale = 1.0 / std::sqrt(static_cast<double>(cfg_.d_head()));
    const bool use_dropout = dropout_rng != nullptr && cfg_.dropout > 0.0;

    // Assemble the combined stream: [real | u tiles | last-row tiles].
    std::vector<Var> tiles;
    tiles.reserve(1 + L + 1);
    tiles.push_back(x);
    for (int i = 0; i < L; ++i) tiles.push_back(u);
    Var ulast = ad::slice_rows(u, K - 1, K);
    std::vector<Var> last_tiles(L, ulast);
    for (const auto& t : last_tiles) tiles.push_back(t);
    Var comb = ad::concat_rows(tiles);

    // Zero initial states, one per (lane, head), shared across layers via
    // fresh constants.
    const int dh = cfg_.d_head();
    Tensor zero_state(dh, dh);

    for (int l = 0; l < cfg_.layers; ++l) {
        auto& lp = layers_[l];
        Var xn = ln_affine(comb, lp.ln1_g, lp.ln1_b);
        Var q = ad::scale(ad::matmul(xn, Var::leaf(lp.wq)), qscale);
        Var xn_real = ad::slice_rows(xn, 0, R);
        Var k = ad::matmul(xn_real, Var::leaf(lp.wk));
        Var v = ad::matmul(xn_real, Var::leaf(lp.wv));

        std::vector<Var> ret_parts;
        ret_parts.reserve(L + U / K + L);
        std::vector<Var> u_parts, last_parts;
        u_parts.reserve(L);
        last_parts.reserve(L);
        for (int lane = 0; lane < lanes; ++lane) {
            std::vector<Var> state(cfg_.heads, Var::constant(zero_state));
            // The u-pass for chunk p reads the state *before* chunk p; the
            // last-row pass for step p reads the state *after* chunk p.
            for (int p = 0; p < chunks; ++p) {
                const int r0 = (lane * chunks + p) * len;
                Var qc = ad::slice_rows(q, r0, r0 + len);
                Var kc = ad::slice_rows(k, r0, r0 + len);
                Var vc = ad::slice_rows(v, r0, r0 + len);
                const int uq0 = R + (lane * chunks + p) * K;
                Var qu = ad::slice_rows(q, uq0, uq0 + K);
                u_parts.push_back(pop_retention(qu, state, 0));
                ret_parts.push_back(chunk_retention(qc, kc, vc, state));
                const int lq0 = R + U + lane * chunks + p;
                Var ql = ad::slice_rows(q, lq0, lq0 + 1);
                last_parts.push_back(pop_retention(ql, state, K - 1));
            }
        }
        std::vector<Var> all_ret;
        all_ret.reserve(ret_parts.size() + u_parts.size() + last_parts.size());
        for (auto& r : ret_parts) all_ret.push_back(r);
        for (auto& r : u_parts) all_ret.push_back(r);
        for (auto& r : last_parts) all_ret.push_back(r);
        Var ret = ad::concat_rows(all_ret);

        Var rn = headnorm_ad(l, ret);
        Var gate = ad::silu(ad::matmul(xn, Var::leaf(lp.wg)));
        Var o = ad::matmul(ad::mul(gate, rn), Var::leaf(lp.wo));
        comb = ad::add(comb, o);

        Var x2 = ln_affine(comb, lp.ln2_g, lp.ln2_b);
        Var hid = ad::silu(
            ad::add_rowvec(ad::matmul(x2, Var::leaf(lp.w1)), Var::leaf(lp.b1)));
        if (use_dropout) hid = ad::dropout(hid, cfg_.dropout, *dropout_rng);
        Var ffn =
            ad::add_rowvec(ad::matmul(hid, Var::leaf(lp.w2)), Var::leaf(lp.b2));
        comb = ad::add(comb, ffn);
    }

    Var out = ln_affine(comb, final_g_, final_b_);
    PopTrainOut res;
    res.u_out = ad::slice_rows(out, R, R + U);
    res.last_out = ad::slice_rows(out, R + U, R + U + L);
    return res;
}

void SeqModelAd::export_weights(StackWeights<double>& out) const {
    out.cfg = cfg_;
    out.eta = eta_;
    out.layers.resize(cfg_.layers);
    const auto vec = [](const Tensor& t) {
        return std::vector<double>(t.data(), t.data() + t.size());
    };
    for (int l = 0; l < cfg_.layers; ++l) {
        const auto& lp = layers_[l];
        auto& lw = out.layers[l];
        lw.ln1_g = vec(lp.ln1_g.value);
        lw.ln1_b = vec(lp.ln1_b.value);
        lw.wq = vec(lp.wq.value);
        lw.wk = vec(lp.wk.value);
        lw.wv = vec(lp.wv.value);
        lw.headnorm_g = vec(lp.headnorm_g.value);
        lw.headnorm_b = vec(lp.headnorm_b.value);
        lw.wg = vec(lp.wg.value);
        lw.wo = vec(lp.wo.value);
        lw.ln2_g = vec(lp.ln2_g.value);
        lw.ln2_b = vec(lp.ln2_b.value);
        lw.w1 = vec(lp.w1.value);
        lw.b1 = vec(lp.b1.value);
        lw.w2 = vec(lp.w2.value);
        lw.b2 = vec(lp.b2.value);
    }
    out.final_g = vec(final_g_.value);
    out.final_b = vec(final_b_.value);
}

}  // namespace tbwm::seq
