#pragma once

// Retention sequence model with multi-scale per-head decays and parallel
// observation prediction (POP). Two engines share the weight layout:
//
//  * a raw, precision-templated forward engine (this header) with three
//    numerically equivalent computation modes -- parallel, recurrent, and
//    chunkwise -- plus the frozen-state POP read. Used for imagination and
//    for the float32/float64 equivalence tests.
//  * an autodiff twin (SeqModelAd) used for world-model training; its
//    forward is cross-checked against the raw engine in tests.
//
// Retention per head: out_i = sum_{j<=i} eta^(i-j) (q_i . k_j) v_j with
// q scaled by 1/sqrt(d_head). Recurrent form: S_t = eta S_{t-1} + v_t k_t^T,
// out_t = S_t q_t. POP reads a frozen state with powers eta^(j+1) for the
// j-th prediction row and never updates it; prediction rows do not attend
// to each other.

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "tbwm/autodiff.hpp"
#include "tbwm/kernels.hpp"
#include "tbwm/rng.hpp"
#include "tbwm/tensor.hpp"

namespace tbwm::seq {

struct DecayConfig {
    double eta_min = 0.0;
    double eta_max = 0.0;
    int heads = 0;
    std::vector<double> eta;  // strictly increasing, in (0, 1)
};

// eta_h = 1 - 2^(-linspace(log2(K eta_min), log2(K eta_max), N_h)) where K is
// the observation sequence length, so the decay range is expressed in
// observation-action block units.
DecayConfig compute_decays(int tokens_per_obs, double eta_min, double eta_max,
                           int n_heads);

struct SeqModelConfig {
    int d_model = 64;
    int layers = 2;
    int heads = 2;
    int ffn_mult = 2;  // feed-forward hidden = ffn_mult * d_model
    double eta_min = 4.0;
    double eta_max = 16.0;
    int tokens_per_obs = 16;  // K, used for the decay schedule
    double dropout = 0.0;

    int d_head() const { return d_model / heads; }
    void validate() const;
};

// ---------------------------------------------------------------------------
// Retention operator (projection weights only; the full layer stack adds
// normalization, gating, and the feed-forward block).

template <typename T>
struct RetentionWeights {
    int d_model = 0;
    int heads = 0;
    std::vector<T> wq, wk, wv;  // each d_model x d_model, row-major
    std::vector<double> eta;    // per head

    int d_head() const { return d_model / heads; }
};

template <typename T>
struct RetentionState {
    long pos = 0;
    std::vector<T> s;  // heads * d_head * d_head, zero-initialized

    static RetentionState zero(int heads, int d_head) {
        RetentionState st;
        st.s.assign(static_cast<std::size_t>(heads) * d_head * d_head, T(0));
        return st;
    }
};

namespace detail {

// Q/K/V are (len x d_model) with head h in columns [h*dh, (h+1)*dh).
template <typename T>
void project_qkv(const RetentionWeights<T>& w, const T* x, int len,
                 std::vector<T>& q, std::vector<T>& k, std::vector<T>& v) {
    const int d = w.d_model;
    q.resize(static_cast<std::size_t>(len) * d);
    k.resize(static_cast<std::size_t>(len) * d);
    v.resize(static_cast<std::size_t>(len) * d);
    kernels::matmul(x, w.wq.data(), q.data(), len, d, d);
    kernels::matmul(x, w.wk.data(), k.data(), len, d, d);
    kernels::matmul(x, w.wv.data(), v.data(), len, d, d);
    const T scale = T(1) / std::sqrt(static_cast<T>(w.d_head()));
    for (auto& qv : q) qv *= scale;
}

// Parallel mode for one head: out = (Q K^T . D) V with D_ij = eta^(i-j).
template <typename T>
void head_parallel(const T* q, const T* k, const T* v, T* out, int len, int dh,
                   int stride, double eta) {
    for (int i = 0; i < len; ++i) {
        T* oi = out + static_cast<std::int64_t>(i) * stride;
        for (int c = 0; c < dh; ++c) oi[c] = T(0);
        T decay = T(1);
        for (int j = i; j >= 0; --j) {
            const T* qi = q + static_cast<std::int64_t>(i) * stride;
            const T* kj = k + static_cast<std::int64_t>(j) * stride;
            T a = T(0);
            for (int c = 0; c < dh; ++c) a += qi[c] * kj[c];
            a *= decay;
            const T* vj = v + static_cast<std::int64_t>(j) * stride;
            for (int c = 0; c < dh; ++c) oi[c] += a * vj[c];
            decay *= static_cast<T>(eta);
        }
    }
}

// One recurrent step for one head: S = eta S + v k^T, out = S q.
template <typename T>
void head_recurrent(const T* q, const T* k, const T* v, T* out, T* S, int dh,
                    double eta) {
    const T e = static_cast<T>(eta);
    for (int a = 0; a < dh; ++a) {
        T* srow = S + static_cast<std::int64_t>(a) * dh;
        const T va = v[a];
        for (int b = 0; b < dh; ++b) srow[b] = e * srow[b] + va * k[b];
    }
    for (int a = 0; a < dh; ++a) {
        const T* srow = S + static_cast<std::int64_t>(a) * dh;
        T acc = T(0);
        for (int b = 0; b < dh; ++b) acc += srow[b] * q[b];
        out[a] = acc;
    }
}

// Chunkwise mode for one head: intra-chunk parallel part plus the cross
// contribution eta^(i+1) S_prev q_i, then the state advances by len steps.
template <typename T>
void head_chunkwise(const T* q, const T* k, const T* v, T* out, T* S, int len,
                    int dh, int stride, double eta) {
    head_parallel(q, k, v, out, len, dh, stride, eta);
    const T e = static_cast<T>(eta);
    // cross: out_i += eta^(i+1) * S_prev q_i
    T p = e;
    for (int i = 0; i < len; ++i) {
        const T* qi = q + static_cast<std::int64_t>(i) * stride;
        T* oi = out + static_cast<std::int64_t>(i) * stride;
        for (int a = 0; a < dh; ++a) {
            const T* srow = S + static_cast<std::int64_t>(a) * dh;
            T acc = T(0);
            for (int b = 0; b < dh; ++b) acc += srow[b] * qi[b];
            oi[a] += p * acc;
        }
        p *= e;
    }
    // state: S_new = eta^len S_prev + sum_i eta^(len-1-i) v_i k_i^T
    T elen = T(1);
    for (int i = 0; i < len; ++i) elen *= e;
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(dh) * dh; ++i)
        S[i] *= elen;
    T w = T(1);
    for (int i = len - 1; i >= 0; --i) {
        const T* ki = k + static_cast<std::int64_t>(i) * stride;
        const T* vi = v + static_cast<std::int64_t>(i) * stride;
        for (int a = 0; a < dh; ++a) {
            T* srow = S + static_cast<std::int64_t>(a) * dh;
            const T va = w * vi[a];
            for (int b = 0; b < dh; ++b) srow[b] += va * ki[b];
        }
        w *= e;
    }
}

// POP read for one head: out_j = eta^(j0+j+1) * S q_j. S is never modified.
template <typename T>
void head_pop(const T* q, T* out, const T* S, int rows, int row0, int dh,
              int stride, double eta) {
    const T e = static_cast<T>(eta);
    T p = T(1);
    for (int i = 0; i < row0 + 1; ++i) p *= e;
    for (int j = 0; j < rows; ++j) {
        const T* qj = q + static_cast<std::int64_t>(j) * stride;
        T* oj = out + static_cast<std::int64_t>(j) * stride;
        for (int a = 0; a < dh; ++a) {
            const T* srow = S + static_cast<std::int64_t>(a) * dh;
            T acc = T(0);
            for (int b = 0; b < dh; ++b) acc += srow[b] * qj[b];
            oj[a] = p * acc;
        }
        p *= e;
    }
}

}  // namespace detail

// --- retention operator entry points (spec ops; also used by the stack) ---

template <typename T>
void retention_parallel(const RetentionWeights<T>& w, const T* x, int len,
                        T* out) {
    std::vector<T> q, k, v;
    detail::project_qkv(w, x, len, q, k, v);
    const int dh = w.d_head();
    for (int h = 0; h < w.heads; ++h) {
        const std::int64_t off = static_cast<std::int64_t>(h) * dh;
        detail::head_parallel(q.data() + off, k.data() + off, v.data() + off,
                              out + off, len, dh, w.d_model, w.eta[h]);
    }
}

template <typename T>
void retention_recurrent_step(const RetentionWeights<T>& w,
                              RetentionState<T>& st, const T* x, T* out) {
    std::vector<T> q, k, v;
    detail::project_qkv(w, x, 1, q, k, v);
    const int dh = w.d_head();
    for (int h = 0; h < w.heads; ++h) {
        const std::int64_t off = static_cast<std::int64_t>(h) * dh;
        detail::head_recurrent(q.data() + off, k.data() + off, v.data() + off,
                               out + off,
                               st.s.data() + static_cast<std::int64_t>(h) * dh * dh,
                               dh, w.eta[h]);
    }
    st.pos += 1;
}

template <typename T>
void retention_chunkwise(const RetentionWeights<T>& w, RetentionState<T>& st,
                         const T* x, int len, T* out) {
    if (len < 1) throw std::invalid_argument("retention_chunkwise: empty chunk");
    std::vector<T> q, k, v;
    detail::project_qkv(w, x, len, q, k, v);
    const int dh = w.d_head();
    for (int h = 0; h < w.heads; ++h) {
        const std::int64_t off = static_cast<std::int64_t>(h) * dh;
        detail::head_chunkwise(q.data() + off, k.data() + off, v.data() + off,
                               out + off,
                               st.s.data() + static_cast<std::int64_t>(h) * dh * dh,
                               len, dh, w.d_model, w.eta[h]);
    }
    st.pos += len;
}

// ---------------------------------------------------------------------------
// Full layer stack (raw engine). Layer: pre-norm, retention, per-head
// normalization with channel affine, SiLU gate, output projection, residual,
// then pre-norm feed-forward with residual. A final layer norm closes the
// stack. Dropout lives only in the autodiff twin.

template <typename T>
struct LayerWeights {
    std::vector<T> ln1_g, ln1_b;  // d
    std::vector<T> wq, wk, wv;    // d x d
    std::vector<T> headnorm_g, headnorm_b;  // d (per-head channel affine)
    std::vector<T> wg, wo;        // d x d
    std::vector<T> ln2_g, ln2_b;  // d
    std::vector<T> w1, b1;        // d x f, f
    std::vector<T> w2, b2;        // f x d, d
};

template <typename T>
struct StackWeights {
    SeqModelConfig cfg;
    std::vector<double> eta;
    std::vector<LayerWeights<T>> layers;
    std::vector<T> final_g, final_b;  // d
};

template <typename T>
struct StackState {
    long pos = 0;
    // [layer]: heads * d_head * d_head
    std::vector<std::vector<T>> s;
};

namespace detail {

template <typename T>
void layernorm_affine(const T* x, T* y, int rows, int n, const T* g,
                      const T* b, double eps = 1e-6) {
    for (int i = 0; i < rows; ++i) {
        const T* xi = x + static_cast<std::int64_t>(i) * n;
        T* yi = y + static_cast<std::int64_t>(i) * n;
        T mu = T(0);
        for (int j = 0; j < n; ++j) mu += xi[j];
        mu /= static_cast<T>(n);
        T var = T(0);
        for (int j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= static_cast<T>(n);
        const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
        for (int j = 0; j < n; ++j) yi[j] = (xi[j] - mu) * is * g[j] + b[j];
    }
}

// Per-position, per-head layer norm over the head's channels.
template <typename T>
void headnorm(T* x, int rows, int d, int heads, const T* g, const T* b,
              double eps = 1e-6) {
    const int dh = d / heads;
    for (int i = 0; i < rows; ++i) {
        T* xi = x + static_cast<std::int64_t>(i) * d;
        for (int h = 0; h < heads; ++h) {
            T* xh = xi + h * dh;
            T mu = T(0);
            for (int c = 0; c < dh; ++c) mu += xh[c];
            mu /= static_cast<T>(dh);
            T var = T(0);
            for (int c = 0; c < dh; ++c) var += (xh[c] - mu) * (xh[c] - mu);
            var /= static_cast<T>(dh);
            const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
            for (int c = 0; c < dh; ++c)
                xh[c] = (xh[c] - mu) * is * g[h * dh + c] + b[h * dh + c];
        }
    }
}

template <typename T>
T silu_scalar(T x) {
    return x / (T(1) + std::exp(-x));
}

enum class RetMode { chunk, pop, parallel };

// Shared layer walk for a batch of lanes laid out as consecutive row groups
// of `len` rows each. In chunk mode states advance; in pop mode they are
// read-only with row offset `row0`; parallel mode runs from a zero state.
template <typename T>
void stack_forward(const StackWeights<T>& w,
                   std::span<StackState<T>*> states, const T* x, int nlanes,
                   int len, T* y, RetMode mode, int row0 = 0) {
    const SeqModelConfig& cfg = w.cfg;
    const int d = cfg.d_model;
    const int f = cfg.ffn_mult * d;
    const int dh = cfg.d_head();
    const int rows = nlanes * len;

    std::vector<T> cur(x, x + static_cast<std::int64_t>(rows) * d);
    std::vector<T> xn(static_cast<std::size_t>(rows) * d);
    std::vector<T> q, k, v;
    std::vector<T> ret(static_cast<std::size_t>(rows) * d);
    std::vector<T> gate(static_cast<std::size_t>(rows) * d);
    std::vector<T> proj(static_cast<std::size_t>(rows) * d);
    std::vector<T> hid(static_cast<std::size_t>(rows) * f);
    std::vector<T> zero_state;

    for (int l = 0; l < cfg.layers; ++l) {
        const LayerWeights<T>& lw = w.layers[l];
        layernorm_affine(cur.data(), xn.data(), rows, d, lw.ln1_g.data(),
                         lw.ln1_b.data());
        q.resize(static_cast<std::size_t>(rows) * d);
        k.resize(static_cast<std::size_t>(rows) * d);
        v.resize(static_cast<std::size_t>(rows) * d);
        kernels::matmul(xn.data(), lw.wq.data(), q.data(), rows, d, d);
        const T scale = T(1) / std::sqrt(static_cast<T>(dh));
        for (auto& qv : q) qv *= scale;
        if (mode != RetMode::pop) {
            kernels::matmul(xn.data(), lw.wk.data(), k.data(), rows, d, d);
            kernels::matmul(xn.data(), lw.wv.data(), v.data(), rows, d, d);
        }
        for (int lane = 0; lane < nlanes; ++lane) {
            const std::int64_t base = static_cast<std::int64_t>(lane) * len * d;
            T* slayer = nullptr;
            if (mode == RetMode::parallel) {
                zero_state.assign(static_cast<std::size_t>(cfg.heads) * dh * dh,
                                  T(0));
                slayer = zero_state.data();
            } else {
                slayer = states[lane]->s[l].data();
            }
            for (int h = 0; h < cfg.heads; ++h) {
                const std::int64_t off = base + static_cast<std::int64_t>(h) * dh;
                T* sh = slayer + static_cast<std::int64_t>(h) * dh * dh;
                switch (mode) {
                    case RetMode::pop:
                        head_pop(q.data() + off, ret.data() + off, sh, len,
                                 row0, dh, d, w.eta[h]);
                        break;
                    case RetMode::chunk:
                        head_chunkwise(q.data() + off, k.data() + off,
                                       v.data() + off, ret.data() + off, sh,
                                       len, dh, d, w.eta[h]);
                        break;
                    case RetMode::parallel:
                        head_chunkwise(q.data() + off, k.data() + off,
                                       v.data() + off, ret.data() + off, sh,
                                       len, dh, d, w.eta[h]);
                        break;
                }
            }
        }
        headnorm(ret.data(), rows, d, cfg.heads, lw.headnorm_g.data(),
                 lw.headnorm_b.data());
        kernels::matmul(xn.data(), lw.wg.data(), gate.data(), rows, d, d);
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(rows) * d; ++i)
            ret[i] *= silu_scalar(gate[i]);
        kernels::matmul(ret.data(), lw.wo.data(), proj.data(), rows, d, d);
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(rows) * d; ++i)
            cur[i] += proj[i];

        layernorm_affine(cur.data(), xn.data(), rows, d, lw.ln2_g.data(),
                         lw.ln2_b.data());
        kernels::linear(xn.data(), lw.w1.data(), lw.b1.data(), hid.data(),
                        rows, d, f);
        for (auto& hv : hid) hv = silu_scalar(hv);
        kernels::linear(hid.data(), lw.w2.data(), lw.b2.data(), proj.data(),
                        rows, f, d);
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(rows) * d; ++i)
            cur[i] += proj[i];
    }
    layernorm_affine(cur.data(), y, rows, d, w.final_g.data(),
                     w.final_b.data());
    if (mode == RetMode::chunk)
        for (int lane = 0; lane < nlanes; ++lane) states[lane]->pos += len;
}

}  // namespace detail

template <typename T>
class RetNetStack {
public:
    explicit RetNetStack(SeqModelConfig cfg) {
        cfg.validate();
        w.cfg = cfg;
        w.eta = compute_decays(cfg.tokens_per_obs, cfg.eta_min, cfg.eta_max,
                               cfg.heads)
                    .eta;
        const int d = cfg.d_model, f = cfg.ffn_mult * d;
        w.layers.resize(cfg.layers);
        for (auto& lw : w.layers) {
            lw.ln1_g.assign(d, T(1));
            lw.ln1_b.assign(d, T(0));
            lw.wq.assign(static_cast<std::size_t>(d) * d, T(0));
            lw.wk.assign(static_cast<std::size_t>(d) * d, T(0));
            lw.wv.assign(static_cast<std::size_t>(d) * d, T(0));
            lw.headnorm_g.assign(d, T(1));
            lw.headnorm_b.assign(d, T(0));
            lw.wg.assign(static_cast<std::size_t>(d) * d, T(0));
            lw.wo.assign(static_cast<std::size_t>(d) * d, T(0));
            lw.ln2_g.assign(d, T(1));
            lw.ln2_b.assign(d, T(0));
            lw.w1.assign(static_cast<std::size_t>(d) * f, T(0));
            lw.b1.assign(f, T(0));
            lw.w2.assign(static_cast<std::size_t>(f) * d, T(0));
            lw.b2.assign(d, T(0));
        }
        w.final_g.assign(d, T(1));
        w.final_b.assign(d, T(0));
    }

    StackWeights<T> w;

    StackState<T> make_state() const {
        StackState<T> st;
        st.s.resize(w.cfg.layers);
        const int dh = w.cfg.d_head();
        for (auto& l : st.s)
            l.assign(static_cast<std::size_t>(w.cfg.heads) * dh * dh, T(0));
        return st;
    }

    void forward_chunk(StackState<T>& st, const T* x, int len, T* y) const {
        StackState<T>* p = &st;
        detail::stack_forward<T>(w, std::span<StackState<T>*>(&p, 1), x, 1,
                                 len, y, detail::RetMode::chunk);
    }

    void forward_chunk_batched(std::span<StackState<T>*> states, const T* x,
                               int len, T* y) const {
        detail::stack_forward<T>(w, states, x, static_cast<int>(states.size()),
                                 len, y, detail::RetMode::chunk);
    }

    // Frozen-state prediction for u rows [row0, row0 + rows). The caller
    // passes the (layer-0) u embeddings; the state is never modified.
    void pop_forward(const StackState<T>& st, const T* u, int rows, int row0,
                     T* y) const {
        StackState<T>* p = const_cast<StackState<T>*>(&st);
        detail::stack_forward<T>(w, std::span<StackState<T>*>(&p, 1), u, 1,
                                 rows, y, detail::RetMode::pop, row0);
    }

    // Every lane reads the same u rows (the learned prior), so the shared
    // buffer is tiled per lane before the layer walk.
    void pop_forward_batched(std::span<StackState<T>*> states, const T* u,
                             int rows, int row0, T* y) const {
        const int lanes = static_cast<int>(states.size());
        const int d = w.cfg.d_model;
        std::vector<T> tiled(static_cast<std::size_t>(lanes) * rows * d);
        for (int lane = 0; lane < lanes; ++lane)
            std::copy(u, u + static_cast<std::int64_t>(rows) * d,
                      tiled.data() + static_cast<std::int64_t>(lane) * rows * d);
        detail::stack_forward<T>(w, states, tiled.data(), lanes, rows, y,
                                 detail::RetMode::pop, row0);
    }

    // Whole-sequence parallel mode from a zero state (equivalence tests).
    void forward_parallel(const T* x, int len, T* y) const {
        detail::stack_forward<T>(w, std::span<StackState<T>*>(), x, 1, len, y,
                                 detail::RetMode::parallel);
    }
};

// ---------------------------------------------------------------------------
// Autodiff twin used for world-model training.

class SeqModelAd {
public:
    SeqModelAd(SeqModelConfig cfg, Rng& init);

    const SeqModelConfig& config() const { return cfg_; }
    const std::vector<double>& eta() const { return eta_; }
    std::vector<ad::Param*> params();

    // Layer-stack forward over B lanes of T chunks of `len` rows each,
    // producing the POP outputs needed for training:
    //  * u_out: (B*T*K x d) -- row block (lane, p) is the u-pass against the
    //    state after p chunks (predicts the observation of step p).
    //  * last_out: (B*T x d) -- row (lane, p) is the last u row read against
    //    the state after p+1 chunks (reward/termination features of step p).
    // x: (B*T*len x d) embedded blocks; u: (K x d) prediction embeddings.
    struct PopTrainOut {
        ad::Var u_out;
        ad::Var last_out;
    };
    PopTrainOut pop_training_pass(const ad::Var& x, const ad::Var& u,
                                  int lanes, int chunks, int len,
                                  Rng* dropout_rng = nullptr);

    // Raw-weight snapshot for the inference engine.
    void export_weights(StackWeights<double>& out) const;

private:
    struct LayerParams {
        ad::Param ln1_g, ln1_b, wq, wk, wv, headnorm_g, headnorm_b, wg, wo;
        ad::Param ln2_g, ln2_b, w1, b1, w2, b2;
    };

    // Per-head retention state chain for one lane: states[p] is the state
    // after p chunks (states[0] is zero).
    using HeadStates = std::vector<std::vector<ad::Var>>;  // [p][head]

    ad::Var ln_affine(const ad::Var& x, const ad::Param& g, const ad::Param& b);
    ad::Var headnorm_ad(int layer, const ad::Var& x);
    ad::Var chunk_retention(const ad::Var& q, const ad::Var& k,
                            const ad::Var& v, std::vector<ad::Var>& state);
    ad::Var pop_retention(const ad::Var& q,
                          const std::vector<ad::Var>& state, int row0);

    SeqModelConfig cfg_;
    std::vector<double> eta_;
    std::vector<LayerParams> layers_;
    ad::Param final_g_, final_b_;
};

}  // namespace tbwm::seq
