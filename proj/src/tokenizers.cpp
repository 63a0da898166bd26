#include "tbwm/tokenizers.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "tbwm/rac.hpp"

namespace tbwm::tok {

void ModalitySpec::validate() const {
    if (token_count <= 0)
        throw std::invalid_argument("ModalitySpec: token_count must be > 0");
    if (vocab_sizes.empty())
        throw std::invalid_argument("ModalitySpec: vocab_sizes empty");
    for (int v : vocab_sizes)
        if (v < 2)
            throw std::invalid_argument("ModalitySpec: vocab sizes must be >= 2");
    if (kind == ModalityKind::categorical_2d) {
        if (channels != static_cast<int>(vocab_sizes.size()))
            throw std::invalid_argument(
                "ModalitySpec: 2D categorical needs one vocab per channel");
        if (grid_m * grid_n != token_count)
            throw std::invalid_argument(
                "ModalitySpec: 2D categorical token_count must equal m*n");
    } else if (vocab_sizes.size() != 1) {
        throw std::invalid_argument("ModalitySpec: single vocab expected");
    }
}

QuantLevels build_quant_levels() {
    constexpr int kInner = 63;
    constexpr int kOuterPerSide = 31;
    const double inner_edge = std::log1p(std::numbers::pi);
    const double outer_edge = 6.0;

    QuantLevels q;
    q.levels.reserve(kInner + 2 * kOuterPerSide);
    // Negative outer: uniform on [-6, -inner_edge), inclusive of -6.
    const double outer_step = (outer_edge - inner_edge) / kOuterPerSide;
    for (int i = kOuterPerSide; i >= 1; --i)
        q.levels.push_back(-(inner_edge + outer_step * i));
    // Inner: 63 uniform levels spanning [-inner_edge, inner_edge], written so
    // the grid is exactly symmetric with a zero midpoint.
    const int half = (kInner - 1) / 2;
    for (int j = 0; j < kInner; ++j)
        q.levels.push_back(inner_edge * (j - half) / half);
    // Positive outer, mirror of the negative side.
    for (int i = 1; i <= kOuterPerSide; ++i)
        q.levels.push_back(inner_edge + outer_step * i);
    return q;
}

namespace {

int nearest_level(double y, const std::vector<double>& levels) {
    const auto it = std::lower_bound(levels.begin(), levels.end(), y);
    if (it == levels.begin()) return 0;
    if (it == levels.end()) return static_cast<int>(levels.size()) - 1;
    const int hi = static_cast<int>(it - levels.begin());
    const int lo = hi - 1;
    // Ties break to the lower index.
    return (y - levels[lo]) <= (levels[hi] - y) ? lo : hi;
}

}  // namespace

std::vector<int> quantize_vector(const std::vector<double>& x,
                                 const QuantLevels& levels, bool bounded) {
    std::vector<int> tokens(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!std::isfinite(x[i]))
            throw std::invalid_argument("quantize_vector: non-finite feature");
        const double y = bounded ? x[i] : rac::symlog(x[i]);
        tokens[i] = nearest_level(y, levels.levels);
    }
    return tokens;
}

std::vector<double> dequantize_vector(const std::vector<int>& tokens,
                                      const QuantLevels& levels,
                                      bool bounded) {
    std::vector<double> x(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || tokens[i] >= levels.vocab())
            throw std::invalid_argument("dequantize_vector: token out of vocabulary");
        const double y = levels.levels[tokens[i]];
        x[i] = bounded ? y : rac::symexp(y);
    }
    return x;
}

TokenSequence tokenize_categorical_2d(const std::vector<int>& grid,
                                      const ModalitySpec& spec) {
    spec.validate();
    if (spec.kind != ModalityKind::categorical_2d)
        throw std::invalid_argument("tokenize_categorical_2d: wrong modality");
    const std::size_t expected =
        static_cast<std::size_t>(spec.grid_m) * spec.grid_n * spec.channels;
    if (grid.size() != expected)
        throw std::invalid_argument("tokenize_categorical_2d: grid size mismatch");
    for (int p = 0; p < spec.token_count; ++p)
        for (int c = 0; c < spec.channels; ++c) {
            const int v = grid[static_cast<std::size_t>(p) * spec.channels + c];
            if (v < 0 || v >= spec.vocab(c))
                throw std::invalid_argument(
                    "tokenize_categorical_2d: entry out of vocabulary");
        }
    TokenSequence seq;
    seq.channels = spec.channels;
    seq.tokens = grid;  // row-major flattening is the storage layout
    return seq;
}

std::vector<int> detokenize_categorical_2d(const TokenSequence& seq,
                                           const ModalitySpec& spec) {
    if (seq.positions() != spec.token_count || seq.channels != spec.channels)
        throw std::invalid_argument("detokenize_categorical_2d: shape mismatch");
    return seq.tokens;
}

std::vector<int> vq_nearest(const double* latents, int count,
                            const Codebook& cb) {
    if (cb.n <= 0) throw std::invalid_argument("vq_nearest: empty codebook");
    std::vector<int> tokens(count);
    for (int i = 0; i < count; ++i) {
        const double* x = latents + static_cast<std::int64_t>(i) * cb.d;
        int best = 0;
        double best_d = 0.0;
        for (int r = 0; r < cb.n; ++r) {
            const double* e = cb.row(r);
            double d = 0.0;
            for (int j = 0; j < cb.d; ++j) d += (x[j] - e[j]) * (x[j] - e[j]);
            if (r == 0 || d < best_d) {
                best = r;
                best_d = d;
            }
        }
        tokens[i] = best;
    }
    return tokens;
}

VqLossTerms vq_loss(const std::vector<double>& obs,
                    const std::vector<double>& reconstruction,
                    const std::vector<double>& encoder_out,
                    const std::vector<double>& quantized) {
    if (obs.size() != reconstruction.size() ||
        encoder_out.size() != quantized.size())
        throw std::invalid_argument("vq_loss: shape mismatch");
    VqLossTerms t;
    for (std::size_t i = 0; i < obs.size(); ++i) {
        const double d = obs[i] - reconstruction[i];
        t.reconstruction += d * d;
    }
    t.reconstruction /= static_cast<double>(obs.size());
    double resid = 0.0;
    for (std::size_t i = 0; i < encoder_out.size(); ++i) {
        const double d = encoder_out[i] - quantized[i];
        resid += d * d;
    }
    resid /= static_cast<double>(encoder_out.size());
    // Same value for both; they differ only in gradient routing (stop-grad on
    // opposite sides).
    t.codebook = resid;
    t.commitment = resid;
    return t;
}

double action_grid_value(int index, int n) {
    if (index < 0 || index >= n)
        throw std::invalid_argument("action_grid_value: index out of range");
    return -1.0 + 2.0 * index / (n - 1);
}

int action_grid_index(double value, int n) {
    constexpr double kTol = 1e-9;
    if (value < -1.0 - kTol || value > 1.0 + kTol)
        throw std::invalid_argument("action_grid_index: value outside [-1, 1]");
    const double clamped = std::clamp(value, -1.0, 1.0);
    const int idx = static_cast<int>(std::floor((clamped + 1.0) * (n - 1) / 2.0 + 0.5));
    return std::clamp(idx, 0, n - 1);
}

Tokenizer::Tokenizer(std::vector<ModalitySpec> specs, ActionSpec action)
    : specs_(std::move(specs)), action_(action), levels_(build_quant_levels()) {
    if (specs_.empty())
        throw std::invalid_argument("Tokenizer: empty modality set");
    for (const auto& s : specs_) s.validate();
    // Canonical modality order: images, continuous vectors, categoricals,
    // 2D categoricals.
    for (std::size_t i = 1; i < specs_.size(); ++i)
        if (static_cast<int>(specs_[i].kind) < static_cast<int>(specs_[i - 1].kind))
            throw std::invalid_argument("Tokenizer: modalities out of canonical order");
    if (action_.kind == ActionKind::continuous && action_.quant_values < 2)
        throw std::invalid_argument("Tokenizer: continuous action grid too small");
}

int Tokenizer::obs_positions() const {
    int total = 0;
    for (const auto& s : specs_) total += s.token_count;
    return total;
}

std::vector<TokenSequence> Tokenizer::tokenize_observation(
    const Observation& obs) const {
    if (obs.values.size() != specs_.size())
        throw std::invalid_argument("tokenize_observation: missing modality");
    std::vector<TokenSequence> out;
    out.reserve(specs_.size());
    for (std::size_t i = 0; i < specs_.size(); ++i) {
        const auto& spec = specs_[i];
        const auto& val = obs.values[i];
        TokenSequence seq;
        switch (spec.kind) {
            case ModalityKind::continuous_vector: {
                if (static_cast<int>(val.reals.size()) != spec.token_count)
                    throw std::invalid_argument(
                        "tokenize_observation: continuous shape mismatch");
                seq.tokens = quantize_vector(val.reals, levels_, spec.bounded);
                break;
            }
            case ModalityKind::categorical: {
                if (static_cast<int>(val.ints.size()) != spec.token_count)
                    throw std::invalid_argument(
                        "tokenize_observation: categorical shape mismatch");
                for (int v : val.ints)
                    if (v < 0 || v >= spec.vocab())
                        throw std::invalid_argument(
                            "tokenize_observation: categorical out of vocabulary");
                seq.tokens = val.ints;
                break;
            }
            case ModalityKind::categorical_2d: {
                seq = tokenize_categorical_2d(val.ints, spec);
                break;
            }
            case ModalityKind::image:
                throw std::invalid_argument(
                    "tokenize_observation: image modalities are tokenized by the "
                    "codebook model (see VqVae::encode)");
        }
        seq.modality = static_cast<int>(i);
        out.push_back(std::move(seq));
    }
    return out;
}

Observation Tokenizer::decode_observation(
    const std::vector<TokenSequence>& tokens) const {
    if (tokens.size() != specs_.size())
        throw std::invalid_argument("decode_observation: modality count mismatch");
    Observation obs;
    obs.values.resize(specs_.size());
    for (std::size_t i = 0; i < specs_.size(); ++i) {
        const auto& spec = specs_[i];
        const auto& seq = tokens[i];
        switch (spec.kind) {
            case ModalityKind::continuous_vector:
                obs.values[i].reals =
                    dequantize_vector(seq.tokens, levels_, spec.bounded);
                break;
            case ModalityKind::categorical:
            case ModalityKind::categorical_2d:
                obs.values[i].ints = seq.tokens;
                break;
            case ModalityKind::image:
                throw std::invalid_argument(
                    "decode_observation: image modalities decode via VqVae");
        }
    }
    return obs;
}

TokenSequence Tokenizer::tokenize_action(const ActionValue& a) const {
    TokenSequence seq;
    seq.modality = -1;
    if (action_.kind == ActionKind::discrete) {
        if (a.discrete < 0 || a.discrete >= action_.count)
            throw std::invalid_argument("tokenize_action: discrete action out of range");
        seq.tokens = {a.discrete};
    } else {
        if (static_cast<int>(a.continuous.size()) != action_.count)
            throw std::invalid_argument("tokenize_action: action dim mismatch");
        seq.tokens.reserve(a.continuous.size());
        for (double v : a.continuous)
            seq.tokens.push_back(action_grid_index(v, action_.quant_values));
    }
    return seq;
}

ActionValue Tokenizer::decode_action(const TokenSequence& seq) const {
    ActionValue a;
    if (action_.kind == ActionKind::discrete) {
        if (seq.tokens.size() != 1)
            throw std::invalid_argument("decode_action: expected one token");
        a.discrete = seq.tokens[0];
    } else {
        a.continuous.reserve(seq.tokens.size());
        for (int t : seq.tokens)
            a.continuous.push_back(action_grid_value(t, action_.quant_values));
    }
    return a;
}

}  // namespace tbwm::tok
