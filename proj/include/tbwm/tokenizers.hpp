#pragma once

// The representation module: modality-specific encoder-decoder pairs that turn
// raw observations and actions into fixed-length integer token sequences.
// Supported modalities: images (codebook-quantized latents), continuous
// vectors (per-feature quantization over 125 levels), categoricals, and 2D
// categoricals (spatially flattened multi-channel grids).

#include <cstdint>
#include <string>
#include <vector>

namespace tbwm::tok {

enum class ModalityKind {
    image,
    continuous_vector,
    categorical,
    categorical_2d,
};

struct ModalitySpec {
    ModalityKind kind = ModalityKind::continuous_vector;
    std::vector<int> vocab_sizes;  // one entry per channel (C entries for 2D)
    int token_count = 0;           // tokens emitted per observation (m*n for 2D)
    int grid_m = 0, grid_n = 0;    // 2D categorical spatial dims
    int channels = 1;              // 2D categorical channel count
    bool bounded = false;          // continuous: true skips the symlog transform

    int vocab(int channel = 0) const { return vocab_sizes.at(channel); }
    void validate() const;
};

// Tokens for one modality of one observation. For 2D categoricals the layout
// is position-major, channel-minor: tokens[pos * channels + c].
struct TokenSequence {
    int modality = 0;
    int channels = 1;
    std::vector<int> tokens;

    int positions() const {
        return static_cast<int>(tokens.size()) / channels;
    }
};

// 125 monotonically increasing quantization levels in [-6, 6] (symlog space):
// 63 uniform in [-ln(1+pi), ln(1+pi)], 31 per side uniform in the remaining
// intervals, inclusive of +/-6 and exclusive of the inner boundary.
struct QuantLevels {
    std::vector<double> levels;

    int vocab() const { return static_cast<int>(levels.size()); }
};

QuantLevels build_quant_levels();

// Nearest-level index per feature; unbounded inputs pass through symlog first,
// out-of-range features clamp to the edge indices. Ties break to the lower
// index.
std::vector<int> quantize_vector(const std::vector<double>& x,
                                 const QuantLevels& levels, bool bounded);

std::vector<double> dequantize_vector(const std::vector<int>& tokens,
                                      const QuantLevels& levels, bool bounded);

// Row-major spatial flattening of an m x n x C grid (entry layout identical to
// TokenSequence: position-major, channel-minor).
TokenSequence tokenize_categorical_2d(const std::vector<int>& grid,
                                      const ModalitySpec& spec);

std::vector<int> detokenize_categorical_2d(const TokenSequence& seq,
                                           const ModalitySpec& spec);

// --- vector quantization (image codebooks) ---

struct Codebook {
    int n = 0;  // vocabulary size
    int d = 0;  // embedding dimension
    std::vector<double> e;  // n x d row-major

    const double* row(int i) const { return e.data() + static_cast<std::int64_t>(i) * d; }
};

// Nearest codebook row per latent vector (Euclidean); ties break to the
// lowest index.
std::vector<int> vq_nearest(const double* latents, int count,
                            const Codebook& cb);

struct VqLossTerms {
    double reconstruction = 0.0;
    double codebook = 0.0;
    double commitment = 0.0;

    double total() const { return reconstruction + codebook + commitment; }
};

// All terms are means over elements (scale-invariant to image size).
VqLossTerms vq_loss(const std::vector<double>& obs,
                    const std::vector<double>& reconstruction,
                    const std::vector<double>& encoder_out,
                    const std::vector<double>& quantized);

// --- observation / action level ---

// Raw features for one modality. Continuous/image modalities use `reals`,
// categorical modalities use `ints` (position-major, channel-minor).
struct ModalityValue {
    std::vector<double> reals;
    std::vector<int> ints;
};

struct Observation {
    std::vector<ModalityValue> values;  // aligned with the modality list
};

enum class ActionKind { discrete, continuous };

struct ActionSpec {
    ActionKind kind = ActionKind::discrete;
    int count = 1;        // discrete: |A|; continuous: action vector dims
    int quant_values = 51;  // continuous grid resolution on [-1, 1]

    int vocab() const {
        return kind == ActionKind::discrete ? count : quant_values;
    }
    int token_count() const {
        return kind == ActionKind::discrete ? 1 : count;
    }
};

struct ActionValue {
    int discrete = 0;
    std::vector<double> continuous;
};

// Uniform grid of `n` values on [-1, 1].
double action_grid_value(int index, int n);
int action_grid_index(double value, int n);

class Tokenizer {
public:
    // Modalities must be listed in canonical order: images, continuous
    // vectors, categoricals, 2D categoricals.
    Tokenizer(std::vector<ModalitySpec> specs, ActionSpec action);

    const std::vector<ModalitySpec>& specs() const { return specs_; }
    const ActionSpec& action_spec() const { return action_; }
    const QuantLevels& quant_levels() const { return levels_; }

    // Total embedding positions per observation (sum of token counts).
    int obs_positions() const;

    std::vector<TokenSequence> tokenize_observation(const Observation& obs) const;
    Observation decode_observation(const std::vector<TokenSequence>& tokens) const;

    TokenSequence tokenize_action(const ActionValue& a) const;
    ActionValue decode_action(const TokenSequence& seq) const;

private:
    std::vector<ModalitySpec> specs_;
    ActionSpec action_;
    QuantLevels levels_;
};

}  // namespace tbwm::tok
