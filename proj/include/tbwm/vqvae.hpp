#pragma once

// Codebook-quantized image tokenizer: CNN encoder, nearest-embedding lookup
// with a straight-through estimator, and CNN decoder. The layer order follows
// the reference architecture; channel counts scale with base_channels so the
// model runs at desk size. The codebook doubles as the world model's
// embedding table for image tokens.

#include <vector>

#include "tbwm/autodiff.hpp"
#include "tbwm/rng.hpp"
#include "tbwm/tokenizers.hpp"

namespace tbwm::tok {

struct VqVaeConfig {
    int in_channels = 3;
    int image_size = 16;      // square input, divisible by 2^blocks
    int base_channels = 8;
    int latent_channels = 16; // codebook dimension (d_model when WM-shared)
    int blocks = 2;           // stride-2 encoder blocks
    int vocab_size = 32;
    int gn_groups = 4;

    int latent_size() const { return image_size >> blocks; }
    int tokens_per_image() const { return latent_size() * latent_size(); }
    void validate() const;
};

class VqVae {
public:
    VqVae(VqVaeConfig cfg, Rng& init);

    const VqVaeConfig& config() const { return cfg_; }
    ad::Param* codebook() { return &codebook_; }
    std::vector<ad::Param*> params();

    // Tokens for a batch of images (rows of pixels, N x C*H*W). No grad.
    std::vector<std::vector<int>> encode(const Tensor& images);
    // Reconstruction of one token grid (eval-mode batch norm).
    std::vector<double> decode_tokens(const std::vector<int>& tokens);

    struct TrainOut {
        ad::Var loss;
        VqLossTerms terms;
    };
    // Builds the tape for one optimization step over a batch of images.
    TrainOut training_loss(const Tensor& images);

    // Batch-norm running stats (checkpointed alongside the params).
    Tensor& bn_running_mean() { return bn_mean_; }
    Tensor& bn_running_var() { return bn_var_; }

private:
    ad::Var encode_latents(const ad::Var& x, int n);
    ad::Var decode_latents(const ad::Var& z_nchw, int n, bool training);

    VqVaeConfig cfg_;
    // encoder: conv_in, per-block (gn, conv), out (gn, conv)
    struct Conv {
        ad::Param w, b;
    };
    struct Norm {
        ad::Param g, b;
    };
    Conv enc_in_;
    std::vector<Norm> enc_gn_;
    std::vector<Conv> enc_conv_;
    Norm enc_out_gn_;
    Conv enc_out_;
    // decoder: bn, conv_in, per-block (gn, conv), out (gn, conv)
    Norm bn_affine_;
    Tensor bn_mean_, bn_var_;
    Conv dec_in_;
    std::vector<Norm> dec_gn_;
    std::vector<Conv> dec_conv_;
    Norm dec_out_gn_;
    Conv dec_out_;
    ad::Param codebook_;
    std::vector<int> enc_ch_, dec_ch_;
};

}  // namespace tbwm::tok
