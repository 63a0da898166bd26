#include "tbwm/vqvae.hpp"

#include <stdexcept>

#include "tbwm/optim.hpp"

namespace tbwm::tok {

using ad::Param;
using ad::Var;

void VqVaeConfig::validate() const {
    if (in_channels < 1 || base_channels < 1 || latent_channels < 1 ||
        blocks < 1 || vocab_size < 2 || gn_groups < 1)
        throw std::invalid_argument("VqVaeConfig: positive sizes required");
    if (image_size % (1 << blocks) != 0)
        throw std::invalid_argument("VqVaeConfig: image size not divisible by 2^blocks");
    for (int b = 0; b <= blocks; ++b)
        if ((base_channels << b) % gn_groups != 0)
            throw std::invalid_argument("VqVaeConfig: gn_groups must divide channels");
}

namespace {

Tensor conv_init(int cout, int cin, int k, Rng& rng) {
    return init_fan_in(cin * k * k, cout, rng).reshaped({cout, cin * k * k});
}

Tensor ones(int n) {
    Tensor t(1, n);
    t.fill(1.0);
    return t;
}

}  // namespace

VqVae::VqVae(VqVaeConfig cfg, Rng& init)
    : cfg_(cfg),
      enc_in_{Param("vq.enc_in.w", Tensor(1, 1)), Param("vq.enc_in.b", Tensor(1, 1))},
      enc_out_gn_{Param("vq.enc_gnout.g", Tensor(1, 1)),
                  Param("vq.enc_gnout.b", Tensor(1, 1))},
      enc_out_{Param("vq.enc_out.w", Tensor(1, 1)), Param("vq.enc_out.b", Tensor(1, 1))},
      bn_affine_{Param("vq.dec_bn.g", Tensor(1, 1)), Param("vq.dec_bn.b", Tensor(1, 1))},
      dec_in_{Param("vq.dec_in.w", Tensor(1, 1)), Param("vq.dec_in.b", Tensor(1, 1))},
      dec_out_gn_{Param("vq.dec_gnout.g", Tensor(1, 1)),
                  Param("vq.dec_gnout.b", Tensor(1, 1))},
      dec_out_{Param("vq.dec_out.w", Tensor(1, 1)), Param("vq.dec_out.b", Tensor(1, 1))},
      codebook_("vq.codebook", Tensor(1, 1)) {
    cfg_.validate();
    const int base = cfg_.base_channels;

    // encoder channel plan: in -> base -> 2*base -> ... -> base*2^blocks -> latent
    enc_ch_ = {base};
    for (int b = 1; b <= cfg_.blocks; ++b) enc_ch_.push_back(base << b);

    enc_in_ = {Param("vq.enc_in.w", conv_init(base, cfg_.in_channels, 3, init)),
               Param("vq.enc_in.b", Tensor(1, base))};
    for (int b = 0; b < cfg_.blocks; ++b) {
        const int cin = enc_ch_[b], cout = enc_ch_[b + 1];
        enc_gn_.push_back({Param("vq.enc_gn" + std::to_string(b) + ".g", ones(cin)),
                           Param("vq.enc_gn" + std::to_string(b) + ".b", Tensor(1, cin))});
        enc_conv_.push_back({Param("vq.enc_conv" + std::to_string(b) + ".w",
                                   conv_init(cout, cin, 3, init)),
                             Param("vq.enc_conv" + std::to_string(b) + ".b",
                                   Tensor(1, cout))});
    }
    const int top = enc_ch_.back();
    enc_out_gn_ = {Param("vq.enc_gnout.g", ones(top)),
                   Param("vq.enc_gnout.b", Tensor(1, top))};
    enc_out_ = {Param("vq.enc_out.w", conv_init(cfg_.latent_channels, top, 3, init)),
                Param("vq.enc_out.b", Tensor(1, cfg_.latent_channels))};

    // decoder channel plan: latent -> base*2^(blocks-1) -> halve per block
    // (never below base), then out conv to in_channels
    dec_ch_ = {base << (cfg_.blocks - 1)};
    for (int b = 0; b < cfg_.blocks; ++b)
        dec_ch_.push_back(std::max(base, dec_ch_.back() / 2));

    bn_affine_ = {Param("vq.dec_bn.g", ones(cfg_.latent_channels)),
                  Param("vq.dec_bn.b", Tensor(1, cfg_.latent_channels))};
    bn_mean_ = Tensor({cfg_.latent_channels});
    bn_var_ = Tensor({cfg_.latent_channels});
    bn_var_.fill(1.0);
    dec_in_ = {Param("vq.dec_in.w", conv_init(dec_ch_[0], cfg_.latent_channels, 3, init)),
               Param("vq.dec_in.b", Tensor(1, dec_ch_[0]))};
    for (int b = 0; b < cfg_.blocks; ++b) {
        const int cin = dec_ch_[b], cout = dec_ch_[b + 1];
        dec_gn_.push_back({Param("vq.dec_gn" + std::to_string(b) + ".g", ones(cin)),
                           Param("vq.dec_gn" + std::to_string(b) + ".b", Tensor(1, cin))});
        dec_conv_.push_back({Param("vq.dec_conv" + std::to_string(b) + ".w",
                                   conv_init(cout, cin, 3, init)),
                             Param("vq.dec_conv" + std::to_string(b) + ".b",
                                   Tensor(1, cout))});
    }
    dec_out_gn_ = {Param("vq.dec_gnout.g", ones(dec_ch_.back())),
                   Param("vq.dec_gnout.b", Tensor(1, dec_ch_.back()))};
    dec_out_ = {Param("vq.dec_out.w", conv_init(cfg_.in_channels, dec_ch_.back(), 3, init)),
                Param("vq.dec_out.b", Tensor(1, cfg_.in_channels))};

    codebook_ = Param("vq.codebook",
                      init_normal(cfg_.vocab_size, cfg_.latent_channels, 0.5, init));
}

std::vector<Param*> VqVae::params() {
    std::vector<Param*> out;
    const auto push_conv = [&](Conv& c) {
        out.push_back(&c.w);
        out.push_back(&c.b);
    };
    const auto push_norm = [&](Norm& n) {
        out.push_back(&n.g);
        out.push_back(&n.b);
    };
    push_conv(enc_in_);
    for (std::size_t i = 0; i < enc_conv_.size(); ++i) {
        push_norm(enc_gn_[i]);
        push_conv(enc_conv_[i]);
    }
    push_norm(enc_out_gn_);
    push_conv(enc_out_);
    push_norm(bn_affine_);
    push_conv(dec_in_);
    for (std::size_t i = 0; i < dec_conv_.size(); ++i) {
        push_norm(dec_gn_[i]);
        push_conv(dec_conv_[i]);
    }
    push_norm(dec_out_gn_);
    push_conv(dec_out_);
    out.push_back(&codebook_);
    return out;
}

Var VqVae::encode_latents(const Var& x, int n) {
    (void)n;
    int H = cfg_.image_size, W = cfg_.image_size;
    Var cur = ad::conv2d(x, cfg_.in_channels, H, W, Var::leaf(enc_in_.w),
                         Var::leaf(enc_in_.b), 3, 3, 1, 1, 1, 1, 1);
    for (int b = 0; b < cfg_.blocks; ++b) {
        const int cin = enc_ch_[b];
        cur = ad::group_norm(cur, cin, H, W, cfg_.gn_groups,
                             Var::leaf(enc_gn_[b].g), Var::leaf(enc_gn_[b].b));
        cur = ad::silu(cur);
        // stride-2 with asymmetric padding (right/bottom only)
        cur = ad::conv2d(cur, cin, H, W, Var::leaf(enc_conv_[b].w),
                         Var::leaf(enc_conv_[b].b), 3, 3, 2, 0, 0, 1, 1);
        H /= 2;
        W /= 2;
    }
    cur = ad::group_norm(cur, enc_ch_.back(), H, W, cfg_.gn_groups,
                         Var::leaf(enc_out_gn_.g), Var::leaf(enc_out_gn_.b));
    cur = ad::silu(cur);
    cur = ad::conv2d(cur, enc_ch_.back(), H, W, Var::leaf(enc_out_.w),
                     Var::leaf(enc_out_.b), 3, 3, 1, 1, 1, 1, 1);
    return cur;  // (n, latent_channels * latent * latent)
}

Var VqVae::decode_latents(const Var& z_nchw, int n, bool training) {
    (void)n;
    int H = cfg_.latent_size(), W = cfg_.latent_size();
    Var cur = ad::batch_norm(z_nchw, cfg_.latent_channels, H, W,
                             Var::leaf(bn_affine_.g), Var::leaf(bn_affine_.b),
                             bn_mean_, bn_var_, training);
    cur = ad::conv2d(cur, cfg_.latent_channels, H, W, Var::leaf(dec_in_.w),
                     Var::leaf(dec_in_.b), 3, 3, 1, 1, 1, 1, 1);
    for (int b = 0; b < cfg_.blocks; ++b) {
        const int cin = dec_ch_[b];
        cur = ad::group_norm(cur, cin, H, W, cfg_.gn_groups,
                             Var::leaf(dec_gn_[b].g), Var::leaf(dec_gn_[b].b));
        cur = ad::silu(cur);
        cur = ad::upsample2x_nearest(cur, cin, H, W);
        H *= 2;
        W *= 2;
        cur = ad::conv2d(cur, cin, H, W, Var::leaf(dec_conv_[b].w),
                         Var::leaf(dec_conv_[b].b), 3, 3, 1, 1, 1, 1, 1);
    }
    cur = ad::group_norm(cur, dec_ch_.back(), H, W, cfg_.gn_groups,
                         Var::leaf(dec_out_gn_.g), Var::leaf(dec_out_gn_.b));
    cur = ad::silu(cur);
    cur = ad::conv2d(cur, dec_ch_.back(), H, W, Var::leaf(dec_out_.w),
                     Var::leaf(dec_out_.b), 3, 3, 1, 1, 1, 1, 1);
    return cur;
}

std::vector<std::vector<int>> VqVae::encode(const Tensor& images) {
    ad::NoGradGuard guard;
    const int n = images.rows();
    Var lat = encode_latents(Var::constant(images), n);
    Var rows = ad::nchw_to_rows(lat, cfg_.latent_channels, cfg_.latent_size(),
                                cfg_.latent_size());
    Codebook cb{cfg_.vocab_size, cfg_.latent_channels,
                std::vector<double>(codebook_.value.data(),
                                    codebook_.value.data() + codebook_.value.size())};
    const int per = cfg_.tokens_per_image();
    const auto all = vq_nearest(rows.value().data(), n * per, cb);
    std::vector<std::vector<int>> out(n);
    for (int i = 0; i < n; ++i)
        out[i].assign(all.begin() + static_cast<std::int64_t>(i) * per,
                      all.begin() + static_cast<std::int64_t>(i + 1) * per);
    return out;
}

std::vector<double> VqVae::decode_tokens(const std::vector<int>& tokens) {
    ad::NoGradGuard guard;
    if (static_cast<int>(tokens.size()) != cfg_.tokens_per_image())
        throw std::invalid_argument("decode_tokens: token count mismatch");
    Var rows = ad::gather_rows(Var::leaf(codebook_), tokens);
    Var z = ad::rows_to_nchw(rows, cfg_.latent_channels, cfg_.latent_size(),
                             cfg_.latent_size());
    Var img = decode_latents(z, 1, /*training=*/false);
    return std::vector<double>(img.value().data(),
                               img.value().data() + img.value().size());
}

VqVae::TrainOut VqVae::training_loss(const Tensor& images) {
    const int n = images.rows();
    const int hw = cfg_.latent_size();
    Var x = Var::constant(images);
    Var lat = encode_latents(x, n);
    Var enc_rows = ad::nchw_to_rows(lat, cfg_.latent_channels, hw, hw);

    Codebook cb{cfg_.vocab_size, cfg_.latent_channels,
                std::vector<double>(codebook_.value.data(),
                                    codebook_.value.data() + codebook_.value.size())};
    const auto tokens = vq_nearest(enc_rows.value().data(),
                                   n * cfg_.tokens_per_image(), cb);
    Var quant_rows = ad::gather_rows(Var::leaf(codebook_), tokens);

    // straight-through: value of quant_rows, gradient of enc_rows
    Var st_rows = ad::add(enc_rows, ad::stopgrad(ad::sub(quant_rows, enc_rows)));
    Var recon = decode_latents(ad::rows_to_nchw(st_rows, cfg_.latent_channels, hw, hw),
                               n, /*training=*/true);

    Var rdiff = ad::sub(recon, x);
    Var recon_term = ad::mean(ad::mul(rdiff, rdiff));
    Var cdiff = ad::sub(ad::stopgrad(enc_rows), quant_rows);
    Var codebook_term = ad::mean(ad::mul(cdiff, cdiff));
    Var mdiff = ad::sub(enc_rows, ad::stopgrad(quant_rows));
    Var commit_term = ad::mean(ad::mul(mdiff, mdiff));

    TrainOut out;
    out.loss = ad::add(ad::add(recon_term, codebook_term), commit_term);
    out.terms.reconstruction = recon_term.value()[0];
    out.terms.codebook = codebook_term.value()[0];
    out.terms.commitment = commit_term.value()[0];
    return out;
}

}  // namespace tbwm::tok
