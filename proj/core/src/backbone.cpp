#include "diffaug/backbone.hpp"

#include <algorithm>
#include <cmath>

namespace diffaug {

bool BackboneConfig::attention_at(int resolution) const {
    return std::find(attention_resolutions.begin(), attention_resolutions.end(), resolution) !=
           attention_resolutions.end();
}

void BackboneConfig::validate() const {
    require(image_size >= 2, ErrorKind::ConfigError, "image_size must be >= 2");
    require(base_channels >= 1, ErrorKind::ConfigError, "base_channels must be >= 1");
    require(!channel_multipliers.empty(), ErrorKind::ConfigError, "channel_multipliers empty");
    for (int m : channel_multipliers)
        require(m >= 1, ErrorKind::ConfigError, "channel multipliers must be >= 1");
    require(blocks_per_level >= 1, ErrorKind::ConfigError, "blocks_per_level must be >= 1");
    const int down_factor = 1 << (levels() - 1);
    require(image_size % down_factor == 0, ErrorKind::ConfigError,
            "image_size must be divisible by 2^(levels-1)");
    require(resolved_embedding_dim() % 2 == 0, ErrorKind::OddDimension, "embedding_dim must be even");
    require(se_reduction >= 1 && base_channels % se_reduction == 0, ErrorKind::ConfigError,
            "se_reduction must divide base_channels");
    require(class_count >= 0, ErrorKind::ConfigError, "class_count must be >= 0");
    require(dropout >= 0.0 && dropout < 1.0, ErrorKind::ConfigError, "dropout must be in [0,1)");
    require(norm_groups >= 1 && base_channels % norm_groups == 0, ErrorKind::ConfigError,
            "norm_groups must divide base_channels");
    require(attention_heads >= 1 && base_channels % attention_heads == 0, ErrorKind::ConfigError,
            "attention_heads must divide base_channels");
}

Tensor sinusoidal_embedding(int t, int dim) {
    require(dim >= 2 && dim % 2 == 0, ErrorKind::OddDimension,
            "embedding dim must be even and >= 2, got " + std::to_string(dim));
    require(t >= 0, ErrorKind::TimestepOutOfRange, "t must be >= 0");
    Tensor out({dim});
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double omega = std::pow(10000.0, -2.0 * i / dim);
        out[i] = std::sin(t * omega);
        out[half + i] = std::cos(t * omega);
    }
    return out;
}

DenoiserUNet::DenoiserUNet(BackboneConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int emb = cfg_.resolved_embedding_dim();
    const int g = cfg_.norm_groups;

    time_fc1_ = nn::Linear("time.fc1", emb, emb);
    time_fc2_ = nn::Linear("time.fc2", emb, emb);
    if (cfg_.class_count > 0) class_embed_ = nn::Embedding("class_embed", cfg_.class_count, emb);

    const int c0 = cfg_.base_channels * cfg_.channel_multipliers[0];
    stem_ = nn::Conv("stem", 1, c0, 3);

    // Encoder: blocks (+ optional attention) per level, stride-2 conv
    // downsample between levels. Skip channel widths are replayed by the
    // decoder in reverse.
    std::vector<int> skip_channels{c0};
    int ch = c0;
    int res = cfg_.image_size;
    for (int lvl = 0; lvl < cfg_.levels(); ++lvl) {
        const int w = cfg_.base_channels * cfg_.channel_multipliers[static_cast<size_t>(lvl)];
        for (int b = 0; b < cfg_.blocks_per_level; ++b) {
            const std::string p = "enc.l" + std::to_string(lvl) + ".b" + std::to_string(b);
            enc_blocks_.emplace_back(p, ch, w, emb, cfg_.se_reduction, g, cfg_.dropout);
            ch = w;
            if (cfg_.attention_at(res))
                enc_attn_.emplace_back(p + ".att", ch, cfg_.attention_heads, g);
            else
                enc_attn_.emplace_back();
            skip_channels.push_back(ch);
        }
        if (lvl + 1 < cfg_.levels()) {
            downs_.emplace_back("down.l" + std::to_string(lvl), ch, ch, 3, 2, 1);
            skip_channels.push_back(ch);
            res /= 2;
        }
    }

    mid_block1_ = nn::SEResBlock("mid.b1", ch, ch, emb, cfg_.se_reduction, g, cfg_.dropout);
    mid_attn_norm_ = nn::GroupNorm("mid.att.norm", ch, g);
    mid_attn_ = nn::MultiHeadSelfAttention("mid.att", ch, cfg_.attention_heads);
    mid_block2_ = nn::SEResBlock("mid.b2", ch, ch, emb, cfg_.se_reduction, g, cfg_.dropout);

    for (int lvl = cfg_.levels() - 1; lvl >= 0; --lvl) {
        const int w = cfg_.base_channels * cfg_.channel_multipliers[static_cast<size_t>(lvl)];
        for (int b = 0; b < cfg_.blocks_per_level + 1; ++b) {
            const int skip = skip_channels.back();
            skip_channels.pop_back();
            const std::string p = "dec.l" + std::to_string(lvl) + ".b" + std::to_string(b);
            dec_blocks_.emplace_back(p, ch + skip, w, emb, cfg_.se_reduction, g, cfg_.dropout);
            ch = w;
            if (cfg_.attention_at(res))
                dec_attn_.emplace_back(p + ".att", ch, cfg_.attention_heads, g);
            else
                dec_attn_.emplace_back();
        }
        if (lvl > 0) {
            ups_.emplace_back("up.l" + std::to_string(lvl), ch, ch, 3, 1, 1);
            res *= 2;
        }
    }

    out_norm_ = nn::GroupNorm("out.norm", ch, g);
    out_conv_ = nn::Conv("out.conv", ch, 1, 3);
}

void DenoiserUNet::init_params(ParameterStore& ps, Rng& rng) const {
    time_fc1_.build(ps, rng);
    time_fc2_.build(ps, rng);
    if (cfg_.class_count > 0) class_embed_.build(ps, rng);
    stem_.build(ps, rng);
    for (size_t i = 0; i < enc_blocks_.size(); ++i) {
        enc_blocks_[i].build(ps, rng);
        if (enc_attn_[i].channels > 0) enc_attn_[i].build(ps, rng);
    }
    for (const auto& d : downs_) d.build(ps, rng);
    mid_block1_.build(ps, rng);
    mid_attn_norm_.build(ps);
    mid_attn_.build(ps, rng);
    mid_block2_.build(ps, rng);
    for (size_t i = 0; i < dec_blocks_.size(); ++i) {
        dec_blocks_[i].build(ps, rng);
        if (dec_attn_[i].channels > 0) dec_attn_[i].build(ps, rng);
    }
    for (const auto& u : ups_) u.build(ps, rng);
    out_norm_.build(ps);
    out_conv_.build(ps, rng, 0.0);
}

ad::Ref DenoiserUNet::condition(ad::Graph& g, const ParameterStore& ps, const std::vector<int>& t,
                                const std::vector<int>& y, int T) const {
    require(t.size() == y.size(), ErrorKind::LengthMismatch, "t/y length mismatch");
    const int emb = cfg_.resolved_embedding_dim();
    const int n = static_cast<int>(t.size());
    Tensor sin_rows({n, emb});
    for (int i = 0; i < n; ++i) {
        require(t[static_cast<size_t>(i)] >= 0 && t[static_cast<size_t>(i)] < T,
                ErrorKind::TimestepOutOfRange, "t=" + std::to_string(t[static_cast<size_t>(i)]));
        const Tensor row = sinusoidal_embedding(t[static_cast<size_t>(i)], emb);
        std::copy_n(row.data(), emb, sin_rows.data() + static_cast<int64_t>(i) * emb);
    }
    ad::Ref cond = time_fc2_.forward(g, ps, ad::silu(g, time_fc1_.forward(g, ps, g.constant(sin_rows))));
    if (cfg_.class_count > 0) {
        for (int yi : y)
            require(yi < cfg_.class_count, ErrorKind::ClassOutOfRange, "y=" + std::to_string(yi));
        cond = ad::add(g, cond, class_embed_.forward(g, ps, y));
    }
    return cond;
}

ad::Ref DenoiserUNet::forward(ad::Graph& g, const ParameterStore& ps, ad::Ref x, const std::vector<int>& t,
                              const std::vector<int>& y, int T, Rng& dropout_rng) const {
    const Tensor& xv = g.val(x);
    require(xv.rank() == 4 && xv.dim(1) == 1 && xv.dim(2) == cfg_.image_size && xv.dim(3) == cfg_.image_size,
            ErrorKind::ShapeMismatch, "denoiser input must be (N,1,S,S), got " + xv.shape_str());
    require(static_cast<size_t>(xv.dim(0)) == t.size(), ErrorKind::LengthMismatch,
            "batch size vs timestep count");

    ad::Ref cond = condition(g, ps, t, y, T);
    ad::Ref h = stem_.forward(g, ps, x);
    std::vector<ad::Ref> skips{h};

    size_t eb = 0;
    for (int lvl = 0; lvl < cfg_.levels(); ++lvl) {
        for (int b = 0; b < cfg_.blocks_per_level; ++b, ++eb) {
            h = enc_blocks_[eb].forward(g, ps, h, cond, dropout_rng);
            if (enc_attn_[eb].channels > 0) h = enc_attn_[eb].forward(g, ps, h);
            skips.push_back(h);
        }
        if (lvl + 1 < cfg_.levels()) {
            h = downs_[static_cast<size_t>(lvl)].forward(g, ps, h);
            skips.push_back(h);
        }
    }

    h = mid_block1_.forward(g, ps, h, cond, dropout_rng);
    {
        const Tensor& hv = g.val(h);
        const int hh = hv.dim(2), ww = hv.dim(3);
        ad::Ref tokens = ad::nchw_to_nsc(g, mid_attn_norm_.forward(g, ps, h));
        ad::Ref att = mid_attn_.forward(g, ps, tokens);
        h = ad::add(g, ad::nsc_to_nchw(g, att, hh, ww), h);
    }
    h = mid_block2_.forward(g, ps, h, cond, dropout_rng);

    size_t db = 0;
    for (int lvl = cfg_.levels() - 1; lvl >= 0; --lvl) {
        for (int b = 0; b < cfg_.blocks_per_level + 1; ++b, ++db) {
            h = ad::concat_channels(g, h, skips.back());
            skips.pop_back();
            h = dec_blocks_[db].forward(g, ps, h, cond, dropout_rng);
            if (dec_attn_[db].channels > 0) h = dec_attn_[db].forward(g, ps, h);
        }
        if (lvl > 0) {
            h = ad::upsample_nearest2(g, h);
            h = ups_[static_cast<size_t>(cfg_.levels() - 1 - lvl)].forward(g, ps, h);
        }
    }

    h = ad::silu(g, out_norm_.forward(g, ps, h));
    return out_conv_.forward(g, ps, h);
}

Tensor DenoiserUNet::forward_eval(const ParameterStore& ps, const Tensor& x, const std::vector<int>& t,
                                  const std::vector<int>& y, int T) const {
    ad::Graph g(false, false);
    Rng dummy(0);
    return g.val(forward(g, ps, g.constant(x), t, y, T, dummy));
}

}  // namespace diffaug
