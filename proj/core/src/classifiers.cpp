#include "diffaug/classifiers.hpp"

#include <algorithm>
#include <cmath>

namespace diffaug {

namespace {

// Largest group count in {8,4,2,1} dividing the channel width; dense widths
// are multiples of 4 but not always 8.
int groups_for(int channels) {
    for (int g : {8, 4, 2})
        if (channels % g == 0) return g;
    return 1;
}

}  // namespace

// ---------------------------------------------------------------------------
// guidance classifier
// ---------------------------------------------------------------------------

void GuidanceConfig::validate() const {
    require(image_size >= 2, ErrorKind::ConfigError, "image_size must be >= 2");
    require(base_channels >= 1, ErrorKind::ConfigError, "base_channels must be >= 1");
    require(!channel_multipliers.empty(), ErrorKind::ConfigError, "channel_multipliers empty");
    require(blocks_per_level >= 1, ErrorKind::ConfigError, "blocks_per_level must be >= 1");
    require(class_count >= 2, ErrorKind::ConfigError, "class_count must be >= 2");
    const int down_factor = 1 << (levels() - 1);
    require(image_size % down_factor == 0, ErrorKind::ConfigError,
            "image_size must be divisible by 2^(levels-1)");
    require(resolved_embedding_dim() % 2 == 0, ErrorKind::OddDimension, "embedding_dim must be even");
    require(se_reduction >= 1 && base_channels % se_reduction == 0, ErrorKind::ConfigError,
            "se_reduction must divide base_channels");
    require(norm_groups >= 1 && base_channels % norm_groups == 0, ErrorKind::ConfigError,
            "norm_groups must divide base_channels");
    require(dropout >= 0.0 && dropout < 1.0, ErrorKind::ConfigError, "dropout must be in [0,1)");
}

GuidanceClassifier::GuidanceClassifier(GuidanceConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int emb = cfg_.resolved_embedding_dim();
    time_fc1_ = nn::Linear("time.fc1", emb, emb);
    time_fc2_ = nn::Linear("time.fc2", emb, emb);
    const int c0 = cfg_.base_channels * cfg_.channel_multipliers[0];
    stem_ = nn::Conv("stem", 1, c0, 3);
    int ch = c0;
    for (int lvl = 0; lvl < cfg_.levels(); ++lvl) {
        const int w = cfg_.base_channels * cfg_.channel_multipliers[static_cast<size_t>(lvl)];
        for (int b = 0; b < cfg_.blocks_per_level; ++b) {
            blocks_.emplace_back("l" + std::to_string(lvl) + ".b" + std::to_string(b), ch, w, emb,
                                 cfg_.se_reduction, cfg_.norm_groups, cfg_.dropout);
            ch = w;
        }
        if (lvl + 1 < cfg_.levels()) downs_.emplace_back("down.l" + std::to_string(lvl), ch, ch, 3, 2, 1);
    }
    head_norm_ = nn::GroupNorm("head.norm", ch, cfg_.norm_groups);
    head_ = nn::Linear("head.fc", ch, cfg_.class_count);
}

void GuidanceClassifier::init_params(ParameterStore& ps, Rng& rng) const {
    time_fc1_.build(ps, rng);
    time_fc2_.build(ps, rng);
    stem_.build(ps, rng);
    for (const auto& b : blocks_) b.build(ps, rng);
    for (const auto& d : downs_) d.build(ps, rng);
    head_norm_.build(ps);
    head_.build(ps, rng, 0.0);
}

ad::Ref GuidanceClassifier::forward(ad::Graph& g, const ParameterStore& ps, ad::Ref x,
                                    const std::vector<int>& t, int T, Rng& dropout_rng) const {
    const Tensor& xv = g.val(x);
    require(xv.rank() == 4 && xv.dim(1) == 1 && xv.dim(2) == cfg_.image_size && xv.dim(3) == cfg_.image_size,
            ErrorKind::ShapeMismatch, "guidance input must be (N,1,S,S), got " + xv.shape_str());
    require(static_cast<size_t>(xv.dim(0)) == t.size(), ErrorKind::LengthMismatch,
            "batch size vs timestep count");
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

    ad::Ref h = stem_.forward(g, ps, x);
    size_t bi = 0;
    for (int lvl = 0; lvl < cfg_.levels(); ++lvl) {
        for (int b = 0; b < cfg_.blocks_per_level; ++b, ++bi)
            h = blocks_[bi].forward(g, ps, h, cond, dropout_rng);
        if (lvl + 1 < cfg_.levels()) h = downs_[static_cast<size_t>(lvl)].forward(g, ps, h);
    }
    h = ad::global_avg_pool(g, ad::silu(g, head_norm_.forward(g, ps, h)));
    return head_.forward(g, ps, h);
}

Tensor GuidanceClassifier::logits_eval(const ParameterStore& ps, const Tensor& x, const std::vector<int>& t,
                                       int T) const {
    ad::Graph g(false, false);
    Rng dummy(0);
    return g.val(forward(g, ps, g.constant(x), t, T, dummy));
}

Tensor GuidanceClassifier::log_prob_grad(const ParameterStore& ps, const Tensor& x, const std::vector<int>& t,
                                         const std::vector<int>& y, int T) const {
    for (int yi : y)
        require(yi >= 0 && yi < cfg_.class_count, ErrorKind::ClassOutOfRange, "y=" + std::to_string(yi));
    ad::Graph g(false, true, false);
    Rng dummy(0);
    ad::Ref xr = g.leaf(x, true);
    ad::Ref logits = forward(g, ps, xr, t, T, dummy);
    // cross_entropy is mean_i -log p(y_i); scale by -N to get sum_i log p(y_i).
    ad::Ref root = ad::scale(g, ad::cross_entropy(g, logits, y), -static_cast<double>(y.size()));
    g.backward(root);
    return g.grad(xr);
}

// ---------------------------------------------------------------------------
// downstream families
// ---------------------------------------------------------------------------

Family family_from_string(const std::string& s) {
    if (s == "residual") return Family::residual;
    if (s == "dense") return Family::dense;
    if (s == "plainconv") return Family::plainconv;
    if (s == "patch_transformer") return Family::patch_transformer;
    fail(ErrorKind::ConfigError, "unknown family: " + s);
}

DepthPreset preset_from_string(const std::string& s) {
    if (s == "desk") return DepthPreset::desk;
    if (s == "paper") return DepthPreset::paper;
    fail(ErrorKind::ConfigError, "unknown depth preset: " + s);
}

const char* to_string(Family f) {
    switch (f) {
        case Family::residual: return "residual";
        case Family::dense: return "dense";
        case Family::plainconv: return "plainconv";
        default: return "patch_transformer";
    }
}

const char* to_string(DepthPreset p) { return p == DepthPreset::desk ? "desk" : "paper"; }

DownstreamModel::DownstreamModel(DownstreamModelSpec spec) : spec_(spec) {
    require(spec_.class_count >= 2, ErrorKind::ConfigError, "class_count must be >= 2");
    require(spec_.input_size >= 8 && spec_.input_size % 8 == 0, ErrorKind::ConfigError,
            "input_size must be a positive multiple of 8");
    const bool desk = spec_.preset == DepthPreset::desk;

    switch (spec_.family) {
        case Family::residual: {
            const std::vector<int> widths = desk ? std::vector<int>{16, 32, 64}
                                                 : std::vector<int>{64, 128, 256, 512};
            const std::vector<int> depths = desk ? std::vector<int>{2, 2, 2} : std::vector<int>{3, 4, 6, 3};
            const int expansion = desk ? 1 : 4;
            const int c0 = desk ? 16 : 64;
            stem_ = nn::Conv("stem", 1, c0, 3);
            int ch = c0;
            for (size_t s = 0; s < widths.size(); ++s) {
                for (int b = 0; b < depths[s]; ++b) {
                    ResStage blk;
                    blk.cin = ch;
                    blk.cout = widths[s] * expansion;
                    blk.stride = (s > 0 && b == 0) ? 2 : 1;
                    blk.bottleneck = !desk;
                    blk.has_skip = blk.cin != blk.cout || blk.stride != 1;
                    const std::string p = "res.s" + std::to_string(s) + ".b" + std::to_string(b);
                    blk.gn1 = nn::GroupNorm(p + ".gn1", blk.cin, groups_for(blk.cin));
                    if (blk.bottleneck) {
                        blk.conv1 = nn::Conv(p + ".conv1", blk.cin, widths[s], 1);
                        blk.gn2 = nn::GroupNorm(p + ".gn2", widths[s], groups_for(widths[s]));
                        blk.conv2 = nn::Conv(p + ".conv2", widths[s], widths[s], 3, blk.stride, 1);
                        blk.gn3 = nn::GroupNorm(p + ".gn3", widths[s], groups_for(widths[s]));
                        blk.conv3 = nn::Conv(p + ".conv3", widths[s], blk.cout, 1);
                    } else {
                        blk.conv1 = nn::Conv(p + ".conv1", blk.cin, blk.cout, 3, blk.stride, 1);
                        blk.gn2 = nn::GroupNorm(p + ".gn2", blk.cout, groups_for(blk.cout));
                        blk.conv2 = nn::Conv(p + ".conv2", blk.cout, blk.cout, 3);
                    }
                    if (blk.has_skip) blk.skip = nn::Conv(p + ".skip", blk.cin, blk.cout, 1, blk.stride, 0);
                    ch = blk.cout;
                    res_blocks_.push_back(std::move(blk));
                }
            }
            head_norm_ = nn::GroupNorm("head.norm", ch, groups_for(ch));
            feature_width_ = ch;
            break;
        }
        case Family::dense: {
            const int growth = desk ? 12 : 32;
            const int c0 = desk ? 16 : 64;
            dense_block_sizes_ = desk ? std::vector<int>{4, 4, 4} : std::vector<int>{6, 12, 24, 16};
            const bool bottleneck = !desk;
            stem_ = nn::Conv("stem", 1, c0, 3);
            int ch = c0;
            for (size_t blk = 0; blk < dense_block_sizes_.size(); ++blk) {
                for (int l = 0; l < dense_block_sizes_[blk]; ++l) {
                    DenseLayer layer;
                    layer.bottleneck = bottleneck;
                    const std::string p = "dense.b" + std::to_string(blk) + ".l" + std::to_string(l);
                    layer.gn1 = nn::GroupNorm(p + ".gn1", ch, groups_for(ch));
                    if (bottleneck) {
                        const int mid = 4 * growth;
                        layer.conv1 = nn::Conv(p + ".conv1", ch, mid, 1);
                        layer.gn2 = nn::GroupNorm(p + ".gn2", mid, groups_for(mid));
                        layer.conv2 = nn::Conv(p + ".conv2", mid, growth, 3);
                    } else {
                        layer.conv1 = nn::Conv(p + ".conv1", ch, growth, 3);
                    }
                    ch += growth;
                    dense_layers_.push_back(std::move(layer));
                }
                if (blk + 1 < dense_block_sizes_.size()) {
                    Transition tr;
                    const std::string p = "trans." + std::to_string(blk);
                    tr.gn = nn::GroupNorm(p + ".gn", ch, groups_for(ch));
                    tr.conv = nn::Conv(p + ".conv", ch, ch / 2, 1);
                    ch /= 2;
                    transitions_.push_back(std::move(tr));
                }
            }
            head_norm_ = nn::GroupNorm("head.norm", ch, groups_for(ch));
            feature_width_ = ch;
            break;
        }
        case Family::plainconv: {
            const std::vector<std::vector<int>> stages =
                desk ? std::vector<std::vector<int>>{{32, 32}, {64, 64}, {128, 128}}
                     : std::vector<std::vector<int>>{
                           {64, 64}, {128, 128}, {256, 256, 256}, {512, 512, 512}, {512, 512, 512}};
            dropout_ = 0.5;
            int ch = 1;
            int idx = 0;
            for (const auto& stage : stages) {
                for (int w : stage) {
                    const std::string p = "conv" + std::to_string(idx);
                    plain_convs_.emplace_back(p, ch, w, 3);
                    plain_norms_.emplace_back(p + ".gn", w, groups_for(w));
                    ch = w;
                    ++idx;
                }
                plain_pool_after_.push_back(idx - 1);
            }
            const int pools = static_cast<int>(stages.size());
            const int final_hw = spec_.input_size >> pools;
            require(final_hw >= 1, ErrorKind::ConfigError, "input too small for plainconv preset");
            const int flat = ch * final_hw * final_hw;
            const std::vector<int> fc = desk ? std::vector<int>{256} : std::vector<int>{4096, 4096};
            int d = flat;
            for (size_t i = 0; i < fc.size(); ++i) {
                fc_stack_.emplace_back("fc" + std::to_string(i), d, fc[i]);
                d = fc[i];
            }
            feature_width_ = d;
            break;
        }
        case Family::patch_transformer: {
            patch_ = 4;
            exp_dim_ = desk ? 64 : 768;
            heads_ = desk ? 4 : 12;
            const int depth = desk ? 4 : 12;
            const int mlp = desk ? 2 * exp_dim_ : 4 * exp_dim_;
            require(spec_.input_size % patch_ == 0, ErrorKind::ConfigError, "patch must divide input_size");
            const int grid = spec_.input_size / patch_;
            tokens_ = grid * grid + 1;
            patch_embed_ = nn::Conv("vit.embed", 1, exp_dim_, patch_, patch_, 0);
            cls_token_name_ = "vit.cls";
            pos_embed_name_ = "vit.pos";
            for (int l = 0; l < depth; ++l) {
                EncoderLayer layer;
                const std::string p = "vit.l" + std::to_string(l);
                layer.ln1 = nn::LayerNorm(p + ".ln1", exp_dim_);
                layer.attn = nn::MultiHeadSelfAttention(p + ".attn", exp_dim_, heads_);
                layer.ln2 = nn::LayerNorm(p + ".ln2", exp_dim_);
                layer.fc1 = nn::Linear(p + ".fc1", exp_dim_, mlp);
                layer.fc2 = nn::Linear(p + ".fc2", mlp, exp_dim_);
                encoder_.push_back(std::move(layer));
            }
            final_ln_ = nn::LayerNorm("vit.ln", exp_dim_);
            feature_width_ = exp_dim_;
            break;
        }
    }
    head_ = nn::Linear("head.fc", feature_width_, spec_.class_count);
}

void DownstreamModel::init_params(ParameterStore& ps, Rng& rng) const {
    switch (spec_.family) {
        case Family::residual:
            stem_.build(ps, rng);
            for (const auto& b : res_blocks_) {
                b.gn1.build(ps);
                b.conv1.build(ps, rng);
                b.gn2.build(ps);
                b.conv2.build(ps, rng);
                if (b.bottleneck) {
                    b.gn3.build(ps);
                    b.conv3.build(ps, rng);
                }
                if (b.has_skip) b.skip.build(ps, rng);
            }
            head_norm_.build(ps);
            break;
        case Family::dense:
            stem_.build(ps, rng);
            for (const auto& l : dense_layers_) {
                l.gn1.build(ps);
                l.conv1.build(ps, rng);
                if (l.bottleneck) {
                    l.gn2.build(ps);
                    l.conv2.build(ps, rng);
                }
            }
            for (const auto& t : transitions_) {
                t.gn.build(ps);
                t.conv.build(ps, rng);
            }
            head_norm_.build(ps);
            break;
        case Family::plainconv:
            for (size_t i = 0; i < plain_convs_.size(); ++i) {
                plain_convs_[i].build(ps, rng);
                plain_norms_[i].build(ps);
            }
            for (const auto& fc : fc_stack_) fc.build(ps, rng);
            break;
        case Family::patch_transformer: {
            patch_embed_.build(ps, rng);
            Tensor& cls = ps.create(cls_token_name_, {exp_dim_});
            for (int64_t i = 0; i < cls.size(); ++i) cls[i] = 0.02 * rng.gaussian();
            Tensor& pos = ps.create(pos_embed_name_, {tokens_, exp_dim_});
            for (int64_t i = 0; i < pos.size(); ++i) pos[i] = 0.02 * rng.gaussian();
            for (const auto& l : encoder_) {
                l.ln1.build(ps);
                l.attn.build(ps, rng);
                l.ln2.build(ps);
                l.fc1.build(ps, rng);
                l.fc2.build(ps, rng);
            }
            final_ln_.build(ps);
            break;
        }
    }
    head_.build(ps, rng, 0.0);
}

ad::Ref DownstreamModel::res_block_forward(ad::Graph& g, const ParameterStore& ps, ad::Ref x,
                                           const ResStage& s) const {
    ad::Ref h = ad::silu(g, s.gn1.forward(g, ps, x));
    h = s.conv1.forward(g, ps, h);
    h = s.conv2.forward(g, ps, ad::silu(g, s.gn2.forward(g, ps, h)));
    if (s.bottleneck) h = s.conv3.forward(g, ps, ad::silu(g, s.gn3.forward(g, ps, h)));
    ad::Ref skip = s.has_skip ? s.skip.forward(g, ps, x) : x;
    return ad::add(g, h, skip);
}

DownstreamModel::Outputs DownstreamModel::forward(ad::Graph& g, const ParameterStore& ps, ad::Ref x,
                                                  Rng& dropout_rng) const {
    const Tensor& xv = g.val(x);
    require(xv.rank() == 4 && xv.dim(1) == 1 && xv.dim(2) == spec_.input_size &&
                xv.dim(3) == spec_.input_size,
            ErrorKind::ShapeMismatch, "downstream input must be (N,1,S,S), got " + xv.shape_str());
    ad::Ref feat;
    switch (spec_.family) {
        case Family::residual: {
            ad::Ref h = stem_.forward(g, ps, x);
            for (const auto& b : res_blocks_) h = res_block_forward(g, ps, h, b);
            feat = ad::global_avg_pool(g, ad::silu(g, head_norm_.forward(g, ps, h)));
            break;
        }
        case Family::dense: {
            ad::Ref h = stem_.forward(g, ps, x);
            size_t li = 0, ti = 0;
            for (size_t blk = 0; blk < dense_block_sizes_.size(); ++blk) {
                for (int l = 0; l < dense_block_sizes_[blk]; ++l, ++li) {
                    const DenseLayer& dl = dense_layers_[li];
                    ad::Ref out = dl.conv1.forward(g, ps, ad::silu(g, dl.gn1.forward(g, ps, h)));
                    if (dl.bottleneck) out = dl.conv2.forward(g, ps, ad::silu(g, dl.gn2.forward(g, ps, out)));
                    h = ad::concat_channels(g, h, out);
                }
                if (blk + 1 < dense_block_sizes_.size()) {
                    const Transition& tr = transitions_[ti++];
                    h = tr.conv.forward(g, ps, ad::silu(g, tr.gn.forward(g, ps, h)));
                    h = ad::avg_pool2(g, h);
                }
            }
            feat = ad::global_avg_pool(g, ad::silu(g, head_norm_.forward(g, ps, h)));
            break;
        }
        case Family::plainconv: {
            ad::Ref h = x;
            size_t pool_idx = 0;
            for (size_t i = 0; i < plain_convs_.size(); ++i) {
                h = ad::silu(g, plain_norms_[i].forward(g, ps, plain_convs_[i].forward(g, ps, h)));
                if (pool_idx < plain_pool_after_.size() &&
                    plain_pool_after_[pool_idx] == static_cast<int>(i)) {
                    h = ad::max_pool2(g, h);
                    ++pool_idx;
                }
            }
            const Tensor& hv = g.val(h);
            ad::Ref flat = ad::reshape(g, h, {hv.dim(0), hv.dim(1) * hv.dim(2) * hv.dim(3)});
            for (const auto& fc : fc_stack_) {
                flat = ad::silu(g, fc.forward(g, ps, flat));
                if (dropout_ > 0) flat = ad::dropout(g, flat, dropout_, dropout_rng);
            }
            feat = flat;
            break;
        }
        case Family::patch_transformer: {
            ad::Ref h = ad::nchw_to_nsc(g, patch_embed_.forward(g, ps, x));  // (N, grid^2, D)
            h = ad::prepend_row_broadcast(g, h, g.param(ps, cls_token_name_));
            h = ad::add_positional(g, h, g.param(ps, pos_embed_name_));
            const int n = g.val(h).dim(0), s = g.val(h).dim(1);
            for (const auto& l : encoder_) {
                h = ad::add(g, h, l.attn.forward(g, ps, l.ln1.forward(g, ps, h)));
                ad::Ref m = ad::reshape(g, l.ln2.forward(g, ps, h), {n * s, exp_dim_});
                m = l.fc2.forward(g, ps, ad::gelu(g, l.fc1.forward(g, ps, m)));
                h = ad::add(g, h, ad::reshape(g, m, {n, s, exp_dim_}));
            }
            feat = ad::take_row(g, final_ln_.forward(g, ps, h), 0);
            break;
        }
    }
    Outputs out;
    out.penultimate = feat;
    out.logits = head_.forward(g, ps, feat);
    return out;
}

Tensor DownstreamModel::logits_eval(const ParameterStore& ps, const Tensor& x) const {
    ad::Graph g(false, false);
    Rng dummy(0);
    return g.val(forward(g, ps, g.constant(x), dummy).logits);
}

Tensor DownstreamModel::features_eval(const ParameterStore& ps, const Tensor& x,
                                      const std::string& layer) const {
    require(layer == "penultimate", ErrorKind::UnknownLayer, "no such layer: " + layer);
    ad::Graph g(false, false);
    Rng dummy(0);
    return g.val(forward(g, ps, g.constant(x), dummy).penultimate);
}

int DownstreamModel::feature_dim(const std::string& layer) const {
    require(layer == "penultimate", ErrorKind::UnknownLayer, "no such layer: " + layer);
    return feature_width_;
}

int DownstreamModel::token_count() const {
    require(spec_.family == Family::patch_transformer, ErrorKind::ConfigError,
            "token_count applies to patch_transformer only");
    return tokens_;
}

std::vector<Prediction> DownstreamModel::predict_batch(const ParameterStore& ps, const Tensor& x) const {
    const Tensor logits = logits_eval(ps, x);
    const int n = logits.dim(0), k = logits.dim(1);
    std::vector<Prediction> out(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double* row = logits.data() + static_cast<int64_t>(i) * k;
        double mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        Prediction& p = out[static_cast<size_t>(i)];
        p.probabilities.resize(static_cast<size_t>(k));
        double z = 0;
        for (int j = 0; j < k; ++j) {
            p.probabilities[static_cast<size_t>(j)] = std::exp(row[j] - mx);
            z += p.probabilities[static_cast<size_t>(j)];
        }
        for (int j = 0; j < k; ++j) p.probabilities[static_cast<size_t>(j)] /= z;
        p.predicted_class = 0;
        for (int j = 1; j < k; ++j)
            if (p.probabilities[static_cast<size_t>(j)] >
                p.probabilities[static_cast<size_t>(p.predicted_class)])
                p.predicted_class = j;
        p.confidence = p.probabilities[static_cast<size_t>(p.predicted_class)];
    }
    return out;
}

Prediction predict_confidence(const DownstreamModel& model, const ParameterStore& ps, const Tensor& image) {
    require(image.rank() == 3 && image.dim(0) == 1, ErrorKind::ShapeMismatch,
            "predict_confidence expects (1,S,S), got " + image.shape_str());
    Tensor batch = image.reshaped({1, 1, image.dim(1), image.dim(2)});
    return model.predict_batch(ps, batch)[0];
}

}  // namespace diffaug
