#include "diffaug/nn.hpp"

#include <cmath>

namespace diffaug {

Tensor& ParameterStore::create(const std::string& name, std::vector<int> shape) {
    require(params_.count(name) == 0, ErrorKind::ConfigError, "parameter already exists: " + name);
    auto [it, ok] = params_.emplace(name, Tensor(std::move(shape)));
    (void)ok;
    order_.push_back(name);
    return it->second;
}

const Tensor& ParameterStore::get(const std::string& name) const {
    auto it = params_.find(name);
    require(it != params_.end(), ErrorKind::UnknownLayer, "no such parameter: " + name);
    return it->second;
}

Tensor& ParameterStore::get_mutable(const std::string& name) {
    auto it = params_.find(name);
    require(it != params_.end(), ErrorKind::UnknownLayer, "no such parameter: " + name);
    return it->second;
}

int64_t ParameterStore::total_parameters() const {
    int64_t n = 0;
    for (const auto& name : order_) n += params_.at(name).size();
    return n;
}

void ParameterStore::require_all_finite() const {
    for (const auto& name : order_)
        require(params_.at(name).all_finite(), ErrorKind::NonFiniteLoss, "non-finite weights in " + name);
}

namespace nn {

namespace {

// He-style fan-in initialization; scale < 0 selects it, scale >= 0 overrides
// to gaussian(0, scale) (scale 0 => zero init).
void init_weight(Tensor& w, int fan_in, Rng& rng, double scale) {
    const double sd = scale < 0 ? std::sqrt(2.0 / fan_in) : scale;
    if (sd == 0.0) {
        w.flat().setZero();
        return;
    }
    for (int64_t i = 0; i < w.size(); ++i) w[i] = sd * rng.gaussian();
}

}  // namespace

void Linear::build(ParameterStore& ps, Rng& rng, double scale) const {
    init_weight(ps.create(w, {out, in}), in, rng, scale);
    ps.create(b, {out});
}

ad::Ref Linear::forward(ad::Graph& g, const ParameterStore& ps, ad::Ref x) const {
    return ad::linear(g, x, g.param(ps, w), g.param(ps, b));
}

void Conv::build(ParameterStore& ps, Rng& rng, double scale) const {
    init_weight(ps.create(w, {cout, cin, k, k}), cin * k * k, rng, scale);
    ps.create(b, {cout});
}

ad::Ref Conv::forward(ad::Graph& g, const ParameterStore& ps, ad::Ref x) const {
    return ad::conv2d(g, x, g.param(ps, w), g.param(ps, b), stride, pad);
}

void GroupNorm::build(ParameterStore& ps) const {
    ps.create(gamma, {channels}).flat().setOnes();
    ps.create(beta, {channels});
}

ad::Ref GroupNorm::forward(ad::Graph& g, const ParameterStore& ps, ad::Ref x) const {
    return ad::group_norm(g, x, g.param(ps, gamma), g.param(ps, beta), groups);
}

void LayerNorm::build(ParameterStore& ps) const {
    ps.create(gamma, {dim}).flat().setOnes();
    ps.create(beta, {dim});
}

ad::Ref LayerNorm::forward(ad::Graph& g, const ParameterStore& ps, ad::Ref x) const {
    return ad::layer_norm(g, x, g.param(ps, gamma), g.param(ps, beta));
}

void Embedding::build(ParameterStore& ps, Rng& rng, double scale) const {
    init_weight(ps.create(w, {rows, dim}), dim, rng, scale);
}

ad::Ref Embedding::forward(ad::Graph& g, const ParameterStore& ps, const std::vector<int>& ids) const {
    return ad::embedding(g, g.param(ps, w), ids);
}

SEGate::SEGate(const std::string& prefix, int channels, int reduction)
    : fc1(prefix + ".fc1", channels, channels / reduction),
      fc2(prefix + ".fc2", channels / reduction, channels),
      channels(channels),
      reduction(reduction) {
    require(channels % reduction == 0, ErrorKind::ShapeMismatch, "se_gate: reduction must divide channels");
}

void SEGate::build(ParameterStore& ps, Rng& rng) const {
    fc1.build(ps, rng);
    fc2.build(ps, rng);
}

ad::Ref SEGate::forward(ad::Graph& g, const ParameterStore& ps, ad::Ref x) const {
    ad::Ref s = ad::global_avg_pool(g, x);
    s = ad::relu(g, fc1.forward(g, ps, s));
    s = ad::sigmoid(g, fc2.forward(g, ps, s));
    return ad::scale_channels(g, x, s);
}

SEResBlock::SEResBlock(const std::string& prefix, int cin, int cout, int cond_dim, int se_reduction, int groups,
                       double dropout_p)
    : gn1(prefix + ".gn1", cin, groups),
      gn2(prefix + ".gn2", cout, groups),
      conv1(prefix + ".conv1", cin, cout, 3),
      conv2(prefix + ".conv2", cout, cout, 3),
      skip(prefix + ".skip", cin, cout, 1),
      cond_proj(prefix + ".cond", cond_dim, cout),
      se(prefix + ".se", cout, se_reduction),
      cin(cin),
      cout(cout),
      cond_dim(cond_dim),
      dropout_p(dropout_p) {}

void SEResBlock::build(ParameterStore& ps, Rng& rng) const {
    gn1.build(ps);
    gn2.build(ps);
    conv1.build(ps, rng);
    conv2.build(ps, rng);
    cond_proj.build(ps, rng);
    se.build(ps, rng);
    if (cin != cout) skip.build(ps, rng);
}

ad::Ref SEResBlock::forward(ad::Graph& g, const ParameterStore& ps, ad::Ref x, ad::Ref cond, Rng& rng) const {
    ad::Ref h = conv1.forward(g, ps, ad::silu(g, gn1.forward(g, ps, x)));
    if (cond.valid()) h = ad::add_channel_bias(g, h, cond_proj.forward(g, ps, cond));
    h = ad::silu(g, gn2.forward(g, ps, h));
    if (dropout_p > 0) h = ad::dropout(g, h, dropout_p, rng);
    h = conv2.forward(g, ps, h);
    h = se.forward(g, ps, h);
    ad::Ref res = (cin == cout) ? x : skip.forward(g, ps, x);
    return ad::add(g, h, res);
}

LinearAttention::LinearAttention(const std::string& prefix, int channels, int heads, int groups)
    : norm(prefix + ".norm", channels, groups),
      to_qkv(prefix + ".qkv", channels, 3 * channels, 1),
      to_out(prefix + ".out", channels, channels, 1),
      channels(channels),
      heads(heads) {
    require(channels % heads == 0, ErrorKind::ShapeMismatch, "linear_attention: heads must divide channels");
}

void LinearAttention::build(ParameterStore& ps, Rng& rng) const {
    norm.build(ps);
    to_qkv.build(ps, rng);
    to_out.build(ps, rng);
}

ad::Ref LinearAttention::forward(ad::Graph& g, const ParameterStore& ps, ad::Ref x) const {
    const Tensor& xv = g.val(x);
    const int h = xv.dim(2), w = xv.dim(3);
    ad::Ref qkv = to_qkv.forward(g, ps, norm.forward(g, ps, x));
    // qkv: (N, 3C, H, W) -> tokens (N, S, 3C); rows of (N*S, 3, C) are q/k/v.
    ad::Ref tokens = ad::nchw_to_nsc(g, qkv);
    const int n = g.val(tokens).dim(0), s = g.val(tokens).dim(1);
    ad::Ref packed = ad::reshape(g, tokens, {n * s, 3, channels});
    ad::Ref qs = ad::reshape(g, ad::take_row(g, packed, 0), {n, s, channels});
    ad::Ref ks = ad::reshape(g, ad::take_row(g, packed, 1), {n, s, channels});
    ad::Ref vs = ad::reshape(g, ad::take_row(g, packed, 2), {n, s, channels});
    qs = ad::split_heads(g, qs, heads);  // (N*H, S, Dh)
    ks = ad::split_heads(g, ks, heads);
    vs = ad::split_heads(g, vs, heads);
    const int dh = channels / heads;
    qs = ad::scale(g, ad::softmax_lastdim(g, qs), 1.0 / std::sqrt(static_cast<double>(dh)));
    // Keys softmax over positions: transpose to (., Dh, S), softmax, keep.
    ad::Ref kt = ad::softmax_lastdim(g, ad::transpose12(g, ks));  // (N*H, Dh, S)
    ad::Ref context = ad::bmm(g, kt, vs);                         // (N*H, Dh, Dh)
    ad::Ref out = ad::bmm(g, qs, context);                        // (N*H, S, Dh)
    out = ad::merge_heads(g, out, heads);
    out = ad::nsc_to_nchw(g, out, h, w);
    return ad::add(g, to_out.forward(g, ps, out), x);
}

MultiHeadSelfAttention::MultiHeadSelfAttention(const std::string& prefix, int dim, int heads)
    : to_q(prefix + ".q", dim, dim),
      to_k(prefix + ".k", dim, dim),
      to_v(prefix + ".v", dim, dim),
      to_out(prefix + ".out", dim, dim),
      dim(dim),
      heads(heads) {
    require(dim % heads == 0, ErrorKind::ShapeMismatch, "attention: heads must divide dim");
}

void MultiHeadSelfAttention::build(ParameterStore& ps, Rng& rng, double out_scale) const {
    to_q.build(ps, rng);
    to_k.build(ps, rng);
    to_v.build(ps, rng);
    to_out.build(ps, rng, out_scale);
}

ad::Ref MultiHeadSelfAttention::forward(ad::Graph& g, const ParameterStore& ps, ad::Ref x,
                                        ad::Ref* attn_out) const {
    const Tensor& xv = g.val(x);
    const int n = xv.dim(0), s = xv.dim(1);
    auto proj = [&](const Linear& l) {
        ad::Ref flat = ad::reshape(g, x, {n * s, dim});
        return ad::split_heads(g, ad::reshape(g, l.forward(g, ps, flat), {n, s, dim}), heads);
    };
    ad::Ref q = proj(to_q);  // (N*H, S, Dh)
    ad::Ref k = proj(to_k);
    ad::Ref v = proj(to_v);
    const int dh = dim / heads;
    ad::Ref scores = ad::bmm(g, ad::scale(g, q, 1.0 / std::sqrt(static_cast<double>(dh))),
                             ad::transpose12(g, k));          // (N*H, S, S)
    ad::Ref attn = ad::softmax_lastdim(g, scores);
    if (attn_out) *attn_out = attn;
    ad::Ref out = ad::merge_heads(g, ad::bmm(g, attn, v), heads);  // (N, S, D)
    out = ad::reshape(g, to_out.forward(g, ps, ad::reshape(g, out, {n * s, dim})), {n, s, dim});
    return out;
}

}  // namespace nn
}  // namespace diffaug
