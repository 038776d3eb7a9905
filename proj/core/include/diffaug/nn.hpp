#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "diffaug/graph.hpp"
#include "diffaug/random.hpp"
#include "diffaug/tensor.hpp"

namespace diffaug {

// Flat collection of named weight arrays with hierarchical dotted names.
// Creation order is recorded so parameter counts and checkpoint layout are
// reproducible for a given architecture config.
class ParameterStore {
  public:
    Tensor& create(const std::string& name, std::vector<int> shape);
    const Tensor& get(const std::string& name) const;
    Tensor& get_mutable(const std::string& name);
    bool has(const std::string& name) const { return params_.count(name) > 0; }

    const std::vector<std::string>& names() const { return order_; }
    int64_t total_parameters() const;
    void require_all_finite() const;

  private:
    std::unordered_map<std::string, Tensor> params_;
    std::vector<std::string> order_;
};

namespace nn {

// Layer structs carry only names and dimensions; weights live in the store.
// build() creates and initializes the arrays, forward() binds them on a graph.

struct Linear {
    std::string w, b;
    int in = 0, out = 0;

    Linear() = default;
    Linear(const std::string& prefix, int in, int out) : w(prefix + ".w"), b(prefix + ".b"), in(in), out(out) {}
    // scale < 0 selects He initialization; scale == 0 gives a zero layer.
    void build(ParameterStore& ps, Rng& rng, double scale = -1.0) const;
    ad::Ref forward(ad::Graph& g, const ParameterStore& ps, ad::Ref x) const;
};

struct Conv {
    std::string w, b;
    int cin = 0, cout = 0, k = 3, stride = 1, pad = 1;

    Conv() = default;
    Conv(const std::string& prefix, int cin, int cout, int k = 3, int stride = 1, int pad = -1)
        : w(prefix + ".w"), b(prefix + ".b"), cin(cin), cout(cout), k(k), stride(stride),
          pad(pad < 0 ? (k - 1) / 2 : pad) {}
    void build(ParameterStore& ps, Rng& rng, double scale = -1.0) const;
    ad::Ref forward(ad::Graph& g, const ParameterStore& ps, ad::Ref x) const;
};

struct GroupNorm {
    std::string gamma, beta;
    int channels = 0, groups = 8;

    GroupNorm() = default;
    GroupNorm(const std::string& prefix, int channels, int groups = 8)
        : gamma(prefix + ".gamma"), beta(prefix + ".beta"), channels(channels), groups(groups) {}
    void build(ParameterStore& ps) const;
    ad::Ref forward(ad::Graph& g, const ParameterStore& ps, ad::Ref x) const;
};

struct LayerNorm {
    std::string gamma, beta;
    int dim = 0;

    LayerNorm() = default;
    LayerNorm(const std::string& prefix, int dim)
        : gamma(prefix + ".gamma"), beta(prefix + ".beta"), dim(dim) {}
    void build(ParameterStore& ps) const;
    ad::Ref forward(ad::Graph& g, const ParameterStore& ps, ad::Ref x) const;
};

struct Embedding {
    std::string w;
    int rows = 0, dim = 0;

    Embedding() = default;
    Embedding(const std::string& prefix, int rows, int dim) : w(prefix + ".w"), rows(rows), dim(dim) {}
    void build(ParameterStore& ps, Rng& rng, double scale = 0.02) const;
    // ids[i] < 0 selects a zero row (unconditional).
    ad::Ref forward(ad::Graph& g, const ParameterStore& ps, const std::vector<int>& ids) const;
};

// Squeeze-and-excitation gate: per-channel sigmoid scale from global pooling.
struct SEGate {
    Linear fc1, fc2;
    int channels = 0, reduction = 1;

    SEGate() = default;
    SEGate(const std::string& prefix, int channels, int reduction);
    void build(ParameterStore& ps, Rng& rng) const;
    ad::Ref forward(ad::Graph& g, const ParameterStore& ps, ad::Ref x) const;
};

// SE-ResNet block with additive conditioning:
//   h = conv1(silu(gn1(x))); h += proj(cond) per channel;
//   h = conv2(dropout(silu(gn2(h)))); h = se(h); return h + skip(x).
struct SEResBlock {
    GroupNorm gn1, gn2;
    Conv conv1, conv2, skip;
    Linear cond_proj;
    SEGate se;
    int cin = 0, cout = 0, cond_dim = 0;
    double dropout_p = 0.0;

    SEResBlock() = default;
    SEResBlock(const std::string& prefix, int cin, int cout, int cond_dim, int se_reduction, int groups,
               double dropout_p);
    void build(ParameterStore& ps, Rng& rng) const;
    // cond: (N, cond_dim); pass invalid Ref for an unconditioned block.
    ad::Ref forward(ad::Graph& g, const ParameterStore& ps, ad::Ref x, ad::Ref cond, Rng& rng) const;
};

// Linear attention over spatial positions (softmax-normalized queries over
// the feature axis, keys over positions), with group norm and residual add.
struct LinearAttention {
    GroupNorm norm;
    Conv to_qkv, to_out;
    int channels = 0, heads = 1;

    LinearAttention() = default;
    LinearAttention(const std::string& prefix, int channels, int heads, int groups = 8);
    void build(ParameterStore& ps, Rng& rng) const;
    ad::Ref forward(ad::Graph& g, const ParameterStore& ps, ad::Ref x) const;
};

// Standard softmax self-attention on (N,S,D) token tensors. The post-softmax
// attention node is exposed for introspection.
struct MultiHeadSelfAttention {
    Linear to_q, to_k, to_v, to_out;
    int dim = 0, heads = 1;

    MultiHeadSelfAttention() = default;
    MultiHeadSelfAttention(const std::string& prefix, int dim, int heads);
    void build(ParameterStore& ps, Rng& rng, double out_scale = -1.0) const;
    ad::Ref forward(ad::Graph& g, const ParameterStore& ps, ad::Ref x, ad::Ref* attn_out = nullptr) const;
};

}  // namespace nn
}  // namespace diffaug
