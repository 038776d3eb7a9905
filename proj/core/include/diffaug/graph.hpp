#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "diffaug/random.hpp"
#include "diffaug/tensor.hpp"

namespace diffaug {

class ParameterStore;

namespace ad {

// Handle into a Graph's node list. Graphs are single-use tapes: build a
// forward pass, optionally call backward once, then discard.
struct Ref {
    int id = -1;
    bool valid() const { return id >= 0; }
};

class Graph {
  public:
    explicit Graph(bool training = false, bool grads_enabled = true, bool param_grads = true)
        : training(training), grads_enabled(grads_enabled), param_grads_enabled(param_grads) {}

    bool training;
    bool grads_enabled;
    // When false, bound parameters are constants; only explicit leaves get
    // gradients (input-gradient queries during guided sampling).
    bool param_grads_enabled;

    Ref leaf(Tensor value, bool requires_grad = false);
    Ref constant(Tensor value) { return leaf(std::move(value), false); }

    // Binds a named parameter as a leaf (cached: the same name yields the
    // same node within one graph, so shared weights accumulate gradients).
    Ref param(const ParameterStore& store, const std::string& name);

    const Tensor& val(Ref r) const { return nodes_[static_cast<size_t>(r.id)].value; }
    const Tensor& grad(Ref r) const;
    bool has_grad(Ref r) const { return !nodes_[static_cast<size_t>(r.id)].grad.empty(); }

    // Reverse pass from a scalar root. Gradients accumulate into every node
    // reachable from a requires_grad leaf.
    void backward(Ref root);

    // Gradients of bound parameters, in binding order. Parameters never
    // touched by the forward pass are absent.
    std::vector<std::pair<std::string, const Tensor*>> param_grads() const;

    size_t node_count() const { return nodes_.size(); }

    // --- internals used by op implementations ---
    struct Node {
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        std::function<void(Graph&, int self)> backward_fn;
    };

    Ref add_node(Tensor value, const std::vector<Ref>& parents, std::function<void(Graph&, int)> bw);
    bool needs(Ref r) const { return nodes_[static_cast<size_t>(r.id)].needs_grad; }
    // Zero-initialized gradient accumulator for a node.
    Tensor& grad_buf(Ref r);
    Tensor& grad_buf(int id) { return grad_buf(Ref{id}); }
    const Tensor& node_value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    const Tensor& node_grad(int id) const { return nodes_[static_cast<size_t>(id)].grad; }

  private:
    std::vector<Node> nodes_;
    std::unordered_map<std::string, int> param_nodes_;
    std::vector<std::string> param_order_;
};

// ---- elementwise / arithmetic ----
Ref add(Graph& g, Ref a, Ref b);
Ref sub(Graph& g, Ref a, Ref b);
Ref mul(Graph& g, Ref a, Ref b);
Ref scale(Graph& g, Ref a, double s);

// ---- dense / matrix ----
Ref matmul(Graph& g, Ref a, Ref b);                 // (M,K)x(K,N)
Ref linear(Graph& g, Ref x, Ref w, Ref b);          // x:(N,Din) w:(Dout,Din) b:(Dout)
Ref bmm(Graph& g, Ref a, Ref b);                    // (B,M,K)x(B,K,N)
Ref transpose2(Graph& g, Ref a);                    // (M,N)->(N,M)
Ref transpose12(Graph& g, Ref a);                   // (B,M,N)->(B,N,M)

// ---- convolution / spatial ----
Ref conv2d(Graph& g, Ref x, Ref w, Ref b, int stride, int pad);
Ref upsample_nearest2(Graph& g, Ref x);
Ref avg_pool2(Graph& g, Ref x);
Ref max_pool2(Graph& g, Ref x);
Ref global_avg_pool(Graph& g, Ref x);               // (N,C,H,W)->(N,C)

// ---- normalization ----
Ref group_norm(Graph& g, Ref x, Ref gamma, Ref beta, int groups, double eps = 1e-5);
Ref layer_norm(Graph& g, Ref x, Ref gamma, Ref beta, double eps = 1e-5);  // over last dim

// ---- activations ----
Ref silu(Graph& g, Ref a);
Ref relu(Graph& g, Ref a);
Ref sigmoid(Graph& g, Ref a);
Ref gelu(Graph& g, Ref a);
Ref softmax_lastdim(Graph& g, Ref a);
Ref log_softmax_lastdim(Graph& g, Ref a);

// ---- shape / broadcast ----
Ref reshape(Graph& g, Ref a, std::vector<int> shape);
Ref concat_channels(Graph& g, Ref a, Ref b);        // along C of (N,C,H,W)
Ref scale_channels(Graph& g, Ref x, Ref s);         // x:(N,C,H,W) * s:(N,C)
Ref add_channel_bias(Graph& g, Ref x, Ref b);       // x:(N,C,H,W) + b:(N,C)
Ref add_row_bias(Graph& g, Ref x, Ref b);           // x:(N,D) + b:(D)
Ref split_heads(Graph& g, Ref x, int heads);        // (N,S,C)->(N*H,S,C/H)
Ref merge_heads(Graph& g, Ref x, int heads);        // (N*H,S,Dh)->(N,S,H*Dh)
Ref nchw_to_nsc(Graph& g, Ref x);                   // (N,C,H,W)->(N,H*W,C)
Ref nsc_to_nchw(Graph& g, Ref x, int h, int w);
Ref prepend_row_broadcast(Graph& g, Ref x, Ref token);  // (N,S,D)+(D)->(N,S+1,D)
Ref add_positional(Graph& g, Ref x, Ref pos);       // (N,S,D)+(S,D)
Ref take_row(Graph& g, Ref x, int row);             // (N,S,D)->(N,D)

// ---- tables / regularization ----
// Rows for ids[i] >= 0; ids[i] < 0 yields a zero row (no gradient flow).
Ref embedding(Graph& g, Ref table, const std::vector<int>& ids);
Ref dropout(Graph& g, Ref x, double p, Rng& rng);

// ---- reductions / losses ----
Ref sum_all(Graph& g, Ref a);
Ref mean_all(Graph& g, Ref a);
Ref mse_loss(Graph& g, Ref pred, const Tensor& target);
Ref cross_entropy(Graph& g, Ref logits, const std::vector<int>& labels);

}  // namespace ad
}  // namespace diffaug
