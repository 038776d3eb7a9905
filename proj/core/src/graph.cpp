#include "diffaug/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "diffaug/nn.hpp"

namespace diffaug::ad {

namespace {

void check_rank(const Tensor& t, int rank, const char* where) {
    require(t.rank() == rank, ErrorKind::ShapeMismatch,
            std::string(where) + ": expected rank " + std::to_string(rank) + ", got " + t.shape_str());
}

}  // namespace

Ref Graph::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = requires_grad && grads_enabled;
    nodes_.push_back(std::move(n));
    return Ref{static_cast<int>(nodes_.size()) - 1};
}

Ref Graph::param(const ParameterStore& store, const std::string& name) {
    auto it = param_nodes_.find(name);
    if (it != param_nodes_.end()) return Ref{it->second};
    Ref r = leaf(store.get(name), grads_enabled && param_grads_enabled);
    param_nodes_.emplace(name, r.id);
    param_order_.push_back(name);
    return r;
}

const Tensor& Graph::grad(Ref r) const {
    const Node& n = nodes_[static_cast<size_t>(r.id)];
    require(!n.grad.empty(), ErrorKind::ShapeMismatch, "grad: node has no gradient (run backward first)");
    return n.grad;
}

Ref Graph::add_node(Tensor value, const std::vector<Ref>& parents, std::function<void(Graph&, int)> bw) {
    Node n;
    n.value = std::move(value);
    for (Ref p : parents) {
        if (nodes_[static_cast<size_t>(p.id)].needs_grad) {
            n.needs_grad = true;
            break;
        }
    }
    if (n.needs_grad) n.backward_fn = std::move(bw);
    nodes_.push_back(std::move(n));
    return Ref{static_cast<int>(nodes_.size()) - 1};
}

Tensor& Graph::grad_buf(Ref r) {
    Node& n = nodes_[static_cast<size_t>(r.id)];
    if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
    return n.grad;
}

void Graph::backward(Ref root) {
    Node& rn = nodes_[static_cast<size_t>(root.id)];
    require(rn.value.size() == 1, ErrorKind::ShapeMismatch, "backward: root must be scalar");
    if (!rn.needs_grad) return;
    grad_buf(root)[0] = 1.0;
    for (int id = root.id; id >= 0; --id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.backward_fn && !n.grad.empty()) n.backward_fn(*this, id);
    }
}

std::vector<std::pair<std::string, const Tensor*>> Graph::param_grads() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (const std::string& name : param_order_) {
        const Node& n = nodes_[static_cast<size_t>(param_nodes_.at(name))];
        if (!n.grad.empty()) out.emplace_back(name, &n.grad);
    }
    return out;
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Ref add(Graph& g, Ref a, Ref b) {
    check_same_shape(g.val(a), g.val(b), "add");
    Tensor out = g.val(a);
    out.flat() += g.val(b).flat();
    return g.add_node(std::move(out), {a, b}, [a, b](Graph& g, int self) {
        const Tensor& go = g.node_grad(self);
        if (g.needs(a)) g.grad_buf(a).flat() += go.flat();
        if (g.needs(b)) g.grad_buf(b).flat() += go.flat();
    });
}

Ref sub(Graph& g, Ref a, Ref b) {
    check_same_shape(g.val(a), g.val(b), "sub");
    Tensor out = g.val(a);
    out.flat() -= g.val(b).flat();
    return g.add_node(std::move(out), {a, b}, [a, b](Graph& g, int self) {
        const Tensor& go = g.node_grad(self);
        if (g.needs(a)) g.grad_buf(a).flat() += go.flat();
        if (g.needs(b)) g.grad_buf(b).flat() -= go.flat();
    });
}

Ref mul(Graph& g, Ref a, Ref b) {
    check_same_shape(g.val(a), g.val(b), "mul");
    Tensor out = g.val(a);
    out.flat() *= g.val(b).flat();
    return g.add_node(std::move(out), {a, b}, [a, b](Graph& g, int self) {
        const Tensor& go = g.node_grad(self);
        if (g.needs(a)) g.grad_buf(a).flat() += go.flat() * g.val(b).flat();
        if (g.needs(b)) g.grad_buf(b).flat() += go.flat() * g.val(a).flat();
    });
}

Ref scale(Graph& g, Ref a, double s) {
    Tensor out = g.val(a);
    out.flat() *= s;
    return g.add_node(std::move(out), {a}, [a, s](Graph& g, int self) {
        if (g.needs(a)) g.grad_buf(a).flat() += s * g.node_grad(self).flat();
    });
}

// ---------------------------------------------------------------------------
// dense / matrix
// ---------------------------------------------------------------------------

Ref matmul(Graph& g, Ref a, Ref b) {
    const Tensor& av = g.val(a);
    const Tensor& bv = g.val(b);
    check_rank(av, 2, "matmul");
    check_rank(bv, 2, "matmul");
    const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    require(bv.dim(0) == k, ErrorKind::ShapeMismatch,
            "matmul: inner dims " + av.shape_str() + " x " + bv.shape_str());
    Tensor out({m, n});
    out.mat(m, n).noalias() = av.mat(m, k) * bv.mat(k, n);
    return g.add_node(std::move(out), {a, b}, [a, b, m, k, n](Graph& g, int self) {
        const Tensor& go = g.node_grad(self);
        if (g.needs(a)) g.grad_buf(a).mat(m, k).noalias() += go.mat(m, n) * g.val(b).mat(k, n).transpose();
        if (g.needs(b)) g.grad_buf(b).mat(k, n).noalias() += g.val(a).mat(m, k).transpose() * go.mat(m, n);
    });
}

Ref linear(Graph& g, Ref x, Ref w, Ref b) {
    const Tensor& xv = g.val(x);
    const Tensor& wv = g.val(w);
    const Tensor& bv = g.val(b);
    check_rank(xv, 2, "linear");
    check_rank(wv, 2, "linear");
    const int n = xv.dim(0), din = xv.dim(1), dout = wv.dim(0);
    require(wv.dim(1) == din, ErrorKind::ShapeMismatch, "linear: weight in-dim mismatch");
    require(bv.size() == dout, ErrorKind::ShapeMismatch, "linear: bias size mismatch");
    Tensor out({n, dout});
    out.mat(n, dout).noalias() = xv.mat(n, din) * wv.mat(dout, din).transpose();
    out.mat(n, dout).rowwise() += bv.mat(1, dout).row(0);
    return g.add_node(std::move(out), {x, w, b}, [x, w, b, n, din, dout](Graph& g, int self) {
        const Tensor& go = g.node_grad(self);
        if (g.needs(x)) g.grad_buf(x).mat(n, din).noalias() += go.mat(n, dout) * g.val(w).mat(dout, din);
        if (g.needs(w))
            g.grad_buf(w).mat(dout, din).noalias() += go.mat(n, dout).transpose() * g.val(x).mat(n, din);
        if (g.needs(b)) g.grad_buf(b).mat(1, dout).row(0) += go.mat(n, dout).colwise().sum();
    });
}

Ref bmm(Graph& g, Ref a, Ref b) {
    const Tensor& av = g.val(a);
    const Tensor& bv = g.val(b);
    check_rank(av, 3, "bmm");
    check_rank(bv, 3, "bmm");
    const int bb = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(2);
    require(bv.dim(0) == bb && bv.dim(1) == k, ErrorKind::ShapeMismatch,
            "bmm: " + av.shape_str() + " x " + bv.shape_str());
    Tensor out({bb, m, n});
    for (int i = 0; i < bb; ++i) {
        Eigen::Map<const MatrixRM> ai(av.data() + static_cast<int64_t>(i) * m * k, m, k);
        Eigen::Map<const MatrixRM> bi(bv.data() + static_cast<int64_t>(i) * k * n, k, n);
        Eigen::Map<MatrixRM> oi(out.data() + static_cast<int64_t>(i) * m * n, m, n);
        oi.noalias() = ai * bi;
    }
    return g.add_node(std::move(out), {a, b}, [a, b, bb, m, k, n](Graph& g, int self) {
        const Tensor& go = g.node_grad(self);
        for (int i = 0; i < bb; ++i) {
            Eigen::Map<const MatrixRM> gi(go.data() + static_cast<int64_t>(i) * m * n, m, n);
            if (g.needs(a)) {
                Eigen::Map<const MatrixRM> bi(g.val(b).data() + static_cast<int64_t>(i) * k * n, k, n);
                Eigen::Map<MatrixRM> ga(g.grad_buf(a).data() + static_cast<int64_t>(i) * m * k, m, k);
                ga.noalias() += gi * bi.transpose();
            }
            if (g.needs(b)) {
                Eigen::Map<const MatrixRM> ai(g.val(a).data() + static_cast<int64_t>(i) * m * k, m, k);
                Eigen::Map<MatrixRM> gb(g.grad_buf(b).data() + static_cast<int64_t>(i) * k * n, k, n);
                gb.noalias() += ai.transpose() * gi;
            }
        }
    });
}

Ref transpose2(Graph& g, Ref a) {
    const Tensor& av = g.val(a);
    check_rank(av, 2, "transpose2");
    const int m = av.dim(0), n = av.dim(1);
    Tensor out({n, m});
    out.mat(n, m) = av.mat(m, n).transpose();
    return g.add_node(std::move(out), {a}, [a, m, n](Graph& g, int self) {
        if (g.needs(a)) g.grad_buf(a).mat(m, n) += g.node_grad(self).mat(n, m).transpose();
    });
}

Ref transpose12(Graph& g, Ref a) {
    const Tensor& av = g.val(a);
    check_rank(av, 3, "transpose12");
    const int bb = av.dim(0), m = av.dim(1), n = av.dim(2);
    Tensor out({bb, n, m});
    for (int i = 0; i < bb; ++i) {
        Eigen::Map<const MatrixRM> ai(av.data() + static_cast<int64_t>(i) * m * n, m, n);
        Eigen::Map<MatrixRM> oi(out.data() + static_cast<int64_t>(i) * m * n, n, m);
        oi = ai.transpose();
    }
    return g.add_node(std::move(out), {a}, [a, bb, m, n](Graph& g, int self) {
        if (!g.needs(a)) return;
        const Tensor& go = g.node_grad(self);
        Tensor& ga = g.grad_buf(a);
        for (int i = 0; i < bb; ++i) {
            Eigen::Map<const MatrixRM> gi(go.data() + static_cast<int64_t>(i) * m * n, n, m);
            Eigen::Map<MatrixRM> gai(ga.data() + static_cast<int64_t>(i) * m * n, m, n);
            gai += gi.transpose();
        }
    });
}

// ---------------------------------------------------------------------------
// convolution / spatial
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
    int n, cin, h, w, cout, k, stride, pad, ho, wo;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
    check_rank(x, 4, "conv2d");
    check_rank(w, 4, "conv2d");
    ConvDims d;
    d.n = x.dim(0);
    d.cin = x.dim(1);
    d.h = x.dim(2);
    d.w = x.dim(3);
    d.cout = w.dim(0);
    d.k = w.dim(2);
    d.stride = stride;
    d.pad = pad;
    require(w.dim(1) == d.cin, ErrorKind::ShapeMismatch, "conv2d: channel mismatch");
    require(w.dim(3) == d.k, ErrorKind::ShapeMismatch, "conv2d: non-square kernel");
    require(d.h + 2 * pad >= d.k && d.w + 2 * pad >= d.k, ErrorKind::ShapeMismatch, "conv2d: kernel too large");
    d.ho = (d.h + 2 * pad - d.k) / stride + 1;
    d.wo = (d.w + 2 * pad - d.k) / stride + 1;
    return d;
}

// col is (Cin*k*k) x (Ho*Wo), row-major.
void im2col(const double* x, const ConvDims& d, double* col) {
    const int M = d.ho * d.wo;
    for (int ci = 0; ci < d.cin; ++ci) {
        for (int dy = 0; dy < d.k; ++dy) {
            for (int dx = 0; dx < d.k; ++dx) {
                double* row = col + (static_cast<int64_t>(ci) * d.k * d.k + dy * d.k + dx) * M;
                for (int oy = 0; oy < d.ho; ++oy) {
                    const int iy = oy * d.stride + dy - d.pad;
                    double* dst = row + oy * d.wo;
                    if (iy < 0 || iy >= d.h) {
                        std::fill(dst, dst + d.wo, 0.0);
                        continue;
                    }
                    const double* src = x + (static_cast<int64_t>(ci) * d.h + iy) * d.w;
                    for (int ox = 0; ox < d.wo; ++ox) {
                        const int ix = ox * d.stride + dx - d.pad;
                        dst[ox] = (ix >= 0 && ix < d.w) ? src[ix] : 0.0;
                    }
                }
            }
        }
    }
}

// Scatter-add of a (Cin*k*k) x (Ho*Wo) col gradient back onto the input image.
void col2im_add(const double* col, const ConvDims& d, double* gx) {
    const int M = d.ho * d.wo;
    for (int ci = 0; ci < d.cin; ++ci) {
        for (int dy = 0; dy < d.k; ++dy) {
            for (int dx = 0; dx < d.k; ++dx) {
                const double* row = col + (static_cast<int64_t>(ci) * d.k * d.k + dy * d.k + dx) * M;
                for (int oy = 0; oy < d.ho; ++oy) {
                    const int iy = oy * d.stride + dy - d.pad;
                    if (iy < 0 || iy >= d.h) continue;
                    double* dst = gx + (static_cast<int64_t>(ci) * d.h + iy) * d.w;
                    const double* src = row + oy * d.wo;
                    for (int ox = 0; ox < d.wo; ++ox) {
                        const int ix = ox * d.stride + dx - d.pad;
                        if (ix >= 0 && ix < d.w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Ref conv2d(Graph& g, Ref x, Ref w, Ref b, int stride, int pad) {
    const Tensor& xv = g.val(x);
    const Tensor& wv = g.val(w);
    const Tensor& bv = g.val(b);
    const ConvDims d = conv_dims(xv, wv, stride, pad);
    require(bv.size() == d.cout, ErrorKind::ShapeMismatch, "conv2d: bias size mismatch");
    const int K = d.cin * d.k * d.k;
    const int M = d.ho * d.wo;

    Tensor out({d.n, d.cout, d.ho, d.wo});
    Tensor col({K, M});
    Eigen::Map<const MatrixRM> wmat(wv.data(), d.cout, K);
    // One GEMM per sample keeps results independent of batch composition.
    for (int i = 0; i < d.n; ++i) {
        im2col(xv.data() + static_cast<int64_t>(i) * d.cin * d.h * d.w, d, col.data());
        Eigen::Map<MatrixRM> oi(out.data() + static_cast<int64_t>(i) * d.cout * M, d.cout, M);
        oi.noalias() = wmat * col.mat(K, M);
        for (int c = 0; c < d.cout; ++c) oi.row(c).array() += bv[c];
    }
    return g.add_node(std::move(out), {x, w, b}, [x, w, b, d, K, M](Graph& g, int self) {
        const Tensor& go = g.node_grad(self);
        const Tensor& xv = g.val(x);
        const Tensor& wv = g.val(w);
        Tensor col({K, M});
        Tensor gcol({K, M});
        Eigen::Map<const MatrixRM> wmat(wv.data(), d.cout, K);
        for (int i = 0; i < d.n; ++i) {
            Eigen::Map<const MatrixRM> gi(go.data() + static_cast<int64_t>(i) * d.cout * M, d.cout, M);
            const bool need_w = g.needs(w);
            if (need_w || g.needs(x)) im2col(xv.data() + static_cast<int64_t>(i) * d.cin * d.h * d.w, d, col.data());
            if (need_w) {
                Eigen::Map<MatrixRM> gw(g.grad_buf(w).data(), d.cout, K);
                gw.noalias() += gi * col.mat(K, M).transpose();
            }
            if (g.needs(b)) {
                Tensor& gb = g.grad_buf(b);
                for (int c = 0; c < d.cout; ++c) gb[c] += gi.row(c).sum();
            }
            if (g.needs(x)) {
                gcol.mat(K, M).noalias() = wmat.transpose() * gi;
                col2im_add(gcol.data(), d, g.grad_buf(x).data() + static_cast<int64_t>(i) * d.cin * d.h * d.w);
            }
        }
    });
}

Ref upsample_nearest2(Graph& g, Ref x) {
    const Tensor& xv = g.val(x);
    check_rank(xv, 4, "upsample_nearest2");
    const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    Tensor out({n, c, 2 * h, 2 * w});
    for (int i = 0; i < n * c; ++i) {
        const double* src = xv.data() + static_cast<int64_t>(i) * h * w;
        double* dst = out.data() + static_cast<int64_t>(i) * 4 * h * w;
        for (int y = 0; y < h; ++y) {
            for (int xx = 0; xx < w; ++xx) {
                const double v = src[y * w + xx];
                dst[(2 * y) * 2 * w + 2 * xx] = v;
                dst[(2 * y) * 2 * w + 2 * xx + 1] = v;
                dst[(2 * y + 1) * 2 * w + 2 * xx] = v;
                dst[(2 * y + 1) * 2 * w + 2 * xx + 1] = v;
            }
        }
    }
    return g.add_node(std::move(out), {x}, [x, n, c, h, w](Graph& g, int self) {
        if (!g.needs(x)) return;
        const Tensor& go = g.node_grad(self);
        Tensor& gx = g.grad_buf(x);
        for (int i = 0; i < n * c; ++i) {
            const double* src = go.data() + static_cast<int64_t>(i) * 4 * h * w;
            double* dst = gx.data() + static_cast<int64_t>(i) * h * w;
            for (int y = 0; y < h; ++y) {
                for (int xx = 0; xx < w; ++xx) {
                    dst[y * w + xx] += src[(2 * y) * 2 * w + 2 * xx] + src[(2 * y) * 2 * w + 2 * xx + 1] +
                                       src[(2 * y + 1) * 2 * w + 2 * xx] + src[(2 * y + 1) * 2 * w + 2 * xx + 1];
                }
            }
        }
    });
}

Ref avg_pool2(Graph& g, Ref x) {
    const Tensor& xv = g.val(x);
    check_rank(xv, 4, "avg_pool2");
    const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    require(h % 2 == 0 && w % 2 == 0, ErrorKind::ShapeMismatch, "avg_pool2: odd spatial size");
    Tensor out({n, c, h / 2, w / 2});
    for (int i = 0; i < n * c; ++i) {
        const double* src = xv.data() + static_cast<int64_t>(i) * h * w;
        double* dst = out.data() + static_cast<int64_t>(i) * (h / 2) * (w / 2);
        for (int y = 0; y < h / 2; ++y)
            for (int xx = 0; xx < w / 2; ++xx)
                dst[y * (w / 2) + xx] = 0.25 * (src[(2 * y) * w + 2 * xx] + src[(2 * y) * w + 2 * xx + 1] +
                                                src[(2 * y + 1) * w + 2 * xx] + src[(2 * y + 1) * w + 2 * xx + 1]);
    }
    return g.add_node(std::move(out), {x}, [x, n, c, h, w](Graph& g, int self) {
        if (!g.needs(x)) return;
        const Tensor& go = g.node_grad(self);
        Tensor& gx = g.grad_buf(x);
        for (int i = 0; i < n * c; ++i) {
            const double* src = go.data() + static_cast<int64_t>(i) * (h / 2) * (w / 2);
            double* dst = gx.data() + static_cast<int64_t>(i) * h * w;
            for (int y = 0; y < h / 2; ++y)
                for (int xx = 0; xx < w / 2; ++xx) {
                    const double v = 0.25 * src[y * (w / 2) + xx];
                    dst[(2 * y) * w + 2 * xx] += v;
                    dst[(2 * y) * w + 2 * xx + 1] += v;
                    dst[(2 * y + 1) * w + 2 * xx] += v;
                    dst[(2 * y + 1) * w + 2 * xx + 1] += v;
                }
        }
    });
}

Ref max_pool2(Graph& g, Ref x) {
    const Tensor& xv = g.val(x);
    check_rank(xv, 4, "max_pool2");
    const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    require(h % 2 == 0 && w % 2 == 0, ErrorKind::ShapeMismatch, "max_pool2: odd spatial size");
    Tensor out({n, c, h / 2, w / 2});
    // Ties resolve to the first element in scan order, deterministically.
    std::vector<int32_t> argmax(static_cast<size_t>(out.size()));
    int64_t oi = 0;
    for (int i = 0; i < n * c; ++i) {
        const double* src = xv.data() + static_cast<int64_t>(i) * h * w;
        for (int y = 0; y < h / 2; ++y) {
            for (int xx = 0; xx < w / 2; ++xx, ++oi) {
                const int cand[4] = {(2 * y) * w + 2 * xx, (2 * y) * w + 2 * xx + 1, (2 * y + 1) * w + 2 * xx,
                                     (2 * y + 1) * w + 2 * xx + 1};
                int best = cand[0];
                for (int j = 1; j < 4; ++j)
                    if (src[cand[j]] > src[best]) best = cand[j];
                out[oi] = src[best];
                argmax[static_cast<size_t>(oi)] = best;
            }
        }
    }
    return g.add_node(std::move(out), {x},
                      [x, n, c, h, w, argmax = std::move(argmax)](Graph& g, int self) {
                          if (!g.needs(x)) return;
                          const Tensor& go = g.node_grad(self);
                          Tensor& gx = g.grad_buf(x);
                          int64_t oi = 0;
                          for (int i = 0; i < n * c; ++i) {
                              double* dst = gx.data() + static_cast<int64_t>(i) * h * w;
                              const int64_t cells = static_cast<int64_t>(h / 2) * (w / 2);
                              for (int64_t j = 0; j < cells; ++j, ++oi) dst[argmax[static_cast<size_t>(oi)]] += go[oi];
                          }
                      });
}

Ref global_avg_pool(Graph& g, Ref x) {
    const Tensor& xv = g.val(x);
    check_rank(xv, 4, "global_avg_pool");
    const int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
    Tensor out({n, c});
    for (int i = 0; i < n * c; ++i) {
        const double* src = xv.data() + static_cast<int64_t>(i) * hw;
        double s = 0;
        for (int j = 0; j < hw; ++j) s += src[j];
        out[i] = s / hw;
    }
    return g.add_node(std::move(out), {x}, [x, n, c, hw](Graph& g, int self) {
        if (!g.needs(x)) return;
        const Tensor& go = g.node_grad(self);
        Tensor& gx = g.grad_buf(x);
        for (int i = 0; i < n * c; ++i) {
            const double v = go[i] / hw;
            double* dst = gx.data() + static_cast<int64_t>(i) * hw;
            for (int j = 0; j < hw; ++j) dst[j] += v;
        }
    });
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

Ref group_norm(Graph& g, Ref x, Ref gamma, Ref beta, int groups, double eps) {
    const Tensor& xv = g.val(x);
    check_rank(xv, 4, "group_norm");
    const int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
    require(c % groups == 0, ErrorKind::ShapeMismatch, "group_norm: channels not divisible by groups");
    require(g.val(gamma).size() == c && g.val(beta).size() == c, ErrorKind::ShapeMismatch,
            "group_norm: affine size mismatch");
    const int cg = c / groups;
    const int64_t m = static_cast<int64_t>(cg) * hw;

    Tensor out(xv.shape());
    Tensor mean({n, groups});
    Tensor istd({n, groups});
    const Tensor& gv = g.val(gamma);
    const Tensor& bv = g.val(beta);
    for (int i = 0; i < n; ++i) {
        for (int gr = 0; gr < groups; ++gr) {
            const double* src = xv.data() + (static_cast<int64_t>(i) * c + gr * cg) * hw;
            double mu = 0;
            for (int64_t j = 0; j < m; ++j) mu += src[j];
            mu /= static_cast<double>(m);
            double var = 0;
            for (int64_t j = 0; j < m; ++j) {
                const double dv = src[j] - mu;
                var += dv * dv;
            }
            var /= static_cast<double>(m);
            const double is = 1.0 / std::sqrt(var + eps);
            mean[i * groups + gr] = mu;
            istd[i * groups + gr] = is;
            double* dst = out.data() + (static_cast<int64_t>(i) * c + gr * cg) * hw;
            for (int cc = 0; cc < cg; ++cc) {
                const double ga = gv[gr * cg + cc], be = bv[gr * cg + cc];
                for (int j = 0; j < hw; ++j) {
                    const int64_t idx = static_cast<int64_t>(cc) * hw + j;
                    dst[idx] = ga * (src[idx] - mu) * is + be;
                }
            }
        }
    }
    return g.add_node(std::move(out), {x, gamma, beta},
                      [x, gamma, beta, n, c, hw, groups, cg, m, mean = std::move(mean),
                       istd = std::move(istd)](Graph& g, int self) {
                          const Tensor& go = g.node_grad(self);
                          const Tensor& xv = g.val(x);
                          const Tensor& gv = g.val(gamma);
                          const bool nx = g.needs(x), ng = g.needs(gamma), nb = g.needs(beta);
                          for (int i = 0; i < n; ++i) {
                              for (int gr = 0; gr < groups; ++gr) {
                                  const int64_t base = (static_cast<int64_t>(i) * c + gr * cg) * hw;
                                  const double mu = mean[i * groups + gr];
                                  const double is = istd[i * groups + gr];
                                  const double* xp = xv.data() + base;
                                  const double* gp = go.data() + base;
                                  if (ng || nb) {
                                      for (int cc = 0; cc < cg; ++cc) {
                                          double sg = 0, sgx = 0;
                                          for (int j = 0; j < hw; ++j) {
                                              const int64_t idx = static_cast<int64_t>(cc) * hw + j;
                                              sg += gp[idx];
                                              sgx += gp[idx] * (xp[idx] - mu) * is;
                                          }
                                          if (nb) g.grad_buf(beta)[gr * cg + cc] += sg;
                                          if (ng) g.grad_buf(gamma)[gr * cg + cc] += sgx;
                                      }
                                  }
                                  if (nx) {
                                      // dxhat = go * gamma; dx = istd*(dxhat - (s1 + xhat*s2)/m)
                                      double s1 = 0, s2 = 0;
                                      for (int cc = 0; cc < cg; ++cc) {
                                          const double ga = gv[gr * cg + cc];
                                          for (int j = 0; j < hw; ++j) {
                                              const int64_t idx = static_cast<int64_t>(cc) * hw + j;
                                              const double dxh = gp[idx] * ga;
                                              s1 += dxh;
                                              s2 += dxh * (xp[idx] - mu) * is;
                                          }
                                      }
                                      const double inv_m = 1.0 / static_cast<double>(m);
                                      double* dst = g.grad_buf(x).data() + base;
                                      for (int cc = 0; cc < cg; ++cc) {
                                          const double ga = gv[gr * cg + cc];
                                          for (int j = 0; j < hw; ++j) {
                                              const int64_t idx = static_cast<int64_t>(cc) * hw + j;
                                              const double xhat = (xp[idx] - mu) * is;
                                              dst[idx] += is * (gp[idx] * ga - (s1 + xhat * s2) * inv_m);
                                          }
                                      }
                                  }
                              }
                          }
                      });
}

Ref layer_norm(Graph& g, Ref x, Ref gamma, Ref beta, double eps) {
    const Tensor& xv = g.val(x);
    require(xv.rank() >= 2, ErrorKind::ShapeMismatch, "layer_norm: rank must be >= 2");
    const int d = xv.dim(xv.rank() - 1);
    const int rows = static_cast<int>(xv.size() / d);
    require(g.val(gamma).size() == d && g.val(beta).size() == d, ErrorKind::ShapeMismatch,
            "layer_norm: affine size mismatch");

    Tensor out(xv.shape());
    Tensor mean({rows});
    Tensor istd({rows});
    const Tensor& gv = g.val(gamma);
    const Tensor& bv = g.val(beta);
    for (int r = 0; r < rows; ++r) {
        const double* src = xv.data() + static_cast<int64_t>(r) * d;
        double mu = 0;
        for (int j = 0; j < d; ++j) mu += src[j];
        mu /= d;
        double var = 0;
        for (int j = 0; j < d; ++j) var += (src[j] - mu) * (src[j] - mu);
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        mean[r] = mu;
        istd[r] = is;
        double* dst = out.data() + static_cast<int64_t>(r) * d;
        for (int j = 0; j < d; ++j) dst[j] = gv[j] * (src[j] - mu) * is + bv[j];
    }
    return g.add_node(std::move(out), {x, gamma, beta},
                      [x, gamma, beta, rows, d, mean = std::move(mean), istd = std::move(istd)](Graph& g, int self) {
                          const Tensor& go = g.node_grad(self);
                          const Tensor& xv = g.val(x);
                          const Tensor& gv = g.val(gamma);
                          const bool nx = g.needs(x), ng = g.needs(gamma), nb = g.needs(beta);
                          for (int r = 0; r < rows; ++r) {
                              const double mu = mean[r], is = istd[r];
                              const double* xp = xv.data() + static_cast<int64_t>(r) * d;
                              const double* gp = go.data() + static_cast<int64_t>(r) * d;
                              if (ng || nb) {
                                  for (int j = 0; j < d; ++j) {
                                      if (nb) g.grad_buf(beta)[j] += gp[j];
                                      if (ng) g.grad_buf(gamma)[j] += gp[j] * (xp[j] - mu) * is;
                                  }
                              }
                              if (nx) {
                                  double s1 = 0, s2 = 0;
                                  for (int j = 0; j < d; ++j) {
                                      const double dxh = gp[j] * gv[j];
                                      s1 += dxh;
                                      s2 += dxh * (xp[j] - mu) * is;
                                  }
                                  double* dst = g.grad_buf(x).data() + static_cast<int64_t>(r) * d;
                                  for (int j = 0; j < d; ++j) {
                                      const double xhat = (xp[j] - mu) * is;
                                      dst[j] += is * (gp[j] * gv[j] - (s1 + xhat * s2) / d);
                                  }
                              }
                          }
                      });
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

Ref silu(Graph& g, Ref a) {
    Tensor out = g.val(a);
    for (int64_t i = 0; i < out.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-out[i]));
        out[i] = out[i] * s;
    }
    return g.add_node(std::move(out), {a}, [a](Graph& g, int self) {
        if (!g.needs(a)) return;
        const Tensor& go = g.node_grad(self);
        const Tensor& xv = g.val(a);
        Tensor& ga = g.grad_buf(a);
        for (int64_t i = 0; i < xv.size(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-xv[i]));
            ga[i] += go[i] * s * (1.0 + xv[i] * (1.0 - s));
        }
    });
}

Ref relu(Graph& g, Ref a) {
    Tensor out = g.val(a);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, out[i]);
    return g.add_node(std::move(out), {a}, [a](Graph& g, int self) {
        if (!g.needs(a)) return;
        const Tensor& go = g.node_grad(self);
        const Tensor& xv = g.val(a);
        Tensor& ga = g.grad_buf(a);
        for (int64_t i = 0; i < xv.size(); ++i)
            if (xv[i] > 0) ga[i] += go[i];
    });
}

Ref sigmoid(Graph& g, Ref a) {
    Tensor out = g.val(a);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
    return g.add_node(std::move(out), {a}, [a](Graph& g, int self) {
        if (!g.needs(a)) return;
        const Tensor& go = g.node_grad(self);
        const Tensor& yv = g.node_value(self);
        Tensor& ga = g.grad_buf(a);
        for (int64_t i = 0; i < yv.size(); ++i) ga[i] += go[i] * yv[i] * (1.0 - yv[i]);
    });
}

Ref gelu(Graph& g, Ref a) {
    Tensor out = g.val(a);
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = 0.5 * out[i] * (1.0 + std::erf(out[i] * inv_sqrt2));
    return g.add_node(std::move(out), {a}, [a](Graph& g, int self) {
        if (!g.needs(a)) return;
        const Tensor& go = g.node_grad(self);
        const Tensor& xv = g.val(a);
        Tensor& ga = g.grad_buf(a);
        constexpr double inv_sqrt2 = 0.7071067811865475244;
        const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (int64_t i = 0; i < xv.size(); ++i) {
            const double cdf = 0.5 * (1.0 + std::erf(xv[i] * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * xv[i] * xv[i]);
            ga[i] += go[i] * (cdf + xv[i] * pdf);
        }
    });
}

Ref softmax_lastdim(Graph& g, Ref a) {
    const Tensor& av = g.val(a);
    require(av.rank() >= 1, ErrorKind::ShapeMismatch, "softmax: rank must be >= 1");
    const int d = av.dim(av.rank() - 1);
    const int rows = static_cast<int>(av.size() / d);
    Tensor out(av.shape());
    for (int r = 0; r < rows; ++r) {
        const double* src = av.data() + static_cast<int64_t>(r) * d;
        double* dst = out.data() + static_cast<int64_t>(r) * d;
        double mx = src[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, src[j]);
        double z = 0;
        for (int j = 0; j < d; ++j) {
            dst[j] = std::exp(src[j] - mx);
            z += dst[j];
        }
        for (int j = 0; j < d; ++j) dst[j] /= z;
    }
    return g.add_node(std::move(out), {a}, [a, rows, d](Graph& g, int self) {
        if (!g.needs(a)) return;
        const Tensor& go = g.node_grad(self);
        const Tensor& yv = g.node_value(self);
        Tensor& ga = g.grad_buf(a);
        for (int r = 0; r < rows; ++r) {
            const double* yp = yv.data() + static_cast<int64_t>(r) * d;
            const double* gp = go.data() + static_cast<int64_t>(r) * d;
            double dot = 0;
            for (int j = 0; j < d; ++j) dot += yp[j] * gp[j];
            double* dst = ga.data() + static_cast<int64_t>(r) * d;
            for (int j = 0; j < d; ++j) dst[j] += yp[j] * (gp[j] - dot);
        }
    });
}

Ref log_softmax_lastdim(Graph& g, Ref a) {
    const Tensor& av = g.val(a);
    require(av.rank() >= 1, ErrorKind::ShapeMismatch, "log_softmax: rank must be >= 1");
    const int d = av.dim(av.rank() - 1);
    const int rows = static_cast<int>(av.size() / d);
    Tensor out(av.shape());
    for (int r = 0; r < rows; ++r) {
        const double* src = av.data() + static_cast<int64_t>(r) * d;
        double* dst = out.data() + static_cast<int64_t>(r) * d;
        double mx = src[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, src[j]);
        double z = 0;
        for (int j = 0; j < d; ++j) z += std::exp(src[j] - mx);
        const double lse = mx + std::log(z);
        for (int j = 0; j < d; ++j) dst[j] = src[j] - lse;
    }
    return g.add_node(std::move(out), {a}, [a, rows, d](Graph& g, int self) {
        if (!g.needs(a)) return;
        const Tensor& go = g.node_grad(self);
        const Tensor& yv = g.node_value(self);
        Tensor& ga = g.grad_buf(a);
        for (int r = 0; r < rows; ++r) {
            const double* yp = yv.data() + static_cast<int64_t>(r) * d;
            const double* gp = go.data() + static_cast<int64_t>(r) * d;
            double gsum = 0;
            for (int j = 0; j < d; ++j) gsum += gp[j];
            double* dst = ga.data() + static_cast<int64_t>(r) * d;
            for (int j = 0; j < d; ++j) dst[j] += gp[j] - std::exp(yp[j]) * gsum;
        }
    });
}

// ---------------------------------------------------------------------------
// shape / broadcast
// ---------------------------------------------------------------------------

Ref reshape(Graph& g, Ref a, std::vector<int> shape) {
    Tensor out = g.val(a).reshaped(shape);
    return g.add_node(std::move(out), {a}, [a](Graph& g, int self) {
        if (!g.needs(a)) return;
        g.grad_buf(a).flat() += g.node_grad(self).flat();
    });
}

Ref concat_channels(Graph& g, Ref a, Ref b) {
    const Tensor& av = g.val(a);
    const Tensor& bv = g.val(b);
    check_rank(av, 4, "concat_channels");
    check_rank(bv, 4, "concat_channels");
    const int n = av.dim(0), c1 = av.dim(1), c2 = bv.dim(1), h = av.dim(2), w = av.dim(3);
    require(bv.dim(0) == n && bv.dim(2) == h && bv.dim(3) == w, ErrorKind::ShapeMismatch,
            "concat_channels: " + av.shape_str() + " vs " + bv.shape_str());
    Tensor out({n, c1 + c2, h, w});
    const int64_t hw = static_cast<int64_t>(h) * w;
    for (int i = 0; i < n; ++i) {
        std::copy_n(av.data() + i * c1 * hw, c1 * hw, out.data() + static_cast<int64_t>(i) * (c1 + c2) * hw);
        std::copy_n(bv.data() + i * c2 * hw, c2 * hw,
                    out.data() + static_cast<int64_t>(i) * (c1 + c2) * hw + c1 * hw);
    }
    return g.add_node(std::move(out), {a, b}, [a, b, n, c1, c2, hw](Graph& g, int self) {
        const Tensor& go = g.node_grad(self);
        for (int i = 0; i < n; ++i) {
            const double* src = go.data() + static_cast<int64_t>(i) * (c1 + c2) * hw;
            if (g.needs(a)) {
                double* dst = g.grad_buf(a).data() + i * c1 * hw;
                for (int64_t j = 0; j < c1 * hw; ++j) dst[j] += src[j];
            }
            if (g.needs(b)) {
                double* dst = g.grad_buf(b).data() + i * c2 * hw;
                for (int64_t j = 0; j < c2 * hw; ++j) dst[j] += src[c1 * hw + j];
            }
        }
    });
}

Ref scale_channels(Graph& g, Ref x, Ref s) {
    const Tensor& xv = g.val(x);
    const Tensor& sv = g.val(s);
    check_rank(xv, 4, "scale_channels");
    check_rank(sv, 2, "scale_channels");
    const int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
    require(sv.dim(0) == n && sv.dim(1) == c, ErrorKind::ShapeMismatch, "scale_channels: gate shape mismatch");
    Tensor out(xv.shape());
    for (int i = 0; i < n * c; ++i) {
        const double f = sv[i];
        const double* src = xv.data() + static_cast<int64_t>(i) * hw;
        double* dst = out.data() + static_cast<int64_t>(i) * hw;
        for (int j = 0; j < hw; ++j) dst[j] = f * src[j];
    }
    return g.add_node(std::move(out), {x, s}, [x, s, n, c, hw](Graph& g, int self) {
        const Tensor& go = g.node_grad(self);
        const Tensor& xv = g.val(x);
        const Tensor& sv = g.val(s);
        for (int i = 0; i < n * c; ++i) {
            const double* gp = go.data() + static_cast<int64_t>(i) * hw;
            if (g.needs(x)) {
                const double f = sv[i];
                double* dst = g.grad_buf(x).data() + static_cast<int64_t>(i) * hw;
                for (int j = 0; j < hw; ++j) dst[j] += f * gp[j];
            }
            if (g.needs(s)) {
                const double* xp = xv.data() + static_cast<int64_t>(i) * hw;
                double acc = 0;
                for (int j = 0; j < hw; ++j) acc += gp[j] * xp[j];
                g.grad_buf(s)[i] += acc;
            }
        }
    });
}

Ref add_channel_bias(Graph& g, Ref x, Ref b) {
    const Tensor& xv = g.val(x);
    const Tensor& bv = g.val(b);
    check_rank(xv, 4, "add_channel_bias");
    check_rank(bv, 2, "add_channel_bias");
    const int n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
    require(bv.dim(0) == n && bv.dim(1) == c, ErrorKind::ShapeMismatch, "add_channel_bias: bias shape mismatch");
    Tensor out = xv;
    for (int i = 0; i < n * c; ++i) {
        const double f = bv[i];
        double* dst = out.data() + static_cast<int64_t>(i) * hw;
        for (int j = 0; j < hw; ++j) dst[j] += f;
    }
    return g.add_node(std::move(out), {x, b}, [x, b, n, c, hw](Graph& g, int self) {
        const Tensor& go = g.node_grad(self);
        if (g.needs(x)) g.grad_buf(x).flat() += go.flat();
        if (g.needs(b)) {
            for (int i = 0; i < n * c; ++i) {
                const double* gp = go.data() + static_cast<int64_t>(i) * hw;
                double acc = 0;
                for (int j = 0; j < hw; ++j) acc += gp[j];
                g.grad_buf(b)[i] += acc;
            }
        }
    });
}

Ref add_row_bias(Graph& g, Ref x, Ref b) {
    const Tensor& xv = g.val(x);
    const Tensor& bv = g.val(b);
    check_rank(xv, 2, "add_row_bias");
    const int n = xv.dim(0), d = xv.dim(1);
    require(bv.size() == d, ErrorKind::ShapeMismatch, "add_row_bias: bias size mismatch");
    Tensor out = xv;
    out.mat(n, d).rowwise() += bv.mat(1, d).row(0);
    return g.add_node(std::move(out), {x, b}, [x, b, n, d](Graph& g, int self) {
        const Tensor& go = g.node_grad(self);
        if (g.needs(x)) g.grad_buf(x).flat() += go.flat();
        if (g.needs(b)) g.grad_buf(b).mat(1, d).row(0) += go.mat(n, d).colwise().sum();
    });
}

Ref split_heads(Graph& g, Ref x, int heads) {
    const Tensor& xv = g.val(x);
    check_rank(xv, 3, "split_heads");
    const int n = xv.dim(0), s = xv.dim(1), c = xv.dim(2);
    require(c % heads == 0, ErrorKind::ShapeMismatch, "split_heads: channels not divisible by heads");
    const int dh = c / heads;
    Tensor out({n * heads, s, dh});
    for (int i = 0; i < n; ++i)
        for (int t = 0; t < s; ++t)
            for (int hh = 0; hh < heads; ++hh)
                std::copy_n(xv.data() + (static_cast<int64_t>(i) * s + t) * c + hh * dh, dh,
                            out.data() + ((static_cast<int64_t>(i) * heads + hh) * s + t) * dh);
    return g.add_node(std::move(out), {x}, [x, n, s, c, heads, dh](Graph& g, int self) {
        if (!g.needs(x)) return;
        const Tensor& go = g.node_grad(self);
        Tensor& gx = g.grad_buf(x);
        for (int i = 0; i < n; ++i)
            for (int t = 0; t < s; ++t)
                for (int hh = 0; hh < heads; ++hh) {
                    const double* src = go.data() + ((static_cast<int64_t>(i) * heads + hh) * s + t) * dh;
                    double* dst = gx.data() + (static_cast<int64_t>(i) * s + t) * c + hh * dh;
                    for (int j = 0; j < dh; ++j) dst[j] += src[j];
                }
    });
}

Ref merge_heads(Graph& g, Ref x, int heads) {
    const Tensor& xv = g.val(x);
    check_rank(xv, 3, "merge_heads");
    require(xv.dim(0) % heads == 0, ErrorKind::ShapeMismatch, "merge_heads: batch not divisible by heads");
    const int n = xv.dim(0) / heads, s = xv.dim(1), dh = xv.dim(2);
    const int c = heads * dh;
    Tensor out({n, s, c});
    for (int i = 0; i < n; ++i)
        for (int t = 0; t < s; ++t)
            for (int hh = 0; hh < heads; ++hh)
                std::copy_n(xv.data() + ((static_cast<int64_t>(i) * heads + hh) * s + t) * dh, dh,
                            out.data() + (static_cast<int64_t>(i) * s + t) * c + hh * dh);
    return g.add_node(std::move(out), {x}, [x, n, s, c, heads, dh](Graph& g, int self) {
        if (!g.needs(x)) return;
        const Tensor& go = g.node_grad(self);
        Tensor& gx = g.grad_buf(x);
        for (int i = 0; i < n; ++i)
            for (int t = 0; t < s; ++t)
                for (int hh = 0; hh < heads; ++hh) {
                    const double* src = go.data() + (static_cast<int64_t>(i) * s + t) * c + hh * dh;
                    double* dst = gx.data() + ((static_cast<int64_t>(i) * heads + hh) * s + t) * dh;
                    for (int j = 0; j < dh; ++j) dst[j] += src[j];
                }
    });
}

Ref nchw_to_nsc(Graph& g, Ref x) {
    const Tensor& xv = g.val(x);
    check_rank(xv, 4, "nchw_to_nsc");
    const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    const int s = h * w;
    Tensor out({n, s, c});
    for (int i = 0; i < n; ++i)
        for (int cc = 0; cc < c; ++cc) {
            const double* src = xv.data() + (static_cast<int64_t>(i) * c + cc) * s;
            for (int p = 0; p < s; ++p) out.data()[(static_cast<int64_t>(i) * s + p) * c + cc] = src[p];
        }
    return g.add_node(std::move(out), {x}, [x, n, c, s](Graph& g, int self) {
        if (!g.needs(x)) return;
        const Tensor& go = g.node_grad(self);
        Tensor& gx = g.grad_buf(x);
        for (int i = 0; i < n; ++i)
            for (int cc = 0; cc < c; ++cc) {
                double* dst = gx.data() + (static_cast<int64_t>(i) * c + cc) * s;
                for (int p = 0; p < s; ++p) dst[p] += go.data()[(static_cast<int64_t>(i) * s + p) * c + cc];
            }
    });
}

Ref nsc_to_nchw(Graph& g, Ref x, int h, int w) {
    const Tensor& xv = g.val(x);
    check_rank(xv, 3, "nsc_to_nchw");
    const int n = xv.dim(0), s = xv.dim(1), c = xv.dim(2);
    require(s == h * w, ErrorKind::ShapeMismatch, "nsc_to_nchw: spatial size mismatch");
    Tensor out({n, c, h, w});
    for (int i = 0; i < n; ++i)
        for (int cc = 0; cc < c; ++cc) {
            double* dst = out.data() + (static_cast<int64_t>(i) * c + cc) * s;
            for (int p = 0; p < s; ++p) dst[p] = xv.data()[(static_cast<int64_t>(i) * s + p) * c + cc];
        }
    return g.add_node(std::move(out), {x}, [x, n, c, s](Graph& g, int self) {
        if (!g.needs(x)) return;
        const Tensor& go = g.node_grad(self);
        Tensor& gx = g.grad_buf(x);
        for (int i = 0; i < n; ++i)
            for (int cc = 0; cc < c; ++cc) {
                const double* src = go.data() + (static_cast<int64_t>(i) * c + cc) * s;
                for (int p = 0; p < s; ++p) gx.data()[(static_cast<int64_t>(i) * s + p) * c + cc] += src[p];
            }
    });
}

Ref prepend_row_broadcast(Graph& g, Ref x, Ref token) {
    const Tensor& xv = g.val(x);
    const Tensor& tv = g.val(token);
    check_rank(xv, 3, "prepend_row_broadcast");
    const int n = xv.dim(0), s = xv.dim(1), d = xv.dim(2);
    require(tv.size() == d, ErrorKind::ShapeMismatch, "prepend_row_broadcast: token size mismatch");
    Tensor out({n, s + 1, d});
    for (int i = 0; i < n; ++i) {
        std::copy_n(tv.data(), d, out.data() + static_cast<int64_t>(i) * (s + 1) * d);
        std::copy_n(xv.data() + static_cast<int64_t>(i) * s * d, static_cast<int64_t>(s) * d,
                    out.data() + static_cast<int64_t>(i) * (s + 1) * d + d);
    }
    return g.add_node(std::move(out), {x, token}, [x, token, n, s, d](Graph& g, int self) {
        const Tensor& go = g.node_grad(self);
        for (int i = 0; i < n; ++i) {
            const double* src = go.data() + static_cast<int64_t>(i) * (s + 1) * d;
            if (g.needs(token)) {
                Tensor& gt = g.grad_buf(token);
                for (int j = 0; j < d; ++j) gt[j] += src[j];
            }
            if (g.needs(x)) {
                double* dst = g.grad_buf(x).data() + static_cast<int64_t>(i) * s * d;
                for (int64_t j = 0; j < static_cast<int64_t>(s) * d; ++j) dst[j] += src[d + j];
            }
        }
    });
}

Ref add_positional(Graph& g, Ref x, Ref pos) {
    const Tensor& xv = g.val(x);
    const Tensor& pv = g.val(pos);
    check_rank(xv, 3, "add_positional");
    const int n = xv.dim(0), s = xv.dim(1), d = xv.dim(2);
    require(pv.size() == static_cast<int64_t>(s) * d, ErrorKind::ShapeMismatch, "add_positional: size mismatch");
    Tensor out = xv;
    for (int i = 0; i < n; ++i) {
        double* dst = out.data() + static_cast<int64_t>(i) * s * d;
        for (int64_t j = 0; j < static_cast<int64_t>(s) * d; ++j) dst[j] += pv[j];
    }
    return g.add_node(std::move(out), {x, pos}, [x, pos, n, s, d](Graph& g, int self) {
        const Tensor& go = g.node_grad(self);
        if (g.needs(x)) g.grad_buf(x).flat() += go.flat();
        if (g.needs(pos)) {
            Tensor& gp = g.grad_buf(pos);
            for (int i = 0; i < n; ++i) {
                const double* src = go.data() + static_cast<int64_t>(i) * s * d;
                for (int64_t j = 0; j < static_cast<int64_t>(s) * d; ++j) gp[j] += src[j];
            }
        }
    });
}

Ref take_row(Graph& g, Ref x, int row) {
    const Tensor& xv = g.val(x);
    check_rank(xv, 3, "take_row");
    const int n = xv.dim(0), s = xv.dim(1), d = xv.dim(2);
    require(row >= 0 && row < s, ErrorKind::ShapeMismatch, "take_row: row out of range");
    Tensor out({n, d});
    for (int i = 0; i < n; ++i)
        std::copy_n(xv.data() + (static_cast<int64_t>(i) * s + row) * d, d, out.data() + static_cast<int64_t>(i) * d);
    return g.add_node(std::move(out), {x}, [x, n, s, d, row](Graph& g, int self) {
        if (!g.needs(x)) return;
        const Tensor& go = g.node_grad(self);
        Tensor& gx = g.grad_buf(x);
        for (int i = 0; i < n; ++i) {
            const double* src = go.data() + static_cast<int64_t>(i) * d;
            double* dst = gx.data() + (static_cast<int64_t>(i) * s + row) * d;
            for (int j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
}

// ---------------------------------------------------------------------------
// tables / regularization
// ---------------------------------------------------------------------------

Ref embedding(Graph& g, Ref table, const std::vector<int>& ids) {
    const Tensor& tv = g.val(table);
    check_rank(tv, 2, "embedding");
    const int k = tv.dim(0), d = tv.dim(1);
    const int n = static_cast<int>(ids.size());
    Tensor out({n, d});
    for (int i = 0; i < n; ++i) {
        const int id = ids[static_cast<size_t>(i)];
        require(id < k, ErrorKind::ClassOutOfRange,
                "embedding: id " + std::to_string(id) + " >= table rows " + std::to_string(k));
        if (id >= 0)
            std::copy_n(tv.data() + static_cast<int64_t>(id) * d, d, out.data() + static_cast<int64_t>(i) * d);
    }
    return g.add_node(std::move(out), {table}, [table, ids, d](Graph& g, int self) {
        if (!g.needs(table)) return;
        const Tensor& go = g.node_grad(self);
        Tensor& gt = g.grad_buf(table);
        for (size_t i = 0; i < ids.size(); ++i) {
            const int id = ids[i];
            if (id < 0) continue;
            const double* src = go.data() + static_cast<int64_t>(i) * d;
            double* dst = gt.data() + static_cast<int64_t>(id) * d;
            for (int j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
}

Ref dropout(Graph& g, Ref x, double p, Rng& rng) {
    require(p >= 0.0 && p < 1.0, ErrorKind::InvalidRange, "dropout: p must be in [0,1)");
    if (!g.training || p == 0.0) return x;
    const Tensor& xv = g.val(x);
    Tensor mask(xv.shape());
    const double keep = 1.0 - p;
    for (int64_t i = 0; i < mask.size(); ++i) mask[i] = (rng.uniform() >= p) ? 1.0 / keep : 0.0;
    Tensor out = xv;
    out.flat() *= mask.flat();
    return g.add_node(std::move(out), {x}, [x, mask = std::move(mask)](Graph& g, int self) {
        if (!g.needs(x)) return;
        g.grad_buf(x).flat() += g.node_grad(self).flat() * mask.flat();
    });
}

// ---------------------------------------------------------------------------
// reductions / losses
// ---------------------------------------------------------------------------

Ref sum_all(Graph& g, Ref a) {
    Tensor out = Tensor::scalar(g.val(a).flat().sum());
    return g.add_node(std::move(out), {a}, [a](Graph& g, int self) {
        if (g.needs(a)) g.grad_buf(a).flat() += g.node_grad(self)[0];
    });
}

Ref mean_all(Graph& g, Ref a) {
    const double n = static_cast<double>(g.val(a).size());
    Tensor out = Tensor::scalar(g.val(a).flat().sum() / n);
    return g.add_node(std::move(out), {a}, [a, n](Graph& g, int self) {
        if (g.needs(a)) g.grad_buf(a).flat() += g.node_grad(self)[0] / n;
    });
}

Ref mse_loss(Graph& g, Ref pred, const Tensor& target) {
    const Tensor& pv = g.val(pred);
    check_same_shape(pv, target, "mse_loss");
    const double n = static_cast<double>(pv.size());
    double acc = 0;
    for (int64_t i = 0; i < pv.size(); ++i) {
        const double dvi = pv[i] - target[i];
        acc += dvi * dvi;
    }
    Tensor out = Tensor::scalar(acc / n);
    return g.add_node(std::move(out), {pred}, [pred, target, n](Graph& g, int self) {
        if (!g.needs(pred)) return;
        const double go = g.node_grad(self)[0];
        const Tensor& pv = g.val(pred);
        Tensor& gp = g.grad_buf(pred);
        for (int64_t i = 0; i < pv.size(); ++i) gp[i] += go * 2.0 * (pv[i] - target[i]) / n;
    });
}

Ref cross_entropy(Graph& g, Ref logits, const std::vector<int>& labels) {
    const Tensor& lv = g.val(logits);
    check_rank(lv, 2, "cross_entropy");
    const int n = lv.dim(0), k = lv.dim(1);
    require(static_cast<int>(labels.size()) == n, ErrorKind::LengthMismatch, "cross_entropy: label count mismatch");
    Tensor probs({n, k});
    double loss = 0;
    for (int i = 0; i < n; ++i) {
        const int y = labels[static_cast<size_t>(i)];
        require(y >= 0 && y < k, ErrorKind::ClassOutOfRange, "cross_entropy: label out of range");
        const double* src = lv.data() + static_cast<int64_t>(i) * k;
        double mx = src[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, src[j]);
        double z = 0;
        double* pp = probs.data() + static_cast<int64_t>(i) * k;
        for (int j = 0; j < k; ++j) {
            pp[j] = std::exp(src[j] - mx);
            z += pp[j];
        }
        for (int j = 0; j < k; ++j) pp[j] /= z;
        loss += mx + std::log(z) - src[y];
    }
    Tensor out = Tensor::scalar(loss / n);
    return g.add_node(std::move(out), {logits},
                      [logits, labels, n, k, probs = std::move(probs)](Graph& g, int self) {
                          if (!g.needs(logits)) return;
                          const double go = g.node_grad(self)[0] / n;
                          Tensor& gl = g.grad_buf(logits);
                          for (int i = 0; i < n; ++i) {
                              const double* pp = probs.data() + static_cast<int64_t>(i) * k;
                              double* dst = gl.data() + static_cast<int64_t>(i) * k;
                              for (int j = 0; j < k; ++j) dst[j] += go * pp[j];
                              dst[labels[static_cast<size_t>(i)]] -= go;
                          }
                      });
}

}  // namespace diffaug::ad
