#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "wseg/rng.hpp"

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Graph is a define-by-run tape: every forward op appends one node holding
// its output values, and backward() walks the tape once in reverse, summing
// upstream gradients into each node. Graphs are rebuilt per training step and
// never mutate a tensor that already sits on the tape.
//
// Determinism: all loops run in a fixed order. Plain reductions (sum,
// masked_sum, softmax) accumulate sequentially in row-major order; the hot
// convolution reductions use a fixed eight-lane split combined in a fixed
// tree, which is reproducible bit-for-bit on a given build.

namespace wseg {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Plain value container used for leaves and op outputs.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(numel(shape), fill) {}
    Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != numel(shape))
            throw std::invalid_argument("Tensor: data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
    }

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    std::size_t size() const { return data.size(); }
    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }
};

// Boolean pixel mask for masked reductions; not differentiable.
struct Mask {
    int h = 0, w = 0;
    std::vector<std::uint8_t> on;

    Mask() = default;
    Mask(int h_, int w_) : h(h_), w(w_), on(static_cast<std::size_t>(h_) * w_, 0) {}
    std::size_t count() const {
        std::size_t c = 0;
        for (auto v : on) c += (v != 0);
        return c;
    }
};

namespace detail {

// Fixed-lane dot product: vectorizable without changing results across runs.
inline double dot8(const double* __restrict__ a, const double* __restrict__ b, std::size_t n) {
    std::array<double, 8> acc{};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (std::size_t l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
    for (; i < n; ++i) acc[i % 8] += a[i] * b[i];
    double s01 = acc[0] + acc[1], s23 = acc[2] + acc[3];
    double s45 = acc[4] + acc[5], s67 = acc[6] + acc[7];
    return (s01 + s23) + (s45 + s67);
}

inline double sum8(const double* __restrict__ a, std::size_t n) {
    std::array<double, 8> acc{};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (std::size_t l = 0; l < 8; ++l) acc[l] += a[i + l];
    for (; i < n; ++i) acc[i % 8] += a[i];
    double s01 = acc[0] + acc[1], s23 = acc[2] + acc[3];
    double s45 = acc[4] + acc[5], s67 = acc[6] + acc[7];
    return (s01 + s23) + (s45 + s67);
}

inline void axpy(double* __restrict__ dst, const double* __restrict__ src, double a, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] += a * src[i];
}

}  // namespace detail

enum class OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    ScalarMul,
    Square,
    Exp,
    Log,
    Relu,
    Conv2d,
    MaxPool2,
    Upsample2,
    Softmax,
    LogSoftmax,
    MaskedSum,
    Sum,
    Affine,
    ChannelSlice,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Div: return "div";
        case OpKind::ScalarMul: return "scalar_mul";
        case OpKind::Square: return "square";
        case OpKind::Exp: return "exp";
        case OpKind::Log: return "log";
        case OpKind::Relu: return "relu";
        case OpKind::Conv2d: return "conv2d";
        case OpKind::MaxPool2: return "max_pool2";
        case OpKind::Upsample2: return "upsample2";
        case OpKind::Softmax: return "softmax";
        case OpKind::LogSoftmax: return "log_softmax";
        case OpKind::MaskedSum: return "masked_sum";
        case OpKind::Sum: return "sum";
        case OpKind::Affine: return "affine";
        case OpKind::ChannelSlice: return "channel_slice";
    }
    return "?";
}

// Handle to a node on a Graph's tape.
struct Var {
    int idx = -1;
    bool valid() const { return idx >= 0; }
};

class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // ---- leaves -----------------------------------------------------------

    Var leaf(Tensor t, bool requires_grad) {
        Node n;
        n.kind = OpKind::Leaf;
        n.value = std::move(t);
        n.requires_grad = requires_grad;
        return push(std::move(n));
    }

    Var constant(Tensor t) { return leaf(std::move(t), false); }
    Var scalar(double v) { return constant(Tensor::scalar(v)); }

    // ---- elementwise ------------------------------------------------------

    Var add(Var a, Var b) { return binary(OpKind::Add, a, b); }
    Var sub(Var a, Var b) { return binary(OpKind::Sub, a, b); }
    Var mul(Var a, Var b) { return binary(OpKind::Mul, a, b); }
    Var div(Var a, Var b) { return binary(OpKind::Div, a, b); }

    Var scalar_mul(Var a, double c) {
        const Node& na = node(a);
        Node n = unary_node(OpKind::ScalarMul, a);
        n.scalar = c;
        n.value = Tensor(na.value.shape);
        for (std::size_t i = 0; i < na.value.size(); ++i) n.value[i] = c * na.value[i];
        return push(std::move(n));
    }

    Var square(Var a) {
        const Node& na = node(a);
        Node n = unary_node(OpKind::Square, a);
        n.value = Tensor(na.value.shape);
        for (std::size_t i = 0; i < na.value.size(); ++i) n.value[i] = na.value[i] * na.value[i];
        return push(std::move(n));
    }

    Var exp(Var a) {
        const Node& na = node(a);
        Node n = unary_node(OpKind::Exp, a);
        n.value = Tensor(na.value.shape);
        for (std::size_t i = 0; i < na.value.size(); ++i) n.value[i] = std::exp(na.value[i]);
        return push(std::move(n));
    }

    Var log(Var a) {
        const Node& na = node(a);
        for (std::size_t i = 0; i < na.value.size(); ++i)
            if (!(na.value[i] > 0.0))
                throw std::domain_error("log: input not strictly positive (value " +
                                        std::to_string(na.value[i]) + " at index " +
                                        std::to_string(i) + ")");
        Node n = unary_node(OpKind::Log, a);
        n.value = Tensor(na.value.shape);
        for (std::size_t i = 0; i < na.value.size(); ++i) n.value[i] = std::log(na.value[i]);
        return push(std::move(n));
    }

    Var relu(Var a) {
        const Node& na = node(a);
        Node n = unary_node(OpKind::Relu, a);
        n.value = Tensor(na.value.shape);
        for (std::size_t i = 0; i < na.value.size(); ++i)
            n.value[i] = na.value[i] > 0.0 ? na.value[i] : 0.0;
        return push(std::move(n));
    }

    // ---- structured ops ---------------------------------------------------

    // x: [Cin,H,W], w: [Cout,Cin,kh,kw] (odd kernel), bias: [Cout] -> [Cout,H,W].
    // Stride 1, zero padding keeps the spatial size.
    Var conv2d(Var x, Var w, Var bias) {
        const Node& nx = node(x);
        const Node& nw = node(w);
        const Node& nb = node(bias);
        require_rank(nx, 3, "conv2d input");
        require_rank(nw, 4, "conv2d weight");
        require_rank(nb, 1, "conv2d bias");
        const int cin = nx.value.shape[0], h = nx.value.shape[1], wd = nx.value.shape[2];
        const int cout = nw.value.shape[0], kh = nw.value.shape[2], kw = nw.value.shape[3];
        if (nw.value.shape[1] != cin || nb.value.shape[0] != cout)
            throw std::invalid_argument(std::string("conv2d: shape mismatch between input ") +
                                        shape_str(nx.value.shape) + " and weight " +
                                        shape_str(nw.value.shape));
        if (kh % 2 == 0 || kw % 2 == 0)
            throw std::invalid_argument("conv2d: kernel size must be odd, got " +
                                        shape_str(nw.value.shape));

        Node n;
        n.kind = OpKind::Conv2d;
        n.in = {x.idx, w.idx, bias.idx};
        n.requires_grad = nx.requires_grad || nw.requires_grad || nb.requires_grad;
        n.value = Tensor({cout, h, wd});
        conv2d_forward(nx.value, nw.value, nb.value, n.value);
        return push(std::move(n));
    }

    // 2x2 max pooling, stride 2; ties resolved to the first element row-major.
    Var max_pool2(Var x) {
        const Node& nx = node(x);
        require_rank(nx, 3, "max_pool2 input");
        const int c = nx.value.shape[0], h = nx.value.shape[1], w = nx.value.shape[2];
        if (h % 2 || w % 2)
            throw std::invalid_argument("max_pool2: spatial dims must be even, got " +
                                        shape_str(nx.value.shape));
        Node n = unary_node(OpKind::MaxPool2, x);
        n.value = Tensor({c, h / 2, w / 2});
        n.indices.resize(n.value.size());
        const int oh = h / 2, ow = w / 2;
        for (int ci = 0; ci < c; ++ci) {
            const double* in = nx.value.data.data() + static_cast<std::size_t>(ci) * h * w;
            double* out = n.value.data.data() + static_cast<std::size_t>(ci) * oh * ow;
            std::int32_t* arg = n.indices.data() + static_cast<std::size_t>(ci) * oh * ow;
            for (int y = 0; y < oh; ++y) {
                for (int xx = 0; xx < ow; ++xx) {
                    int base = (2 * y) * w + 2 * xx;
                    int cand[4] = {base, base + 1, base + w, base + w + 1};
                    int best = cand[0];
                    for (int k = 1; k < 4; ++k)
                        if (in[cand[k]] > in[best]) best = cand[k];
                    out[y * ow + xx] = in[best];
                    arg[y * ow + xx] = static_cast<std::int32_t>(ci) * h * w + best;
                }
            }
        }
        return push(std::move(n));
    }

    // Nearest-neighbour 2x upsampling.
    Var upsample2(Var x) {
        const Node& nx = node(x);
        require_rank(nx, 3, "upsample2 input");
        const int c = nx.value.shape[0], h = nx.value.shape[1], w = nx.value.shape[2];
        Node n = unary_node(OpKind::Upsample2, x);
        n.value = Tensor({c, 2 * h, 2 * w});
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < 2 * h; ++y) {
                const double* in = nx.value.data.data() +
                                   (static_cast<std::size_t>(ci) * h + y / 2) * w;
                double* out = n.value.data.data() +
                              (static_cast<std::size_t>(ci) * 2 * h + y) * 2 * w;
                for (int xx = 0; xx < 2 * w; ++xx) out[xx] = in[xx / 2];
            }
        return push(std::move(n));
    }

    // Channel-wise softmax / log-softmax at every pixel, max-shifted.
    Var softmax(Var x) { return softmax_impl(x, false); }
    Var log_softmax(Var x) { return softmax_impl(x, true); }

    // Sum of a [H,W] tensor over mask-selected pixels; unselected entries are
    // never touched. Row-major sequential accumulation.
    Var masked_sum(Var x, std::shared_ptr<const Mask> mask) {
        const Node& nx = node(x);
        require_rank(nx, 2, "masked_sum input");
        if (!mask || mask->h != nx.value.shape[0] || mask->w != nx.value.shape[1])
            throw std::invalid_argument("masked_sum: mask shape does not match input " +
                                        shape_str(nx.value.shape));
        Node n = unary_node(OpKind::MaskedSum, x);
        n.mask = std::move(mask);
        double s = 0.0;
        for (std::size_t i = 0; i < nx.value.size(); ++i)
            if (n.mask->on[i]) s += nx.value[i];
        n.value = Tensor::scalar(s);
        return push(std::move(n));
    }

    // Full sum, row-major sequential.
    Var sum(Var x) {
        const Node& nx = node(x);
        Node n = unary_node(OpKind::Sum, x);
        double s = 0.0;
        for (std::size_t i = 0; i < nx.value.size(); ++i) s += nx.value[i];
        n.value = Tensor::scalar(s);
        return push(std::move(n));
    }

    // Fully connected over channels (a 1x1 convolution):
    // x: [Cin,H,W], w: [Cout,Cin], bias: [Cout] -> [Cout,H,W].
    Var affine(Var x, Var w, Var bias) {
        const Node& nx = node(x);
        const Node& nw = node(w);
        const Node& nb = node(bias);
        require_rank(nx, 3, "affine input");
        require_rank(nw, 2, "affine weight");
        require_rank(nb, 1, "affine bias");
        const int cin = nx.value.shape[0], h = nx.value.shape[1], wd = nx.value.shape[2];
        const int cout = nw.value.shape[0];
        if (nw.value.shape[1] != cin || nb.value.shape[0] != cout)
            throw std::invalid_argument(std::string("affine: shape mismatch between input ") +
                                        shape_str(nx.value.shape) + " and weight " +
                                        shape_str(nw.value.shape));
        Node n;
        n.kind = OpKind::Affine;
        n.in = {x.idx, w.idx, bias.idx};
        n.requires_grad = nx.requires_grad || nw.requires_grad || nb.requires_grad;
        n.value = Tensor({cout, h, wd});
        const std::size_t hw = static_cast<std::size_t>(h) * wd;
        for (int co = 0; co < cout; ++co) {
            double* out = n.value.data.data() + co * hw;
            const double b = nb.value[co];
            for (std::size_t i = 0; i < hw; ++i) out[i] = b;
            for (int ci = 0; ci < cin; ++ci)
                detail::axpy(out, nx.value.data.data() + ci * hw,
                             nw.value[static_cast<std::size_t>(co) * cin + ci], hw);
        }
        return push(std::move(n));
    }

    // View of one channel of a [C,H,W] tensor as [H,W].
    Var channel_slice(Var x, int c) {
        const Node& nx = node(x);
        require_rank(nx, 3, "channel_slice input");
        if (c < 0 || c >= nx.value.shape[0])
            throw std::invalid_argument("channel_slice: channel " + std::to_string(c) +
                                        " out of range for " + shape_str(nx.value.shape));
        Node n = unary_node(OpKind::ChannelSlice, x);
        n.channel = c;
        const int h = nx.value.shape[1], w = nx.value.shape[2];
        const std::size_t hw = static_cast<std::size_t>(h) * w;
        n.value = Tensor({h, w});
        const double* src = nx.value.data.data() + c * hw;
        for (std::size_t i = 0; i < hw; ++i) n.value[i] = src[i];
        return push(std::move(n));
    }

    // ---- access ------------------------------------------------------------

    const Tensor& value(Var v) const { return node(v).value; }
    double value_scalar(Var v) const {
        const Node& n = node(v);
        if (n.value.size() != 1)
            throw std::invalid_argument("value_scalar: node is not scalar, shape " +
                                        shape_str(n.value.shape));
        return n.value[0];
    }
    bool requires_grad(Var v) const { return node(v).requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    // Gradient buffer of a node after backward(); zeros if the node did not
    // participate or does not require grad.
    std::span<const double> grad(Var v) const {
        const Node& n = node(v);
        if (n.grad.size() != n.value.size()) {
            static const std::vector<double> empty;
            zero_grad_scratch_.assign(n.value.size(), 0.0);
            return zero_grad_scratch_;
        }
        return n.grad;
    }

    Tensor grad_tensor(Var v) const {
        const Node& n = node(v);
        Tensor t(n.value.shape);
        auto g = grad(v);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = g[i];
        return t;
    }

    // ---- backward ----------------------------------------------------------

    // Reverse sweep from a scalar root. Visits the tape once in reverse
    // order; a node consumed k times receives the sum of its k upstream
    // gradients via += accumulation.
    void backward(Var root) {
        Node& r = node_mut(root);
        if (r.value.size() != 1)
            throw std::invalid_argument("backward: root must be scalar, got shape " +
                                        shape_str(r.value.shape));
        for (Node& n : nodes_) {
            if (n.requires_grad)
                n.grad.assign(n.value.size(), 0.0);
            else
                n.grad.clear();
        }
        if (!r.requires_grad) return;
        r.grad[0] = 1.0;
        for (int i = root.idx; i >= 0; --i) backward_node(i);
    }

private:
    struct Node {
        OpKind kind = OpKind::Leaf;
        std::array<int, 3> in{-1, -1, -1};
        Tensor value;
        std::vector<double> grad;
        bool requires_grad = false;
        double scalar = 0.0;                  // ScalarMul factor
        int channel = 0;                      // ChannelSlice
        std::vector<std::int32_t> indices;    // MaxPool2 argmax (flat input index)
        std::shared_ptr<const Mask> mask;     // MaskedSum
    };

    std::vector<Node> nodes_;
    mutable std::vector<double> zero_grad_scratch_;

    Var push(Node&& n) {
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    const Node& node(Var v) const {
        if (!v.valid() || v.idx >= static_cast<int>(nodes_.size()))
            throw std::invalid_argument("invalid Var handle");
        return nodes_[static_cast<std::size_t>(v.idx)];
    }
    Node& node_mut(Var v) { return const_cast<Node&>(node(v)); }

    static void require_rank(const Node& n, int rank, const char* what) {
        if (static_cast<int>(n.value.shape.size()) != rank)
            throw std::invalid_argument(std::string(what) + ": expected rank " +
                                        std::to_string(rank) + ", got shape " +
                                        shape_str(n.value.shape));
    }

    Node unary_node(OpKind k, Var a) {
        Node n;
        n.kind = k;
        n.in = {a.idx, -1, -1};
        n.requires_grad = node(a).requires_grad;
        return n;
    }

    Var binary(OpKind k, Var a, Var b) {
        const Node& na = node(a);
        const Node& nb = node(b);
        if (na.value.shape != nb.value.shape)
            throw std::invalid_argument(std::string(op_name(k)) + ": shape mismatch " +
                                        shape_str(na.value.shape) + " vs " +
                                        shape_str(nb.value.shape));
        Node n;
        n.kind = k;
        n.in = {a.idx, b.idx, -1};
        n.requires_grad = na.requires_grad || nb.requires_grad;
        n.value = Tensor(na.value.shape);
        const std::size_t m = na.value.size();
        switch (k) {
            case OpKind::Add:
                for (std::size_t i = 0; i < m; ++i) n.value[i] = na.value[i] + nb.value[i];
                break;
            case OpKind::Sub:
                for (std::size_t i = 0; i < m; ++i) n.value[i] = na.value[i] - nb.value[i];
                break;
            case OpKind::Mul:
                for (std::size_t i = 0; i < m; ++i) n.value[i] = na.value[i] * nb.value[i];
                break;
            case OpKind::Div:
                for (std::size_t i = 0; i < m; ++i) {
                    if (nb.value[i] == 0.0)
                        throw std::domain_error("div: zero denominator at index " +
                                                std::to_string(i));
                    n.value[i] = na.value[i] / nb.value[i];
                }
                break;
            default:
                throw std::logic_error("binary: bad op");
        }
        return push(std::move(n));
    }

    Var softmax_impl(Var x, bool log_form) {
        const Node& nx = node(x);
        require_rank(nx, 3, log_form ? "log_softmax input" : "softmax input");
        const int c = nx.value.shape[0], h = nx.value.shape[1], w = nx.value.shape[2];
        Node n = unary_node(log_form ? OpKind::LogSoftmax : OpKind::Softmax, x);
        n.value = Tensor({c, h, w});
        const std::size_t hw = static_cast<std::size_t>(h) * w;
        for (std::size_t p = 0; p < hw; ++p) {
            double mx = nx.value[p];
            for (int ci = 1; ci < c; ++ci) mx = std::max(mx, nx.value[ci * hw + p]);
            double z = 0.0;
            for (int ci = 0; ci < c; ++ci) z += std::exp(nx.value[ci * hw + p] - mx);
            if (log_form) {
                const double lz = std::log(z);
                for (int ci = 0; ci < c; ++ci)
                    n.value[ci * hw + p] = nx.value[ci * hw + p] - mx - lz;
            } else {
                for (int ci = 0; ci < c; ++ci)
                    n.value[ci * hw + p] = std::exp(nx.value[ci * hw + p] - mx) / z;
            }
        }
        return push(std::move(n));
    }

    // Correlate one input plane into an output plane with a kh x kw kernel
    // (zero padding). 3x3 kernels take a fused row pass.
    static void corr_plane_accum(double* __restrict__ out, const double* __restrict__ in,
                                 const double* __restrict__ ker, int h, int wd,
                                 int kh, int kw) {
        const int ph = kh / 2, pw = kw / 2;
        if (kh == 3 && kw == 3) {
            for (int ky = 0; ky < 3; ++ky) {
                const int dy = ky - 1;
                const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                const double w0 = ker[ky * 3 + 0], w1 = ker[ky * 3 + 1], w2 = ker[ky * 3 + 2];
                for (int yy = y0; yy < y1; ++yy) {
                    double* __restrict__ o = out + static_cast<std::size_t>(yy) * wd;
                    const double* __restrict__ i = in + static_cast<std::size_t>(yy + dy) * wd;
                    o[0] += w1 * i[0] + w2 * i[1];
                    for (int xx = 1; xx < wd - 1; ++xx)
                        o[xx] += w0 * i[xx - 1] + w1 * i[xx] + w2 * i[xx + 1];
                    o[wd - 1] += w0 * i[wd - 2] + w1 * i[wd - 1];
                }
            }
            return;
        }
        for (int ky = 0; ky < kh; ++ky) {
            const int dy = ky - ph;
            const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
            for (int kx = 0; kx < kw; ++kx) {
                const int dx = kx - pw;
                const double wv = ker[ky * kw + kx];
                const int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
                for (int yy = y0; yy < y1; ++yy)
                    detail::axpy(out + static_cast<std::size_t>(yy) * wd + x0,
                                 in + static_cast<std::size_t>(yy + dy) * wd + x0 + dx, wv,
                                 static_cast<std::size_t>(x1 - x0));
            }
        }
    }

    static void conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b, Tensor& y) {
        const int cin = x.shape[0], h = x.shape[1], wd = x.shape[2];
        const int cout = w.shape[0], kh = w.shape[2], kw = w.shape[3];
        const std::size_t hw = static_cast<std::size_t>(h) * wd;
        for (int co = 0; co < cout; ++co) {
            double* out = y.data.data() + co * hw;
            const double bias = b[co];
            for (std::size_t i = 0; i < hw; ++i) out[i] = bias;
            for (int ci = 0; ci < cin; ++ci)
                corr_plane_accum(out, x.data.data() + ci * hw,
                                 w.data.data() +
                                     (static_cast<std::size_t>(co) * cin + ci) * kh * kw,
                                 h, wd, kh, kw);
        }
    }

    void backward_node(int idx) {
        Node& n = nodes_[static_cast<std::size_t>(idx)];
        if (!n.requires_grad || n.kind == OpKind::Leaf) return;
        const std::vector<double>& g = n.grad;

        auto in_node = [&](int slot) -> Node& {
            return nodes_[static_cast<std::size_t>(n.in[static_cast<std::size_t>(slot)])];
        };
        auto wants = [&](int slot) {
            return n.in[static_cast<std::size_t>(slot)] >= 0 && in_node(slot).requires_grad;
        };

        switch (n.kind) {
            case OpKind::Leaf:
                break;
            case OpKind::Add: {
                for (int s = 0; s < 2; ++s)
                    if (wants(s)) {
                        auto& gi = in_node(s).grad;
                        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                    }
                break;
            }
            case OpKind::Sub: {
                if (wants(0)) {
                    auto& gi = in_node(0).grad;
                    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                }
                if (wants(1)) {
                    auto& gi = in_node(1).grad;
                    for (std::size_t i = 0; i < g.size(); ++i) gi[i] -= g[i];
                }
                break;
            }
            case OpKind::Mul: {
                const Node& a = in_node(0);
                const Node& b = in_node(1);
                if (wants(0)) {
                    auto& gi = in_node(0).grad;
                    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * b.value[i];
                }
                if (wants(1)) {
                    auto& gi = in_node(1).grad;
                    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * a.value[i];
                }
                break;
            }
            case OpKind::Div: {
                const Node& a = in_node(0);
                const Node& b = in_node(1);
                if (wants(0)) {
                    auto& gi = in_node(0).grad;
                    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] / b.value[i];
                }
                if (wants(1)) {
                    auto& gi = in_node(1).grad;
                    for (std::size_t i = 0; i < g.size(); ++i)
                        gi[i] -= g[i] * a.value[i] / (b.value[i] * b.value[i]);
                }
                break;
            }
            case OpKind::ScalarMul: {
                if (wants(0)) {
                    auto& gi = in_node(0).grad;
                    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += n.scalar * g[i];
                }
                break;
            }
            case OpKind::Square: {
                if (wants(0)) {
                    const Node& a = in_node(0);
                    auto& gi = in_node(0).grad;
                    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += 2.0 * a.value[i] * g[i];
                }
                break;
            }
            case OpKind::Exp: {
                if (wants(0)) {
                    auto& gi = in_node(0).grad;
                    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += n.value[i] * g[i];
                }
                break;
            }
            case OpKind::Log: {
                if (wants(0)) {
                    const Node& a = in_node(0);
                    auto& gi = in_node(0).grad;
                    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] / a.value[i];
                }
                break;
            }
            case OpKind::Relu: {
                if (wants(0)) {
                    const Node& a = in_node(0);
                    auto& gi = in_node(0).grad;
                    // subgradient at 0 is 0
                    for (std::size_t i = 0; i < g.size(); ++i)
                        if (a.value[i] > 0.0) gi[i] += g[i];
                }
                break;
            }
            case OpKind::Conv2d:
                conv2d_backward(n, in_node(0), in_node(1), in_node(2));
                break;
            case OpKind::MaxPool2: {
                if (wants(0)) {
                    auto& gi = in_node(0).grad;
                    for (std::size_t i = 0; i < g.size(); ++i)
                        gi[static_cast<std::size_t>(n.indices[i])] += g[i];
                }
                break;
            }
            case OpKind::Upsample2: {
                if (wants(0)) {
                    const Node& a = in_node(0);
                    auto& gi = in_node(0).grad;
                    const int c = a.value.shape[0], h = a.value.shape[1], w = a.value.shape[2];
                    for (int ci = 0; ci < c; ++ci)
                        for (int y = 0; y < 2 * h; ++y) {
                            const double* gr =
                                g.data() + (static_cast<std::size_t>(ci) * 2 * h + y) * 2 * w;
                            double* gd =
                                gi.data() + (static_cast<std::size_t>(ci) * h + y / 2) * w;
                            for (int xx = 0; xx < 2 * w; ++xx) gd[xx / 2] += gr[xx];
                        }
                }
                break;
            }
            case OpKind::Softmax: {
                if (wants(0)) {
                    auto& gi = in_node(0).grad;
                    const int c = n.value.shape[0];
                    const std::size_t hw = n.value.size() / static_cast<std::size_t>(c);
                    for (std::size_t p = 0; p < hw; ++p) {
                        double dot = 0.0;
                        for (int ci = 0; ci < c; ++ci)
                            dot += g[ci * hw + p] * n.value[ci * hw + p];
                        for (int ci = 0; ci < c; ++ci)
                            gi[ci * hw + p] += n.value[ci * hw + p] * (g[ci * hw + p] - dot);
                    }
                }
                break;
            }
            case OpKind::LogSoftmax: {
                if (wants(0)) {
                    auto& gi = in_node(0).grad;
                    const int c = n.value.shape[0];
                    const std::size_t hw = n.value.size() / static_cast<std::size_t>(c);
                    for (std::size_t p = 0; p < hw; ++p) {
                        double gsum = 0.0;
                        for (int ci = 0; ci < c; ++ci) gsum += g[ci * hw + p];
                        for (int ci = 0; ci < c; ++ci)
                            gi[ci * hw + p] +=
                                g[ci * hw + p] - std::exp(n.value[ci * hw + p]) * gsum;
                    }
                }
                break;
            }
            case OpKind::MaskedSum: {
                if (wants(0)) {
                    auto& gi = in_node(0).grad;
                    for (std::size_t i = 0; i < gi.size(); ++i)
                        if (n.mask->on[i]) gi[i] += g[0];
                }
                break;
            }
            case OpKind::Sum: {
                if (wants(0)) {
                    auto& gi = in_node(0).grad;
                    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[0];
                }
                break;
            }
            case OpKind::Affine: {
                const Node& x = in_node(0);
                const Node& w = in_node(1);
                const int cin = x.value.shape[0];
                const int cout = w.value.shape[0];
                const std::size_t hw = x.value.size() / static_cast<std::size_t>(cin);
                if (wants(0)) {
                    auto& gx = in_node(0).grad;
                    for (int co = 0; co < cout; ++co)
                        for (int ci = 0; ci < cin; ++ci)
                            detail::axpy(gx.data() + ci * hw, g.data() + co * hw,
                                         w.value[static_cast<std::size_t>(co) * cin + ci], hw);
                }
                if (wants(1)) {
                    auto& gw = in_node(1).grad;
                    for (int co = 0; co < cout; ++co)
                        for (int ci = 0; ci < cin; ++ci)
                            gw[static_cast<std::size_t>(co) * cin + ci] +=
                                detail::dot8(g.data() + co * hw, x.value.data.data() + ci * hw,
                                             hw);
                }
                if (wants(2)) {
                    auto& gb = in_node(2).grad;
                    for (int co = 0; co < cout; ++co)
                        gb[static_cast<std::size_t>(co)] += detail::sum8(g.data() + co * hw, hw);
                }
                break;
            }
            case OpKind::ChannelSlice: {
                if (wants(0)) {
                    const Node& a = in_node(0);
                    auto& gi = in_node(0).grad;
                    const std::size_t hw = n.value.size();
                    double* dst = gi.data() + static_cast<std::size_t>(n.channel) * hw;
                    (void)a;
                    for (std::size_t i = 0; i < hw; ++i) dst[i] += g[i];
                }
                break;
            }
        }
    }

    void conv2d_backward(Node& n, Node& x, Node& w, Node& b) {
        const std::vector<double>& g = n.grad;
        const int cin = x.value.shape[0], h = x.value.shape[1], wd = x.value.shape[2];
        const int cout = w.value.shape[0], kh = w.value.shape[2], kw = w.value.shape[3];
        const int ph = kh / 2, pw = kw / 2;
        const std::size_t hw = static_cast<std::size_t>(h) * wd;

        if (x.requires_grad) {
            // input gradient = correlation of the output gradient with the
            // 180-degree flipped kernel
            std::vector<double> flipped(static_cast<std::size_t>(kh) * kw);
            for (int co = 0; co < cout; ++co) {
                const double* gout = g.data() + co * hw;
                for (int ci = 0; ci < cin; ++ci) {
                    const double* wrow =
                        w.value.data.data() + (static_cast<std::size_t>(co) * cin + ci) * kh * kw;
                    for (int ky = 0; ky < kh; ++ky)
                        for (int kx = 0; kx < kw; ++kx)
                            flipped[static_cast<std::size_t>(ky) * kw + kx] =
                                wrow[(kh - 1 - ky) * kw + (kw - 1 - kx)];
                    corr_plane_accum(x.grad.data() + ci * hw, gout, flipped.data(), h, wd, kh,
                                     kw);
                }
            }
        }
        if (w.requires_grad) {
            for (int co = 0; co < cout; ++co) {
                const double* gout = g.data() + co * hw;
                for (int ci = 0; ci < cin; ++ci) {
                    const double* in = x.value.data.data() + ci * hw;
                    double* gw =
                        w.grad.data() + (static_cast<std::size_t>(co) * cin + ci) * kh * kw;
                    for (int ky = 0; ky < kh; ++ky) {
                        const int dy = ky - ph;
                        const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                        for (int kx = 0; kx < kw; ++kx) {
                            const int dx = kx - pw;
                            const int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
                            double acc = 0.0;
                            for (int yy = y0; yy < y1; ++yy)
                                acc += detail::dot8(
                                    gout + static_cast<std::size_t>(yy) * wd + x0,
                                    in + static_cast<std::size_t>(yy + dy) * wd + x0 + dx,
                                    static_cast<std::size_t>(x1 - x0));
                            gw[ky * kw + kx] += acc;
                        }
                    }
                }
            }
        }
        if (b.requires_grad) {
            for (int co = 0; co < cout; ++co)
                b.grad[static_cast<std::size_t>(co)] += detail::sum8(g.data() + co * hw, hw);
        }
    }
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.
//
// `build` reconstructs the scalar loss from the given leaf values; it must be
// deterministic. Returns the max over sampled coordinates of
// |analytic - central difference| / max(1, |analytic|).
// ---------------------------------------------------------------------------

struct FdCheckOptions {
    double h = 1e-4;
    int max_coords_per_leaf = -1;  // -1: all coordinates
    std::uint64_t seed = 0;        // coordinate subsampling
};

// What a loss builder hands back: the scalar root plus the graph handles of
// the differentiable leaves, in the same order as the value vector passed in.
struct BuiltLoss {
    Var root;
    std::vector<Var> leaves;
};

using LossBuilder = std::function<BuiltLoss(Graph&, const std::vector<Tensor>&)>;

inline double finite_difference_check(const LossBuilder& build, std::vector<Tensor> leaves,
                                      const FdCheckOptions& opt = {}) {
    if (!(opt.h > 0.0)) throw std::invalid_argument("finite_difference_check: h must be > 0");

    std::vector<Tensor> analytic;
    {
        Graph g;
        BuiltLoss bl = build(g, leaves);
        if (bl.leaves.size() != leaves.size())
            throw std::invalid_argument("finite_difference_check: builder returned " +
                                        std::to_string(bl.leaves.size()) + " leaves, expected " +
                                        std::to_string(leaves.size()));
        g.backward(bl.root);
        analytic.reserve(leaves.size());
        for (Var lv : bl.leaves) analytic.push_back(g.grad_tensor(lv));
    }

    auto eval = [&](const std::vector<Tensor>& vals) {
        Graph g;
        BuiltLoss bl = build(g, vals);
        return g.value_scalar(bl.root);
    };

    Rng rng(derive_seed(opt.seed, 0xfdc0de));
    double max_rel = 0.0;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        const std::size_t n = leaves[li].size();
        std::vector<std::size_t> coords(n);
        for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        if (opt.max_coords_per_leaf >= 0 &&
            static_cast<std::size_t>(opt.max_coords_per_leaf) < n) {
            rng.shuffle(coords);
            coords.resize(static_cast<std::size_t>(opt.max_coords_per_leaf));
        }
        for (std::size_t ci : coords) {
            const double orig = leaves[li][ci];
            leaves[li][ci] = orig + opt.h;
            const double fp = eval(leaves);
            leaves[li][ci] = orig - opt.h;
            const double fm = eval(leaves);
            leaves[li][ci] = orig;
            const double fd = (fp - fm) / (2.0 * opt.h);
            const double an = analytic[li][ci];
            const double rel = std::abs(an - fd) / std::max(1.0, std::abs(an));
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace wseg
