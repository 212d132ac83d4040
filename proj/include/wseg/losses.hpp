#pragma once

#include <memory>
#include <span>
#include <vector>

#include "wseg/autodiff.hpp"
#include "wseg/segnet.hpp"

// Training objectives.
//
// The weak-supervision loss is H(S) + lambda * C(V_S) where
//   H(S)   = -sum_{p in labeled set} log S_p(label of p)
//   V_S    = sum_{p in domain} S_p(foreground)
//   C(v)   = (v - a)^2 if v < a, (v - b)^2 if v > b, 0 otherwise.
// C is built from graph ops on the active branch only, so its gradient comes
// out of the autodiff engine: 2(v-a) below the interval, 2(v-b) above, and
// exactly zero (no graph path) inside. At the kinks the inactive zero branch
// applies. A batch-level variant constrains the summed size of a group of
// slices, and a fractional form constrains ratio statistics such as the
// predicted centroid coordinate.

namespace wseg {

// Lower/upper bound on a region statistic, in pixels for sizes.
struct Bounds {
    double lo = 0.0;
    double hi = 0.0;

    void validate() const {
        if (!(lo >= 0.0) || !(lo <= hi))
            throw std::invalid_argument("Bounds: need 0 <= lo <= hi, got (" +
                                        std::to_string(lo) + ", " + std::to_string(hi) + ")");
    }
};

enum class PixelLabel : std::uint8_t { Unlabeled = 0, Foreground = 1, Background = 2 };

// Tri-state partial annotation. Weak-label generation only ever produces
// foreground labels; full supervision labels every pixel.
struct WeakMask {
    int h = 0, w = 0;
    std::vector<PixelLabel> labels;

    WeakMask() = default;
    WeakMask(int h_, int w_)
        : h(h_), w(w_), labels(static_cast<std::size_t>(h_) * w_, PixelLabel::Unlabeled) {}

    std::size_t count(PixelLabel which) const {
        std::size_t n = 0;
        for (auto l : labels) n += (l == which);
        return n;
    }
    std::size_t labeled_count() const {
        return labels.size() - count(PixelLabel::Unlabeled);
    }

    std::shared_ptr<Mask> select(PixelLabel which) const {
        auto m = std::make_shared<Mask>(h, w);
        for (std::size_t i = 0; i < labels.size(); ++i) m->on[i] = (labels[i] == which);
        return m;
    }
};

namespace losses {

// Partial cross-entropy over the labeled set; unlabeled pixels contribute
// nothing and an empty labeled set gives a constant 0.
inline Var partial_cross_entropy(Graph& g, const Prediction& pred, const WeakMask& wm) {
    const std::size_t n_fg = wm.count(PixelLabel::Foreground);
    const std::size_t n_bg = wm.count(PixelLabel::Background);
    if (n_fg + n_bg == 0) return g.scalar(0.0);

    Var ls = g.log_softmax(pred.logits);
    Var acc;
    if (n_fg) acc = g.masked_sum(g.channel_slice(ls, 1), wm.select(PixelLabel::Foreground));
    if (n_bg) {
        Var bg = g.masked_sum(g.channel_slice(ls, 0), wm.select(PixelLabel::Background));
        acc = n_fg ? g.add(acc, bg) : bg;
    }
    return g.scalar_mul(acc, -1.0);
}

// V_S: sum of foreground probabilities, optionally restricted to a region.
inline Var predicted_size(Graph& g, const Prediction& pred) {
    return g.sum(g.channel_slice(pred.probs, 1));
}

inline Var predicted_size(Graph& g, const Prediction& pred, std::shared_ptr<const Mask> region) {
    return g.masked_sum(g.channel_slice(pred.probs, 1), std::move(region));
}

// Quadratic barrier outside [lo, hi]; zero (and gradient-free) inside,
// including at the interval ends.
inline Var size_penalty(Graph& g, Var v, const Bounds& bounds) {
    bounds.validate();
    const double value = g.value_scalar(v);
    if (value < bounds.lo) return g.square(g.sub(v, g.scalar(bounds.lo)));
    if (value > bounds.hi) return g.square(g.sub(v, g.scalar(bounds.hi)));
    return g.scalar(0.0);
}

// H(S) + lambda * C(V_S). lambda = 0 reduces exactly to the partial
// cross-entropy term.
inline Var combined_loss(Graph& g, const Prediction& pred, const WeakMask& wm,
                         const Bounds& bounds, double lambda) {
    if (lambda < 0.0) throw std::invalid_argument("combined_loss: lambda must be >= 0");
    Var h = partial_cross_entropy(g, pred, wm);
    if (lambda == 0.0) return h;
    Var c = size_penalty(g, predicted_size(g, pred), bounds);
    return g.add(h, g.scalar_mul(c, lambda));
}

// Batch-volume constraint: sum of the slices' cross-entropies plus a single
// penalty on the summed size of the whole group. No per-slice constraints —
// this is strictly less supervision than the per-image 2D losses.
inline Var batch_volume_penalty(Graph& g, std::span<const Prediction> predictions,
                                std::span<const WeakMask> weak_masks, const Bounds& bounds_3d,
                                double lambda) {
    if (predictions.empty())
        throw std::invalid_argument("batch_volume_penalty: empty slice group");
    if (weak_masks.size() != predictions.size())
        throw std::invalid_argument("batch_volume_penalty: " + std::to_string(predictions.size()) +
                                    " predictions vs " + std::to_string(weak_masks.size()) +
                                    " weak masks");
    Var h = partial_cross_entropy(g, predictions[0], weak_masks[0]);
    Var vb = predicted_size(g, predictions[0]);
    for (std::size_t i = 1; i < predictions.size(); ++i) {
        h = g.add(h, partial_cross_entropy(g, predictions[i], weak_masks[i]));
        vb = g.add(vb, predicted_size(g, predictions[i]));
    }
    return g.add(h, g.scalar_mul(size_penalty(g, vb, bounds_3d), lambda));
}

// ---------------------------------------------------------------------------
// Fractional region statistics F_S = sum_p f_p S_p / sum_p S_p, e.g. the
// predicted centroid coordinate when f is a pixel coordinate map.
// ---------------------------------------------------------------------------

struct FractionalSpec {
    Tensor f;             // per-pixel unary potential, shape [H,W]
    Bounds bounds;        // constraint on F_S
    double eps = 1e-6;    // minimum admissible denominator
};

// f = pixel x (column) coordinate.
inline Tensor coord_potential_x(int h, int w) {
    Tensor t({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) t[static_cast<std::size_t>(y) * w + x] = x;
    return t;
}

inline Tensor coord_potential_y(int h, int w) {
    Tensor t({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) t[static_cast<std::size_t>(y) * w + x] = y;
    return t;
}

// Core form on a foreground-probability map of shape [H,W].
inline Var fractional_statistic(Graph& g, Var foreground, const Tensor& f, double eps = 1e-6) {
    const Tensor& fg = g.value(foreground);
    if (fg.shape != f.shape)
        throw std::invalid_argument("fractional_statistic: potential shape " + shape_str(f.shape) +
                                    " does not match prediction " + shape_str(fg.shape));
    Var denom = g.sum(foreground);
    const double d = g.value_scalar(denom);
    if (!(d > eps))
        throw std::domain_error(
            "fractional_statistic: predicted size " + std::to_string(d) +
            " <= " + std::to_string(eps) + "; statistic undefined on an empty prediction");
    Var num = g.sum(g.mul(foreground, g.constant(f)));
    return g.div(num, denom);
}

inline Var fractional_statistic(Graph& g, const Prediction& pred, const FractionalSpec& spec) {
    return fractional_statistic(g, g.channel_slice(pred.probs, 1), spec.f, spec.eps);
}

inline Var fractional_penalty(Graph& g, const Prediction& pred, const FractionalSpec& spec) {
    return size_penalty(g, fractional_statistic(g, pred, spec), spec.bounds);
}

}  // namespace losses
}  // namespace wseg
