#pragma once

#include <thread>
#include <vector>

#include "wseg/losses.hpp"
#include "wseg/optimizer.hpp"

// Proposal-based baseline: instead of penalizing the network output directly,
// synthesize a constrained latent ground truth and train against it with
// plain cross-entropy.
//
// Derivation of the synthesis step. With the network frozen, per pixel p let
// s_p be the predicted foreground probability and L_p = logit(s_p). We want
//
//   Q* = argmin_Q KL(Q || S)   s.t.  a <= sum_p q_p <= b,
//
// with Q a per-pixel Bernoulli field. Introducing multipliers u >= 0 for the
// lower bound and w >= 0 for the upper bound,
//
//   L(Q,u,w) = sum_p kl(q_p; s_p) + u (a - sum q_p) + w (sum q_p - b).
//
// Setting dL/dq_p = 0 gives log(q_p/(1-q_p)) = L_p + d with tilt d = u - w:
// the primal minimizer is the prediction with every foreground logit shifted
// by the same amount,
//
//   q_p(d) = sigmoid(L_p + d).
//
// Substituting back, the dual objective (to be maximized over u,w >= 0) is
//
//   g(u,w) = sum_p [softplus(L_p) - softplus(L_p + d)] + u a - w b,
//
// whose gradient is the constraint violation under Q(d):
//
//   dg/du = a - sum_p q_p(d),     dg/dw = sum_p q_p(d) - b.
//
// Projected gradient ascent therefore alternates a gradient step on (u,w)
// with projection onto the nonnegative orthant, starting from duals at zero.
// Early stopping fires once the dual objective improves by less than `tol`
// over the last `window` iterations. The suppression equality 0 <= V <= 0 is
// handled by relaxing the bounds to (-1, 0); other equalities are rejected.

namespace wseg {

struct DualState {
    double lambda_lower = 0.0;
    double lambda_upper = 0.0;
    double step = 5e-5;
    int max_iters = 500;
    bool early_stop = true;
    int window = 10;
    double tol = 1e-6;

    void validate() const {
        if (!(step > 0.0)) throw std::invalid_argument("DualState: step must be > 0");
        if (max_iters < 1) throw std::invalid_argument("DualState: max_iters must be >= 1");
        if (window < 1) throw std::invalid_argument("DualState: window must be >= 1");
        if (!(tol >= 0.0)) throw std::invalid_argument("DualState: tol must be >= 0");
        if (lambda_lower < 0.0 || lambda_upper < 0.0)
            throw std::invalid_argument("DualState: duals must be >= 0");
    }
};

// Latent per-pixel foreground distribution.
struct Proposal {
    int h = 0, w = 0;
    std::vector<double> q;
};

struct SynthesisResult {
    Proposal proposal;
    DualState dual;  // final multipliers
    int iterations = 0;
    bool early_stopped = false;
    int monotonicity_violations = 0;  // dual objective drops > 1e-9
};

namespace lagrangian {

inline double stable_sigmoid(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double softplus(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

// True once the dual objective improved by less than `tol` over the last
// `window` iterations; histories shorter than the window never stop.
inline bool early_stop_check(const std::vector<double>& history, int window, double tol) {
    if (history.empty()) throw std::invalid_argument("early_stop_check: empty history");
    const std::size_t n = history.size();
    if (n < static_cast<std::size_t>(window)) return false;
    return history[n - 1] - history[n - static_cast<std::size_t>(window)] < tol;
}

// Projected gradient ascent on the dual of the KL projection, network frozen.
// `fg_logits` are the per-pixel foreground-minus-background logits.
inline SynthesisResult synthesize_proposal(const std::vector<double>& fg_logits, int h, int w,
                                           Bounds bounds, DualState dual) {
    dual.validate();
    if (fg_logits.size() != static_cast<std::size_t>(h) * static_cast<std::size_t>(w))
        throw std::invalid_argument("synthesize_proposal: logit count does not match h*w");
    if (bounds.lo == bounds.hi) {
        if (bounds.lo == 0.0) {
            bounds = {-1.0, 0.0};  // suppression equality relaxed
        } else {
            throw std::invalid_argument(
                "synthesize_proposal: equality constraint a = b = " + std::to_string(bounds.lo) +
                " not supported (only the 0 <= V <= 0 case has a defined relaxation)");
        }
    } else if (!(bounds.lo <= bounds.hi)) {
        throw std::invalid_argument("synthesize_proposal: bounds out of order");
    }

    std::vector<double> history;
    history.reserve(static_cast<std::size_t>(dual.max_iters));
    SynthesisResult res;
    double prev_obj = -std::numeric_limits<double>::infinity();

    int iter = 0;
    for (; iter < dual.max_iters; ++iter) {
        const double tilt = dual.lambda_lower - dual.lambda_upper;
        double v = 0.0, obj = 0.0;
        for (double l : fg_logits) {
            v += stable_sigmoid(l + tilt);
            obj += softplus(l) - softplus(l + tilt);
        }
        obj += dual.lambda_lower * bounds.lo - dual.lambda_upper * bounds.hi;
        if (!std::isfinite(obj) || !std::isfinite(v))
            throw std::runtime_error("synthesize_proposal: non-finite dual objective at iteration " +
                                     std::to_string(iter) + " (step " + std::to_string(dual.step) +
                                     ")");
        if (obj < prev_obj - 1e-9) res.monotonicity_violations += 1;
        prev_obj = obj;
        history.push_back(obj);
        if (dual.early_stop && early_stop_check(history, dual.window, dual.tol)) {
            res.early_stopped = true;
            ++iter;
            break;
        }
        dual.lambda_lower = std::max(0.0, dual.lambda_lower + dual.step * (bounds.lo - v));
        dual.lambda_upper = std::max(0.0, dual.lambda_upper + dual.step * (v - bounds.hi));
        if (!std::isfinite(dual.lambda_lower) || !std::isfinite(dual.lambda_upper))
            throw std::runtime_error("synthesize_proposal: non-finite dual update at iteration " +
                                     std::to_string(iter) + " (step " + std::to_string(dual.step) +
                                     ")");
    }

    res.iterations = iter;
    res.dual = dual;
    res.proposal.h = h;
    res.proposal.w = w;
    res.proposal.q.resize(fg_logits.size());
    const double tilt = dual.lambda_lower - dual.lambda_upper;
    for (std::size_t i = 0; i < fg_logits.size(); ++i)
        res.proposal.q[i] = stable_sigmoid(fg_logits[i] + tilt);
    return res;
}

// Per-pixel foreground logits of a prediction already on a graph.
inline std::vector<double> foreground_logits(const Graph& g, const Prediction& pred) {
    const Tensor& logits = g.value(pred.logits);
    if (logits.shape.size() != 3 || logits.shape[0] != 2)
        throw std::invalid_argument("foreground_logits: expected [2,H,W] logits");
    const std::size_t hw = logits.size() / 2;
    std::vector<double> out(hw);
    for (std::size_t i = 0; i < hw; ++i) out[i] = logits[hw + i] - logits[i];
    return out;
}

inline SynthesisResult synthesize_proposal(const Graph& g, const Prediction& pred,
                                           const Bounds& bounds, const DualState& dual) {
    const Tensor& logits = g.value(pred.logits);
    return synthesize_proposal(foreground_logits(g, pred), logits.shape[1], logits.shape[2],
                               bounds, dual);
}

// Proposal synthesis for a batch; distinct images are independent, so the
// opt-in parallel mode just fans out per image and keeps per-image
// determinism (each synthesis depends only on its own inputs).
inline std::vector<SynthesisResult> synthesize_batch(
    const std::vector<std::vector<double>>& fg_logits, int h, int w,
    const std::vector<Bounds>& bounds, const DualState& dual, bool parallel = false) {
    if (fg_logits.size() != bounds.size())
        throw std::invalid_argument("synthesize_batch: logits/bounds size mismatch");
    std::vector<SynthesisResult> out(fg_logits.size());
    if (!parallel || fg_logits.size() < 2) {
        for (std::size_t i = 0; i < fg_logits.size(); ++i)
            out[i] = synthesize_proposal(fg_logits[i], h, w, bounds[i], dual);
        return out;
    }
    std::vector<std::thread> workers;
    workers.reserve(fg_logits.size());
    for (std::size_t i = 0; i < fg_logits.size(); ++i)
        workers.emplace_back([&, i] { out[i] = synthesize_proposal(fg_logits[i], h, w, bounds[i], dual); });
    for (auto& t : workers) t.join();
    return out;
}

// Cross-entropy between a frozen proposal (soft targets) and the prediction:
// -sum_p [ q_p log S_p + (1-q_p) log (1-S_p) ].
inline Var proposal_cross_entropy(Graph& g, const Prediction& pred, const Proposal& proposal) {
    const Tensor& logits = g.value(pred.logits);
    if (logits.shape.size() != 3 || logits.shape[0] != 2 || logits.shape[1] != proposal.h ||
        logits.shape[2] != proposal.w)
        throw std::invalid_argument("proposal_cross_entropy: prediction shape " +
                                    shape_str(logits.shape) + " does not match proposal " +
                                    std::to_string(proposal.h) + "x" + std::to_string(proposal.w));
    Tensor targets({2, proposal.h, proposal.w});
    const std::size_t hw = proposal.q.size();
    for (std::size_t i = 0; i < hw; ++i) {
        targets[i] = 1.0 - proposal.q[i];
        targets[hw + i] = proposal.q[i];
    }
    Var ls = g.log_softmax(pred.logits);
    return g.scalar_mul(g.sum(g.mul(ls, g.constant(targets))), -1.0);
}

// One optimizer step of standard supervised training against a frozen
// proposal.
inline double proposal_training_step(Parameters& params, const Tensor& image,
                                     const Proposal& proposal, AdamState& opt, double lr,
                                     const AdamConfig& cfg = {}) {
    Graph g;
    segnet::ParamVars pv = segnet::register_params(g, params);
    Prediction pred = segnet::forward(g, pv, params.config, image);
    Var loss = proposal_cross_entropy(g, pred, proposal);
    g.backward(loss);
    std::vector<std::vector<double>> grads;
    grads.reserve(pv.vars.size());
    for (Var v : pv.vars) {
        auto gr = g.grad(v);
        grads.emplace_back(gr.begin(), gr.end());
    }
    adam_step(params, grads, opt, lr, cfg);
    return g.value_scalar(loss);
}

}  // namespace lagrangian
}  // namespace wseg
