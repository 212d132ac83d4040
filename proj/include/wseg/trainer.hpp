#pragma once

#include <chrono>
#include <functional>
#include <optional>
#include <set>

#include <json.hpp>

#include "wseg/bounds.hpp"
#include "wseg/data.hpp"
#include "wseg/lagrangian.hpp"
#include "wseg/optimizer.hpp"

// The optimization loop. One mode per run:
//   full        cross-entropy on every pixel
//   partial_ce  cross-entropy on the weak labels only
//   penalty     partial CE plus the size penalty under the configured bounds
//   lagrangian  proposal synthesis + cross-entropy against the proposal
//   hybrid      n_full samples fully supervised, the rest as `penalty` with
//               common bounds
//
// Losses are averaged over the batch, except volume3d where a batch is one
// slice group and the group loss is the plain sum. Absent-target images
// always carry (0,0) bounds, which turns the penalty into V_S^2 and realizes
// the suppression constraint. Everything is deterministic in the seed; the
// per-batch wall time is the only metrics field that varies across reruns.

namespace wseg {

enum class TrainMode { Full, PartialCe, Penalty, Lagrangian, Hybrid };

inline const char* train_mode_name(TrainMode m) {
    switch (m) {
        case TrainMode::Full: return "full";
        case TrainMode::PartialCe: return "partial_ce";
        case TrainMode::Penalty: return "penalty";
        case TrainMode::Lagrangian: return "lagrangian";
        case TrainMode::Hybrid: return "hybrid";
    }
    return "?";
}

inline TrainMode parse_train_mode(const std::string& s) {
    if (s == "full") return TrainMode::Full;
    if (s == "partial_ce") return TrainMode::PartialCe;
    if (s == "penalty") return TrainMode::Penalty;
    if (s == "lagrangian") return TrainMode::Lagrangian;
    if (s == "hybrid") return TrainMode::Hybrid;
    throw std::invalid_argument("mode: unknown value '" + s +
                                "' (expected full|partial_ce|penalty|lagrangian|hybrid)");
}

struct PlateauConfig {
    int patience = 20;
    double factor = 2.0;
    double min_delta = 1e-4;
};

struct TrainConfig {
    TrainMode mode = TrainMode::Penalty;
    BoundScheme bounds;
    double lambda = 1e-2;
    AdamConfig adam;
    double learning_rate = 5e-4;
    PlateauConfig plateau;
    int batch_size = 4;
    int epochs = 100;
    int n_full = 0;          // hybrid: how many samples keep full annotations
    int train_subset_n = 0;  // >0: restrict training to the first n samples
    bool augment_hflip = false;
    std::uint64_t seed = 0;
    NetworkConfig network;
    DualState lagrangian;
    bool lagrangian_parallel = false;
    // explicit (a, b) for present images, replacing the scheme; absent images
    // keep (0, 0). Used by the bound-ablation sweep.
    std::optional<Bounds> fixed_bounds;

    void validate(std::size_t train_size) const {
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
        if (!(learning_rate > 0.0))
            throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
        if (lambda < 0.0) throw std::invalid_argument("TrainConfig: lambda must be >= 0");
        bounds.validate();
        if (mode == TrainMode::Hybrid &&
            !(n_full > 0 && n_full < static_cast<int>(effective_train_size(train_size))))
            throw std::invalid_argument("TrainConfig: hybrid needs 0 < n_full < training size");
        if (mode == TrainMode::Lagrangian && bounds.kind == BoundKind::Volume3d)
            throw std::invalid_argument(
                "TrainConfig: lagrangian mode does not support volume3d bounds");
        if (train_subset_n < 0 || train_subset_n > static_cast<int>(train_size))
            throw std::invalid_argument("TrainConfig: train_subset_n out of range");
    }

    std::size_t effective_train_size(std::size_t train_size) const {
        return train_subset_n > 0 ? static_cast<std::size_t>(train_subset_n) : train_size;
    }

    bool needs_weak_masks() const {
        return mode == TrainMode::PartialCe || mode == TrainMode::Penalty ||
               mode == TrainMode::Lagrangian || mode == TrainMode::Hybrid;
    }
    bool uses_bounds() const {
        return mode == TrainMode::Penalty || mode == TrainMode::Lagrangian ||
               mode == TrainMode::Hybrid;
    }
};

struct MetricsRecord {
    int epoch = 0;
    double loss_ce = 0.0;
    double loss_penalty = 0.0;
    double val_dice = 0.0;
    double violation_rate = 0.0;
    double ms_per_batch = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    Parameters final_params;
    Parameters best_params;
    double best_val_dice = 0.0;
    int best_epoch = -1;
    std::vector<MetricsRecord> metrics;
};

// Halves the learning rate after `patience` epochs without the monitored
// metric improving on its best by more than min_delta.
class PlateauScheduler {
public:
    PlateauScheduler(double initial_lr, const PlateauConfig& cfg)
        : lr_(initial_lr), cfg_(cfg) {}

    double lr() const { return lr_; }

    bool observe(double metric) {
        if (metric > best_ + cfg_.min_delta) {
            best_ = metric;
            since_ = 0;
            return false;
        }
        if (++since_ >= cfg_.patience) {
            lr_ /= cfg_.factor;
            since_ = 0;
            return true;
        }
        return false;
    }

private:
    double lr_;
    PlateauConfig cfg_;
    double best_ = -std::numeric_limits<double>::infinity();
    int since_ = 0;
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
    double mean_dice = 0.0;
    std::vector<std::pair<std::string, double>> per_sample;
};

namespace trainer {

inline FullMask predict_mask(const Parameters& params, const Tensor& image) {
    Graph g;
    Prediction pred = segnet::forward(g, params, image, /*requires_grad=*/false);
    return data::binarize(g.value(pred.probs));
}

// Mean Dice over a split; `per_volume` pools each group's slices into one
// 3D mask before scoring. The predictor form lets tests and tools score
// arbitrary mask sources through the same path.
using MaskPredictor = std::function<FullMask(const Sample&)>;

inline EvalResult evaluate_with(const MaskPredictor& predict, const Dataset& ds, Split split,
                                bool per_volume = false) {
    const auto& idx = ds.indices(split);
    if (idx.empty()) throw std::invalid_argument("evaluate: empty split");
    EvalResult res;
    if (!per_volume) {
        double acc = 0.0;
        for (std::size_t i : idx) {
            const Sample& s = ds.samples[i];
            const double d = data::dice(predict(s), s.mask);
            res.per_sample.emplace_back(s.id, d);
            acc += d;
        }
        res.mean_dice = acc / static_cast<double>(idx.size());
        return res;
    }
    double acc = 0.0;
    std::size_t n_groups = 0;
    for (const auto& [gid, members] : ds.groups(split)) {
        std::size_t inter = 0, a = 0, b = 0;
        for (std::size_t i : members) {
            const Sample& s = ds.samples[i];
            FullMask pred = predict(s);
            for (std::size_t p = 0; p < pred.y.size(); ++p) {
                inter += (pred.y[p] && s.mask.y[p]);
                a += (pred.y[p] != 0);
                b += (s.mask.y[p] != 0);
            }
        }
        const double d = (a + b) == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / (a + b);
        res.per_sample.emplace_back("group_" + std::to_string(gid), d);
        acc += d;
        ++n_groups;
    }
    res.mean_dice = acc / static_cast<double>(n_groups);
    return res;
}

inline EvalResult evaluate(const Parameters& params, const Dataset& ds, Split split,
                           bool per_volume = false) {
    return evaluate_with([&](const Sample& s) { return predict_mask(params, s.image); }, ds,
                         split, per_volume);
}

// ---------------------------------------------------------------------------
// Training internals
// ---------------------------------------------------------------------------

namespace detail {

struct ResolvedBounds {
    std::vector<Bounds> per_sample;              // index into ds.samples
    std::map<int, Bounds> per_group;             // volume3d
};

inline ResolvedBounds resolve_bounds(const TrainConfig& cfg, const Dataset& ds) {
    ResolvedBounds rb;
    rb.per_sample.resize(ds.samples.size());
    if (!cfg.uses_bounds()) return rb;

    const std::size_t domain = static_cast<std::size_t>(ds.manifest.height) *
                               static_cast<std::size_t>(ds.manifest.width);
    if (cfg.fixed_bounds) {
        cfg.fixed_bounds->validate();
        for (std::size_t i = 0; i < ds.samples.size(); ++i)
            rb.per_sample[i] = ds.samples[i].present ? *cfg.fixed_bounds : Bounds{0.0, 0.0};
        return rb;
    }
    // hybrid always constrains its weak part with common bounds
    const BoundKind kind = cfg.mode == TrainMode::Hybrid ? BoundKind::Common : cfg.bounds.kind;

    std::vector<double> reference;
    if (kind == BoundKind::Common) {
        auto groups = ds.groups(Split::Train);
        auto it = groups.find(cfg.bounds.reference_subject);
        if (it == groups.end())
            throw std::invalid_argument("resolve_bounds: reference subject " +
                                        std::to_string(cfg.bounds.reference_subject) +
                                        " not in the training split");
        for (std::size_t i : it->second)
            if (ds.samples[i].present) reference.push_back(static_cast<double>(ds.samples[i].tau));
        if (reference.empty())
            throw std::invalid_argument("resolve_bounds: reference subject has no present slices");
    }

    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const Sample& s = ds.samples[i];
        switch (kind) {
            case BoundKind::Tag:
                rb.per_sample[i] = bounds::tag_bounds(s.present, domain);
                break;
            case BoundKind::Common:
                rb.per_sample[i] = bounds::common_bounds(reference, s.present, cfg.bounds);
                break;
            case BoundKind::Individual:
                rb.per_sample[i] =
                    bounds::individual_bounds(static_cast<double>(s.tau), cfg.bounds);
                break;
            case BoundKind::Volume3d:
                break;  // handled per group below
        }
    }
    if (kind == BoundKind::Volume3d) {
        for (const auto& [gid, members] : ds.groups(Split::Train)) {
            std::vector<double> taus;
            for (std::size_t i : members) taus.push_back(static_cast<double>(ds.samples[i].tau));
            rb.per_group[gid] = bounds::volume_bounds(taus, cfg.bounds);
        }
    }
    return rb;
}

struct BatchStats {
    double ce = 0.0;
    double penalty = 0.0;
    int violations = 0;
    int violation_entities = 0;  // images (or groups) carrying bounds
    int images = 0;
};

struct GradAccum {
    std::vector<std::vector<double>> g;

    void init(const segnet::ParamVars& pv, const Graph& graph) {
        if (!g.empty()) return;
        g.reserve(pv.vars.size());
        for (Var v : pv.vars) g.emplace_back(graph.value(v).size(), 0.0);
    }
    void add(const segnet::ParamVars& pv, const Graph& graph) {
        init(pv, graph);
        for (std::size_t i = 0; i < pv.vars.size(); ++i) {
            auto gr = graph.grad(pv.vars[i]);
            for (std::size_t k = 0; k < gr.size(); ++k) g[i][k] += gr[k];
        }
    }
};

// One optimizer step on a batch of per-sample graphs (all modes except
// volume3d). `use_full[i]` selects full supervision for hybrid batches.
inline BatchStats step_batch(Parameters& params, AdamState& opt, const TrainConfig& cfg,
                             const std::vector<std::size_t>& batch,
                             const std::vector<bool>& use_full, const ResolvedBounds& rb,
                             const std::vector<const Sample*>& views, double lr) {
    BatchStats stats;
    GradAccum accum;
    const double inv_b = 1.0 / static_cast<double>(batch.size());

    // lagrangian: synthesis first, network frozen
    std::vector<Proposal> proposals;
    if (cfg.mode == TrainMode::Lagrangian) {
        std::vector<std::vector<double>> logit_rows;
        std::vector<Bounds> bounds_rows;
        for (std::size_t k = 0; k < batch.size(); ++k) {
            Graph g0;
            Prediction pred = segnet::forward(g0, params, views[k]->image, false);
            logit_rows.push_back(lagrangian::foreground_logits(g0, pred));
            bounds_rows.push_back(rb.per_sample[batch[k]]);
            double vs = 0.0;
            for (double l : logit_rows.back()) vs += lagrangian::stable_sigmoid(l);
            const Bounds& b = bounds_rows.back();
            stats.violation_entities += 1;
            if (vs < b.lo || vs > b.hi) stats.violations += 1;
        }
        auto synth = lagrangian::synthesize_batch(logit_rows, cfg.network.height,
                                                  cfg.network.width, bounds_rows,
                                                  cfg.lagrangian, cfg.lagrangian_parallel);
        for (auto& r : synth) proposals.push_back(std::move(r.proposal));
    }

    for (std::size_t k = 0; k < batch.size(); ++k) {
        const Sample& s = *views[k];
        Graph g;
        segnet::ParamVars pv = segnet::register_params(g, params);
        Prediction pred = segnet::forward(g, pv, cfg.network, s.image);

        Var loss;
        switch (cfg.mode) {
            case TrainMode::Full: {
                loss = losses::partial_cross_entropy(g, pred,
                                                     weak_labels::full_supervision(s.mask));
                stats.ce += g.value_scalar(loss);
                break;
            }
            case TrainMode::PartialCe: {
                loss = losses::partial_cross_entropy(g, pred, *s.weak);
                stats.ce += g.value_scalar(loss);
                break;
            }
            case TrainMode::Hybrid:
            case TrainMode::Penalty: {
                if (use_full[k]) {
                    loss = losses::partial_cross_entropy(g, pred,
                                                         weak_labels::full_supervision(s.mask));
                    stats.ce += g.value_scalar(loss);
                    break;
                }
                const Bounds& b = rb.per_sample[batch[k]];
                Var h = losses::partial_cross_entropy(g, pred, *s.weak);
                Var vs = losses::predicted_size(g, pred);
                Var c = losses::size_penalty(g, vs, b);
                loss = g.add(h, g.scalar_mul(c, cfg.lambda));
                stats.ce += g.value_scalar(h);
                stats.penalty += cfg.lambda * g.value_scalar(c);
                const double v = g.value_scalar(vs);
                stats.violation_entities += 1;
                if (v < b.lo || v > b.hi) stats.violations += 1;
                break;
            }
            case TrainMode::Lagrangian: {
                loss = lagrangian::proposal_cross_entropy(g, pred, proposals[k]);
                stats.ce += g.value_scalar(loss);
                break;
            }
        }
        g.backward(g.scalar_mul(loss, inv_b));
        accum.add(pv, g);
        stats.images += 1;
    }
    adam_step(params, accum.g, opt, lr, cfg.adam);
    return stats;
}

// volume3d: the whole group shares one graph and the loss is the plain sum.
inline BatchStats step_group(Parameters& params, AdamState& opt, const TrainConfig& cfg,
                             const std::vector<std::size_t>& group,
                             const Bounds& group_bounds,
                             const std::vector<const Sample*>& views, double lr) {
    BatchStats stats;
    Graph g;
    segnet::ParamVars pv = segnet::register_params(g, params);
    std::vector<Prediction> preds;
    std::vector<WeakMask> wms;
    for (std::size_t k = 0; k < group.size(); ++k) {
        preds.push_back(segnet::forward(g, pv, cfg.network, views[k]->image));
        wms.push_back(*views[k]->weak);
    }
    Var h = losses::partial_cross_entropy(g, preds[0], wms[0]);
    Var vb = losses::predicted_size(g, preds[0]);
    for (std::size_t k = 1; k < preds.size(); ++k) {
        h = g.add(h, losses::partial_cross_entropy(g, preds[k], wms[k]));
        vb = g.add(vb, losses::predicted_size(g, preds[k]));
    }
    Var c = losses::size_penalty(g, vb, group_bounds);
    Var loss = g.add(h, g.scalar_mul(c, cfg.lambda));
    g.backward(loss);

    GradAccum accum;
    accum.add(pv, g);
    adam_step(params, accum.g, opt, lr, cfg.adam);

    stats.ce = g.value_scalar(h);
    stats.penalty = cfg.lambda * g.value_scalar(c);
    stats.images = static_cast<int>(group.size());
    stats.violation_entities = 1;
    const double v = g.value_scalar(vb);
    if (v < group_bounds.lo || v > group_bounds.hi) stats.violations = 1;
    return stats;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// train()
// ---------------------------------------------------------------------------

using EpochCallback = std::function<void(const MetricsRecord&)>;

inline TrainResult train(const TrainConfig& config, const Dataset& ds,
                         const EpochCallback& on_epoch = {}) {
    TrainConfig cfg = config;
    cfg.network.height = ds.manifest.height;
    cfg.network.width = ds.manifest.width;
    cfg.network.validate();
    cfg.validate(ds.train_indices.size());

    // training set, optionally restricted to the first n samples
    std::vector<std::size_t> train_idx = ds.train_indices;
    if (cfg.train_subset_n > 0) train_idx.resize(static_cast<std::size_t>(cfg.train_subset_n));

    if (cfg.needs_weak_masks()) {
        for (std::size_t k = 0; k < train_idx.size(); ++k) {
            const bool is_full_half =
                cfg.mode == TrainMode::Hybrid && k < static_cast<std::size_t>(cfg.n_full);
            if (!is_full_half && !ds.samples[train_idx[k]].weak)
                throw std::invalid_argument("train: mode " +
                                            std::string(train_mode_name(cfg.mode)) +
                                            " needs weak masks but sample " +
                                            ds.samples[train_idx[k]].id + " has none");
        }
    }

    detail::ResolvedBounds rb = detail::resolve_bounds(cfg, ds);
    Parameters params = segnet::init(cfg.network, derive_seed(cfg.seed, 0x1417));
    AdamState opt;
    opt.reset(params);
    PlateauScheduler sched(cfg.learning_rate, cfg.plateau);

    // hybrid: the first n_full training samples keep their full annotations
    std::set<std::size_t> full_set;
    if (cfg.mode == TrainMode::Hybrid)
        for (int k = 0; k < cfg.n_full; ++k) full_set.insert(train_idx[static_cast<std::size_t>(k)]);

    const bool volume_mode =
        cfg.mode == TrainMode::Penalty && cfg.bounds.kind == BoundKind::Volume3d;
    std::vector<std::vector<std::size_t>> group_batches;
    if (volume_mode)
        for (const auto& [gid, members] : ds.groups(Split::Train)) {
            if (cfg.train_subset_n > 0) continue;
            group_batches.push_back(members);
        }
    if (volume_mode && cfg.train_subset_n > 0)
        throw std::invalid_argument("train: volume3d does not support train_subset_n");

    TrainResult result;
    result.best_val_dice = -1.0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng order_rng(derive_seed(cfg.seed, 0x0e7c, static_cast<std::uint64_t>(epoch)));
        Rng flip_rng(derive_seed(cfg.seed, 0xf11f, static_cast<std::uint64_t>(epoch)));

        detail::BatchStats epoch_stats;
        double ms_total = 0.0;
        int batches = 0;

        auto run_one = [&](const std::vector<std::size_t>& batch, const Bounds* group_bounds) {
            // materialize per-sample views, applying the optional flip
            std::vector<Sample> flipped;
            flipped.reserve(batch.size());
            std::vector<const Sample*> views(batch.size());
            std::vector<bool> use_full(batch.size(), false);
            for (std::size_t k = 0; k < batch.size(); ++k) {
                const Sample& s = ds.samples[batch[k]];
                use_full[k] = full_set.count(batch[k]) > 0;
                if (cfg.augment_hflip && flip_rng.below(2)) {
                    Sample copy;
                    copy.id = s.id;
                    copy.present = s.present;
                    copy.tau = s.tau;
                    copy.image = data::flip_horizontal(s.image);
                    copy.mask = data::flip_horizontal(s.mask);
                    if (s.weak) copy.weak = data::flip_horizontal(*s.weak);
                    flipped.push_back(std::move(copy));
                    views[k] = &flipped.back();
                } else {
                    views[k] = &s;
                }
            }
            const auto t0 = std::chrono::steady_clock::now();
            detail::BatchStats st =
                group_bounds
                    ? detail::step_group(params, opt, cfg, batch, *group_bounds, views,
                                         sched.lr())
                    : detail::step_batch(params, opt, cfg, batch, use_full, rb, views,
                                         sched.lr());
            const auto t1 = std::chrono::steady_clock::now();
            ms_total += std::chrono::duration<double, std::milli>(t1 - t0).count();
            batches += 1;
            epoch_stats.ce += st.ce;
            epoch_stats.penalty += st.penalty;
            epoch_stats.violations += st.violations;
            epoch_stats.violation_entities += st.violation_entities;
            epoch_stats.images += st.images;
        };

        if (volume_mode) {
            std::vector<std::size_t> order(group_batches.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            order_rng.shuffle(order);
            for (std::size_t oi : order) {
                const auto& members = group_batches[oi];
                run_one(members, &rb.per_group.at(ds.samples[members[0]].group));
            }
        } else {
            std::vector<std::size_t> order = train_idx;
            order_rng.shuffle(order);
            for (std::size_t start = 0; start < order.size();
                 start += static_cast<std::size_t>(cfg.batch_size)) {
                const std::size_t end =
                    std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
                run_one(std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                 order.begin() + static_cast<std::ptrdiff_t>(end)),
                        nullptr);
            }
        }

        EvalResult val = evaluate(params, ds, Split::Val);

        MetricsRecord rec;
        rec.epoch = epoch;
        rec.loss_ce = epoch_stats.ce / std::max(1, epoch_stats.images);
        rec.loss_penalty = epoch_stats.penalty / std::max(1, epoch_stats.images);
        rec.val_dice = val.mean_dice;
        rec.violation_rate = epoch_stats.violation_entities
                                 ? static_cast<double>(epoch_stats.violations) /
                                       epoch_stats.violation_entities
                                 : 0.0;
        rec.ms_per_batch = ms_total / std::max(1, batches);
        rec.lr = sched.lr();
        result.metrics.push_back(rec);
        if (on_epoch) on_epoch(rec);

        if (val.mean_dice > result.best_val_dice) {
            result.best_val_dice = val.mean_dice;
            result.best_epoch = epoch;
            result.best_params = params;
        }
        sched.observe(val.mean_dice);
    }

    result.final_params = std::move(params);
    return result;
}

// ---------------------------------------------------------------------------
// Step-time benchmark
// ---------------------------------------------------------------------------

// Mean wall time of a full optimizer step (forward, loss, backward, update),
// strictly single-threaded, cycling the training set in order. The first
// `warmup` batches are excluded.
inline double benchmark_step_time(const TrainConfig& config, const Dataset& ds, int n_batches,
                                  int warmup = 5) {
    TrainConfig cfg = config;
    cfg.network.height = ds.manifest.height;
    cfg.network.width = ds.manifest.width;
    cfg.lagrangian_parallel = false;
    cfg.augment_hflip = false;
    cfg.validate(ds.train_indices.size());
    detail::ResolvedBounds rb = trainer::detail::resolve_bounds(cfg, ds);
    Parameters params = segnet::init(cfg.network, derive_seed(cfg.seed, 0x1417));
    AdamState opt;
    opt.reset(params);

    std::vector<std::vector<std::size_t>> batches;
    if (cfg.mode == TrainMode::Penalty && cfg.bounds.kind == BoundKind::Volume3d) {
        for (const auto& [gid, members] : ds.groups(Split::Train)) batches.push_back(members);
    } else {
        const auto& idx = ds.train_indices;
        for (std::size_t start = 0; start < idx.size();
             start += static_cast<std::size_t>(cfg.batch_size))
            batches.emplace_back(
                idx.begin() + static_cast<std::ptrdiff_t>(start),
                idx.begin() +
                    static_cast<std::ptrdiff_t>(std::min(
                        idx.size(), start + static_cast<std::size_t>(cfg.batch_size))));
    }

    double ms = 0.0;
    int measured = 0;
    for (int i = 0; i < n_batches + warmup; ++i) {
        const auto& batch = batches[static_cast<std::size_t>(i) % batches.size()];
        std::vector<const Sample*> views;
        for (std::size_t k : batch) views.push_back(&ds.samples[k]);
        std::vector<bool> use_full(batch.size(), false);

        const auto t0 = std::chrono::steady_clock::now();
        if (cfg.mode == TrainMode::Penalty && cfg.bounds.kind == BoundKind::Volume3d)
            detail::step_group(params, opt, cfg, batch,
                               rb.per_group.at(ds.samples[batch[0]].group), views,
                               cfg.learning_rate);
        else
            detail::step_batch(params, opt, cfg, batch, use_full, rb, views,
                               cfg.learning_rate);
        const auto t1 = std::chrono::steady_clock::now();
        if (i >= warmup) {
            ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
            ++measured;
        }
    }
    return ms / std::max(1, measured);
}

// ---------------------------------------------------------------------------
// Metrics CSV
// ---------------------------------------------------------------------------

inline constexpr const char* kMetricsHeader =
    "epoch,loss_ce,loss_penalty,val_dice,violation_rate,ms_per_batch,lr";

inline void write_metrics_csv(const std::string& path,
                              const std::vector<MetricsRecord>& metrics) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_metrics_csv: cannot open " + path);
    out << kMetricsHeader << "\n";
    char buf[256];
    for (const auto& r : metrics) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.epoch,
                      r.loss_ce, r.loss_penalty, r.val_dice, r.violation_rate, r.ms_per_batch,
                      r.lr);
        out << buf;
    }
}

inline std::vector<MetricsRecord> read_metrics_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read_metrics_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != kMetricsHeader)
        throw std::runtime_error("read_metrics_csv: unexpected header in " + path);
    std::vector<MetricsRecord> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        MetricsRecord r;
        if (std::sscanf(line.c_str(), "%d,%lg,%lg,%lg,%lg,%lg,%lg", &r.epoch, &r.loss_ce,
                        &r.loss_penalty, &r.val_dice, &r.violation_rate, &r.ms_per_batch,
                        &r.lr) != 7)
            throw std::runtime_error("read_metrics_csv: malformed row in " + path);
        out.push_back(r);
    }
    return out;
}

}  // namespace trainer

// ---------------------------------------------------------------------------
// Config JSON
// ---------------------------------------------------------------------------

namespace config {

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& path,
                       const std::set<std::string>& allowed) {
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key))
            throw std::runtime_error("config: unknown key '" + path + key + "'");
}

template <typename T>
T get_or(const nlohmann::json& j, const std::string& path, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw std::runtime_error("config: invalid value at '" + path + key + "'");
    }
}

}  // namespace detail

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    using detail::check_keys;
    using detail::get_or;
    TrainConfig cfg;
    check_keys(j, "", {"mode", "lambda", "epochs", "batch_size", "seed", "learning_rate",
                       "n_full", "train_subset_n", "augment_hflip", "plateau", "network",
                       "bounds", "lagrangian", "adam"});
    cfg.mode = parse_train_mode(get_or<std::string>(j, "", "mode", "penalty"));
    cfg.lambda = get_or(j, "", "lambda", cfg.lambda);
    cfg.epochs = get_or(j, "", "epochs", cfg.epochs);
    cfg.batch_size = get_or(j, "", "batch_size", cfg.batch_size);
    cfg.seed = get_or(j, "", "seed", cfg.seed);
    cfg.learning_rate = get_or(j, "", "learning_rate", cfg.learning_rate);
    cfg.n_full = get_or(j, "", "n_full", cfg.n_full);
    cfg.train_subset_n = get_or(j, "", "train_subset_n", cfg.train_subset_n);
    cfg.augment_hflip = get_or(j, "", "augment_hflip", cfg.augment_hflip);
    if (j.contains("plateau")) {
        const auto& p = j.at("plateau");
        check_keys(p, "plateau.", {"patience", "factor", "min_delta"});
        cfg.plateau.patience = get_or(p, "plateau.", "patience", cfg.plateau.patience);
        cfg.plateau.factor = get_or(p, "plateau.", "factor", cfg.plateau.factor);
        cfg.plateau.min_delta = get_or(p, "plateau.", "min_delta", cfg.plateau.min_delta);
    }
    if (j.contains("network")) {
        const auto& n = j.at("network");
        check_keys(n, "network.", {"depth", "base_channels", "head_foreground_bias"});
        cfg.network.depth = get_or(n, "network.", "depth", cfg.network.depth);
        cfg.network.base_channels =
            get_or(n, "network.", "base_channels", cfg.network.base_channels);
        cfg.network.head_foreground_bias =
            get_or(n, "network.", "head_foreground_bias", cfg.network.head_foreground_bias);
    }
    if (j.contains("bounds")) {
        const auto& b = j.at("bounds");
        check_keys(b, "bounds.",
                   {"kind", "lower_factor", "upper_factor", "reference_subject", "fixed_lower",
                    "fixed_upper"});
        if (b.contains("fixed_lower") != b.contains("fixed_upper"))
            throw std::runtime_error(
                "config: bounds.fixed_lower and bounds.fixed_upper must be given together");
        if (b.contains("fixed_lower"))
            cfg.fixed_bounds = Bounds{get_or(b, "bounds.", "fixed_lower", 0.0),
                                      get_or(b, "bounds.", "fixed_upper", 0.0)};
        cfg.bounds.kind = parse_bound_kind(get_or<std::string>(b, "bounds.", "kind", "individual"));
        cfg.bounds.lower_factor = get_or(b, "bounds.", "lower_factor", cfg.bounds.lower_factor);
        cfg.bounds.upper_factor = get_or(b, "bounds.", "upper_factor", cfg.bounds.upper_factor);
        cfg.bounds.reference_subject =
            get_or(b, "bounds.", "reference_subject", cfg.bounds.reference_subject);
    }
    if (j.contains("lagrangian")) {
        const auto& l = j.at("lagrangian");
        check_keys(l, "lagrangian.",
                   {"step", "max_iters", "early_stop", "window", "tol", "parallel"});
        cfg.lagrangian.step = get_or(l, "lagrangian.", "step", cfg.lagrangian.step);
        cfg.lagrangian.max_iters = get_or(l, "lagrangian.", "max_iters", cfg.lagrangian.max_iters);
        cfg.lagrangian.early_stop =
            get_or(l, "lagrangian.", "early_stop", cfg.lagrangian.early_stop);
        cfg.lagrangian.window = get_or(l, "lagrangian.", "window", cfg.lagrangian.window);
        cfg.lagrangian.tol = get_or(l, "lagrangian.", "tol", cfg.lagrangian.tol);
        cfg.lagrangian_parallel = get_or(l, "lagrangian.", "parallel", cfg.lagrangian_parallel);
    }
    if (j.contains("adam")) {
        const auto& a = j.at("adam");
        check_keys(a, "adam.", {"beta1", "beta2", "eps"});
        cfg.adam.beta1 = get_or(a, "adam.", "beta1", cfg.adam.beta1);
        cfg.adam.beta2 = get_or(a, "adam.", "beta2", cfg.adam.beta2);
        cfg.adam.eps = get_or(a, "adam.", "eps", cfg.adam.eps);
    }
    return cfg;
}

inline TrainConfig load_train_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("config: parse error in " + path + ": " + e.what());
    }
    return train_config_from_json(j);
}

inline nlohmann::json train_config_to_json(const TrainConfig& cfg) {
    return {
        {"mode", train_mode_name(cfg.mode)},
        {"lambda", cfg.lambda},
        {"epochs", cfg.epochs},
        {"batch_size", cfg.batch_size},
        {"seed", cfg.seed},
        {"learning_rate", cfg.learning_rate},
        {"n_full", cfg.n_full},
        {"train_subset_n", cfg.train_subset_n},
        {"augment_hflip", cfg.augment_hflip},
        {"plateau",
         {{"patience", cfg.plateau.patience},
          {"factor", cfg.plateau.factor},
          {"min_delta", cfg.plateau.min_delta}}},
        {"network",
         {{"depth", cfg.network.depth},
          {"base_channels", cfg.network.base_channels},
          {"head_foreground_bias", cfg.network.head_foreground_bias}}},
        {"bounds",
         [&] {
             nlohmann::json b = {{"kind", bound_kind_name(cfg.bounds.kind)},
                                 {"lower_factor", cfg.bounds.lower_factor},
                                 {"upper_factor", cfg.bounds.upper_factor},
                                 {"reference_subject", cfg.bounds.reference_subject}};
             if (cfg.fixed_bounds) {
                 b["fixed_lower"] = cfg.fixed_bounds->lo;
                 b["fixed_upper"] = cfg.fixed_bounds->hi;
             }
             return b;
         }()},
        {"lagrangian",
         {{"step", cfg.lagrangian.step},
          {"max_iters", cfg.lagrangian.max_iters},
          {"early_stop", cfg.lagrangian.early_stop},
          {"window", cfg.lagrangian.window},
          {"tol", cfg.lagrangian.tol},
          {"parallel", cfg.lagrangian_parallel}}},
    };
}

}  // namespace config
}  // namespace wseg
