#pragma once

#include <vector>

#include "wseg/losses.hpp"
#include "wseg/rng.hpp"

// Weak annotation generation. Both strategies return foreground-only partial
// labels that are guaranteed subsets of the true mask, so the partial
// cross-entropy never supervises background pixels.

namespace wseg {

// Binary ground-truth target indicator.
struct FullMask {
    int h = 0, w = 0;
    std::vector<std::uint8_t> y;

    FullMask() = default;
    FullMask(int h_, int w_) : h(h_), w(w_), y(static_cast<std::size_t>(h_) * w_, 0) {}

    std::size_t tau() const {
        std::size_t n = 0;
        for (auto v : y) n += (v != 0);
        return n;
    }
    bool at(int yy, int xx) const {
        return yy >= 0 && yy < h && xx >= 0 && xx < w &&
               y[static_cast<std::size_t>(yy) * w + xx] != 0;
    }
};

namespace weak_labels {

inline bool presence_tag(const FullMask& mask) { return mask.tau() > 0; }

// Square structuring element of size k: offsets [hi-k+1, hi] with hi = k/2.
// Even sizes anchor at the top-left pixel of the central 2x2 block.
inline std::pair<int, int> kernel_offsets(int k) {
    const int hi = k / 2;
    return {hi - k + 1, hi};
}

// Full-hit erosion by a k x k square; out-of-bounds counts as background.
inline FullMask erode(const FullMask& mask, int k) {
    if (k < 1) throw std::invalid_argument("erode: kernel size must be >= 1");
    const auto [lo, hi] = kernel_offsets(k);
    FullMask out(mask.h, mask.w);
    for (int yy = 0; yy < mask.h; ++yy)
        for (int xx = 0; xx < mask.w; ++xx) {
            bool all = true;
            for (int dy = lo; dy <= hi && all; ++dy)
                for (int dx = lo; dx <= hi && all; ++dx)
                    if (!mask.at(yy + dy, xx + dx)) all = false;
            out.y[static_cast<std::size_t>(yy) * mask.w + xx] = all ? 1 : 0;
        }
    return out;
}

inline const std::vector<int>& default_erosion_schedule() {
    static const std::vector<int> schedule = {10, 7, 5, 3, 1};
    return schedule;
}

// Erode by the first kernel in the schedule that leaves a nonempty label.
inline WeakMask erode_label(const FullMask& mask,
                            const std::vector<int>& kernel_sizes = default_erosion_schedule()) {
    if (mask.tau() == 0) throw std::invalid_argument("erode_label: empty mask");
    if (kernel_sizes.empty()) throw std::invalid_argument("erode_label: empty kernel schedule");
    for (int k : kernel_sizes) {
        FullMask eroded = erode(mask, k);
        if (eroded.tau() == 0) continue;
        WeakMask wm(mask.h, mask.w);
        for (std::size_t i = 0; i < eroded.y.size(); ++i)
            if (eroded.y[i]) wm.labels[i] = PixelLabel::Foreground;
        return wm;
    }
    throw std::runtime_error("erode_label: mask of size " + std::to_string(mask.tau()) +
                             " vanished under every kernel in the schedule");
}

// A disc of radius r <= max_radius around a uniformly drawn foreground pixel,
// clipped to the mask so the label never overlaps background. The radius is
// drawn uniformly from {1, ..., max_radius}. An empty mask yields an empty
// (absent-tag) weak mask.
inline WeakMask random_point_label(const FullMask& mask, int max_radius, std::uint64_t seed) {
    if (max_radius < 1) throw std::invalid_argument("random_point_label: max_radius must be >= 1");
    WeakMask wm(mask.h, mask.w);
    std::vector<std::size_t> fg;
    for (std::size_t i = 0; i < mask.y.size(); ++i)
        if (mask.y[i]) fg.push_back(i);
    if (fg.empty()) return wm;

    Rng rng(derive_seed(seed, 0xb0b));
    const std::size_t center = fg[rng.below(fg.size())];
    const int cy = static_cast<int>(center) / mask.w;
    const int cx = static_cast<int>(center) % mask.w;
    const int r = static_cast<int>(rng.range(1, max_radius));
    for (int yy = cy - r; yy <= cy + r; ++yy)
        for (int xx = cx - r; xx <= cx + r; ++xx) {
            if (!mask.at(yy, xx)) continue;
            const int dy = yy - cy, dx = xx - cx;
            if (dy * dy + dx * dx <= r * r)
                wm.labels[static_cast<std::size_t>(yy) * mask.w + xx] = PixelLabel::Foreground;
        }
    return wm;
}

inline WeakMask random_point_label(const FullMask& mask, std::uint64_t seed) {
    return random_point_label(mask, 4, seed);
}

// Full supervision: every pixel labeled with its true class.
inline WeakMask full_supervision(const FullMask& mask) {
    WeakMask wm(mask.h, mask.w);
    for (std::size_t i = 0; i < mask.y.size(); ++i)
        wm.labels[i] = mask.y[i] ? PixelLabel::Foreground : PixelLabel::Background;
    return wm;
}

}  // namespace weak_labels
}  // namespace wseg
