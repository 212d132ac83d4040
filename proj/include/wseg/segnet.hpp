#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "wseg/autodiff.hpp"
#include "wseg/rng.hpp"

// Small encoder-decoder segmentation network with additive skip connections.
//
// Levels use 3x3 convs + relu, 2x2 max-pool on the way down and nearest 2x
// upsampling on the way up; channel reduction happens at the coarse resolution
// before upsampling. A 1x1 affine head produces two-class logits; softmax over
// channels yields per-pixel probabilities.
//
// With channels ch_i = base * 2^i (ch_in(0) = 1), the parameter count is
//   sum_i [ 9*ch_i*ch_in(i) + ch_i ]                 (encoder convs)
// + 9*ch_d*ch_{d-1} + ch_d                           (bottleneck)
// + sum_i [ 9*ch_i*ch_{i+1} + ch_i ]                 (decoder reduce convs)
// + sum_i [ 9*ch_i*ch_i + ch_i ]                     (decoder refine convs)
// + classes*ch_0 + classes                           (head)
// e.g. depth 2, base 8: 14594 parameters.

namespace wseg {

struct NetworkConfig {
    int depth = 2;
    int base_channels = 8;
    int height = 64;
    int width = 64;
    int classes = 2;
    // Initial foreground-class bias of the head. Starting the classifier at
    // the foreground prior keeps the initial predicted region size near the
    // plausible range instead of |domain|/2, which would otherwise trigger a
    // violent first correction whenever size constraints are active.
    double head_foreground_bias = -3.5;

    int channels_at(int level) const { return base_channels << level; }

    std::size_t parameter_count() const {
        auto conv = [](int cout, int cin) {
            return static_cast<std::size_t>(cout) * cin * 9 + cout;
        };
        std::size_t n = 0;
        int cin = 1;
        for (int i = 0; i < depth; ++i) {
            n += conv(channels_at(i), cin);
            cin = channels_at(i);
        }
        n += conv(channels_at(depth), channels_at(depth - 1));
        for (int i = depth - 1; i >= 0; --i) {
            n += conv(channels_at(i), channels_at(i + 1));
            n += conv(channels_at(i), channels_at(i));
        }
        n += static_cast<std::size_t>(classes) * base_channels + classes;
        return n;
    }

    void validate() const {
        if (depth < 1 || base_channels < 1)
            throw std::invalid_argument("NetworkConfig: depth and base_channels must be >= 1");
        if (classes != 2)
            throw std::invalid_argument("NetworkConfig: only two-class segmentation supported");
        const int div = 1 << depth;
        if (height % div || width % div)
            throw std::invalid_argument("NetworkConfig: " + std::to_string(height) + "x" +
                                        std::to_string(width) +
                                        " input not divisible by 2^depth = " +
                                        std::to_string(div));
    }
};

struct ParamEntry {
    std::string name;
    Tensor value;
};

// Every tensor is registered exactly once, in a fixed order; that order also
// defines the checkpoint layout.
struct Parameters {
    NetworkConfig config;
    std::vector<ParamEntry> entries;
    std::uint64_t init_seed = 0;

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& e : entries) n += e.value.size();
        return n;
    }

    bool all_finite() const {
        for (const auto& e : entries)
            for (double v : e.value.data)
                if (!std::isfinite(v)) return false;
        return true;
    }
};

// Per-pixel two-class prediction: raw logits plus their channel softmax.
// Channel 1 is the foreground probability.
struct Prediction {
    Var logits;
    Var probs;
};

namespace segnet {

// He-style fan-in initialization, deterministic in the seed. Biases start at 0.
inline Parameters init(const NetworkConfig& config, std::uint64_t seed) {
    config.validate();
    Parameters p;
    p.config = config;
    p.init_seed = seed;
    Rng rng(derive_seed(seed, 0x5e97e7));

    auto add_conv = [&](const std::string& name, int cout, int cin, int k) {
        Tensor w({cout, cin, k, k});
        const double sd = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
        for (auto& v : w.data) v = rng.normal(0.0, sd);
        p.entries.push_back({name + ".weight", std::move(w)});
        p.entries.push_back({name + ".bias", Tensor({cout})});
    };
    auto add_affine = [&](const std::string& name, int cout, int cin) {
        Tensor w({cout, cin});
        const double sd = std::sqrt(2.0 / static_cast<double>(cin));
        for (auto& v : w.data) v = rng.normal(0.0, sd);
        p.entries.push_back({name + ".weight", std::move(w)});
        p.entries.push_back({name + ".bias", Tensor({cout})});
    };

    int cin = 1;
    for (int i = 0; i < config.depth; ++i) {
        add_conv("enc" + std::to_string(i), config.channels_at(i), cin, 3);
        cin = config.channels_at(i);
    }
    add_conv("bottleneck", config.channels_at(config.depth), config.channels_at(config.depth - 1),
             3);
    for (int i = config.depth - 1; i >= 0; --i) {
        add_conv("dec" + std::to_string(i) + ".reduce", config.channels_at(i),
                 config.channels_at(i + 1), 3);
        add_conv("dec" + std::to_string(i) + ".refine", config.channels_at(i),
                 config.channels_at(i), 3);
    }
    add_affine("head", config.classes, config.base_channels);
    p.entries.back().value.data[1] = config.head_foreground_bias;
    return p;
}

// Parameter leaves registered on a graph; reuse the same handles to run
// several images through one graph (gradients then accumulate).
struct ParamVars {
    std::vector<Var> vars;
};

inline ParamVars register_params(Graph& g, const Parameters& p, bool requires_grad = true) {
    ParamVars pv;
    pv.vars.reserve(p.entries.size());
    for (const auto& e : p.entries) pv.vars.push_back(g.leaf(e.value, requires_grad));
    return pv;
}

inline Prediction forward(Graph& g, const ParamVars& pv, const NetworkConfig& config,
                          const Tensor& image) {
    if (image.shape != Shape{1, config.height, config.width})
        throw std::invalid_argument("segnet::forward: image shape " + shape_str(image.shape) +
                                    " does not match configured " +
                                    shape_str({1, config.height, config.width}));
    std::size_t k = 0;
    auto next_pair = [&]() {
        Var w = pv.vars.at(k++);
        Var b = pv.vars.at(k++);
        return std::pair<Var, Var>(w, b);
    };

    Var x = g.constant(image);
    std::vector<Var> skips;
    for (int i = 0; i < config.depth; ++i) {
        auto [w, b] = next_pair();
        x = g.relu(g.conv2d(x, w, b));
        skips.push_back(x);
        x = g.max_pool2(x);
    }
    {
        auto [w, b] = next_pair();
        x = g.relu(g.conv2d(x, w, b));
    }
    for (int i = config.depth - 1; i >= 0; --i) {
        auto [wr, br] = next_pair();
        x = g.relu(g.conv2d(x, wr, br));
        x = g.upsample2(x);
        x = g.add(x, skips[static_cast<std::size_t>(i)]);
        auto [wf, bf] = next_pair();
        x = g.relu(g.conv2d(x, wf, bf));
    }
    auto [wh, bh] = next_pair();
    Var logits = g.affine(x, wh, bh);
    return Prediction{logits, g.softmax(logits)};
}

inline Prediction forward(Graph& g, const Parameters& p, const Tensor& image,
                          bool requires_grad = true) {
    ParamVars pv = register_params(g, p, requires_grad);
    return forward(g, pv, p.config, image);
}

// ---------------------------------------------------------------------------
// Checkpoint format: 8-byte magic "WSEGCKPT", then u32 little-endian fields
// {version, depth, base_channels, height, width, classes}, u64 parameter
// count, then raw little-endian f64 values in registration order.
// ---------------------------------------------------------------------------

static_assert(std::endian::native == std::endian::little,
              "checkpoint i/o assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'W', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};

inline void save_checkpoint(const std::string& path, const Parameters& p) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    out.write(kCheckpointMagic, 8);
    const std::uint32_t header[6] = {1u,
                                     static_cast<std::uint32_t>(p.config.depth),
                                     static_cast<std::uint32_t>(p.config.base_channels),
                                     static_cast<std::uint32_t>(p.config.height),
                                     static_cast<std::uint32_t>(p.config.width),
                                     static_cast<std::uint32_t>(p.config.classes)};
    out.write(reinterpret_cast<const char*>(header), sizeof(header));
    const std::uint64_t count = p.total_size();
    out.write(reinterpret_cast<const char*>(&count), sizeof(count));
    for (const auto& e : p.entries)
        out.write(reinterpret_cast<const char*>(e.value.data.data()),
                  static_cast<std::streamsize>(e.value.size() * sizeof(double)));
    if (!out) throw std::runtime_error("save_checkpoint: short write to " + path);
}

inline Parameters load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    std::uint32_t header[6];
    in.read(reinterpret_cast<char*>(header), sizeof(header));
    if (!in || header[0] != 1u)
        throw std::runtime_error("load_checkpoint: unsupported version in " + path);
    NetworkConfig cfg;
    cfg.depth = static_cast<int>(header[1]);
    cfg.base_channels = static_cast<int>(header[2]);
    cfg.height = static_cast<int>(header[3]);
    cfg.width = static_cast<int>(header[4]);
    cfg.classes = static_cast<int>(header[5]);
    std::uint64_t count = 0;
    in.read(reinterpret_cast<char*>(&count), sizeof(count));
    Parameters p = init(cfg, 0);
    if (count != p.total_size())
        throw std::runtime_error("load_checkpoint: parameter count mismatch in " + path);
    for (auto& e : p.entries) {
        in.read(reinterpret_cast<char*>(e.value.data.data()),
                static_cast<std::streamsize>(e.value.size() * sizeof(double)));
    }
    if (!in) throw std::runtime_error("load_checkpoint: truncated file " + path);
    return p;
}

}  // namespace segnet
}  // namespace wseg
