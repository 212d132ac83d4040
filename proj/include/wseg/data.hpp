#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "wseg/rng.hpp"
#include "wseg/weak_labels.hpp"

// Synthetic corpus generation, dataset persistence and evaluation metrics.
//
// On-disk layout under a dataset root:
//   manifest.json            index, generator parameters, normalization stats
//   images/<id>.f64          8-byte magic "WSEGF64\n", u32 LE H, u32 LE W,
//                            then H*W little-endian f64, row-major
//   masks/<id>.pgm           16-bit binary PGM, values 0/1
//   weak/<id>.pgm            16-bit binary PGM, 1 = labeled foreground
//
// PGM sample words are big-endian as the Netpbm format requires (maxval >
// 255); everything in the formats we define ourselves is little-endian.
// Images are stored raw; the per-dataset z-score normalization is applied
// when samples are loaded.

namespace wseg {

enum class Split { Train, Val };

inline const char* split_name(Split s) { return s == Split::Train ? "train" : "val"; }

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    throw std::invalid_argument("split: unknown value '" + s + "' (expected train|val)");
}

struct GeneratorSpec {
    int n_train = 200;
    int n_val = 50;
    int height = 64;
    int width = 64;
    double absent_frac = 0.2;
    int slices_per_volume = 5;
    // ellipse targets; areas are requested values, realized counts vary a bit
    double min_area = 18.0;
    double max_area = 350.0;
    double min_axis_ratio = 1.4;
    double max_axis_ratio = 3.5;
    // intensities; overlapping noise keeps the boundary genuinely ambiguous
    double bg_mean = 0.25;
    double fg_mean = 0.75;
    double noise_sd = 0.22;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_train < 4 || n_val < 1)
            throw std::invalid_argument("GeneratorSpec: need n_train >= 4 and n_val >= 1");
        if (height < 8 || width < 8)
            throw std::invalid_argument("GeneratorSpec: image size too small");
        if (absent_frac < 0.0 || absent_frac > 0.9)
            throw std::invalid_argument("GeneratorSpec: absent_frac out of [0, 0.9]");
        if (slices_per_volume < 1)
            throw std::invalid_argument("GeneratorSpec: slices_per_volume must be >= 1");
        if (!(min_area > 4.0) || !(max_area > min_area))
            throw std::invalid_argument("GeneratorSpec: bad target area range");
    }
};

struct SampleRecord {
    std::string id;
    Split split = Split::Train;
    int group = 0;
    bool present = false;
    long tau = 0;
    std::string image_path;
    std::string mask_path;
    std::optional<std::string> weak_path;
    bool tag_only = false;  // weak generation failed; only the tag is usable
};

struct Manifest {
    int format_version = 1;
    int height = 0, width = 0;
    GeneratorSpec generator;
    double norm_mean = 0.0, norm_std = 1.0;
    std::optional<std::string> weak_strategy;
    std::uint64_t weak_seed = 0;
    std::vector<SampleRecord> samples;
};

struct Sample {
    std::string id;
    Split split = Split::Train;
    int group = 0;
    bool present = false;
    long tau = 0;
    bool tag_only = false;
    Tensor image;  // normalized, [1,H,W]
    FullMask mask;
    std::optional<WeakMask> weak;
};

struct Dataset {
    Manifest manifest;
    std::vector<Sample> samples;
    std::vector<std::size_t> train_indices;
    std::vector<std::size_t> val_indices;

    const std::vector<std::size_t>& indices(Split s) const {
        return s == Split::Train ? train_indices : val_indices;
    }

    // group id -> ordered sample indices, per split
    std::map<int, std::vector<std::size_t>> groups(Split s) const {
        std::map<int, std::vector<std::size_t>> out;
        for (std::size_t i : indices(s)) out[samples[i].group].push_back(i);
        return out;
    }
};

// ---------------------------------------------------------------------------
// Raw file i/o
// ---------------------------------------------------------------------------

namespace io {

inline constexpr char kImageMagic[8] = {'W', 'S', 'E', 'G', 'F', '6', '4', '\n'};

inline void write_f64_image(const std::string& path, const Tensor& image) {
    if (image.shape.size() != 2)
        throw std::invalid_argument("write_f64_image: expected [H,W], got " +
                                    shape_str(image.shape));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_f64_image: cannot open " + path);
    out.write(kImageMagic, 8);
    const std::uint32_t h = static_cast<std::uint32_t>(image.shape[0]);
    const std::uint32_t w = static_cast<std::uint32_t>(image.shape[1]);
    out.write(reinterpret_cast<const char*>(&h), 4);
    out.write(reinterpret_cast<const char*>(&w), 4);
    out.write(reinterpret_cast<const char*>(image.data.data()),
              static_cast<std::streamsize>(image.size() * sizeof(double)));
    if (!out) throw std::runtime_error("write_f64_image: short write to " + path);
}

inline Tensor read_f64_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_f64_image: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kImageMagic, 8) != 0)
        throw std::runtime_error("read_f64_image: bad magic in " + path);
    std::uint32_t h = 0, w = 0;
    in.read(reinterpret_cast<char*>(&h), 4);
    in.read(reinterpret_cast<char*>(&w), 4);
    if (!in || h == 0 || w == 0) throw std::runtime_error("read_f64_image: bad header in " + path);
    Tensor t({static_cast<int>(h), static_cast<int>(w)});
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw std::runtime_error("read_f64_image: truncated file " + path);
    return t;
}

// 16-bit binary PGM. Big-endian sample words per the Netpbm spec.
inline void write_pgm16(const std::string& path, const std::vector<std::uint16_t>& values, int h,
                        int w) {
    if (static_cast<std::size_t>(h) * w != values.size())
        throw std::invalid_argument("write_pgm16: value count does not match dimensions");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_pgm16: cannot open " + path);
    out << "P5\n" << w << " " << h << "\n65535\n";
    std::vector<unsigned char> buf(values.size() * 2);
    for (std::size_t i = 0; i < values.size(); ++i) {
        buf[2 * i] = static_cast<unsigned char>(values[i] >> 8);
        buf[2 * i + 1] = static_cast<unsigned char>(values[i] & 0xff);
    }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("write_pgm16: short write to " + path);
}

inline std::vector<std::uint16_t> read_pgm16(const std::string& path, int& h, int& w) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_pgm16: cannot open " + path);
    std::string tag;
    int maxval = 0;
    in >> tag >> w >> h >> maxval;
    if (!in || tag != "P5" || maxval != 65535 || h <= 0 || w <= 0)
        throw std::runtime_error("read_pgm16: unsupported header in " + path);
    in.get();  // single whitespace after maxval
    std::vector<unsigned char> buf(static_cast<std::size_t>(h) * w * 2);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!in) throw std::runtime_error("read_pgm16: truncated file " + path);
    std::vector<std::uint16_t> values(static_cast<std::size_t>(h) * w);
    for (std::size_t i = 0; i < values.size(); ++i)
        values[i] = static_cast<std::uint16_t>((buf[2 * i] << 8) | buf[2 * i + 1]);
    return values;
}

inline void write_mask(const std::string& path, const FullMask& m) {
    std::vector<std::uint16_t> v(m.y.begin(), m.y.end());
    write_pgm16(path, v, m.h, m.w);
}

inline FullMask read_mask(const std::string& path) {
    int h = 0, w = 0;
    auto v = read_pgm16(path, h, w);
    FullMask m(h, w);
    for (std::size_t i = 0; i < v.size(); ++i) m.y[i] = v[i] ? 1 : 0;
    return m;
}

inline void write_weak(const std::string& path, const WeakMask& wm) {
    std::vector<std::uint16_t> v(wm.labels.size());
    for (std::size_t i = 0; i < v.size(); ++i)
        v[i] = wm.labels[i] == PixelLabel::Foreground ? 1 : 0;
    write_pgm16(path, v, wm.h, wm.w);
}

inline WeakMask read_weak(const std::string& path) {
    int h = 0, w = 0;
    auto v = read_pgm16(path, h, w);
    WeakMask wm(h, w);
    for (std::size_t i = 0; i < v.size(); ++i)
        if (v[i]) wm.labels[i] = PixelLabel::Foreground;
    return wm;
}

}  // namespace io

// ---------------------------------------------------------------------------
// Manifest (de)serialization
// ---------------------------------------------------------------------------

namespace data {

inline nlohmann::json generator_to_json(const GeneratorSpec& g) {
    return {{"n_train", g.n_train},
            {"n_val", g.n_val},
            {"height", g.height},
            {"width", g.width},
            {"absent_frac", g.absent_frac},
            {"slices_per_volume", g.slices_per_volume},
            {"min_area", g.min_area},
            {"max_area", g.max_area},
            {"min_axis_ratio", g.min_axis_ratio},
            {"max_axis_ratio", g.max_axis_ratio},
            {"bg_mean", g.bg_mean},
            {"fg_mean", g.fg_mean},
            {"noise_sd", g.noise_sd},
            {"seed", g.seed}};
}

inline GeneratorSpec generator_from_json(const nlohmann::json& j) {
    GeneratorSpec g;
    g.n_train = j.at("n_train").get<int>();
    g.n_val = j.at("n_val").get<int>();
    g.height = j.at("height").get<int>();
    g.width = j.at("width").get<int>();
    g.absent_frac = j.at("absent_frac").get<double>();
    g.slices_per_volume = j.at("slices_per_volume").get<int>();
    g.min_area = j.at("min_area").get<double>();
    g.max_area = j.at("max_area").get<double>();
    g.min_axis_ratio = j.at("min_axis_ratio").get<double>();
    g.max_axis_ratio = j.at("max_axis_ratio").get<double>();
    g.bg_mean = j.at("bg_mean").get<double>();
    g.fg_mean = j.at("fg_mean").get<double>();
    g.noise_sd = j.at("noise_sd").get<double>();
    g.seed = j.at("seed").get<std::uint64_t>();
    return g;
}

inline void save_manifest(const std::string& root, const Manifest& m) {
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& r : m.samples) {
        nlohmann::json s = {{"id", r.id},        {"split", split_name(r.split)},
                            {"group", r.group},  {"present", r.present},
                            {"tau", r.tau},      {"image", r.image_path},
                            {"mask", r.mask_path}, {"tag_only", r.tag_only}};
        if (r.weak_path) s["weak"] = *r.weak_path;
        samples.push_back(std::move(s));
    }
    nlohmann::json j = {{"format_version", m.format_version},
                        {"height", m.height},
                        {"width", m.width},
                        {"generator", generator_to_json(m.generator)},
                        {"normalization", {{"mean", m.norm_mean}, {"std", m.norm_std}}},
                        {"samples", std::move(samples)}};
    if (m.weak_strategy) {
        j["weak"] = {{"strategy", *m.weak_strategy}, {"seed", m.weak_seed}};
    }
    std::ofstream out(std::filesystem::path(root) / "manifest.json");
    if (!out) throw std::runtime_error("save_manifest: cannot open manifest in " + root);
    out << j.dump(2) << "\n";
}

inline Manifest load_manifest(const std::string& root) {
    const auto path = std::filesystem::path(root) / "manifest.json";
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_manifest: cannot open " + path.string());
    nlohmann::json j;
    in >> j;
    Manifest m;
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != 1)
        throw std::runtime_error("load_manifest: unsupported format_version");
    m.height = j.at("height").get<int>();
    m.width = j.at("width").get<int>();
    m.generator = generator_from_json(j.at("generator"));
    m.norm_mean = j.at("normalization").at("mean").get<double>();
    m.norm_std = j.at("normalization").at("std").get<double>();
    if (j.contains("weak")) {
        m.weak_strategy = j.at("weak").at("strategy").get<std::string>();
        m.weak_seed = j.at("weak").at("seed").get<std::uint64_t>();
    }
    for (const auto& s : j.at("samples")) {
        SampleRecord r;
        r.id = s.at("id").get<std::string>();
        r.split = parse_split(s.at("split").get<std::string>());
        r.group = s.at("group").get<int>();
        r.present = s.at("present").get<bool>();
        r.tau = s.at("tau").get<long>();
        r.image_path = s.at("image").get<std::string>();
        r.mask_path = s.at("mask").get<std::string>();
        r.tag_only = s.value("tag_only", false);
        if (s.contains("weak")) r.weak_path = s.at("weak").get<std::string>();
        m.samples.push_back(std::move(r));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Corpus generation
// ---------------------------------------------------------------------------

namespace detail {

struct Ellipse {
    double cy, cx, sa, sb, theta;
};

inline FullMask rasterize(const Ellipse& e, int h, int w) {
    FullMask m(h, w);
    const double c = std::cos(e.theta), s = std::sin(e.theta);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double dy = y - e.cy, dx = x - e.cx;
            const double u = (dx * c + dy * s) / e.sa;
            const double v = (-dx * s + dy * c) / e.sb;
            if (u * u + v * v <= 1.0) m.y[static_cast<std::size_t>(y) * w + x] = 1;
        }
    return m;
}

// Draw an ellipse of roughly the requested area that fits the canvas and
// rasterizes to a nonempty mask.
inline FullMask draw_target(const GeneratorSpec& spec, double area, Rng& rng) {
    for (int attempt = 0; attempt < 64; ++attempt) {
        const double ratio = rng.uniform(spec.min_axis_ratio, spec.max_axis_ratio);
        double sa = std::sqrt(area * ratio / 3.14159265358979323846);
        double sb = std::sqrt(area / (ratio * 3.14159265358979323846));
        sa = std::min(sa, (spec.width - 4) / 2.0);
        sb = std::max(sb, 1.0);
        const double theta = rng.uniform(0.0, 3.14159265358979323846);
        const double ext = std::max(sa, sb) + 1.0;
        const double cy = rng.uniform(ext, spec.height - 1 - ext);
        const double cx = rng.uniform(ext, spec.width - 1 - ext);
        FullMask m = rasterize({cy, cx, sa, sb, theta}, spec.height, spec.width);
        if (m.tau() >= 4) return m;
    }
    throw std::runtime_error("draw_target: could not place a target, area " +
                             std::to_string(area));
}

}  // namespace detail

// Deterministic synthetic corpus written to `root`. Overwrites nothing: the
// caller is responsible for providing an empty or fresh directory.
inline Manifest generate_dataset(const GeneratorSpec& spec, const std::string& root) {
    spec.validate();
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(root) / "images");
    fs::create_directories(fs::path(root) / "masks");

    Manifest m;
    m.height = spec.height;
    m.width = spec.width;
    m.generator = spec;

    double pixel_sum = 0.0, pixel_sq_sum = 0.0;
    std::size_t train_pixels = 0;

    for (Split split : {Split::Train, Split::Val}) {
        const int n = split == Split::Train ? spec.n_train : spec.n_val;
        const int n_absent = static_cast<int>(std::llround(spec.absent_frac * n));
        if (n_absent > n - 2)
            throw std::invalid_argument("generate_dataset: absent_frac leaves too few present");

        // Absent slots via a seeded shuffle. Indices 0 and 1 stay present so
        // the default reference subject (group 0) always has usable slices.
        std::vector<int> order;
        for (int i = 2; i < n; ++i) order.push_back(i);
        Rng shuffle_rng(derive_seed(spec.seed, 0xab5e47, split == Split::Train ? 0 : 1));
        shuffle_rng.shuffle(order);
        std::vector<bool> absent(static_cast<std::size_t>(n), false);
        for (int k = 0; k < n_absent; ++k) absent[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = true;

        const int n_groups = (n + spec.slices_per_volume - 1) / spec.slices_per_volume;
        std::vector<double> group_scale(static_cast<std::size_t>(n_groups));
        Rng scale_rng(derive_seed(spec.seed, 0x5ca1e, split == Split::Train ? 0 : 1));
        for (auto& s : group_scale) s = scale_rng.log_uniform(spec.min_area, spec.max_area);

        for (int i = 0; i < n; ++i) {
            SampleRecord r;
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%s_%04d", split_name(split), i);
            r.id = buf;
            r.split = split;
            r.group = i / spec.slices_per_volume;
            r.present = !absent[static_cast<std::size_t>(i)];
            r.image_path = "images/" + r.id + ".f64";
            r.mask_path = "masks/" + r.id + ".pgm";

            Rng rng(derive_seed(spec.seed, split == Split::Train ? 0x7ea1 : 0x7ea2,
                                static_cast<std::uint64_t>(i)));
            FullMask mask(spec.height, spec.width);
            if (r.present) {
                // slice size varies around the volume scale
                const double area =
                    std::clamp(group_scale[static_cast<std::size_t>(r.group)] *
                                   rng.uniform(0.65, 1.35),
                               spec.min_area, spec.max_area * 1.35);
                mask = detail::draw_target(spec, area, rng);
            }
            r.tau = static_cast<long>(mask.tau());

            Tensor img({spec.height, spec.width});
            for (std::size_t p = 0; p < img.size(); ++p) {
                const double base = mask.y[p] ? spec.fg_mean : spec.bg_mean;
                img[p] = base + rng.normal(0.0, spec.noise_sd);
            }
            if (split == Split::Train) {
                for (double v : img.data) {
                    pixel_sum += v;
                    pixel_sq_sum += v * v;
                }
                train_pixels += img.size();
            }

            io::write_f64_image((fs::path(root) / r.image_path).string(), img);
            io::write_mask((fs::path(root) / r.mask_path).string(), mask);
            m.samples.push_back(std::move(r));
        }
    }

    const double mean = pixel_sum / static_cast<double>(train_pixels);
    const double var = pixel_sq_sum / static_cast<double>(train_pixels) - mean * mean;
    m.norm_mean = mean;
    m.norm_std = std::sqrt(std::max(var, 1e-12));
    save_manifest(root, m);
    return m;
}

// ---------------------------------------------------------------------------
// Weak-label application
// ---------------------------------------------------------------------------

struct WeakenStats {
    std::size_t labeled_pixels = 0;
    std::size_t total_pixels = 0;
    int tag_only_samples = 0;
    double fraction() const {
        return total_pixels ? static_cast<double>(labeled_pixels) / total_pixels : 0.0;
    }
};

// Generates weak masks for every sample with the given strategy and updates
// the manifest in place on disk. Erosion failures demote a sample to
// tag-only supervision (empty weak mask).
inline WeakenStats apply_weak_labels(const std::string& root, const std::string& strategy,
                                     std::uint64_t seed, std::FILE* log = nullptr,
                                     const std::vector<int>& erosion_schedule =
                                         weak_labels::default_erosion_schedule()) {
    if (strategy != "erosion" && strategy != "point")
        throw std::invalid_argument("apply_weak_labels: unknown strategy '" + strategy +
                                    "' (expected erosion|point)");
    namespace fs = std::filesystem;
    Manifest m = load_manifest(root);
    fs::create_directories(fs::path(root) / "weak");

    WeakenStats stats;
    for (auto& r : m.samples) {
        FullMask mask = io::read_mask((fs::path(root) / r.mask_path).string());
        WeakMask wm(m.height, m.width);
        r.tag_only = false;
        if (mask.tau() > 0) {
            if (strategy == "erosion") {
                try {
                    wm = weak_labels::erode_label(mask, erosion_schedule);
                } catch (const std::runtime_error&) {
                    r.tag_only = true;
                    if (log)
                        std::fprintf(log,
                                     "warning: %s: mask too small for the erosion schedule; "
                                     "keeping tag-only supervision\n",
                                     r.id.c_str());
                }
            } else {
                wm = weak_labels::random_point_label(
                    mask, derive_seed(seed, 0x9057, std::hash<std::string>{}(r.id)));
            }
        }
        r.weak_path = "weak/" + r.id + ".pgm";
        io::write_weak((fs::path(root) / *r.weak_path).string(), wm);
        stats.labeled_pixels += wm.count(PixelLabel::Foreground);
        stats.total_pixels += wm.labels.size();
        stats.tag_only_samples += r.tag_only ? 1 : 0;
    }
    m.weak_strategy = strategy;
    m.weak_seed = seed;
    save_manifest(root, m);
    return stats;
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

// Loads the corpus, applies z-score normalization, and validates the manifest
// invariants (files exist, recounted tau matches, weak labels within truth).
inline Dataset load_dataset(const std::string& root) {
    namespace fs = std::filesystem;
    Dataset ds;
    ds.manifest = load_manifest(root);
    const double mean = ds.manifest.norm_mean;
    const double sd = ds.manifest.norm_std > 0 ? ds.manifest.norm_std : 1.0;

    for (const auto& r : ds.manifest.samples) {
        Sample s;
        s.id = r.id;
        s.split = r.split;
        s.group = r.group;
        s.present = r.present;
        s.tau = r.tau;
        s.tag_only = r.tag_only;

        Tensor raw = io::read_f64_image((fs::path(root) / r.image_path).string());
        if (raw.shape != Shape{ds.manifest.height, ds.manifest.width})
            throw std::runtime_error("load_dataset: image shape mismatch for " + r.id);
        s.image = Tensor({1, ds.manifest.height, ds.manifest.width});
        for (std::size_t i = 0; i < raw.size(); ++i) s.image[i] = (raw[i] - mean) / sd;

        s.mask = io::read_mask((fs::path(root) / r.mask_path).string());
        if (static_cast<long>(s.mask.tau()) != r.tau)
            throw std::runtime_error("load_dataset: manifest tau " + std::to_string(r.tau) +
                                     " does not match mask recount " +
                                     std::to_string(s.mask.tau()) + " for " + r.id);
        if (s.present != (r.tau > 0))
            throw std::runtime_error("load_dataset: presence flag inconsistent for " + r.id);

        if (r.weak_path) {
            WeakMask wm = io::read_weak((fs::path(root) / *r.weak_path).string());
            for (std::size_t i = 0; i < wm.labels.size(); ++i)
                if (wm.labels[i] == PixelLabel::Foreground && !s.mask.y[i])
                    throw std::runtime_error("load_dataset: weak label outside truth for " +
                                             r.id);
            s.weak = std::move(wm);
        }

        const std::size_t idx = ds.samples.size();
        (s.split == Split::Train ? ds.train_indices : ds.val_indices).push_back(idx);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

// Dice similarity 2|A n B| / (|A| + |B|); two empty masks count as a perfect
// match (1.0) — absent-target slices are scored as correct suppression.
inline double dice(const FullMask& pred, const FullMask& truth) {
    if (pred.h != truth.h || pred.w != truth.w)
        throw std::invalid_argument("dice: mask shapes differ");
    std::size_t inter = 0, a = 0, b = 0;
    for (std::size_t i = 0; i < pred.y.size(); ++i) {
        inter += (pred.y[i] && truth.y[i]);
        a += (pred.y[i] != 0);
        b += (truth.y[i] != 0);
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

// Foreground where S_p > 0.5, strictly; ties go to background.
inline FullMask binarize(const Tensor& probs, double threshold = 0.5) {
    if (probs.shape.size() != 3 || probs.shape[0] != 2)
        throw std::invalid_argument("binarize: expected probabilities of shape [2,H,W], got " +
                                    shape_str(probs.shape));
    const int h = probs.shape[1], w = probs.shape[2];
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    FullMask m(h, w);
    for (std::size_t i = 0; i < hw; ++i) m.y[i] = probs[hw + i] > threshold ? 1 : 0;
    return m;
}

// Optional horizontal flip augmentation helpers.
inline Tensor flip_horizontal(const Tensor& image) {
    if (image.shape.size() != 3)
        throw std::invalid_argument("flip_horizontal: expected [C,H,W]");
    Tensor out(image.shape);
    const int c = image.shape[0], h = image.shape[1], w = image.shape[2];
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                out[(static_cast<std::size_t>(ci) * h + y) * w + x] =
                    image[(static_cast<std::size_t>(ci) * h + y) * w + (w - 1 - x)];
    return out;
}

inline WeakMask flip_horizontal(const WeakMask& wm) {
    WeakMask out(wm.h, wm.w);
    for (int y = 0; y < wm.h; ++y)
        for (int x = 0; x < wm.w; ++x)
            out.labels[static_cast<std::size_t>(y) * wm.w + x] =
                wm.labels[static_cast<std::size_t>(y) * wm.w + (wm.w - 1 - x)];
    return out;
}

inline FullMask flip_horizontal(const FullMask& m) {
    FullMask out(m.h, m.w);
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x)
            out.y[static_cast<std::size_t>(y) * m.w + x] =
                m.y[static_cast<std::size_t>(y) * m.w + (m.w - 1 - x)];
    return out;
}

}  // namespace data
}  // namespace wseg
