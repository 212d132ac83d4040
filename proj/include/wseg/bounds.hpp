#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "wseg/losses.hpp"

// Bound construction for each supervision scheme. Bounds stay real-valued; no
// rounding is applied anywhere (the predicted size is real-valued anyway).

namespace wseg {

enum class BoundKind { Tag, Common, Individual, Volume3d };

inline const char* bound_kind_name(BoundKind k) {
    switch (k) {
        case BoundKind::Tag: return "tag";
        case BoundKind::Common: return "common";
        case BoundKind::Individual: return "individual";
        case BoundKind::Volume3d: return "volume3d";
    }
    return "?";
}

inline BoundKind parse_bound_kind(const std::string& s) {
    if (s == "tag") return BoundKind::Tag;
    if (s == "common") return BoundKind::Common;
    if (s == "individual") return BoundKind::Individual;
    if (s == "volume3d") return BoundKind::Volume3d;
    throw std::invalid_argument("bounds.kind: unknown value '" + s +
                                "' (expected tag|common|individual|volume3d)");
}

struct BoundScheme {
    BoundKind kind = BoundKind::Individual;
    double lower_factor = 0.9;
    double upper_factor = 1.1;
    // Common bounds derive from the slice sizes of one fully annotated
    // subject; defaults to subject 0 of the training split.
    int reference_subject = 0;

    void validate() const {
        if (!(lower_factor > 0.0) || !(lower_factor <= 1.0) || !(upper_factor >= 1.0))
            throw std::invalid_argument(
                "BoundScheme: need 0 < lower_factor <= 1 <= upper_factor, got (" +
                std::to_string(lower_factor) + ", " + std::to_string(upper_factor) + ")");
    }
};

namespace bounds {

// Image-tag constraints: presence needs at least one foreground pixel,
// absence suppresses the region entirely.
inline Bounds tag_bounds(bool present, std::size_t domain_size) {
    if (domain_size == 0) throw std::invalid_argument("tag_bounds: empty domain");
    if (!present) return {0.0, 0.0};
    return {1.0, static_cast<double>(domain_size)};
}

// One (a, b) pair shared by every present image: min/max slice size of a
// single reference subject, widened by the scheme factors.
inline Bounds common_bounds(const std::vector<double>& reference_sizes, bool present,
                            const BoundScheme& scheme = {}) {
    scheme.validate();
    if (reference_sizes.empty())
        throw std::invalid_argument("common_bounds: empty reference size list");
    for (double s : reference_sizes)
        if (!(s > 0.0))
            throw std::invalid_argument("common_bounds: reference sizes must be > 0, got " +
                                        std::to_string(s));
    if (!present) return {0.0, 0.0};
    const double mn = *std::min_element(reference_sizes.begin(), reference_sizes.end());
    const double mx = *std::max_element(reference_sizes.begin(), reference_sizes.end());
    return {scheme.lower_factor * mn, scheme.upper_factor * mx};
}

// Per-image bounds around the true target size.
inline Bounds individual_bounds(double true_size, const BoundScheme& scheme = {}) {
    scheme.validate();
    if (true_size < 0.0)
        throw std::invalid_argument("individual_bounds: negative target size");
    if (true_size == 0.0) return {0.0, 0.0};
    return {scheme.lower_factor * true_size, scheme.upper_factor * true_size};
}

// Bounds on the summed size of one slice group.
inline Bounds volume_bounds(const std::vector<double>& group_true_sizes,
                            const BoundScheme& scheme = {}) {
    if (group_true_sizes.empty())
        throw std::invalid_argument("volume_bounds: empty slice group");
    double total = 0.0;
    for (double s : group_true_sizes) {
        if (s < 0.0) throw std::invalid_argument("volume_bounds: negative slice size");
        total += s;
    }
    return individual_bounds(total, scheme);
}

}  // namespace bounds
}  // namespace wseg
