#include <gtest/gtest.h>

#include "oracles.hpp"
#include "wseg/rng.hpp"
#include "wseg/weak_labels.hpp"

using namespace wseg;
using namespace wseg::weak_labels;

namespace {

FullMask solid_square(int canvas, int side, int top, int left) {
    FullMask m(canvas, canvas);
    for (int y = top; y < top + side; ++y)
        for (int x = left; x < left + side; ++x)
            m.y[static_cast<std::size_t>(y) * canvas + x] = 1;
    return m;
}

FullMask disc(int canvas, int cy, int cx, int r) {
    FullMask m(canvas, canvas);
    for (int y = 0; y < canvas; ++y)
        for (int x = 0; x < canvas; ++x)
            if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r)
                m.y[static_cast<std::size_t>(y) * canvas + x] = 1;
    return m;
}

FullMask random_blob(int canvas, Rng& rng) {
    // union of a few random rectangles; sometimes empty regions at the border
    FullMask m(canvas, canvas);
    const int n = 1 + static_cast<int>(rng.below(3));
    for (int k = 0; k < n; ++k) {
        const int h = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(canvas / 2)));
        const int w = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(canvas / 2)));
        const int top = static_cast<int>(rng.below(static_cast<std::uint64_t>(canvas - h)));
        const int left = static_cast<int>(rng.below(static_cast<std::uint64_t>(canvas - w)));
        for (int y = top; y < top + h; ++y)
            for (int x = left; x < left + w; ++x)
                m.y[static_cast<std::size_t>(y) * canvas + x] = 1;
    }
    return m;
}

std::vector<std::uint8_t> oracle_erode_by_k(const FullMask& m, int k) {
    // anchor for even k: top-left pixel of the central 2x2 block
    const int hi = k / 2;
    const int lo = hi - k + 1;
    return oracles::direct_erode(m.y, m.h, m.w, lo, hi, lo, hi);
}

}  // namespace

TEST(WeakLabels, ErosionOfSolidSquareMatchesOracle) {
    FullMask m = solid_square(32, 21, 5, 6);
    WeakMask wm = erode_label(m, {10});
    auto expect = oracle_erode_by_k(m, 10);
    std::size_t labeled = 0;
    for (std::size_t i = 0; i < expect.size(); ++i) {
        EXPECT_EQ(wm.labels[i] == PixelLabel::Foreground, expect[i] != 0);
        labeled += (wm.labels[i] == PixelLabel::Foreground);
    }
    EXPECT_GT(labeled, 0u);
    EXPECT_LT(labeled, m.tau());  // strict subset
}

TEST(WeakLabels, ErosionFallsBackThroughSchedule) {
    {
        // an 8x8 square dies under 10x10 but keeps a 2x2 core under 7x7
        FullMask m = solid_square(24, 8, 8, 8);
        EXPECT_EQ(erode(m, 10).tau(), 0u);
        EXPECT_EQ(erode(m, 7).tau(), 4u);
        WeakMask wm = erode_label(m, {10, 7, 5, 3});
        auto expect = oracle_erode_by_k(m, 7);
        for (std::size_t i = 0; i < expect.size(); ++i)
            EXPECT_EQ(wm.labels[i] == PixelLabel::Foreground, expect[i] != 0);
    }
    {
        // a 6x6 square dies under 10 and 7; 5 is the first survivor
        FullMask m = solid_square(24, 6, 9, 9);
        EXPECT_EQ(erode(m, 10).tau(), 0u);
        EXPECT_EQ(erode(m, 7).tau(), 0u);
        ASSERT_GT(erode(m, 5).tau(), 0u);
        WeakMask wm = erode_label(m, {10, 7, 5, 3});
        auto expect = oracle_erode_by_k(m, 5);
        for (std::size_t i = 0; i < expect.size(); ++i)
            EXPECT_EQ(wm.labels[i] == PixelLabel::Foreground, expect[i] != 0);
    }
}

TEST(WeakLabels, ErosionErrors) {
    FullMask empty(16, 16);
    EXPECT_THROW(erode_label(empty), std::invalid_argument);
    FullMask tiny = solid_square(16, 2, 4, 4);
    EXPECT_THROW(erode_label(tiny, {10, 7}), std::runtime_error);
}

TEST(WeakLabels, ErosionMatchesOracleOnRandomMasks) {
    Rng rng(50);
    for (int trial = 0; trial < 25; ++trial) {
        FullMask m = random_blob(40, rng);
        if (m.tau() == 0) continue;
        for (int k : {10, 7, 5, 3, 2}) {
            FullMask got = erode(m, k);
            auto expect = oracle_erode_by_k(m, k);
            for (std::size_t i = 0; i < expect.size(); ++i)
                ASSERT_EQ(got.y[i], expect[i]) << "k=" << k << " trial=" << trial;
        }
    }
}

TEST(WeakLabels, ErosionResultIsSubset) {
    Rng rng(51);
    for (int trial = 0; trial < 20; ++trial) {
        FullMask m = random_blob(32, rng);
        if (m.tau() == 0) continue;
        WeakMask wm;
        try {
            wm = erode_label(m);
        } catch (const std::runtime_error&) {
            continue;
        }
        for (std::size_t i = 0; i < m.y.size(); ++i) {
            if (wm.labels[i] == PixelLabel::Foreground) EXPECT_TRUE(m.y[i]);
            EXPECT_NE(wm.labels[i], PixelLabel::Background);
        }
    }
}

TEST(WeakLabels, RandomPointWithinDisc) {
    FullMask m = disc(32, 16, 16, 10);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        WeakMask wm = random_point_label(m, seed);
        std::size_t labeled = 0;
        for (std::size_t i = 0; i < m.y.size(); ++i) {
            if (wm.labels[i] == PixelLabel::Foreground) {
                EXPECT_TRUE(m.y[i]);  // containment
                ++labeled;
            }
            EXPECT_NE(wm.labels[i], PixelLabel::Background);
        }
        EXPECT_GE(labeled, 1u);
        EXPECT_LE(labeled, 49u);  // disc of radius 4
    }
}

TEST(WeakLabels, RandomPointSinglePixelMask) {
    FullMask m(8, 8);
    m.y[3 * 8 + 5] = 1;
    WeakMask wm = random_point_label(m, 9);
    EXPECT_EQ(wm.count(PixelLabel::Foreground), 1u);
    EXPECT_EQ(wm.labels[3 * 8 + 5], PixelLabel::Foreground);
}

TEST(WeakLabels, RandomPointDeterministicInSeed) {
    Rng rng(52);
    FullMask m = random_blob(24, rng);
    ASSERT_GT(m.tau(), 0u);
    WeakMask a = random_point_label(m, 1234);
    WeakMask b = random_point_label(m, 1234);
    EXPECT_EQ(a.labels, b.labels);
    WeakMask c = random_point_label(m, 1235);
    ASSERT_GT(c.count(PixelLabel::Foreground), 0u);
}

TEST(WeakLabels, RandomPointEmptyMaskGivesAbsentLabel) {
    FullMask empty(12, 12);
    WeakMask wm = random_point_label(empty, 0);
    EXPECT_EQ(wm.labeled_count(), 0u);
}

TEST(WeakLabels, PresenceTag) {
    FullMask empty(4, 4);
    EXPECT_FALSE(presence_tag(empty));
    FullMask one(4, 4);
    one.y[7] = 1;
    EXPECT_TRUE(presence_tag(one));
    FullMask full(4, 4);
    for (auto& v : full.y) v = 1;
    EXPECT_TRUE(presence_tag(full));
}

TEST(WeakLabels, FullSupervisionLabelsEveryPixel) {
    FullMask m = solid_square(8, 3, 2, 2);
    WeakMask wm = full_supervision(m);
    EXPECT_EQ(wm.labeled_count(), 64u);
    EXPECT_EQ(wm.count(PixelLabel::Foreground), m.tau());
}
