#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <thread>

#include "oracles.hpp"
#include "wseg/autodiff.hpp"
#include "wseg/rng.hpp"

using namespace wseg;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// Random tensor whose entries are pairwise separated, for kink-sensitive ops
// (relu, max_pool) where a finite-difference probe must not cross a tie.
Tensor random_separated(Shape shape, Rng& rng, double min_gap = 1e-2) {
    for (;;) {
        Tensor t = random_tensor(shape, rng);
        bool ok = true;
        for (std::size_t i = 0; i < t.size() && ok; ++i) {
            if (std::abs(t[i]) < min_gap) ok = false;
            for (std::size_t j = i + 1; j < t.size() && ok; ++j)
                if (std::abs(t[i] - t[j]) < min_gap) ok = false;
        }
        if (ok) return t;
    }
}

}  // namespace

TEST(Autodiff, SoftmaxZeroLogitsIsUniform) {
    Graph g;
    Var x = g.constant(Tensor({2, 1, 1}));
    Var s = g.softmax(x);
    EXPECT_DOUBLE_EQ(g.value(s)[0], 0.5);
    EXPECT_DOUBLE_EQ(g.value(s)[1], 0.5);
}

TEST(Autodiff, SumOfOnes) {
    Graph g;
    Var x = g.constant(Tensor({2, 3}, 1.0));
    EXPECT_DOUBLE_EQ(g.value_scalar(g.sum(x)), 6.0);
}

TEST(Autodiff, ConvAllOnesCenterIsNine) {
    Graph g;
    Var x = g.constant(Tensor({1, 3, 3}, 1.0));
    Var w = g.constant(Tensor({1, 1, 3, 3}, 1.0));
    Var b = g.constant(Tensor({1}));
    Var y = g.conv2d(x, w, b);
    const Tensor& v = g.value(y);
    EXPECT_DOUBLE_EQ(v[4], 9.0);  // center
    EXPECT_DOUBLE_EQ(v[0], 4.0);  // corner
    EXPECT_DOUBLE_EQ(v[1], 6.0);  // edge
}

TEST(Autodiff, ConvMatchesDirectOracle) {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor x = random_tensor({2, 5, 6}, rng);
        Tensor w = random_tensor({3, 2, 3, 3}, rng);
        Tensor b = random_tensor({3}, rng);
        Tensor ref = oracles::direct_conv2d(x, w, b);
        Graph g;
        Var y = g.conv2d(g.constant(x), g.constant(w), g.constant(b));
        const Tensor& got = g.value(y);
        ASSERT_EQ(got.shape, ref.shape);
        for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(got[i], ref[i], 1e-12);
    }
}

TEST(Autodiff, BackwardSumIsOnes) {
    Graph g;
    Var x = g.leaf(Tensor({4}, 3.0), true);
    g.backward(g.sum(x));
    auto gx = g.grad(x);
    for (double v : gx) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(Autodiff, BackwardSumOfSquares) {
    Graph g;
    Var x = g.leaf(Tensor({2}, std::vector<double>{1.0, -2.0}), true);
    g.backward(g.sum(g.square(x)));
    auto gx = g.grad(x);
    EXPECT_DOUBLE_EQ(gx[0], 2.0);
    EXPECT_DOUBLE_EQ(gx[1], -4.0);
}

TEST(Autodiff, GradientAccumulationSumsFanOut) {
    Graph g;
    Var x = g.leaf(Tensor({3}, std::vector<double>{1.0, 2.0, 3.0}), true);
    // x feeds two consumers; the leaf must receive the sum of both paths.
    g.backward(g.sum(g.add(g.square(x), g.square(x))));
    auto gx = g.grad(x);
    EXPECT_DOUBLE_EQ(gx[0], 4.0);
    EXPECT_DOUBLE_EQ(gx[1], 8.0);
    EXPECT_DOUBLE_EQ(gx[2], 12.0);
}

TEST(Autodiff, ReluSubgradientAtZeroIsZero) {
    Graph g;
    Var x = g.leaf(Tensor({3}, std::vector<double>{-1.0, 0.0, 2.0}), true);
    g.backward(g.sum(g.relu(x)));
    auto gx = g.grad(x);
    EXPECT_DOUBLE_EQ(gx[0], 0.0);
    EXPECT_DOUBLE_EQ(gx[1], 0.0);
    EXPECT_DOUBLE_EQ(gx[2], 1.0);
}

TEST(Autodiff, MaxPoolTieTakesFirstRowMajor) {
    Graph g;
    Var x = g.leaf(Tensor({1, 2, 2}, 5.0), true);
    Var y = g.max_pool2(x);
    EXPECT_DOUBLE_EQ(g.value(y)[0], 5.0);
    g.backward(g.sum(y));
    auto gx = g.grad(x);
    EXPECT_DOUBLE_EQ(gx[0], 1.0);
    EXPECT_DOUBLE_EQ(gx[1], 0.0);
    EXPECT_DOUBLE_EQ(gx[2], 0.0);
    EXPECT_DOUBLE_EQ(gx[3], 0.0);
}

// Gradient-check property: every op kind, >= 10 random small instances,
// central differences at h = 1e-4, max relative error < 1e-4.
namespace {

double check_op(const char* which, Rng& rng) {
    const std::string op = which;
    LossBuilder build;
    std::vector<Tensor> leaves;

    auto weighted_sum = [](Graph& g, Var v, const Tensor& w) {
        return g.sum(g.mul(v, g.constant(w)));
    };

    if (op == "add" || op == "sub" || op == "mul" || op == "div") {
        Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
        if (op == "div")
            for (auto& v : b.data) v = (v < 0 ? -1 : 1) * (0.5 + std::abs(v));
        leaves = {a, b};
        Tensor cot = random_tensor({3, 4}, rng);
        build = [op, cot, weighted_sum](Graph& g, const std::vector<Tensor>& vals) {
            Var x = g.leaf(vals[0], true), y = g.leaf(vals[1], true);
            Var r = op == "add"   ? g.add(x, y)
                    : op == "sub" ? g.sub(x, y)
                    : op == "mul" ? g.mul(x, y)
                                  : g.div(x, y);
            return BuiltLoss{weighted_sum(g, r, cot), {x, y}};
        };
    } else if (op == "scalar_mul" || op == "square" || op == "exp" || op == "log" ||
               op == "relu") {
        Tensor a = op == "log"    ? random_tensor({2, 5}, rng, 0.1, 2.0)
                   : op == "relu" ? random_separated({2, 3}, rng)
                                  : random_tensor({2, 5}, rng);
        leaves = {a};
        Tensor cot = random_tensor(a.shape, rng);
        const double c = rng.uniform(-2.0, 2.0);
        build = [op, cot, c, weighted_sum](Graph& g, const std::vector<Tensor>& vals) {
            Var x = g.leaf(vals[0], true);
            Var r = op == "scalar_mul" ? g.scalar_mul(x, c)
                    : op == "square"   ? g.square(x)
                    : op == "exp"      ? g.exp(x)
                    : op == "log"      ? g.log(x)
                                       : g.relu(x);
            return BuiltLoss{weighted_sum(g, r, cot), {x}};
        };
    } else if (op == "conv2d") {
        leaves = {random_tensor({2, 4, 5}, rng), random_tensor({2, 2, 3, 3}, rng),
                  random_tensor({2}, rng)};
        Tensor cot = random_tensor({2, 4, 5}, rng);
        build = [cot, weighted_sum](Graph& g, const std::vector<Tensor>& vals) {
            Var x = g.leaf(vals[0], true), w = g.leaf(vals[1], true), b = g.leaf(vals[2], true);
            return BuiltLoss{weighted_sum(g, g.conv2d(x, w, b), cot), {x, w, b}};
        };
    } else if (op == "affine") {
        leaves = {random_tensor({3, 2, 4}, rng), random_tensor({2, 3}, rng),
                  random_tensor({2}, rng)};
        Tensor cot = random_tensor({2, 2, 4}, rng);
        build = [cot, weighted_sum](Graph& g, const std::vector<Tensor>& vals) {
            Var x = g.leaf(vals[0], true), w = g.leaf(vals[1], true), b = g.leaf(vals[2], true);
            return BuiltLoss{weighted_sum(g, g.affine(x, w, b), cot), {x, w, b}};
        };
    } else if (op == "max_pool2") {
        leaves = {random_separated({1, 4, 4}, rng)};
        Tensor cot = random_tensor({1, 2, 2}, rng);
        build = [cot, weighted_sum](Graph& g, const std::vector<Tensor>& vals) {
            Var x = g.leaf(vals[0], true);
            return BuiltLoss{weighted_sum(g, g.max_pool2(x), cot), {x}};
        };
    } else if (op == "upsample2") {
        leaves = {random_tensor({2, 2, 3}, rng)};
        Tensor cot = random_tensor({2, 4, 6}, rng);
        build = [cot, weighted_sum](Graph& g, const std::vector<Tensor>& vals) {
            Var x = g.leaf(vals[0], true);
            return BuiltLoss{weighted_sum(g, g.upsample2(x), cot), {x}};
        };
    } else if (op == "softmax" || op == "log_softmax") {
        leaves = {random_tensor({3, 2, 2}, rng)};
        Tensor cot = random_tensor({3, 2, 2}, rng);
        build = [op, cot, weighted_sum](Graph& g, const std::vector<Tensor>& vals) {
            Var x = g.leaf(vals[0], true);
            Var r = op == "softmax" ? g.softmax(x) : g.log_softmax(x);
            return BuiltLoss{weighted_sum(g, r, cot), {x}};
        };
    } else if (op == "masked_sum") {
        leaves = {random_tensor({3, 5}, rng)};
        auto mask = std::make_shared<Mask>(3, 5);
        for (auto& m : mask->on) m = rng.below(2) ? 1 : 0;
        build = [mask](Graph& g, const std::vector<Tensor>& vals) {
            Var x = g.leaf(vals[0], true);
            return BuiltLoss{g.masked_sum(x, mask), {x}};
        };
    } else if (op == "sum") {
        leaves = {random_tensor({2, 3, 2}, rng)};
        build = [](Graph& g, const std::vector<Tensor>& vals) {
            Var x = g.leaf(vals[0], true);
            return BuiltLoss{g.sum(x), {x}};
        };
    } else if (op == "channel_slice") {
        leaves = {random_tensor({3, 2, 4}, rng)};
        Tensor cot = random_tensor({2, 4}, rng);
        const int ch = static_cast<int>(rng.below(3));
        build = [cot, ch, weighted_sum](Graph& g, const std::vector<Tensor>& vals) {
            Var x = g.leaf(vals[0], true);
            return BuiltLoss{weighted_sum(g, g.channel_slice(x, ch), cot), {x}};
        };
    } else {
        ADD_FAILURE() << "unknown op " << op;
        return 1.0;
    }
    return finite_difference_check(build, leaves);
}

}  // namespace

TEST(Autodiff, GradientCheckAllOps) {
    const char* ops[] = {"add",       "sub",      "mul",        "div",        "scalar_mul",
                         "square",    "exp",      "log",        "relu",       "conv2d",
                         "max_pool2", "upsample2", "softmax",   "log_softmax", "masked_sum",
                         "sum",       "affine",   "channel_slice"};
    for (const char* op : ops) {
        Rng rng(derive_seed(42, 0x09, std::hash<std::string>{}(op)));
        for (int trial = 0; trial < 10; ++trial) {
            const double err = check_op(op, rng);
            EXPECT_LT(err, 1e-4) << "op " << op << " trial " << trial;
        }
    }
}

TEST(Autodiff, TwoLayerConvNetFiniteDifference) {
    Rng rng(11);
    for (int trial = 0; trial < 3; ++trial) {
        std::vector<Tensor> leaves = {
            random_tensor({1, 6, 6}, rng),         // image
            random_tensor({3, 1, 3, 3}, rng, -0.5, 0.5),  // conv1 w
            random_tensor({3}, rng, -0.1, 0.1),           // conv1 b
            random_tensor({2, 3, 3, 3}, rng, -0.5, 0.5),  // conv2 w
            random_tensor({2}, rng, -0.1, 0.1),           // conv2 b
        };
        auto build = [](Graph& g, const std::vector<Tensor>& v) {
            Var img = g.leaf(v[0], true);
            Var w1 = g.leaf(v[1], true), b1 = g.leaf(v[2], true);
            Var w2 = g.leaf(v[3], true), b2 = g.leaf(v[4], true);
            Var h1 = g.relu(g.conv2d(img, w1, b1));
            Var h2 = g.conv2d(h1, w2, b2);
            Var s = g.softmax(h2);
            return BuiltLoss{g.sum(g.square(s)), {img, w1, b1, w2, b2}};
        };
        EXPECT_LT(finite_difference_check(build, leaves), 1e-4);
    }
}

// backward(f + g) equals backward(f) + backward(g), bit for bit, when each
// leaf coordinate feeds each side through a single path.
TEST(Autodiff, LinearityOfBackward) {
    Rng rng(23);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor xv = random_tensor({4, 3}, rng, 0.2, 1.5);

        Graph gf;
        Var xf = gf.leaf(xv, true);
        gf.backward(gf.sum(gf.square(xf)));
        Graph gg;
        Var xg = gg.leaf(xv, true);
        gg.backward(gg.sum(gg.exp(xg)));
        Graph gc;
        Var xc = gc.leaf(xv, true);
        gc.backward(gc.add(gc.sum(gc.square(xc)), gc.sum(gc.exp(xc))));

        auto f = gf.grad(xf);
        auto g2 = gg.grad(xg);
        auto c = gc.grad(xc);
        for (std::size_t i = 0; i < xv.size(); ++i) EXPECT_EQ(c[i], f[i] + g2[i]);
    }
}

TEST(Autodiff, DeterministicForwardAndBackward) {
    auto run = [](std::vector<double>& vals, std::vector<double>& grads) {
        Rng rng(99);
        Tensor x = random_tensor({2, 4, 4}, rng);
        Tensor w = random_tensor({2, 2, 3, 3}, rng);
        Tensor b = random_tensor({2}, rng);
        Graph g;
        Var xl = g.leaf(x, true);
        Var wl = g.leaf(w, true);
        Var bl = g.leaf(b, true);
        Var y = g.softmax(g.conv2d(g.relu(xl), wl, bl));
        Var loss = g.sum(g.square(y));
        g.backward(loss);
        vals.assign(g.value(y).data.begin(), g.value(y).data.end());
        auto gw = g.grad(wl);
        grads.assign(gw.begin(), gw.end());
    };
    std::vector<double> v1, g1, v2, g2;
    run(v1, g1);
    run(v2, g2);
    ASSERT_EQ(v1.size(), v2.size());
    EXPECT_EQ(0, std::memcmp(v1.data(), v2.data(), v1.size() * sizeof(double)));
    EXPECT_EQ(0, std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)));
}

TEST(Autodiff, ForwardValuesStayFinite) {
    Rng rng(5);
    for (int trial = 0; trial < 5; ++trial) {
        Graph g;
        Var x = g.leaf(random_tensor({2, 8, 8}, rng, -3.0, 3.0), true);
        Var w = g.leaf(random_tensor({4, 2, 3, 3}, rng), true);
        Var b = g.leaf(random_tensor({4}, rng), true);
        Var h = g.max_pool2(g.relu(g.conv2d(x, w, b)));
        Var u = g.upsample2(h);
        Var s = g.softmax(u);
        for (double v : g.value(s).data) ASSERT_TRUE(std::isfinite(v));
        for (double v : g.value(u).data) ASSERT_TRUE(std::isfinite(v));
    }
}

TEST(Autodiff, ErrorsNameOpAndShapes) {
    Graph g;
    Var a = g.constant(Tensor({2, 3}));
    Var b = g.constant(Tensor({3, 2}));
    try {
        g.add(a, b);
        FAIL() << "expected shape mismatch";
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("add"), std::string::npos);
        EXPECT_NE(msg.find("[2,3]"), std::string::npos);
        EXPECT_NE(msg.find("[3,2]"), std::string::npos);
    }
}

TEST(Autodiff, BackwardRejectsNonScalarRoot) {
    Graph g;
    Var x = g.leaf(Tensor({2, 2}, 1.0), true);
    EXPECT_THROW(g.backward(x), std::invalid_argument);
}

TEST(Autodiff, LogRejectsNonPositive) {
    Graph g;
    Var x = g.constant(Tensor({2}, std::vector<double>{1.0, 0.0}));
    EXPECT_THROW(g.log(x), std::domain_error);
}

TEST(Autodiff, StructuredOpPreconditions) {
    Graph g;
    Var x = g.constant(Tensor({1, 3, 3}));
    EXPECT_THROW(g.max_pool2(x), std::invalid_argument);
    EXPECT_THROW(g.channel_slice(x, 1), std::invalid_argument);
    Var w_even = g.constant(Tensor({1, 1, 2, 2}));
    Var b1 = g.constant(Tensor({1}));
    EXPECT_THROW(g.conv2d(x, w_even, b1), std::invalid_argument);
    auto mask = std::make_shared<Mask>(2, 2);
    Var flat = g.constant(Tensor({3, 3}));
    EXPECT_THROW(g.masked_sum(flat, mask), std::invalid_argument);
}

TEST(Autodiff, FdCheckSubsamplingIsDeterministic) {
    Rng rng(3);
    Tensor x = random_tensor({4, 4}, rng);
    auto build = [](Graph& g, const std::vector<Tensor>& v) {
        Var xl = g.leaf(v[0], true);
        return BuiltLoss{g.sum(g.square(xl)), {xl}};
    };
    FdCheckOptions opt;
    opt.max_coords_per_leaf = 5;
    opt.seed = 17;
    const double a = finite_difference_check(build, {x}, opt);
    const double b = finite_difference_check(build, {x}, opt);
    EXPECT_EQ(a, b);
    EXPECT_LT(a, 1e-4);
}

// Distinct graphs are independent; running them on separate threads must give
// the same bits as running them one after the other.
TEST(Autodiff, DistinctGraphsRunConcurrently) {
    auto build_and_grad = [](std::uint64_t seed) {
        Rng rng(seed);
        Tensor x({2, 6, 6});
        for (auto& v : x.data) v = rng.uniform(-1.0, 1.0);
        Tensor w({2, 2, 3, 3});
        for (auto& v : w.data) v = rng.uniform(-1.0, 1.0);
        Graph g;
        Var xl = g.leaf(x, true);
        Var wl = g.leaf(w, true);
        Var loss = g.sum(g.square(g.softmax(g.conv2d(g.relu(xl), wl, g.constant(Tensor({2}))))));
        g.backward(loss);
        auto gw = g.grad(wl);
        return std::vector<double>(gw.begin(), gw.end());
    };
    std::vector<double> seq0 = build_and_grad(100), seq1 = build_and_grad(200);
    std::vector<double> par0, par1;
    std::thread t0([&] { par0 = build_and_grad(100); });
    std::thread t1([&] { par1 = build_and_grad(200); });
    t0.join();
    t1.join();
    EXPECT_EQ(0, std::memcmp(seq0.data(), par0.data(), seq0.size() * sizeof(double)));
    EXPECT_EQ(0, std::memcmp(seq1.data(), par1.data(), seq1.size() * sizeof(double)));
}
