#include <doctest.h>

#include <numeric>

#include "objmask/conv.hpp"
#include "objmask/errors.hpp"
#include "objmask/layers.hpp"
#include "objmask/reference.hpp"
#include "gradient_suite.hpp"
#include "support.hpp"

using namespace objmask;
using namespace testing;

TEST_CASE("tensor construction and indexing") {
    Tensor t({2, 3, 4, 5}, 1.5f);
    CHECK(t.size() == 120);
    CHECK(t.shape().numel() == 120);
    t.at(1, 2, 3, 4) = 7.0f;
    CHECK(t[t.size() - 1] == 7.0f);
    CHECK(t.item(1).at(0, 2, 3, 4) == 7.0f);
    CHECK_THROWS_AS(Tensor({1, 1, 2, 2}, std::vector<float>(3)), ConfigError);
    CHECK(t.all_finite());
    t[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_FALSE(t.all_finite());
}

TEST_CASE("conv2d_forward examples") {
    SUBCASE("1x1 scalar multiply") {
        Tensor x({1, 1, 1, 1}, 2.0f);
        ConvWeights w = ConvWeights::dense(1, 1, 1, 1, 0);
        w.kernel[0] = 3.0f;
        CHECK(conv2d_forward(x, w)[0] == 6.0f);
    }
    SUBCASE("zero input gives per-channel bias") {
        Rng rng(3);
        ConvWeights w = random_conv(2, 4, 3, 1, 1, rng);
        Tensor y = conv2d_forward(Tensor({1, 2, 5, 5}), w);
        for (int c = 0; c < 4; ++c)
            for (int i = 0; i < 25; ++i) CHECK(y.plane(0, c)[i] == w.bias[static_cast<std::size_t>(c)]);
    }
    SUBCASE("ramp 0..15 with all-ones 3x3") {
        std::vector<float> v(16);
        std::iota(v.begin(), v.end(), 0.0f);
        Tensor x({1, 1, 4, 4}, v);
        ConvWeights w = ConvWeights::dense(1, 1, 3, 1, 0);
        w.kernel.fill(1.0f);
        // Oracle: brute-force window sums.
        std::vector<float> expect;
        for (int oy = 0; oy < 2; ++oy)
            for (int ox = 0; ox < 2; ++ox) {
                float s = 0;
                for (int dy = 0; dy < 3; ++dy)
                    for (int dx = 0; dx < 3; ++dx) s += v[static_cast<std::size_t>((oy + dy) * 4 + ox + dx)];
                expect.push_back(s);
            }
        CHECK(expect == std::vector<float>{45, 54, 81, 90});
        CHECK(conv2d_forward(x, w).vec() == expect);
    }
    SUBCASE("shape mismatch names both shapes") {
        ConvWeights w = ConvWeights::dense(3, 2, 3, 1, 1);
        try {
            conv2d_forward(Tensor({1, 2, 4, 4}), w);
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("(1,2,4,4)") != std::string::npos);
            CHECK(msg.find("(2,3,3,3)") != std::string::npos);
        }
    }
    SUBCASE("window larger than padded input") {
        CHECK_THROWS_AS(conv2d_forward(Tensor({1, 1, 2, 2}), ConvWeights::dense(1, 1, 5, 1, 0)), ConfigError);
    }
}

TEST_CASE("conv2d_forward equals the naive reference bit-for-bit") {
    Rng rng(11);
    for (int trial = 0; trial < 60; ++trial) {
        const int n = rng.uniform_int(1, 2), ci = rng.uniform_int(1, 3), co = rng.uniform_int(1, 5);
        const int h = rng.uniform_int(3, 8), w = rng.uniform_int(3, 8);
        const int k = 2 * rng.uniform_int(0, 1) + 1;
        const int s = rng.uniform_int(1, 2), p = rng.uniform_int(0, k / 2 + 1);
        const bool dw = trial % 5 == 4;
        ConvWeights cw = random_conv(ci, dw ? ci : co, k, s, p, rng, dw);
        Tensor x = random_tensor({n, ci, h, w}, rng);
        // Sprinkle exact zeros, as masking produces.
        for (auto& v : x.vec())
            if (rng.bernoulli(0.3)) v = 0.0f;
        CHECK(conv2d_forward(x, cw) == reference::conv2d_forward(x, cw));
    }
}

TEST_CASE("conv2d_backward matches the reference and finite differences") {
    Rng rng(5);
    SUBCASE("zero grad_out gives zero gradients") {
        ConvWeights w = random_conv(2, 3, 3, 1, 1, rng);
        Tensor x = random_tensor({1, 2, 5, 5}, rng);
        ConvGrads g = conv2d_backward(Tensor({1, 3, 5, 5}), x, w);
        CHECK(g.grad_in.count_zeros() == g.grad_in.size());
        CHECK(g.grad_kernel.count_zeros() == g.grad_kernel.size());
        CHECK(std::all_of(g.grad_bias.begin(), g.grad_bias.end(), [](float v) { return v == 0.0f; }));
    }
    SUBCASE("1x1 conv, loss = output: grad_in = w") {
        ConvWeights w = ConvWeights::dense(1, 1, 1, 1, 0);
        w.kernel[0] = 0.75f;
        Tensor x = random_tensor({1, 1, 3, 3}, rng);
        ConvGrads g = conv2d_backward(Tensor({1, 1, 3, 3}, 1.0f), x, w);
        for (float v : g.grad_in.data()) CHECK(v == 0.75f);
    }
    SUBCASE("parallel backward agrees with the serial reference") {
        for (int trial = 0; trial < 20; ++trial) {
            const int k = trial % 2 ? 3 : 1, s = 1 + trial % 2;
            const bool dw = trial % 7 == 3;
            const int ci = rng.uniform_int(1, 4);
            ConvWeights w = random_conv(ci, dw ? ci : 3, k, s, k / 2, rng, dw);
            Tensor x = random_tensor({2, ci, 6, 7}, rng);
            Tensor go = random_tensor(conv_out_shape(x.shape(), w), rng);
            ConvGrads a = conv2d_backward(go, x, w);
            ConvGrads b = reference::conv2d_backward(go, x, w);
            for (std::size_t i = 0; i < a.grad_in.size(); ++i) CHECK(rel_err(a.grad_in[i], b.grad_in[i]) < 1e-4);
            for (std::size_t i = 0; i < a.grad_kernel.size(); ++i)
                CHECK(rel_err(a.grad_kernel[i], b.grad_kernel[i]) < 1e-4);
            for (std::size_t i = 0; i < a.grad_bias.size(); ++i) CHECK(rel_err(a.grad_bias[i], b.grad_bias[i]) < 1e-4);
        }
    }
    SUBCASE("random 1x2x5x5 case vs central differences") {
        for (const bool dw : {false, true}) {
            ConvWeights w = random_conv(2, dw ? 2 : 3, 3, 1, 1, rng, dw);
            Tensor x = random_tensor({1, 2, 5, 5}, rng);
            const Shape os = conv_out_shape(x.shape(), w);
            Tensor r = random_tensor(os, rng);
            ConvGrads g = conv2d_backward(r, x, w);

            std::vector<double> xd = to_double(x.data()), kd = to_double(w.kernel.data()), bd = to_double(w.bias);
            const auto loss = [&](const std::vector<double>& xv, const std::vector<double>& kv, const std::vector<double>& bv) {
                Shape s;
                auto y = oracle::conv(xv, x.shape(), kv, bv, os.c, 3, 1, 1, dw, s);
                double l = 0;
                for (std::size_t i = 0; i < y.size(); ++i) l += y[i] * r[i];
                return l;
            };
            // The oracle forward agrees with the library forward.
            Shape s;
            auto yd = oracle::conv(xd, x.shape(), kd, bd, os.c, 3, 1, 1, dw, s);
            Tensor y = conv2d_forward(x, w);
            for (std::size_t i = 0; i < y.size(); ++i) CHECK(std::abs(yd[i] - y[i]) < 1e-5);

            for (std::size_t i = 0; i < xd.size(); ++i) {
                const double fd = central_diff(xd, i, 1e-3, [&](const std::vector<double>& v) { return loss(v, kd, bd); });
                CHECK(rel_err(g.grad_in[i], fd) < 1e-3);
            }
            for (std::size_t i = 0; i < kd.size(); ++i) {
                const double fd = central_diff(kd, i, 1e-3, [&](const std::vector<double>& v) { return loss(xd, v, bd); });
                CHECK(rel_err(g.grad_kernel[i], fd) < 1e-3);
            }
            for (std::size_t i = 0; i < bd.size(); ++i) {
                const double fd = central_diff(bd, i, 1e-3, [&](const std::vector<double>& v) { return loss(xd, kd, v); });
                CHECK(rel_err(g.grad_bias[i], fd) < 1e-3);
            }
        }
    }
}

TEST_CASE("relu, maxpool2, bilinear, mul") {
    SUBCASE("relu definition") {
        Tensor x({1, 1, 1, 3}, std::vector<float>{-1, 0, 2});
        CHECK(relu(x).vec() == std::vector<float>{0, 0, 2});
    }
    SUBCASE("maxpool2 picks the window max and the first max on ties") {
        Tensor x({1, 1, 2, 4}, std::vector<float>{1, 5, 3, 3, 2, 0, 3, 3});
        PoolResult p = maxpool2(x);
        CHECK(p.out.vec() == std::vector<float>{5, 3});
        CHECK(p.argmax == std::vector<std::uint32_t>{1, 2});
        CHECK_THROWS_AS(maxpool2(Tensor({1, 1, 3, 4})), ConfigError);
    }
    SUBCASE("bilinear of a constant is constant") {
        Tensor x({1, 2, 3, 5}, 0.625f);
        for (auto [h, w] : {std::pair{7, 9}, {3, 5}, {1, 2}, {12, 20}}) {
            Tensor y = upsample_bilinear(x, h, w);
            for (float v : y.data()) CHECK(v == doctest::Approx(0.625f).epsilon(1e-6));
        }
    }
    SUBCASE("bilinear matches the half-pixel oracle; 2x downscale is 2x2 averaging") {
        Rng rng(2);
        Tensor x = random_tensor({1, 2, 4, 6}, rng);
        for (auto [h, w] : {std::pair{8, 12}, {2, 3}, {5, 7}}) {
            Tensor y = upsample_bilinear(x, h, w);
            auto yd = oracle::bilinear(to_double(x.data()), x.shape(), h, w);
            for (std::size_t i = 0; i < y.size(); ++i) CHECK(std::abs(y[i] - yd[i]) < 1e-6);
        }
        Tensor d = upsample_bilinear(x, 2, 3);
        CHECK(d.at(0, 1, 1, 2) == doctest::Approx((x.at(0, 1, 2, 4) + x.at(0, 1, 2, 5) + x.at(0, 1, 3, 4) + x.at(0, 1, 3, 5)) / 4));
    }
    SUBCASE("elementwise_mul: identity mask, exact zeros where the mask is zero") {
        Rng rng(4);
        Tensor x = random_tensor({2, 3, 4, 4}, rng);
        CHECK(elementwise_mul(x, Tensor({2, 1, 4, 4}, 1.0f)) == x);
        BinaryMask m = random_binary(2, 4, 4, 0.5, rng);
        Tensor y = elementwise_mul(x, m.to_tensor());
        Tensor x2 = x;
        for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 3; ++c)
                for (int i = 0; i < 4; ++i)
                    for (int j = 0; j < 4; ++j)
                        if (!m.at(b, i, j)) x2.at(b, c, i, j) = 5.0f;
        CHECK(elementwise_mul(x2, m.to_tensor()) == y);
        for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 3; ++c)
                for (int i = 0; i < 4; ++i)
                    for (int j = 0; j < 4; ++j) {
                        if (!m.at(b, i, j)) {
                            CHECK(y.at(b, c, i, j) == 0.0f);
                            CHECK_FALSE(std::signbit(y.at(b, c, i, j)));
                        } else {
                            CHECK(y.at(b, c, i, j) == x.at(b, c, i, j));
                        }
                    }
        CHECK_THROWS_AS(elementwise_mul(x, Tensor({2, 1, 2, 2})), ConfigError);
    }
}

namespace {

// Shared FD harness: loss = sum(r * f(x)) on double oracles.
void check_grad(const std::vector<float>& analytic, std::vector<double> x,
                const std::function<double(const std::vector<double>&)>& loss,
                const std::function<bool(std::size_t)>& skip = nullptr) {
    REQUIRE(analytic.size() == x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (skip && skip(i)) continue;
        const double fd = central_diff(x, i, 1e-3, loss);
        CHECK(rel_err(analytic[i], fd) < 1e-3);
    }
}

}  // namespace

TEST_CASE("layer gradients match finite differences") {
    Rng rng(17);
    const Shape s{1, 4, 8, 8};
    Tensor x = random_tensor(s, rng);
    Tensor r = random_tensor(s, rng);

    SUBCASE("relu") {
        Tensor g = relu_backward(r, x);
        check_grad(g.vec(), to_double(x.data()),
                   [&](const std::vector<double>& v) {
                       double l = 0;
                       for (std::size_t i = 0; i < v.size(); ++i) l += r[i] * std::max(0.0, v[i]);
                       return l;
                   },
                   [&](std::size_t i) { return std::abs(x[i]) < 1e-4 + 1e-3; });
    }
    SUBCASE("maxpool2") {
        PoolResult p = maxpool2(x);
        Tensor rp = random_tensor(p.out.shape(), rng);
        Tensor g = maxpool2_backward(rp, p.argmax, s);
        // Kink neighbourhood: window top-2 gap below the step.
        std::vector<bool> near(x.size(), false);
        for (int c = 0; c < 4; ++c)
            for (int oy = 0; oy < 4; ++oy)
                for (int ox = 0; ox < 4; ++ox) {
                    std::vector<float> vals;
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) vals.push_back(x.at(0, c, 2 * oy + dy, 2 * ox + dx));
                    std::sort(vals.rbegin(), vals.rend());
                    if (vals[0] - vals[1] < 1e-4 + 2e-3)
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx) near[x.index(0, c, 2 * oy + dy, 2 * ox + dx)] = true;
                }
        check_grad(g.vec(), to_double(x.data()),
                   [&](const std::vector<double>& v) {
                       double l = 0;
                       for (int c = 0; c < 4; ++c)
                           for (int oy = 0; oy < 4; ++oy)
                               for (int ox = 0; ox < 4; ++ox) {
                                   double m = -1e300;
                                   for (int dy = 0; dy < 2; ++dy)
                                       for (int dx = 0; dx < 2; ++dx)
                                           m = std::max(m, v[x.index(0, c, 2 * oy + dy, 2 * ox + dx)]);
                                   l += rp.at(0, c, oy, ox) * m;
                               }
                       return l;
                   },
                   [&](std::size_t i) { return near[i]; });
    }
    SUBCASE("bilinear up and down") {
        for (auto [h, w] : {std::pair{13, 16}, {4, 4}, {3, 5}}) {
            Tensor ro = random_tensor({1, 4, h, w}, rng);
            Tensor g = upsample_bilinear_backward(ro, s);
            check_grad(g.vec(), to_double(x.data()), [&, h = h, w = w](const std::vector<double>& v) {
                auto y = oracle::bilinear(v, s, h, w);
                double l = 0;
                for (std::size_t i = 0; i < y.size(); ++i) l += ro[i] * y[i];
                return l;
            });
        }
    }
    SUBCASE("elementwise_mul w.r.t. both inputs") {
        Tensor m = random_tensor({1, 1, 8, 8}, rng, 0.0, 1.0);
        MulGrads g = elementwise_mul_backward(r, x, m);
        check_grad(g.grad_x.vec(), to_double(x.data()), [&](const std::vector<double>& v) {
            double l = 0;
            for (std::size_t i = 0; i < v.size(); ++i) l += r[i] * v[i] * m[i % 64];
            return l;
        });
        check_grad(g.grad_m.vec(), to_double(m.data()), [&](const std::vector<double>& v) {
            double l = 0;
            for (std::size_t i = 0; i < x.size(); ++i) l += r[i] * x[i] * v[i % 64];
            return l;
        });
    }
    SUBCASE("softmax_ce") {
        std::vector<int> labels(64);
        std::vector<float> weights(64);
        for (auto& l : labels) l = rng.uniform_int(0, 3);
        for (auto& w : weights) w = static_cast<float>(rng.uniform(0, 2));
        LossGrad lg = softmax_ce(x, labels, weights);
        const auto loss = [&](const std::vector<double>& v) {
            double l = 0;
            for (std::size_t p = 0; p < 64; ++p) {
                double z[4];
                for (int k = 0; k < 4; ++k) z[k] = v[static_cast<std::size_t>(k) * 64 + p];
                l += weights[p] * oracle::ce(z, 4, labels[p]);
            }
            return l;
        };
        CHECK(lg.loss == doctest::Approx(loss(to_double(x.data()))).epsilon(1e-6));
        check_grad(lg.grad.vec(), to_double(x.data()), loss);
    }
    SUBCASE("smooth_l1") {
        std::vector<float> pred(x.vec()), target(x.size()), weights(x.size()), grad(x.size());
        for (auto& v : pred) v *= 3.0f;
        for (auto& v : target) v = static_cast<float>(rng.uniform(-1, 1));
        for (auto& v : weights) v = static_cast<float>(rng.uniform(0, 1));
        const double l0 = smooth_l1(pred, target, weights, grad);
        const auto loss = [&](const std::vector<double>& v) {
            double l = 0;
            for (std::size_t i = 0; i < v.size(); ++i) l += weights[i] * oracle::smooth_l1(v[i] - target[i]);
            return l;
        };
        CHECK(l0 == doctest::Approx(loss(to_double(pred))).epsilon(1e-6));
        check_grad(grad, to_double(pred), loss, [&](std::size_t i) {
            return std::abs(std::abs(pred[i] - target[i]) - 1.0) < 1e-4 + 1e-3;
        });
    }
}

TEST_CASE("layer tape enforces reverse order") {
    LayerTape tape;
    CHECK_THROWS_AS(tape.pop("a"), InternalError);
    tape.push({"a", {}, std::nullopt, {}});
    tape.push({"b", {}, std::nullopt, {}});
    CHECK_THROWS_AS(tape.pop("a"), InternalError);
    CHECK(tape.pop("b").layer_id == "b");
    CHECK(tape.pop("a").layer_id == "a");
    CHECK(tape.empty());

    Rng rng(8);
    ConvWeights w = random_conv(1, 1, 3, 1, 1, rng);
    CHECK_THROWS_AS(conv2d_backward(Tensor({1, 1, 4, 4}), tape, "conv", w), InternalError);
    Tensor x = random_tensor({1, 1, 4, 4}, rng);
    tape.push({"conv", {x}, std::nullopt, {}});
    Tensor go = random_tensor({1, 1, 4, 4}, rng);
    ConvGrads g = conv2d_backward(go, tape, "conv", w);
    CHECK(g.grad_in == conv2d_backward(go, x, w).grad_in);
}

TEST_CASE("gradient suite") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        for (const auto& gc : gradient_suite(seed)) {
            INFO(gc.name, " seed ", seed);
            CHECK(gc.checked > 0);
            CHECK(gc.skipped * 10 < gc.checked);
            CHECK(gc.worst < 1e-3);
        }
    }
}
