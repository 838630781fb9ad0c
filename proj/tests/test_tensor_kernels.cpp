#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "oracles.hpp"

using namespace msflow;

TEST(Conv2d, ScalarMultiplyAdd) {
    Tensor<float> in({1, 1, 1}, {2.f}), w({1, 1, 1, 1}, {3.f}), b({1}, {1.f});
    EXPECT_EQ(conv2d(in, w, b, 0)[0], 7.f);
}

TEST(Conv2d, IdentityKernelIsIdentity) {
    std::mt19937_64 rng(1);
    for (std::size_t c : {1u, 3u, 5u}) {
        auto in = oracle::random_tensor<float>({c, 6, 7}, rng);
        Tensor<float> w({c, c, 3, 3});
        for (std::size_t i = 0; i < c; ++i) w[((i * c + i) * 3 + 1) * 3 + 1] = 1.f;
        EXPECT_EQ(conv2d(in, w, Tensor<float>({c}), 1), in);
    }
}

TEST(Conv2d, MatchesLoopOracle) {
    std::mt19937_64 rng(2);
    auto in = oracle::random_tensor<float>({3, 4, 4}, rng);
    auto w = oracle::random_tensor<float>({2, 3, 3, 3}, rng);
    auto b = oracle::random_tensor<float>({2}, rng);
    EXPECT_LT(max_abs_diff(conv2d(in, w, b, 1), oracle::conv2d(in, w, b, 1)), 1e-6f);
    auto w5 = oracle::random_tensor<float>({4, 3, 5, 5}, rng);
    auto b4 = oracle::random_tensor<float>({4}, rng);
    auto big = oracle::random_tensor<float>({3, 9, 6}, rng);
    EXPECT_LT(max_abs_diff(conv2d(big, w5, b4, 2), oracle::conv2d(big, w5, b4, 2)), 1e-5f);
}

TEST(Conv2d, ShapeMismatchNamesDims) {
    Tensor<float> in({2, 4, 4}), w({1, 3, 3, 3}), b({1});
    try {
        conv2d(in, w, b, 1);
        FAIL();
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("[2,4,4]"), std::string::npos) << e.what();
    }
}

TEST(Conv2d, Deterministic) {
    std::mt19937_64 rng(3);
    auto in = oracle::random_tensor<float>({4, 8, 8}, rng);
    auto w = oracle::random_tensor<float>({4, 4, 3, 3}, rng);
    auto b = oracle::random_tensor<float>({4}, rng);
    EXPECT_EQ(conv2d(in, w, b, 1), conv2d(in, w, b, 1));
}

TEST(Conv2dBackward, ZeroGradOut) {
    std::mt19937_64 rng(4);
    auto in = oracle::random_tensor<float>({2, 5, 5}, rng);
    auto w = oracle::random_tensor<float>({3, 2, 3, 3}, rng);
    auto g = conv2d_backward(Tensor<float>({3, 5, 5}), in, w, 1);
    for (const auto* t : {&g.input, &g.weight, &g.bias})
        for (float v : t->values()) EXPECT_EQ(v, 0.f);
}

TEST(Conv2dBackward, ScalarChainRule) {
    Tensor<float> x({1, 1, 1}, {2.5f}), w({1, 1, 1, 1}, {-1.5f});
    auto g = conv2d_backward(Tensor<float>({1, 1, 1}, {1.f}), x, w, 0);
    EXPECT_EQ(g.weight[0], 2.5f);
    EXPECT_EQ(g.input[0], -1.5f);
    EXPECT_EQ(g.bias[0], 1.f);
}

TEST(Conv2dBackward, FiniteDifferences) {
    std::mt19937_64 rng(5);
    auto in = oracle::random_tensor<double>({2, 4, 5}, rng);
    auto w = oracle::random_tensor<double>({3, 2, 3, 3}, rng);
    auto b = oracle::random_tensor<double>({3}, rng);
    auto r = oracle::random_tensor<double>({3, 4, 5}, rng);
    const auto loss = [&] {
        auto y = conv2d(in, w, b, 1);
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += r[i] * y[i];
        return s;
    };
    auto g = conv2d_backward(r, in, w, 1);
    for (std::size_t i = 0; i < in.size(); ++i)
        EXPECT_LT(oracle::relative_error(g.input[i], oracle::central_difference(in[i], loss, 1e-3)), 1e-2);
    for (std::size_t i = 0; i < w.size(); ++i)
        EXPECT_LT(oracle::relative_error(g.weight[i], oracle::central_difference(w[i], loss, 1e-3)), 1e-2);
    for (std::size_t i = 0; i < b.size(); ++i)
        EXPECT_LT(oracle::relative_error(g.bias[i], oracle::central_difference(b[i], loss, 1e-3)), 1e-2);
}

TEST(Conv2dBackward, InputGradientCanBeRestricted) {
    std::mt19937_64 rng(6);
    auto in = oracle::random_tensor<double>({4, 3, 3}, rng);
    auto w = oracle::random_tensor<double>({2, 4, 3, 3}, rng);
    auto go = oracle::random_tensor<double>({2, 3, 3}, rng);
    auto full = conv2d_backward(go, in, w, 1);
    auto part = conv2d_backward(go, in, w, 1, 2);
    ASSERT_EQ(part.input.dims(), in.dims());
    for (std::size_t i = 0; i < part.input.size(); ++i) EXPECT_NEAR(part.input[i], i < 18 ? full.input[i] : 0.0, 1e-12);
    EXPECT_LT(max_abs_diff(part.weight, full.weight), 1e-12);
}

TEST(AvgPool, MeanOfFour) {
    Tensor<float> in({1, 2, 2}, {1, 2, 3, 4});
    auto out = avg_pool2d(in, 2, 2, 0);
    ASSERT_EQ(out.dims(), (Shape{1, 1, 1}));
    EXPECT_FLOAT_EQ(out[0], 2.5f);
}

TEST(AvgPool, ConstantInputCornerCountsPadding) {
    const float c = 3.f;
    Tensor<float> in({1, 8, 8}, c);
    auto out = avg_pool2d(in, 3, 2, 1);
    ASSERT_EQ(out.dims(), (Shape{1, 4, 4}));
    EXPECT_FLOAT_EQ(out.at(0, 0, 0), 4 * c / 9);
    for (std::size_t y = 1; y < 4; ++y)
        for (std::size_t x = 1; x < 4; ++x) EXPECT_FLOAT_EQ(out.at(0, y, x), c);
}

TEST(AvgPool, MatchesLoopOracle) {
    std::mt19937_64 rng(7);
    auto in = oracle::random_tensor<float>({2, 8, 8}, rng);
    auto out = avg_pool2d(in, 3, 2, 1);
    ASSERT_EQ(out.dims(), (Shape{2, 4, 4}));
    EXPECT_LT(max_abs_diff(out, oracle::avg_pool(in, 3, 2, 1)), 1e-6f);
}

TEST(AvgPool, OutputExtentForAllSizes) {
    std::mt19937_64 rng(8);
    for (std::size_t h = 1; h <= 64; ++h) {
        auto in = oracle::random_tensor<float>({1, h, 3}, rng);
        auto out = avg_pool2d(in, 3, 2, 1);
        EXPECT_EQ(out.dim(1), (h + 2 - 3) / 2 + 1);
        EXPECT_LT(max_abs_diff(out, oracle::avg_pool(in, 3, 2, 1)), 1e-6f) << "H=" << h;
    }
}

TEST(AvgPool, WindowLargerThanInputFails) {
    EXPECT_THROW(avg_pool2d(Tensor<float>({1, 2, 2}), 5, 1, 0), ShapeError);
}

TEST(AvgPool, BackwardFiniteDifferences) {
    std::mt19937_64 rng(9);
    auto in = oracle::random_tensor<double>({2, 7, 6}, rng);
    auto r = oracle::random_tensor<double>(avg_pool2d(in, 3, 2, 1).dims(), rng);
    const auto loss = [&] {
        auto y = avg_pool2d(in, 3, 2, 1);
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += r[i] * y[i];
        return s;
    };
    auto g = avg_pool2d_backward(r, in.dims(), 3, 2, 1);
    for (std::size_t i = 0; i < in.size(); ++i)
        EXPECT_LT(oracle::relative_error(g[i], oracle::central_difference(in[i], loss, 1e-3)), 1e-2);
}

TEST(LayerNorm, TwoPointStandardization) {
    Tensor<float> in({2, 1, 1}, {1.f, 3.f});
    auto out = layer_norm(in, Tensor<float>({2}, 1.f), Tensor<float>({2}));
    EXPECT_NEAR(out[0], -1.f, 1e-5);
    EXPECT_NEAR(out[1], 1.f, 1e-5);
}

TEST(LayerNorm, ConstantVectorGivesZeros) {
    Tensor<float> in({4, 2, 2}, 7.f);
    auto out = layer_norm(in, Tensor<float>({4}, 1.f), Tensor<float>({4}));
    for (float v : out.values()) EXPECT_EQ(v, 0.f);
}

TEST(LayerNorm, RandomStatistics) {
    std::mt19937_64 rng(10);
    auto in = oracle::random_tensor<float>({16, 5, 5}, rng, -3, 5);
    auto out = layer_norm(in, Tensor<float>({16}, 1.f), Tensor<float>({16}));
    for (std::size_t p = 0; p < 25; ++p) {
        double m = 0, v = 0;
        for (std::size_t c = 0; c < 16; ++c) m += out[c * 25 + p];
        m /= 16;
        for (std::size_t c = 0; c < 16; ++c) v += (out[c * 25 + p] - m) * (out[c * 25 + p] - m);
        v /= 16;
        EXPECT_LT(std::abs(m), 1e-5);
        EXPECT_LT(std::abs(v - 1), 1e-3);
    }
}

TEST(LayerNorm, MatchesOracleAndBackward) {
    std::mt19937_64 rng(11);
    auto in = oracle::random_tensor<double>({5, 3, 2}, rng);
    auto g = oracle::random_tensor<double>({5}, rng, 0.5, 1.5);
    auto b = oracle::random_tensor<double>({5}, rng);
    LayerNormCache<double> cache;
    auto out = layer_norm(in, g, b, &cache);
    EXPECT_LT(max_abs_diff(out, oracle::layer_norm(in, g, b)), 1e-12);
    auto r = oracle::random_tensor<double>(in.dims(), rng);
    const auto loss = [&] {
        auto y = layer_norm(in, g, b);
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += r[i] * y[i];
        return s;
    };
    auto grads = layer_norm_backward(r, g, cache);
    for (std::size_t i = 0; i < in.size(); ++i)
        EXPECT_LT(oracle::relative_error(grads.input[i], oracle::central_difference(in[i], loss, 1e-3)), 1e-2);
    for (std::size_t i = 0; i < g.size(); ++i) {
        EXPECT_LT(oracle::relative_error(grads.gain[i], oracle::central_difference(g[i], loss, 1e-3)), 1e-2);
        EXPECT_LT(oracle::relative_error(grads.bias[i], oracle::central_difference(b[i], loss, 1e-3)), 1e-2);
    }
}

TEST(Relu, ForwardAndBackward) {
    Tensor<float> x({4}, {-1.f, 0.5f, 2.f, -0.1f});
    auto y = relu(x);
    EXPECT_EQ(y, Tensor<float>({4}, {0.f, 0.5f, 2.f, 0.f}));
    auto g = relu_backward(Tensor<float>({4}, 1.f), x);
    EXPECT_EQ(g, Tensor<float>({4}, {0.f, 1.f, 1.f, 0.f}));
}

TEST(Bilinear, ConstantStaysConstant) {
    Tensor<float> in({2, 3, 5}, 1.25f);
    const auto up = bilinear_upsample(in, 11, 17);
    for (float v : up.values()) EXPECT_FLOAT_EQ(v, 1.25f);
}

TEST(Bilinear, SinglePixelReplicates) {
    Tensor<float> in({1, 1, 1}, {4.f});
    auto out = bilinear_upsample(in, 6, 9);
    ASSERT_EQ(out.dims(), (Shape{1, 6, 9}));
    for (float v : out.values()) EXPECT_EQ(v, 4.f);
}

TEST(Bilinear, TwoByTwoToFourByFour) {
    Tensor<float> in({1, 2, 2}, {1.f, 2.f, 3.f, 4.f});
    // Half-pixel centres: row weights of source row 0 are 1, .75, .25, 0.
    const double wr[4] = {1.0, 0.75, 0.25, 0.0};
    auto out = bilinear_upsample(in, 4, 4);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            const double top = wr[x] * 1 + (1 - wr[x]) * 2;
            const double bot = wr[x] * 3 + (1 - wr[x]) * 4;
            EXPECT_NEAR(out.at(0, y, x), wr[y] * top + (1 - wr[y]) * bot, 1e-6) << y << "," << x;
        }
}

TEST(Bilinear, BackwardFiniteDifferences) {
    std::mt19937_64 rng(12);
    auto in = oracle::random_tensor<double>({2, 3, 2}, rng);
    auto r = oracle::random_tensor<double>({2, 7, 5}, rng);
    const auto loss = [&] {
        auto y = bilinear_upsample(in, 7, 5);
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += r[i] * y[i];
        return s;
    };
    auto g = bilinear_upsample_backward(r, in.dims());
    for (std::size_t i = 0; i < in.size(); ++i)
        EXPECT_LT(oracle::relative_error(g[i], oracle::central_difference(in[i], loss, 1e-3)), 1e-2);
}

TEST(Adam, ZeroGradLeavesParamUnchanged) {
    Tensor<float> p({3}, {1.f, -2.f, 0.5f});
    const auto before = p;
    AdamState<float> st(3);
    for (int i = 0; i < 5; ++i) adam_step(p, Tensor<float>({3}), st, 0.1);
    EXPECT_EQ(p, before);
    for (float m : st.first_moment) EXPECT_EQ(m, 0.f);
    for (float v : st.second_moment) EXPECT_EQ(v, 0.f);
    EXPECT_EQ(st.step, 5u);
}

TEST(Adam, FirstStepMovesBySignTimesLr) {
    Tensor<double> p({3}, {1.0, 1.0, 1.0});
    Tensor<double> g({3}, {0.3, -7.0, 1e-3});
    AdamState<double> st(3);
    adam_step(p, g, st, 1e-2);
    EXPECT_NEAR(p[0], 1.0 - 1e-2, 1e-6);
    EXPECT_NEAR(p[1], 1.0 + 1e-2, 1e-6);
    EXPECT_NEAR(p[2], 1.0 - 1e-2, 1e-4);
}

TEST(Adam, ConvergesOnParabola) {
    Tensor<double> p({1}, {1.0});
    AdamState<double> st(1);
    for (int i = 0; i < 100; ++i) adam_step(p, Tensor<double>({1}, {2 * p[0]}), st, 0.1);
    EXPECT_LT(std::abs(p[0]), 0.1);
}

TEST(Adam, RejectsNonFiniteGradient) {
    Tensor<float> p({2});
    AdamState<float> st(2);
    EXPECT_THROW(adam_step(p, Tensor<float>({2}, {0.f, NAN}), st, 0.1), NumericError);
}

TEST(PosEncoding, OriginSinZeroCosOne) {
    auto pe = pos_encoding_2d<float>(16, 4, 4);
    for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(pe.at(c, 0, 0), c % 2 == 0 ? 0.f : 1.f);
}

TEST(PosEncoding, DeterministicBoundedDistinct) {
    auto a = pos_encoding_2d<float>(64, 16, 16);
    EXPECT_EQ(a, pos_encoding_2d<float>(64, 16, 16));
    std::set<std::vector<float>> seen;
    for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 16; ++x) {
            std::vector<float> v;
            for (std::size_t c = 0; c < 64; ++c) {
                const float e = a.at(c, y, x);
                EXPECT_GE(e, -1.f);
                EXPECT_LE(e, 1.f);
                v.push_back(e);
            }
            seen.insert(v);
        }
    EXPECT_EQ(seen.size(), 256u);
}

TEST(PosEncoding, ChannelsMustBeMultipleOfFour) {
    EXPECT_THROW(pos_encoding_2d<float>(6, 2, 2), ShapeError);
}

TEST(Tensor, RejectsMismatchedData) {
    EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>(3)), ShapeError);
    EXPECT_THROW(Tensor<float>({2, 0}), ShapeError);
}

TEST(Tensor, RequireFiniteReportsIndex) {
    Tensor<float> t({3}, {1.f, INFINITY, 0.f});
    try {
        require_finite(t, "probe");
        FAIL();
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("index 1"), std::string::npos);
    }
}
