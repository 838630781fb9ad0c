#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"

using namespace msflow;

namespace {

template <typename T>
std::vector<Parameter<T>*> params_of(CouplingLayer<T>& layer) {
    std::vector<Parameter<T>*> ps;
    layer.collect(ps);
    return ps;
}

template <typename T>
Parameter<T>* find(const std::vector<Parameter<T>*>& ps, const std::string& suffix) {
    for (auto* p : ps)
        if (p->name.size() >= suffix.size() && p->name.compare(p->name.size() - suffix.size(), suffix.size(), suffix) == 0)
            return p;
    return nullptr;
}

// Encode-side objective whose gradient the layers implement.
template <typename T>
double objective(const FlowResult<T>& r) {
    return 0.5 * squared_norm(r.value) - r.logdet;
}

}  // namespace

TEST(StNetwork, ZeroFinalLayerGivesZeroOutput) {
    std::mt19937_64 rng(1);
    StNetwork<float> st("st", 3, 3, 4, rng);
    auto out = st.forward(oracle::random_tensor<float>({3, 5, 5}, rng, -4, 4));
    for (float v : out.values()) EXPECT_EQ(v, 0.f);
}

TEST(StNetwork, MatchesStraightLineComposition) {
    std::mt19937_64 rng(2);
    StNetwork<double> st("st", 4, 4, 4, rng);
    std::vector<Parameter<double>*> ps;
    st.collect(ps);
    oracle::randomize(ps, rng, 0.5);
    auto half = oracle::random_tensor<double>({4, 2, 2}, rng);
    auto h = oracle::conv2d(half, ps[0]->value, ps[1]->value, 1);
    auto n = oracle::layer_norm(h, ps[2]->value, ps[3]->value);
    for (auto& v : n.values()) v = std::max(v, 0.0);
    auto expect = oracle::conv2d(n, ps[4]->value, ps[5]->value, 1);
    EXPECT_LT(max_abs_diff(st.forward(half), expect), 1e-12);
}

TEST(Coupling, IdentityAtInit) {
    std::mt19937_64 rng(3);
    for (bool swap : {false, true}) {
        CouplingLayer<float> layer("c", 5, 0, swap, kDefaultClamp, 0, rng);
        auto x = oracle::random_tensor<float>({5, 4, 3}, rng, -3, 3);
        auto r = layer.encode(x, nullptr);
        EXPECT_EQ(r.value, x);
        EXPECT_EQ(r.logdet, 0.0);
        auto d = layer.decode(x, nullptr);
        EXPECT_EQ(d.value, x);
        EXPECT_EQ(d.logdet, 0.0);
    }
}

TEST(Coupling, ForcedScaleHalvesActiveChannel) {
    std::mt19937_64 rng(4);
    CouplingLayer<double> layer("c", 2, 0, false, kDefaultClamp, 0, rng);
    auto ps = params_of(layer);
    // Raw s such that the clamped value is exactly ln 2.
    find(ps, "conv_b/bias")->value[0] = kDefaultClamp * std::atanh(std::log(2.0) / kDefaultClamp);
    Tensor<double> x({2, 1, 1}, {0.7, 3.0});
    auto r = layer.encode(x, nullptr);
    EXPECT_DOUBLE_EQ(r.value[0], 0.7);
    EXPECT_NEAR(r.value[1], 1.5, 1e-12);
    EXPECT_NEAR(r.logdet, -std::log(2.0), 1e-12);
}

TEST(Coupling, ScaleIsClamped) {
    std::mt19937_64 rng(5);
    CouplingLayer<float> layer("c", 6, 4, true, kDefaultClamp, 0, rng);
    oracle::randomize(params_of(layer), rng, 3.0);
    auto cond = oracle::random_tensor<float>({4, 5, 5}, rng);
    typename CouplingLayer<float>::Cache cache;
    layer.encode(oracle::random_tensor<float>({6, 5, 5}, rng, -5, 5), &cond, &cache);
    double biggest = 0;
    for (float raw : cache.s_raw.values()) {
        const double s = std::abs(soft_clamp(raw, kDefaultClamp));
        EXPECT_LT(s, 1.9);
        biggest = std::max(biggest, static_cast<double>(std::abs(raw)));
    }
    EXPECT_GT(biggest, 1.9);  // the clamp was exercised
}

TEST(Coupling, PassThroughHalfUnchanged) {
    std::mt19937_64 rng(6);
    for (bool swap : {false, true}) {
        CouplingLayer<float> layer("c", 7, 0, swap, kDefaultClamp, 0, rng);
        oracle::randomize(params_of(layer), rng);
        auto x = oracle::random_tensor<float>({7, 3, 3}, rng);
        auto z = layer.encode(x, nullptr).value;
        const std::size_t begin = swap ? 3 : 0, count = swap ? 4 : 3;
        EXPECT_EQ(slice_channels(z, begin, count), slice_channels(x, begin, count));
        const std::size_t abegin = swap ? 0 : 3, acount = swap ? 3 : 4;
        EXPECT_GT(max_abs_diff(slice_channels(z, abegin, acount), slice_channels(x, abegin, acount)), 1e-3f);
    }
}

TEST(Coupling, RoundTrips) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        CouplingLayer<float> layer("c", 8, 8, trial % 2 == 1, kDefaultClamp, 0, rng);
        oracle::randomize(params_of(layer), rng, 0.5);
        auto cond = pos_encoding_2d<float>(8, 4, 4);
        auto x = oracle::normal_tensor<float>({8, 4, 4}, rng);
        auto e = layer.encode(x, &cond);
        auto back = layer.decode(e.value, &cond);
        EXPECT_LT(max_abs_diff(back.value, x), 1e-4f);
        EXPECT_NEAR(e.logdet, -back.logdet, 1e-4);
        auto d = layer.decode(x, &cond);
        EXPECT_LT(max_abs_diff(layer.encode(d.value, &cond).value, x), 1e-4f);
    }
}

TEST(Coupling, LogdetMatchesNumericJacobian) {
    std::mt19937_64 rng(8);
    CouplingLayer<double> layer("c", 4, 0, false, kDefaultClamp, 0, rng);
    oracle::randomize(params_of(layer), rng, 0.5);
    const Shape dims{4, 3, 3};
    auto x = oracle::normal_tensor<double>(dims, rng);
    const auto f = [&](const std::vector<double>& v) {
        return oracle::flatten<double>({layer.encode(oracle::unflatten<double>(v, {dims})[0], nullptr).value});
    };
    const double numeric = oracle::log_abs_det(oracle::jacobian(f, oracle::flatten<double>({x})), 36);
    const double analytic = layer.encode(x, nullptr).logdet;
    EXPECT_GT(std::abs(analytic), 0.1);
    EXPECT_NEAR(analytic, numeric, 1e-2);
}

TEST(Coupling, ConditionChannelMismatch) {
    std::mt19937_64 rng(9);
    CouplingLayer<float> layer("c", 4, 8, false, kDefaultClamp, 0, rng);
    Tensor<float> x({4, 2, 2}), wrong({4, 2, 2});
    EXPECT_THROW(layer.encode(x, &wrong), ShapeError);
    EXPECT_THROW(layer.encode(x, nullptr), ShapeError);
    EXPECT_THROW(layer.encode(Tensor<float>({5, 2, 2}), nullptr), ShapeError);
}

TEST(Coupling, NeedsTwoChannels) {
    std::mt19937_64 rng(10);
    EXPECT_THROW(CouplingLayer<float>("c", 1, 0, false, kDefaultClamp, 0, rng), ShapeError);
}

TEST(CouplingBackward, ZeroUpstreamGivesZeroGrads) {
    std::mt19937_64 rng(11);
    CouplingLayer<double> layer("c", 4, 0, false, kDefaultClamp, 0, rng);
    auto ps = params_of(layer);
    oracle::randomize(ps, rng);
    auto x = oracle::normal_tensor<double>({4, 3, 3}, rng);
    typename CouplingLayer<double>::Cache cache;
    auto r = layer.encode(x, nullptr, &cache);
    auto gx = layer.backward(Tensor<double>(r.value.dims()), 0.0, cache);
    for (auto* p : ps)
        for (double g : p->grad.values()) EXPECT_EQ(g, 0.0) << p->name;
    for (double g : gx.values()) EXPECT_EQ(g, 0.0);

    // Logdet path only: t-half of conv_b bias receives nothing.
    layer.backward(Tensor<double>(r.value.dims()), 1.0, cache);
    auto* bias = find(ps, "conv_b/bias");
    EXPECT_NE(bias->grad[0], 0.0);
    EXPECT_EQ(bias->grad[2], 0.0);
    EXPECT_EQ(bias->grad[3], 0.0);
}

TEST(CouplingBackward, LogdetGradientOfScaleBiasInLinearRegime) {
    std::mt19937_64 rng(12);
    CouplingLayer<double> layer("c", 4, 0, true, kDefaultClamp, 0, rng);
    auto ps = params_of(layer);
    auto* bias = find(ps, "conv_b/bias");
    auto x = oracle::normal_tensor<double>({4, 3, 5}, rng);
    typename CouplingLayer<double>::Cache cache;
    layer.encode(x, nullptr, &cache);
    layer.backward(Tensor<double>(x.dims()), 1.0, cache);
    for (std::size_t c = 0; c < 2; ++c) {
        const double numeric =
            oracle::central_difference(bias->value[c], [&] { return layer.encode(x, nullptr).logdet; }, 1e-4);
        EXPECT_NEAR(numeric, -15.0, 1e-6);  // minus the active elements per channel
        EXPECT_NEAR(bias->grad[c], numeric, 1e-6);
    }
}

TEST(CouplingBackward, FiniteDifferencesOnParametersAndInput) {
    std::mt19937_64 rng(13);
    for (bool swap : {false, true}) {
        CouplingLayer<double> layer("c", 5, 4, swap, kDefaultClamp, 0, rng);
        auto ps = params_of(layer);
        oracle::randomize(ps, rng, 0.4);
        auto cond = pos_encoding_2d<double>(4, 3, 4);
        auto x = oracle::normal_tensor<double>({5, 3, 4}, rng);
        typename CouplingLayer<double>::Cache cache;
        auto r = layer.encode(x, &cond, &cache);
        for (auto* p : ps) p->zero_grad();
        auto gx = layer.backward(r.value, -1.0, cache);
        const auto loss = [&] { return objective(layer.encode(x, &cond)); };
        std::size_t checked = 0;
        for (auto* p : ps) {
            std::uniform_int_distribution<std::size_t> pick(0, p->value.size() - 1);
            for (int k = 0; k < 4; ++k, ++checked) {
                const std::size_t i = pick(rng);
                const double num = oracle::central_difference(p->value[i], loss, 1e-5);
                EXPECT_LT(oracle::relative_error(p->grad[i], num), 1e-2) << p->name << "[" << i << "]";
            }
        }
        EXPECT_GE(checked, 20u);
        for (std::size_t i = 0; i < x.size(); ++i)
            EXPECT_LT(oracle::relative_error(gx[i], oracle::central_difference(x[i], loss, 1e-5)), 1e-2);
    }
}

TEST(FlowBlock, IdentityAtInitAndAdditiveLogdet) {
    std::mt19937_64 rng(14);
    FlowBlock<float> block("b", 6, 0, kDefaultClamp, 0, rng);
    auto x = oracle::normal_tensor<float>({6, 3, 3}, rng);
    auto r = block.encode(x, nullptr);
    EXPECT_EQ(r.value, x);
    EXPECT_EQ(r.logdet, 0.0);

    std::vector<Parameter<float>*> ps;
    block.collect(ps);
    oracle::randomize(ps, rng);
    auto a = block.first().encode(x, nullptr);
    auto b = block.second().encode(a.value, nullptr);
    auto both = block.encode(x, nullptr);
    EXPECT_EQ(both.logdet, a.logdet + b.logdet);
    EXPECT_EQ(both.value, b.value);
    EXPECT_FALSE(block.first().swapped());
    EXPECT_TRUE(block.second().swapped());
}

TEST(FlowBlock, LogdetMatchesNumericJacobian) {
    std::mt19937_64 rng(15);
    FlowBlock<double> block("b", 4, 0, kDefaultClamp, 0, rng);
    std::vector<Parameter<double>*> ps;
    block.collect(ps);
    oracle::randomize(ps, rng, 0.5);
    const Shape dims{4, 2, 2};
    auto x = oracle::normal_tensor<double>(dims, rng);
    const auto f = [&](const std::vector<double>& v) {
        return oracle::flatten<double>({block.encode(oracle::unflatten<double>(v, {dims})[0], nullptr).value});
    };
    EXPECT_NEAR(block.encode(x, nullptr).logdet,
                oracle::log_abs_det(oracle::jacobian(f, oracle::flatten<double>({x})), 16), 1e-2);
}

TEST(FlowChain, LogdetIsSumOfBlocksAndRoundTrips) {
    std::mt19937_64 rng(16);
    FlowChain<float> chain("p", 3, 6, 4, kDefaultClamp, 0, rng);
    std::vector<Parameter<float>*> ps;
    chain.collect(ps);
    oracle::randomize(ps, rng, 0.3);
    auto cond = pos_encoding_2d<float>(4, 4, 4);
    auto x = oracle::normal_tensor<float>({6, 4, 4}, rng);
    auto r = chain.encode(x, &cond);
    double sum = 0;
    Tensor<float> cur = x;
    for (std::size_t b = 0; b < chain.size(); ++b) {
        auto s = chain.block(b).encode(cur, &cond);
        sum += s.logdet;
        cur = s.value;
    }
    EXPECT_EQ(r.logdet, sum);
    EXPECT_EQ(r.value, cur);
    auto back = chain.decode(r.value, &cond);
    EXPECT_LT(max_abs_diff(back.value, x), 1e-4f);
    EXPECT_NEAR(back.logdet, -r.logdet, 1e-4);
}

TEST(FlowChain, BackwardMatchesFiniteDifferences) {
    std::mt19937_64 rng(17);
    FlowChain<double> chain("p", 2, 4, 4, kDefaultClamp, 0, rng);
    std::vector<Parameter<double>*> ps;
    chain.collect(ps);
    oracle::randomize(ps, rng, 0.3);
    auto cond = pos_encoding_2d<double>(4, 3, 3);
    auto x = oracle::normal_tensor<double>({4, 3, 3}, rng);
    typename FlowChain<double>::Cache cache;
    auto r = chain.encode(x, &cond, &cache);
    auto gx = chain.backward(r.value, -1.0, cache);
    const auto loss = [&] { return objective(chain.encode(x, &cond)); };
    std::uniform_int_distribution<std::size_t> pick_param(0, ps.size() - 1);
    for (int k = 0; k < 30; ++k) {
        auto* p = ps[pick_param(rng)];
        const std::size_t i = std::uniform_int_distribution<std::size_t>(0, p->value.size() - 1)(rng);
        EXPECT_LT(oracle::relative_error(p->grad[i], oracle::central_difference(p->value[i], loss, 1e-5)), 1e-2)
            << p->name;
    }
    for (std::size_t i = 0; i < x.size(); ++i)
        EXPECT_LT(oracle::relative_error(gx[i], oracle::central_difference(x[i], loss, 1e-5)), 1e-2);
}
