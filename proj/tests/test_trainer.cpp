#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "oracles.hpp"

using namespace msflow;

namespace {

ModelConfig tiny_config(std::uint64_t seed) {
    ModelConfig c;
    c.scales = {{4, 4, 4, 1}, {6, 2, 2, 1}};
    c.pos_channels = 4;
    c.seed = seed;
    return c;
}

std::vector<TensorList<float>> tiny_data(std::size_t n, std::uint64_t seed, double sd = 1.0) {
    std::mt19937_64 rng(seed);
    std::vector<TensorList<float>> data;
    for (std::size_t i = 0; i < n; ++i) {
        TensorList<float> p{oracle::normal_tensor<float>({4, 4, 4}, rng, sd), oracle::normal_tensor<float>({6, 2, 2}, rng, sd)};
        for (auto& v : p[0].values()) v += 0.5f;
        data.push_back(std::move(p));
    }
    return data;
}

}  // namespace

TEST(LearningRate, DropsByThreeAtSeventyAndNinetyPercent) {
    TrainConfig cfg;
    EXPECT_DOUBLE_EQ(lr_at(50, 100, cfg), 1e-4);
    EXPECT_DOUBLE_EQ(lr_at(80, 100, cfg), 1e-4 / 3);
    EXPECT_DOUBLE_EQ(lr_at(95, 100, cfg), 1e-4 / 9);
    EXPECT_DOUBLE_EQ(lr_at(69, 100, cfg), 1e-4);
    EXPECT_DOUBLE_EQ(lr_at(70, 100, cfg), 1e-4 / 3);
    EXPECT_THROW(lr_at(100, 100, cfg), ConfigError);
}

TEST(LearningRate, TraceHasTwoDrops) {
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.batch_size = 4;
    cfg.seed = 1;
    MSFlowModel<float> model(tiny_config(1));
    auto log = train(model, tiny_data(10, 1), std::vector<Label>(10, Label::normal), cfg);
    ASSERT_EQ(log.step_lr.size(), 30u);  // three batches per epoch, last one partial
    std::size_t drops = 0;
    for (std::size_t i = 1; i < log.step_lr.size(); ++i) {
        if (log.step_lr[i] != log.step_lr[i - 1]) {
            ++drops;
            EXPECT_NEAR(log.step_lr[i - 1] / log.step_lr[i], 3.0, 1e-12);
        }
    }
    EXPECT_EQ(drops, 2u);
    EXPECT_EQ(log.step_lr[20], 1e-4);
    EXPECT_EQ(log.step_lr[22], 1e-4 / 3);
    EXPECT_EQ(log.step_lr[28], 1e-4 / 9);
}

TEST(TrainConfigValidation, DropPoints) {
    TrainConfig cfg;
    cfg.lr_drop_points = {0.9, 0.7};
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg.lr_drop_points = {0.0, 0.5};
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg.lr_drop_points = {0.5, 1.0};
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg.lr_drop_points = {0.5};
    EXPECT_NO_THROW(cfg.validate());
}

TEST(NllLoss, IdentityModelCases) {
    MSFlowModel<float> model(tiny_config(2));
    const std::size_t n = model.latent_elements();
    TensorList<float> zeros{Tensor<float>({4, 4, 4}), Tensor<float>({6, 2, 2})};
    auto out = model.encode(zeros);
    EXPECT_EQ(nll_loss(out.latents, out.total_logdet, n), 0.0);
    TensorList<float> ones{Tensor<float>({4, 4, 4}, 1.f), Tensor<float>({6, 2, 2}, 1.f)};
    out = model.encode(ones);
    EXPECT_DOUBLE_EQ(nll_loss(out.latents, out.total_logdet, n), 0.5);
}

TEST(NllLoss, StraightLineReevaluation) {
    MSFlowModel<float> model(tiny_config(3));
    std::mt19937_64 rng(3);
    oracle::randomize(model.parameters(), rng, 0.2);
    auto y = tiny_data(1, 3)[0];
    auto out = model.encode(y);
    double sq = 0;
    for (const auto& z : out.latents)
        for (float v : z.values()) sq += static_cast<double>(v) * v;
    const double expect = (sq / 2 - out.total_logdet) / static_cast<double>(model.latent_elements());
    EXPECT_NEAR(nll_loss(out.latents, out.total_logdet, model.latent_elements()), expect, 1e-12);
    EXPECT_THROW(nll_loss(out.latents, NAN, 10), NumericError);
}

TEST(Train, ZeroEpochsIsNoOp) {
    MSFlowModel<float> model(tiny_config(4));
    const auto before = parameter_checksum(model);
    TrainConfig cfg;
    cfg.epochs = 0;
    auto log = train(model, tiny_data(3, 4), std::vector<Label>(3, Label::normal), cfg);
    EXPECT_TRUE(log.epochs.empty());
    EXPECT_TRUE(log.step_lr.empty());
    EXPECT_EQ(parameter_checksum(model), before);
}

TEST(Train, RejectsAnomalousSamples) {
    MSFlowModel<float> model(tiny_config(5));
    TrainConfig cfg;
    cfg.epochs = 1;
    EXPECT_THROW(train(model, tiny_data(2, 5), {Label::normal, Label::anomalous}, cfg), DataError);
}

TEST(Train, SameSeedSameParameters) {
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 3;
    cfg.lr = 1e-3;
    cfg.seed = 42;
    const auto data = tiny_data(7, 6);
    const std::vector<Label> labels(7, Label::normal);
    MSFlowModel<float> a(tiny_config(6)), b(tiny_config(6));
    auto la = train(a, data, labels, cfg);
    auto lb = train(b, data, labels, cfg);
    EXPECT_EQ(parameter_checksum(a), parameter_checksum(b));
    ASSERT_EQ(la.epochs.size(), 3u);
    for (std::size_t e = 0; e < 3; ++e) {
        EXPECT_EQ(la.epochs[e].loss, lb.epochs[e].loss);
        EXPECT_EQ(la.epochs[e].checksum, lb.epochs[e].checksum);
    }
    auto pa = a.parameters(), pb = b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value);
    cfg.seed = 43;
    MSFlowModel<float> c(tiny_config(6));
    train(c, data, labels, cfg);
    EXPECT_NE(parameter_checksum(c), parameter_checksum(a));
}

TEST(Train, InitialLossIsHalfSecondMoment) {
    const auto data = tiny_data(5, 7, 1.7);
    MSFlowModel<float> model(tiny_config(7));
    double moment = 0;
    for (const auto& p : data)
        for (const auto& t : p) moment += squared_norm(t);
    moment /= static_cast<double>(data.size() * model.latent_elements());
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 5;
    auto log = train(model, data, std::vector<Label>(5, Label::normal), cfg);
    EXPECT_NEAR(log.initial_loss, moment / 2, 1e-6 * moment);
}

TEST(Train, HeldOutLossDecreases) {
    const auto data = tiny_data(32, 8, 2.0);
    const auto held_out = tiny_data(16, 9, 2.0);
    MSFlowModel<float> model(tiny_config(8));
    TrainConfig cfg;
    cfg.epochs = 8;
    cfg.batch_size = 8;
    cfg.lr = 3e-3;
    std::vector<double> held;
    held.push_back(mean_nll(model, held_out));
    train(model, data, std::vector<Label>(32, Label::normal), cfg,
          [&](const EpochLog&) { held.push_back(mean_nll(model, held_out)); });
    EXPECT_LT(held.back(), held[1]);
    EXPECT_LT(held[1], held.front());
}

TEST(Train, NonFiniteInputAbortsWithContext) {
    auto data = tiny_data(4, 10);
    data[2][1][3] = NAN;
    MSFlowModel<float> model(tiny_config(10));
    std::mt19937_64 rng(10);
    oracle::randomize(model.parameters(), rng, 0.1);
    TrainConfig cfg;
    cfg.epochs = 1;
    try {
        train(model, data, std::vector<Label>(4, Label::normal), cfg);
        FAIL();
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("sample 2"), std::string::npos) << e.what();
    }
}

TEST(Train, GaussianDensityReachesEntropy) {
    // x = A n + mu with n standard normal, as 2-channel 1x1 pyramids.
    const double a11 = 1.5, a21 = 0.9, a22 = 0.4, mu1 = 1.0, mu2 = -2.0;
    const auto sample = [&](std::size_t n, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> g;
        std::vector<TensorList<float>> out;
        for (std::size_t i = 0; i < n; ++i) {
            const double n1 = g(rng), n2 = g(rng);
            out.push_back({Tensor<float>({2, 1, 1}, {static_cast<float>(a11 * n1 + mu1),
                                                     static_cast<float>(a21 * n1 + a22 * n2 + mu2)})});
        }
        return out;
    };
    ModelConfig c;
    c.scales = {{2, 1, 1, 4}};
    c.pos_channels = 0;
    c.fusion = false;
    c.hidden_channels = 16;
    c.seed = 11;
    MSFlowModel<float> model(c);
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.batch_size = 16;
    cfg.lr = 1e-2;
    const auto data = sample(800, 11);
    auto log = train(model, data, std::vector<Label>(data.size(), Label::normal), cfg);
    EXPECT_EQ(log.step_lr.size(), 500u);
    // Per-element differential entropy: 0.5 log(2 pi e) + log|det A| / 2.
    const double entropy = 0.5 * std::log(2 * std::numbers::pi * std::numbers::e) + std::log(a11 * a22) / 2;
    const double nll = mean_nll(model, sample(2000, 12)) + 0.5 * std::log(2 * std::numbers::pi);
    EXPECT_LT(std::abs(nll - entropy), 0.3) << "nll " << nll << " entropy " << entropy;
}

TEST(TrainLogCsv, Columns) {
    const auto p = std::filesystem::temp_directory_path() / "msflow_test_train_log.csv";
    TrainLog log;
    log.epochs.push_back({0, -1.25, 1e-4, 2.5, 0xabcdefull});
    write_train_log_csv(p, log);
    std::ifstream in(p);
    std::string header, row;
    std::getline(in, header);
    std::getline(in, row);
    EXPECT_EQ(header, "epoch,loss,lr,seconds,checksum");
    EXPECT_EQ(row, "0,-1.25,0.0001,2.500,0x0000000000abcdef");
}

TEST(ClipGlobalNorm, ScalesDownOnlyAboveThreshold) {
    Parameter<double> a("a", Tensor<double>({2})), b("b", Tensor<double>({1}));
    a.grad = Tensor<double>({2}, {3.0, 0.0});
    b.grad = Tensor<double>({1}, {4.0});
    std::vector<Parameter<double>*> ps{&a, &b};
    EXPECT_DOUBLE_EQ(clip_global_norm(ps, 10.0), 5.0);
    EXPECT_DOUBLE_EQ(a.grad[0], 3.0);
    EXPECT_DOUBLE_EQ(clip_global_norm(ps, 1.0), 5.0);
    EXPECT_NEAR(a.grad[0], 0.6, 1e-12);
    EXPECT_NEAR(b.grad[0], 0.8, 1e-12);
}
