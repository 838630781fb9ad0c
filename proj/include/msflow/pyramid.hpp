#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "msflow/error.hpp"
#include "msflow/fusion.hpp"
#include "msflow/kernels.hpp"

namespace msflow {

inline constexpr std::size_t kPyramidPoolKernel = 3;
inline constexpr std::size_t kPyramidPoolStride = 2;
inline constexpr std::size_t kPyramidPoolPad = 1;
inline constexpr std::size_t kMaxStages = 3;

/// Checks stage maps: 1..3 rank-3 maps, strictly increasing channels,
/// spatial size halving (floor or ceil) between consecutive stages.
template <typename T>
void validate_stages(const std::vector<Tensor<T>>& stages) {
    if (stages.empty() || stages.size() > kMaxStages) {
        throw DataError("expected 1 to " + std::to_string(kMaxStages) + " feature stages, got " +
                        std::to_string(stages.size()) + " (stage-4 features are not supported)");
    }
    for (std::size_t i = 0; i < stages.size(); ++i) {
        if (stages[i].rank() != 3) {
            throw DataError("stage " + std::to_string(i + 1) + " must be [C,H,W], got " + shape_string(stages[i].dims()));
        }
        if (i == 0) continue;
        const auto& prev = stages[i - 1];
        const auto& cur = stages[i];
        if (cur.channels() <= prev.channels()) {
            throw DataError("stage channels must strictly increase, got " + std::to_string(prev.channels()) +
                            " then " + std::to_string(cur.channels()));
        }
        const auto halves = [](std::size_t big, std::size_t small) { return small == big / 2 || small == (big + 1) / 2; };
        if (!halves(prev.height(), cur.height()) || !halves(prev.width(), cur.width())) {
            throw DataError("stage spatial sizes must halve: " + shape_string(prev.dims()) + " then " +
                            shape_string(cur.dims()));
        }
    }
}

/// y_i = AvgPool(k=3, s=2, p=1)(h_i) for every stage map.
template <typename T>
TensorList<T> build_pyramid(const std::vector<Tensor<T>>& stages) {
    validate_stages(stages);
    TensorList<T> pyramid;
    pyramid.reserve(stages.size());
    for (const auto& h : stages) pyramid.push_back(avg_pool2d(h, kPyramidPoolKernel, kPyramidPoolStride, kPyramidPoolPad));
    return pyramid;
}

/// Frozen random three-stage convolutional feature extractor.
///
/// Stage i: conv3x3 (pad 1) -> 2x2 average pool -> ReLU, so the stage
/// outputs sit at 1/2, 1/4 and 1/8 of the input resolution. Weights are
/// drawn once from the seed.
class ToyExtractor {
public:
    static constexpr std::array<std::size_t, 3> kChannels{16, 32, 64};
    static constexpr std::size_t kInputChannels = 3;
    static constexpr std::size_t kAlignment = 16;
    static constexpr float kInputMean = 0.5f;
    static constexpr float kInputStd = 0.25f;

    explicit ToyExtractor(std::uint64_t seed) : seed_(seed) {
        std::mt19937_64 rng(seed);
        std::size_t in = kInputChannels;
        for (std::size_t i = 0; i < kChannels.size(); ++i) {
            const std::size_t out = kChannels[i];
            // Uniform with the variance of He init.
            const float bound = static_cast<float>(std::sqrt(6.0 / static_cast<double>(in * 9)));
            std::uniform_real_distribution<float> dist(-bound, bound);
            weights_[i] = Tensor<float>({out, in, 3, 3});
            for (auto& v : weights_[i].values()) v = dist(rng);
            biases_[i] = Tensor<float>({out});
            for (auto& v : biases_[i].values()) v = 0.1f * dist(rng);
            in = out;
        }
    }

    std::uint64_t seed() const { return seed_; }

    std::vector<Tensor<float>> extract(const Tensor<float>& image) const {
        if (image.rank() != 3 || image.channels() != kInputChannels) {
            throw ShapeError("toy extractor expects [3,H,W], got " + shape_string(image.dims()));
        }
        if (image.height() % kAlignment != 0 || image.width() % kAlignment != 0) {
            throw ShapeError("toy extractor needs H and W divisible by " + std::to_string(kAlignment) + ", got " +
                             shape_string(image.dims()));
        }
        Tensor<float> x = image;
        for (auto& v : x.values()) v = (v - kInputMean) / kInputStd;
        std::vector<Tensor<float>> stages;
        for (std::size_t i = 0; i < kChannels.size(); ++i) {
            x = relu(avg_pool2d(conv2d(x, weights_[i], biases_[i], 1), 2, 2, 0));
            stages.push_back(x);
        }
        return stages;
    }

private:
    std::uint64_t seed_;
    std::array<Tensor<float>, 3> weights_;
    std::array<Tensor<float>, 3> biases_;
};

}  // namespace msflow
