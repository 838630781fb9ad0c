#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "msflow/coupling.hpp"
#include "msflow/fusion.hpp"
#include "msflow/kernels.hpp"

namespace msflow {

struct ScaleSpec {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t blocks = 0;

    friend bool operator==(const ScaleSpec&, const ScaleSpec&) = default;
};

/// Architecture of a multi-scale flow. Everything needed to rebuild a
/// model from a checkpoint lives here.
struct ModelConfig {
    std::vector<ScaleSpec> scales;
    std::size_t pos_channels = 64;
    double clamp = kDefaultClamp;
    bool fusion = true;
    std::size_t fusion_size = 0;      // 0: height of the smallest scale
    std::size_t hidden_channels = 0;  // 0: the st-network's pass-through width
    std::uint64_t seed = 0;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline constexpr std::size_t kMaxScales = 3;

inline const std::vector<std::size_t>& default_block_counts() {
    static const std::vector<std::size_t> counts{2, 5, 8};
    return counts;
}

/// Builds a config for the given per-scale (channels, height, width)
/// using the default 2/5/8 block layout.
inline ModelConfig make_model_config(const std::vector<Shape>& pyramid_dims, std::size_t pos_channels = 64) {
    ModelConfig cfg;
    cfg.pos_channels = pos_channels;
    for (std::size_t i = 0; i < pyramid_dims.size(); ++i) {
        const auto& d = pyramid_dims[i];
        if (d.size() != 3) throw ShapeError("pyramid level dims must be rank 3, got " + shape_string(d));
        const std::size_t blocks = i < default_block_counts().size() ? default_block_counts()[i] : 8;
        cfg.scales.push_back({d[0], d[1], d[2], blocks});
    }
    return cfg;
}

template <typename T>
struct ModelOutput {
    TensorList<T> latents;
    std::vector<double> parallel_logdets;
    double fusion_logdet = 0.0;
    double total_logdet = 0.0;
};

/// Parallel per-scale flow chains followed by an optional fusion flow.
template <typename T>
class MSFlowModel {
public:
    struct Cache {
        std::vector<typename FlowChain<T>::Cache> chains;
        typename FusionFlow<T>::Cache fusion;
    };

    explicit MSFlowModel(ModelConfig config) : config_(std::move(config)) {
        validate();
        std::mt19937_64 rng(config_.seed);
        std::vector<std::size_t> channels;
        for (std::size_t i = 0; i < config_.scales.size(); ++i) {
            const auto& s = config_.scales[i];
            chains_.emplace_back("parallel/" + std::to_string(i), s.blocks, s.channels, config_.pos_channels,
                                 config_.clamp, config_.hidden_channels, rng);
            if (config_.pos_channels > 0) {
                pos_.push_back(pos_encoding_2d<T>(config_.pos_channels, s.height, s.width));
            } else {
                pos_.emplace_back();
            }
            channels.push_back(s.channels);
        }
        if (config_.fusion) {
            const auto [th, tw] = fusion_target();
            fusion_.emplace("fusion", channels, config_.clamp, th, tw, rng);
        }
    }

    const ModelConfig& config() const { return config_; }
    std::size_t scale_count() const { return config_.scales.size(); }
    const FlowChain<T>& chain(std::size_t i) const { return chains_.at(i); }
    const std::optional<FusionFlow<T>>& fusion() const { return fusion_; }

    /// Spatial size the fusion network pools every scale to.
    std::pair<std::size_t, std::size_t> fusion_target() const {
        auto smallest = std::min_element(config_.scales.begin(), config_.scales.end(),
                                         [](const auto& a, const auto& b) { return a.height < b.height; });
        if (config_.fusion_size == 0) return {smallest->height, smallest->width};
        const std::size_t h = config_.fusion_size;
        if ((h * smallest->width) % smallest->height != 0) {
            throw ConfigError("fusion size " + std::to_string(h) + " does not preserve the aspect ratio of " +
                              std::to_string(smallest->height) + "x" + std::to_string(smallest->width));
        }
        return {h, h * smallest->width / smallest->height};
    }

    std::vector<Shape> input_dims() const {
        std::vector<Shape> d;
        for (const auto& s : config_.scales) d.push_back({s.channels, s.height, s.width});
        return d;
    }

    std::size_t latent_elements() const {
        std::size_t n = 0;
        for (const auto& s : config_.scales) n += s.channels * s.height * s.width;
        return n;
    }

    FlowResult<T> encode_scale(const Tensor<T>& y, std::size_t scale,
                               typename FlowChain<T>::Cache* cache = nullptr) const {
        check_scale(y, scale, "parallel encode");
        return chains_.at(scale).encode(y, cond(scale), cache);
    }

    FlowResult<T> decode_scale(const Tensor<T>& z, std::size_t scale) const {
        check_scale(z, scale, "parallel decode");
        return chains_.at(scale).decode(z, cond(scale));
    }

    ModelOutput<T> encode(const TensorList<T>& pyramid, Cache* cache = nullptr) const {
        check_pyramid(pyramid, "model encode");
        ModelOutput<T> out;
        if (cache) cache->chains.assign(chains_.size(), {});
        for (std::size_t i = 0; i < chains_.size(); ++i) {
            auto r = encode_scale(pyramid[i], i, cache ? &cache->chains[i] : nullptr);
            out.latents.push_back(std::move(r.value));
            out.parallel_logdets.push_back(r.logdet);
        }
        if (fusion_) {
            auto f = fusion_->encode(out.latents, cache ? &cache->fusion : nullptr);
            out.latents = std::move(f.value);
            out.fusion_logdet = f.logdet;
        }
        out.total_logdet = std::accumulate(out.parallel_logdets.begin(), out.parallel_logdets.end(), 0.0) +
                           out.fusion_logdet;
        return out;
    }

    /// Inverse of encode; total_logdet is that of the decode map.
    ModelOutput<T> decode(const TensorList<T>& latents) const {
        check_pyramid(latents, "model decode");
        ModelOutput<T> out;
        TensorList<T> z = latents;
        if (fusion_) {
            auto f = fusion_->decode(z);
            z = std::move(f.value);
            out.fusion_logdet = f.logdet;
        }
        for (std::size_t i = 0; i < chains_.size(); ++i) {
            auto r = decode_scale(z[i], i);
            out.latents.push_back(std::move(r.value));
            out.parallel_logdets.push_back(r.logdet);
        }
        out.total_logdet = std::accumulate(out.parallel_logdets.begin(), out.parallel_logdets.end(), 0.0) +
                           out.fusion_logdet;
        return out;
    }

    /// Accumulates parameter gradients of L given dL/dlatents and dL/dlogdet;
    /// returns dL/dpyramid.
    TensorList<T> backward(const TensorList<T>& grad_latents, double logdet_coeff, const Cache& cache) {
        TensorList<T> g = grad_latents;
        if (fusion_) g = fusion_->backward(g, logdet_coeff, cache.fusion);
        for (std::size_t i = 0; i < chains_.size(); ++i) g[i] = chains_[i].backward(g[i], logdet_coeff, cache.chains[i]);
        return g;
    }

    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        for (auto& c : chains_) c.collect(out);
        if (fusion_) fusion_->collect(out);
        return out;
    }

    std::vector<const Parameter<T>*> parameters() const {
        auto params = const_cast<MSFlowModel*>(this)->parameters();
        return {params.begin(), params.end()};
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto* p : parameters()) n += p->value.size();
        return n;
    }

    /// Number of trainable values in the parallel chain of one scale.
    std::size_t scale_parameter_count(std::size_t scale) const {
        std::vector<Parameter<T>*> out;
        const_cast<FlowChain<T>&>(chains_.at(scale)).collect(out);
        std::size_t n = 0;
        for (const auto* p : out) n += p->value.size();
        return n;
    }

    void zero_grad() {
        for (auto* p : parameters()) p->zero_grad();
    }

private:
    void validate() const {
        if (config_.scales.empty() || config_.scales.size() > kMaxScales) {
            throw ConfigError("model needs 1 to " + std::to_string(kMaxScales) + " scales, got " +
                              std::to_string(config_.scales.size()));
        }
        for (const auto& s : config_.scales) {
            if (s.channels < 2 || s.height == 0 || s.width == 0) {
                throw ConfigError("invalid scale dims " + shape_string({s.channels, s.height, s.width}));
            }
        }
        if (config_.pos_channels % 4 != 0) {
            throw ConfigError("positional encoding channels must be a multiple of 4, got " +
                              std::to_string(config_.pos_channels));
        }
    }

    const Tensor<T>* cond(std::size_t scale) const {
        return config_.pos_channels > 0 ? &pos_[scale] : nullptr;
    }

    void check_scale(const Tensor<T>& y, std::size_t scale, const char* op) const {
        const auto& s = config_.scales.at(scale);
        if (y.dims() != Shape{s.channels, s.height, s.width}) {
            throw ShapeError(std::string(op) + ": scale " + std::to_string(scale) + " registered as " +
                             shape_string({s.channels, s.height, s.width}) + ", got " + shape_string(y.dims()));
        }
    }

    void check_pyramid(const TensorList<T>& p, const char* op) const {
        if (p.size() != chains_.size()) {
            throw ShapeError(std::string(op) + ": expected " + std::to_string(chains_.size()) + " scales, got " +
                             std::to_string(p.size()));
        }
        for (std::size_t i = 0; i < p.size(); ++i) check_scale(p[i], i, op);
    }

    ModelConfig config_;
    std::vector<FlowChain<T>> chains_;
    std::vector<Tensor<T>> pos_;
    std::optional<FusionFlow<T>> fusion_;
};

}  // namespace msflow
