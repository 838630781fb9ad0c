#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "msflow/coupling.hpp"
#include "msflow/kernels.hpp"
#include "msflow/optim.hpp"
#include "msflow/tensor.hpp"

namespace msflow {

template <typename T>
using TensorList = std::vector<Tensor<T>>;

template <typename T>
struct MultiFlowResult {
    TensorList<T> value;
    double logdet = 0.0;
};

/// Spatial resize used by the fusion network: integer-factor average
/// pooling to shrink, bilinear interpolation to grow.
template <typename T>
Tensor<T> resize_spatial(const Tensor<T>& t, std::size_t h, std::size_t w) {
    if (t.height() == h && t.width() == w) return t;
    if (h <= t.height() && w <= t.width()) {
        if (t.height() % h != 0 || t.width() % w != 0 || t.height() / h != t.width() / w) {
            throw ShapeError("resize_spatial: " + shape_string(t.dims()) + " is not an integer multiple of " +
                             std::to_string(h) + "x" + std::to_string(w));
        }
        const std::size_t f = t.height() / h;
        return avg_pool2d(t, f, f, 0);
    }
    if (h >= t.height() && w >= t.width()) return bilinear_upsample(t, h, w);
    throw ShapeError("resize_spatial: mixed shrink/grow from " + shape_string(t.dims()));
}

template <typename T>
Tensor<T> resize_spatial_backward(const Tensor<T>& grad, const Shape& input_dims) {
    const std::size_t h = input_dims.at(1), w = input_dims.at(2);
    if (grad.height() == h && grad.width() == w) return grad;
    if (grad.height() <= h) {
        const std::size_t f = h / grad.height();
        return avg_pool2d_backward(grad, input_dims, f, f, 0);
    }
    return bilinear_upsample_backward(grad, input_dims);
}

/// Cross-scale mixer: resize every input to the target size, concatenate,
/// Conv3 -> LN -> ReLU -> Conv3 with a 4x narrower middle, split back,
/// resize to each input's size and add to that input.
template <typename T>
class FusionNetwork {
public:
    struct Cache {
        std::vector<Shape> input_dims;
        Tensor<T> concat;
        Tensor<T> hidden;
        LayerNormCache<T> ln;
        Tensor<T> normalized;
        Tensor<T> activated;
    };

    FusionNetwork() = default;

    FusionNetwork(const std::string& prefix, std::vector<std::size_t> channels, std::size_t target_h,
                  std::size_t target_w, std::mt19937_64& rng)
        : channels_(std::move(channels)), target_h_(target_h), target_w_(target_w) {
        std::size_t total = 0;
        for (auto c : channels_) total += c;
        const std::size_t mid = std::max<std::size_t>(1, total / 4);
        conv1_w_ = Parameter<T>(prefix + "/conv1/weight", fan_in_uniform<T>({mid, total, 3, 3}, total * 9, rng));
        conv1_b_ = Parameter<T>(prefix + "/conv1/bias", fan_in_uniform<T>({mid}, total * 9, rng));
        ln_gain_ = Parameter<T>(prefix + "/norm/gain", Tensor<T>({mid}, T(1)));
        ln_bias_ = Parameter<T>(prefix + "/norm/bias", Tensor<T>({mid}));
        conv2_w_ = Parameter<T>(prefix + "/conv2/weight", Tensor<T>({total, mid, 3, 3}));
        conv2_b_ = Parameter<T>(prefix + "/conv2/bias", Tensor<T>({total}));
    }

    std::size_t middle_channels() const { return conv1_w_.value.dim(0); }
    std::size_t total_channels() const { return conv1_w_.value.dim(1); }
    std::size_t target_height() const { return target_h_; }
    std::size_t target_width() const { return target_w_; }

    TensorList<T> forward(const std::vector<const Tensor<T>*>& inputs, Cache* cache = nullptr) const {
        if (inputs.size() != channels_.size()) {
            throw ShapeError("fusion network expects " + std::to_string(channels_.size()) + " scales, got " +
                             std::to_string(inputs.size()));
        }
        TensorList<T> resized;
        resized.reserve(inputs.size());
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            if (inputs[i]->channels() != channels_[i]) {
                throw ShapeError("fusion network scale " + std::to_string(i) + ": expected " +
                                 std::to_string(channels_[i]) + " channels, got " + shape_string(inputs[i]->dims()));
            }
            resized.push_back(resize_spatial(*inputs[i], target_h_, target_w_));
        }
        std::vector<const Tensor<T>*> parts;
        for (const auto& r : resized) parts.push_back(&r);
        Tensor<T> concat = concat_channels(parts);
        Tensor<T> hidden = conv2d(concat, conv1_w_.value, conv1_b_.value, 1);
        LayerNormCache<T> ln;
        Tensor<T> normalized = layer_norm(hidden, ln_gain_.value, ln_bias_.value, cache ? &ln : nullptr);
        Tensor<T> activated = relu(normalized);
        Tensor<T> mixed = conv2d(activated, conv2_w_.value, conv2_b_.value, 1);

        TensorList<T> out;
        std::size_t offset = 0;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            Tensor<T> chunk = slice_channels(mixed, offset, channels_[i]);
            offset += channels_[i];
            Tensor<T> back = resize_spatial(chunk, inputs[i]->height(), inputs[i]->width());
            back += *inputs[i];
            out.push_back(std::move(back));
        }
        if (cache) {
            cache->input_dims.clear();
            for (const auto* in : inputs) cache->input_dims.push_back(in->dims());
            cache->concat = std::move(concat);
            cache->hidden = std::move(hidden);
            cache->ln = std::move(ln);
            cache->normalized = std::move(normalized);
            cache->activated = std::move(activated);
        }
        return out;
    }

    TensorList<T> backward(const TensorList<T>& grad_out, const Cache& cache) {
        TensorList<T> grad_in;
        std::vector<Tensor<T>> chunk_grads;
        for (std::size_t i = 0; i < grad_out.size(); ++i) {
            grad_in.push_back(grad_out[i]);  // residual path
            const Shape chunk_dims{channels_[i], target_h_, target_w_};
            chunk_grads.push_back(resize_spatial_backward(grad_out[i], chunk_dims));
        }
        std::vector<const Tensor<T>*> parts;
        for (const auto& c : chunk_grads) parts.push_back(&c);
        Tensor<T> g_mixed = concat_channels(parts);

        auto g2 = conv2d_backward(g_mixed, cache.activated, conv2_w_.value, 1);
        conv2_w_.accumulate(g2.weight);
        conv2_b_.accumulate(g2.bias);
        Tensor<T> g_norm = relu_backward(g2.input, cache.normalized);
        auto gl = layer_norm_backward(g_norm, ln_gain_.value, cache.ln);
        ln_gain_.accumulate(gl.gain);
        ln_bias_.accumulate(gl.bias);
        auto g1 = conv2d_backward(gl.input, cache.concat, conv1_w_.value, 1);
        conv1_w_.accumulate(g1.weight);
        conv1_b_.accumulate(g1.bias);

        std::size_t offset = 0;
        for (std::size_t i = 0; i < grad_out.size(); ++i) {
            Tensor<T> g_resized = slice_channels(g1.input, offset, channels_[i]);
            offset += channels_[i];
            grad_in[i] += resize_spatial_backward(g_resized, cache.input_dims[i]);
        }
        return grad_in;
    }

    void collect(std::vector<Parameter<T>*>& out) {
        for (auto* p : {&conv1_w_, &conv1_b_, &ln_gain_, &ln_bias_, &conv2_w_, &conv2_b_}) out.push_back(p);
    }

private:
    std::vector<std::size_t> channels_;
    std::size_t target_h_ = 0, target_w_ = 0;
    Parameter<T> conv1_w_, conv1_b_, ln_gain_, ln_bias_, conv2_w_, conv2_b_;
};

/// One multi-scale affine coupling: the pass-through halves of all scales
/// drive a shared fusion network, then per-scale convolutions produce the
/// scale and shift for each scale's active half.
template <typename T>
class FusionCoupling {
public:
    struct Cache {
        typename FusionNetwork<T>::Cache net;
        TensorList<T> fused;
        TensorList<T> s_raw;
        TensorList<T> scale;
        TensorList<T> active_out;
    };

    FusionCoupling() = default;

    FusionCoupling(const std::string& prefix, const std::vector<std::size_t>& channels, bool swap, double clamp,
                   std::size_t target_h, std::size_t target_w, std::mt19937_64& rng)
        : clamp_(clamp) {
        std::vector<std::size_t> pass_counts;
        for (std::size_t i = 0; i < channels.size(); ++i) {
            const std::size_t c = channels[i];
            if (c < 2) throw ShapeError("fusion coupling needs >= 2 channels per scale");
            const std::size_t d = c / 2;
            Split sp;
            sp.channels = c;
            sp.pass_begin = swap ? d : 0;
            sp.pass_count = swap ? c - d : d;
            sp.active_begin = swap ? 0 : d;
            sp.active_count = c - sp.pass_count;
            splits_.push_back(sp);
            pass_counts.push_back(sp.pass_count);
        }
        net_ = FusionNetwork<T>(prefix + "/fusion_net", pass_counts, target_h, target_w, rng);
        for (std::size_t i = 0; i < splits_.size(); ++i) {
            const auto& sp = splits_[i];
            const std::string p = prefix + "/scale/" + std::to_string(i);
            heads_.push_back({Parameter<T>(p + "/g_s/weight", Tensor<T>({sp.active_count, sp.pass_count, 3, 3})),
                              Parameter<T>(p + "/g_s/bias", Tensor<T>({sp.active_count})),
                              Parameter<T>(p + "/g_t/weight", Tensor<T>({sp.active_count, sp.pass_count, 3, 3})),
                              Parameter<T>(p + "/g_t/bias", Tensor<T>({sp.active_count}))});
        }
    }

    const FusionNetwork<T>& network() const { return net_; }

    MultiFlowResult<T> encode(const TensorList<T>& x, Cache* cache = nullptr) const {
        check(x, "fusion encode");
        TensorList<T> pass, active;
        split_all(x, pass, active);
        std::vector<const Tensor<T>*> pass_ptrs;
        for (const auto& p : pass) pass_ptrs.push_back(&p);
        TensorList<T> fused = net_.forward(pass_ptrs, cache ? &cache->net : nullptr);

        MultiFlowResult<T> r;
        if (cache) {
            cache->s_raw.clear();
            cache->scale.clear();
            cache->active_out.clear();
        }
        for (std::size_t i = 0; i < splits_.size(); ++i) {
            const auto& h = heads_[i];
            Tensor<T> s_raw = conv2d(fused[i], h.s_w.value, h.s_b.value, 1);
            Tensor<T> t = conv2d(fused[i], h.t_w.value, h.t_b.value, 1);
            Tensor<T> scale = Tensor<T>::zeros_like(active[i]);
            Tensor<T> out = Tensor<T>::zeros_like(active[i]);
            for (std::size_t j = 0; j < out.size(); ++j) {
                const T s = soft_clamp(s_raw[j], clamp_);
                scale[j] = std::exp(-s);
                out[j] = (active[i][j] - t[j]) * scale[j];
                r.logdet -= static_cast<double>(s);
            }
            require_finite(out, "fusion encode");
            r.value.push_back(assemble(i, pass[i], out));
            if (cache) {
                cache->s_raw.push_back(std::move(s_raw));
                cache->scale.push_back(std::move(scale));
                cache->active_out.push_back(std::move(out));
            }
        }
        if (cache) cache->fused = std::move(fused);
        return r;
    }

    MultiFlowResult<T> decode(const TensorList<T>& z) const {
        check(z, "fusion decode");
        TensorList<T> pass, active;
        split_all(z, pass, active);
        std::vector<const Tensor<T>*> pass_ptrs;
        for (const auto& p : pass) pass_ptrs.push_back(&p);
        TensorList<T> fused = net_.forward(pass_ptrs);
        MultiFlowResult<T> out;
        for (std::size_t i = 0; i < splits_.size(); ++i) {
            const auto& h = heads_[i];
            Tensor<T> s_raw = conv2d(fused[i], h.s_w.value, h.s_b.value, 1);
            Tensor<T> t = conv2d(fused[i], h.t_w.value, h.t_b.value, 1);
            Tensor<T> x = Tensor<T>::zeros_like(active[i]);
            for (std::size_t j = 0; j < x.size(); ++j) {
                const T s = soft_clamp(s_raw[j], clamp_);
                x[j] = active[i][j] * std::exp(s) + t[j];
                out.logdet += static_cast<double>(s);
            }
            require_finite(x, "fusion decode");
            out.value.push_back(assemble(i, pass[i], x));
        }
        return out;
    }

    TensorList<T> backward(const TensorList<T>& grad_z, double logdet_coeff, const Cache& cache) {
        const T ld = static_cast<T>(logdet_coeff);
        TensorList<T> g_fused, g_pass_direct, g_active_in;
        for (std::size_t i = 0; i < splits_.size(); ++i) {
            const auto& sp = splits_[i];
            auto& h = heads_[i];
            const Tensor<T> g_out = slice_channels(grad_z[i], sp.active_begin, sp.active_count);
            g_pass_direct.push_back(slice_channels(grad_z[i], sp.pass_begin, sp.pass_count));
            Tensor<T> g_s = Tensor<T>::zeros_like(g_out);
            Tensor<T> g_t = Tensor<T>::zeros_like(g_out);
            Tensor<T> g_in = Tensor<T>::zeros_like(g_out);
            for (std::size_t j = 0; j < g_out.size(); ++j) {
                const T g = g_out[j];
                g_in[j] = g * cache.scale[i][j];
                g_s[j] = (-g * cache.active_out[i][j] - ld) * soft_clamp_derivative(cache.s_raw[i][j], clamp_);
                g_t[j] = -g * cache.scale[i][j];
            }
            g_active_in.push_back(std::move(g_in));
            auto bs = conv2d_backward(g_s, cache.fused[i], h.s_w.value, 1);
            auto bt = conv2d_backward(g_t, cache.fused[i], h.t_w.value, 1);
            h.s_w.accumulate(bs.weight);
            h.s_b.accumulate(bs.bias);
            h.t_w.accumulate(bt.weight);
            h.t_b.accumulate(bt.bias);
            bs.input += bt.input;
            g_fused.push_back(std::move(bs.input));
        }
        TensorList<T> g_pass = net_.backward(g_fused, cache.net);
        TensorList<T> grad_x;
        for (std::size_t i = 0; i < splits_.size(); ++i) {
            g_pass[i] += g_pass_direct[i];
            grad_x.push_back(assemble(i, g_pass[i], g_active_in[i]));
        }
        return grad_x;
    }

    void collect(std::vector<Parameter<T>*>& out) {
        net_.collect(out);
        for (auto& h : heads_) {
            for (auto* p : {&h.s_w, &h.s_b, &h.t_w, &h.t_b}) out.push_back(p);
        }
    }

private:
    struct Split {
        std::size_t channels, pass_begin, pass_count, active_begin, active_count;
    };
    struct Head {
        Parameter<T> s_w, s_b, t_w, t_b;
    };

    void check(const TensorList<T>& x, const char* op) const {
        if (x.size() != splits_.size()) {
            throw ShapeError(std::string(op) + ": expected " + std::to_string(splits_.size()) + " scales, got " +
                             std::to_string(x.size()));
        }
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i].require_rank(3, op);
            if (x[i].channels() != splits_[i].channels) {
                throw ShapeError(std::string(op) + ": scale " + std::to_string(i) + " dims " +
                                 shape_string(x[i].dims()));
            }
        }
    }

    void split_all(const TensorList<T>& x, TensorList<T>& pass, TensorList<T>& active) const {
        for (std::size_t i = 0; i < x.size(); ++i) {
            pass.push_back(slice_channels(x[i], splits_[i].pass_begin, splits_[i].pass_count));
            active.push_back(slice_channels(x[i], splits_[i].active_begin, splits_[i].active_count));
        }
    }

    Tensor<T> assemble(std::size_t i, const Tensor<T>& pass, const Tensor<T>& active) const {
        const auto& sp = splits_[i];
        Tensor<T> out({sp.channels, pass.height(), pass.width()});
        std::copy_n(pass.data(), pass.size(), out.channel(sp.pass_begin));
        std::copy_n(active.data(), active.size(), out.channel(sp.active_begin));
        return out;
    }

    double clamp_ = kDefaultClamp;
    std::vector<Split> splits_;
    FusionNetwork<T> net_;
    std::vector<Head> heads_;
};

/// Two multi-scale coupling sub-layers, one per orientation.
template <typename T>
class FusionFlow {
public:
    struct Cache {
        typename FusionCoupling<T>::Cache first, second;
    };

    FusionFlow() = default;

    FusionFlow(const std::string& prefix, const std::vector<std::size_t>& channels, double clamp, std::size_t target_h,
               std::size_t target_w, std::mt19937_64& rng)
        : first_(prefix + "/layer/0", channels, false, clamp, target_h, target_w, rng),
          second_(prefix + "/layer/1", channels, true, clamp, target_h, target_w, rng) {}

    const FusionCoupling<T>& first() const { return first_; }
    const FusionCoupling<T>& second() const { return second_; }

    MultiFlowResult<T> encode(const TensorList<T>& x, Cache* cache = nullptr) const {
        auto a = first_.encode(x, cache ? &cache->first : nullptr);
        auto b = second_.encode(a.value, cache ? &cache->second : nullptr);
        return {std::move(b.value), a.logdet + b.logdet};
    }

    MultiFlowResult<T> decode(const TensorList<T>& z) const {
        auto b = second_.decode(z);
        auto a = first_.decode(b.value);
        return {std::move(a.value), a.logdet + b.logdet};
    }

    TensorList<T> backward(const TensorList<T>& grad_z, double logdet_coeff, const Cache& cache) {
        return first_.backward(second_.backward(grad_z, logdet_coeff, cache.second), logdet_coeff, cache.first);
    }

    void collect(std::vector<Parameter<T>*>& out) {
        first_.collect(out);
        second_.collect(out);
    }

private:
    FusionCoupling<T> first_, second_;
};

}  // namespace msflow
