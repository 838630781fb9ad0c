#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "msflow/kernels.hpp"
#include "msflow/optim.hpp"
#include "msflow/tensor.hpp"

namespace msflow {

inline constexpr double kDefaultClamp = 1.9;

/// Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename T>
Tensor<T> fan_in_uniform(Shape dims, std::size_t fan_in, std::mt19937_64& rng) {
    Tensor<T> t(std::move(dims));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.values()) v = static_cast<T>(dist(rng));
    return t;
}

/// Soft clamp alpha * tanh(x / alpha); alpha <= 0 disables it.
template <typename T>
T soft_clamp(T x, double alpha) {
    if (alpha <= 0.0) return x;
    return static_cast<T>(alpha * std::tanh(static_cast<double>(x) / alpha));
}

template <typename T>
T soft_clamp_derivative(T x, double alpha) {
    if (alpha <= 0.0) return T(1);
    const double th = std::tanh(static_cast<double>(x) / alpha);
    return static_cast<T>(1.0 - th * th);
}

/// Conv3 -> LN -> ReLU -> Conv3 producing stacked (s, t) maps.
template <typename T>
class StNetwork {
public:
    struct Cache {
        Tensor<T> input;
        Tensor<T> hidden;      // conv_a output
        LayerNormCache<T> ln;
        Tensor<T> normalized;  // LN output, relu input
        Tensor<T> activated;   // relu output
    };

    StNetwork() = default;

    /// Input channels past `grad_channels` are treated as constants: no
    /// gradient is propagated to them.
    StNetwork(const std::string& prefix, std::size_t in_channels, std::size_t hidden, std::size_t out_channels,
              std::mt19937_64& rng, std::size_t grad_channels = static_cast<std::size_t>(-1))
        : grad_channels_(std::min(grad_channels, in_channels)),
          conv_a_w_(prefix + "/conv_a/weight", fan_in_uniform<T>({hidden, in_channels, 3, 3}, in_channels * 9, rng)),
          conv_a_b_(prefix + "/conv_a/bias", fan_in_uniform<T>({hidden}, in_channels * 9, rng)),
          ln_gain_(prefix + "/norm/gain", Tensor<T>({hidden}, T(1))),
          ln_bias_(prefix + "/norm/bias", Tensor<T>({hidden})),
          conv_b_w_(prefix + "/conv_b/weight", Tensor<T>({out_channels, hidden, 3, 3})),
          conv_b_b_(prefix + "/conv_b/bias", Tensor<T>({out_channels})) {}

    std::size_t in_channels() const { return conv_a_w_.value.dim(1); }
    std::size_t hidden_channels() const { return conv_a_w_.value.dim(0); }
    std::size_t out_channels() const { return conv_b_w_.value.dim(0); }

    Tensor<T> forward(const Tensor<T>& input, Cache* cache = nullptr) const {
        if (input.channels() != in_channels()) {
            throw ShapeError("st-network expects " + std::to_string(in_channels()) + " input channels, got " +
                             shape_string(input.dims()));
        }
        Tensor<T> hidden = conv2d(input, conv_a_w_.value, conv_a_b_.value, 1);
        LayerNormCache<T> ln;
        Tensor<T> normalized = layer_norm(hidden, ln_gain_.value, ln_bias_.value, cache ? &ln : nullptr);
        Tensor<T> activated = relu(normalized);
        Tensor<T> out = conv2d(activated, conv_b_w_.value, conv_b_b_.value, 1);
        if (cache) {
            cache->input = input;
            cache->hidden = std::move(hidden);
            cache->ln = std::move(ln);
            cache->normalized = std::move(normalized);
            cache->activated = std::move(activated);
        }
        return out;
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    Tensor<T> backward(const Tensor<T>& grad_out, const Cache& cache) {
        auto gb = conv2d_backward(grad_out, cache.activated, conv_b_w_.value, 1);
        conv_b_w_.accumulate(gb.weight);
        conv_b_b_.accumulate(gb.bias);
        Tensor<T> g_norm = relu_backward(gb.input, cache.normalized);
        auto gl = layer_norm_backward(g_norm, ln_gain_.value, cache.ln);
        ln_gain_.accumulate(gl.gain);
        ln_bias_.accumulate(gl.bias);
        auto ga = conv2d_backward(gl.input, cache.input, conv_a_w_.value, 1, grad_channels_);
        conv_a_w_.accumulate(ga.weight);
        conv_a_b_.accumulate(ga.bias);
        return std::move(ga.input);
    }

    void collect(std::vector<Parameter<T>*>& out) {
        for (auto* p : {&conv_a_w_, &conv_a_b_, &ln_gain_, &ln_bias_, &conv_b_w_, &conv_b_b_}) out.push_back(p);
    }

private:
    std::size_t grad_channels_ = 0;
    Parameter<T> conv_a_w_, conv_a_b_, ln_gain_, ln_bias_, conv_b_w_, conv_b_b_;
};

template <typename T>
struct FlowResult {
    Tensor<T> value;
    double logdet = 0.0;
};

/// Affine coupling on the channel axis.
///
/// Encode keeps the pass-through half and maps the active half by
/// (x - t) * exp(-s); its log|det J| is -sum(s). With `swap` false the
/// pass-through half is channels [0, d), otherwise [d, D), d = floor(D/2).
template <typename T>
class CouplingLayer {
public:
    struct Cache {
        typename StNetwork<T>::Cache st;
        Tensor<T> s_raw;
        Tensor<T> scale;        // exp(-s)
        Tensor<T> active_out;   // encoded active half
    };

    CouplingLayer() = default;

    CouplingLayer(const std::string& prefix, std::size_t channels, std::size_t cond_channels, bool swap, double clamp,
                  std::size_t hidden_override, std::mt19937_64& rng)
        : channels_(channels), cond_channels_(cond_channels), swap_(swap), clamp_(clamp) {
        if (channels < 2) throw ShapeError("coupling layer needs at least 2 channels, got " + std::to_string(channels));
        const std::size_t d = channels / 2;
        pass_begin_ = swap ? d : 0;
        pass_count_ = swap ? channels - d : d;
        active_begin_ = swap ? 0 : d;
        active_count_ = channels - pass_count_;
        const std::size_t hidden = hidden_override ? hidden_override : pass_count_;
        st_ = StNetwork<T>(prefix, pass_count_ + cond_channels, hidden, 2 * active_count_, rng, pass_count_);
    }

    std::size_t channels() const { return channels_; }
    std::size_t cond_channels() const { return cond_channels_; }
    double clamp() const { return clamp_; }
    bool swapped() const { return swap_; }
    std::size_t active_count() const { return active_count_; }
    const StNetwork<T>& st() const { return st_; }

    FlowResult<T> encode(const Tensor<T>& x, const Tensor<T>* cond, Cache* cache = nullptr) const {
        check_input(x, cond, "coupling encode");
        const Tensor<T> pass = slice_channels(x, pass_begin_, pass_count_);
        const Tensor<T> active = slice_channels(x, active_begin_, active_count_);
        Tensor<T> raw = st_.forward(st_input(pass, cond), cache ? &cache->st : nullptr);
        const std::size_t n = active.size();
        Tensor<T> out_active = Tensor<T>::zeros_like(active);
        Tensor<T> scale = Tensor<T>::zeros_like(active);
        double sum_s = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const T s = soft_clamp(raw[i], clamp_);
            const T t = raw[n + i];
            scale[i] = std::exp(-s);
            out_active[i] = (active[i] - t) * scale[i];
            sum_s += static_cast<double>(s);
        }
        require_finite(out_active, "coupling encode");
        FlowResult<T> r{assemble(pass, out_active), -sum_s};
        if (cache) {
            cache->s_raw = slice_channels(raw, 0, active_count_);
            cache->scale = std::move(scale);
            cache->active_out = std::move(out_active);
        }
        return r;
    }

    /// Inverse of encode; the logdet returned is that of the decode map, +sum(s).
    FlowResult<T> decode(const Tensor<T>& z, const Tensor<T>* cond) const {
        check_input(z, cond, "coupling decode");
        const Tensor<T> pass = slice_channels(z, pass_begin_, pass_count_);
        const Tensor<T> active = slice_channels(z, active_begin_, active_count_);
        const Tensor<T> raw = st_.forward(st_input(pass, cond));
        const std::size_t n = active.size();
        Tensor<T> out_active = Tensor<T>::zeros_like(active);
        double sum_s = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const T s = soft_clamp(raw[i], clamp_);
            out_active[i] = active[i] * std::exp(s) + raw[n + i];
            sum_s += static_cast<double>(s);
        }
        require_finite(out_active, "coupling decode");
        return {assemble(pass, out_active), sum_s};
    }

    /// Backpropagates L(z, logdet) given dL/dz and dL/dlogdet.
    Tensor<T> backward(const Tensor<T>& grad_z, double logdet_coeff, const Cache& cache) {
        const Tensor<T> g_pass_out = slice_channels(grad_z, pass_begin_, pass_count_);
        const Tensor<T> g_active_out = slice_channels(grad_z, active_begin_, active_count_);
        const std::size_t n = g_active_out.size();
        Tensor<T> g_active_in = Tensor<T>::zeros_like(g_active_out);
        Tensor<T> g_raw({2 * active_count_, grad_z.height(), grad_z.width()});
        const T ld = static_cast<T>(logdet_coeff);
        for (std::size_t i = 0; i < n; ++i) {
            const T g = g_active_out[i];
            g_active_in[i] = g * cache.scale[i];
            // dz/ds = -z, dlogdet/ds = -1, dz/dt = -exp(-s)
            const T g_s = -g * cache.active_out[i] - ld;
            g_raw[i] = g_s * soft_clamp_derivative(cache.s_raw[i], clamp_);
            g_raw[n + i] = -g * cache.scale[i];
        }
        Tensor<T> g_in = st_.backward(g_raw, cache.st);
        Tensor<T> g_pass = slice_channels(g_in, 0, pass_count_);
        g_pass += g_pass_out;
        return assemble(g_pass, g_active_in);
    }

    void collect(std::vector<Parameter<T>*>& out) { st_.collect(out); }

private:
    void check_input(const Tensor<T>& x, const Tensor<T>* cond, const char* op) const {
        x.require_rank(3, op);
        if (x.channels() != channels_) {
            throw ShapeError(std::string(op) + ": expected " + std::to_string(channels_) + " channels, got " +
                             shape_string(x.dims()));
        }
        const std::size_t got = cond ? cond->channels() : 0;
        if (got != cond_channels_) {
            throw ShapeError(std::string(op) + ": expected " + std::to_string(cond_channels_) +
                             " condition channels, got " + std::to_string(got));
        }
    }

    Tensor<T> st_input(const Tensor<T>& pass, const Tensor<T>* cond) const {
        return cond ? concat_channels(pass, *cond) : pass;
    }

    Tensor<T> assemble(const Tensor<T>& pass, const Tensor<T>& active) const {
        Tensor<T> out({channels_, pass.height(), pass.width()});
        std::copy_n(pass.data(), pass.size(), out.channel(pass_begin_));
        std::copy_n(active.data(), active.size(), out.channel(active_begin_));
        return out;
    }

    std::size_t channels_ = 0, cond_channels_ = 0;
    bool swap_ = false;
    double clamp_ = kDefaultClamp;
    std::size_t pass_begin_ = 0, pass_count_ = 0, active_begin_ = 0, active_count_ = 0;
    StNetwork<T> st_;
};

/// Two coupling layers with opposite orientation.
template <typename T>
class FlowBlock {
public:
    struct Cache {
        typename CouplingLayer<T>::Cache first, second;
    };

    FlowBlock() = default;

    FlowBlock(const std::string& prefix, std::size_t channels, std::size_t cond_channels, double clamp,
              std::size_t hidden_override, std::mt19937_64& rng)
        : first_(prefix + "/layer/0", channels, cond_channels, false, clamp, hidden_override, rng),
          second_(prefix + "/layer/1", channels, cond_channels, true, clamp, hidden_override, rng) {}

    const CouplingLayer<T>& first() const { return first_; }
    const CouplingLayer<T>& second() const { return second_; }

    FlowResult<T> encode(const Tensor<T>& x, const Tensor<T>* cond, Cache* cache = nullptr) const {
        auto a = first_.encode(x, cond, cache ? &cache->first : nullptr);
        auto b = second_.encode(a.value, cond, cache ? &cache->second : nullptr);
        return {std::move(b.value), a.logdet + b.logdet};
    }

    FlowResult<T> decode(const Tensor<T>& z, const Tensor<T>* cond) const {
        auto b = second_.decode(z, cond);
        auto a = first_.decode(b.value, cond);
        return {std::move(a.value), a.logdet + b.logdet};
    }

    Tensor<T> backward(const Tensor<T>& grad_z, double logdet_coeff, const Cache& cache) {
        Tensor<T> g = second_.backward(grad_z, logdet_coeff, cache.second);
        return first_.backward(g, logdet_coeff, cache.first);
    }

    void collect(std::vector<Parameter<T>*>& out) {
        first_.collect(out);
        second_.collect(out);
    }

private:
    CouplingLayer<T> first_, second_;
};

/// A sequence of flow blocks sharing one condition tensor.
template <typename T>
class FlowChain {
public:
    struct Cache {
        std::vector<typename FlowBlock<T>::Cache> blocks;
    };

    FlowChain() = default;

    FlowChain(const std::string& prefix, std::size_t blocks, std::size_t channels, std::size_t cond_channels,
              double clamp, std::size_t hidden_override, std::mt19937_64& rng) {
        blocks_.reserve(blocks);
        for (std::size_t b = 0; b < blocks; ++b) {
            blocks_.emplace_back(prefix + "/block/" + std::to_string(b), channels, cond_channels, clamp,
                                 hidden_override, rng);
        }
    }

    std::size_t size() const { return blocks_.size(); }
    const FlowBlock<T>& block(std::size_t i) const { return blocks_.at(i); }

    FlowResult<T> encode(const Tensor<T>& x, const Tensor<T>* cond, Cache* cache = nullptr) const {
        FlowResult<T> r{x, 0.0};
        if (cache) cache->blocks.assign(blocks_.size(), {});
        for (std::size_t b = 0; b < blocks_.size(); ++b) {
            auto step = blocks_[b].encode(r.value, cond, cache ? &cache->blocks[b] : nullptr);
            r.value = std::move(step.value);
            r.logdet += step.logdet;
        }
        return r;
    }

    FlowResult<T> decode(const Tensor<T>& z, const Tensor<T>* cond) const {
        FlowResult<T> r{z, 0.0};
        for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
            auto step = it->decode(r.value, cond);
            r.value = std::move(step.value);
            r.logdet += step.logdet;
        }
        return r;
    }

    Tensor<T> backward(const Tensor<T>& grad_z, double logdet_coeff, const Cache& cache) {
        Tensor<T> g = grad_z;
        for (std::size_t b = blocks_.size(); b-- > 0;) g = blocks_[b].backward(g, logdet_coeff, cache.blocks[b]);
        return g;
    }

    void collect(std::vector<Parameter<T>*>& out) {
        for (auto& b : blocks_) b.collect(out);
    }

private:
    std::vector<FlowBlock<T>> blocks_;
};

}  // namespace msflow
