#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numbers>
#include <string>
#include <vector>

#include "msflow/tensor.hpp"

namespace msflow {

// Channel slicing / concatenation on rank-3 tensors.

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& t, std::size_t begin, std::size_t count) {
    t.require_rank(3, "slice_channels");
    if (count == 0 || begin + count > t.channels()) {
        throw ShapeError("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                         ") outside " + shape_string(t.dims()));
    }
    Tensor<T> out({count, t.height(), t.width()});
    std::copy_n(t.channel(begin), count * t.plane(), out.data());
    return out;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts) {
    if (parts.empty()) throw ShapeError("concat_channels: no inputs");
    const std::size_t h = parts.front()->height(), w = parts.front()->width();
    std::size_t total = 0;
    for (const auto* p : parts) {
        p->require_rank(3, "concat_channels");
        if (p->height() != h || p->width() != w) {
            throw ShapeError("concat_channels: spatial mismatch " + shape_string(parts.front()->dims()) + " vs " +
                             shape_string(p->dims()));
        }
        total += p->channels();
    }
    Tensor<T> out({total, h, w});
    T* dst = out.data();
    for (const auto* p : parts) dst = std::copy_n(p->data(), p->size(), dst);
    return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    return concat_channels<T>({&a, &b});
}

// ---------------------------------------------------------------------------
// conv2d: stride 1, square kernel, symmetric zero padding.

namespace detail {

// Patch matrix: one row per output position, columns ordered (ci, ky, kx).
template <typename T>
std::vector<T> im2row(const Tensor<T>& in, std::size_t k, std::size_t pad, std::size_t out_h, std::size_t out_w) {
    const std::size_t cin = in.channels(), h = in.height(), w = in.width();
    const std::size_t row_len = cin * k * k;
    std::vector<T> rows(out_h * out_w * row_len, T(0));
    for (std::size_t oy = 0; oy < out_h; ++oy) {
        for (std::size_t ox = 0; ox < out_w; ++ox) {
            T* r = rows.data() + (oy * out_w + ox) * row_len;
            for (std::size_t ci = 0; ci < cin; ++ci) {
                const T* src = in.channel(ci);
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const std::ptrdiff_t ix =
                            static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(pad);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                        r[(ci * k + ky) * k + kx] = src[static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)];
                    }
                }
            }
        }
    }
    return rows;
}

// Scatter-adds patch-row gradients back onto the first `channels` input channels.
template <typename T>
void row2im_add(const std::vector<T>& rows, Tensor<T>& grad_in, std::size_t row_len, std::size_t channels,
                std::size_t k, std::size_t pad, std::size_t out_h, std::size_t out_w) {
    const std::size_t h = grad_in.height(), w = grad_in.width();
    for (std::size_t oy = 0; oy < out_h; ++oy) {
        for (std::size_t ox = 0; ox < out_w; ++ox) {
            const T* r = rows.data() + (oy * out_w + ox) * row_len;
            for (std::size_t ci = 0; ci < channels; ++ci) {
                T* dst = grad_in.channel(ci);
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const std::ptrdiff_t ix =
                            static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(pad);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                        dst[static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)] +=
                            r[(ci * k + ky) * k + kx];
                    }
                }
            }
        }
    }
}

struct ConvGeometry {
    std::size_t cin, cout, k, out_h, out_w;
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& input, const Tensor<T>& weight, std::size_t padding) {
    input.require_rank(3, "conv2d input");
    weight.require_rank(4, "conv2d weight");
    const std::size_t k = weight.dim(2);
    if (weight.dim(3) != k) throw ShapeError("conv2d: non-square kernel " + shape_string(weight.dims()));
    if (weight.dim(1) != input.channels()) {
        throw ShapeError("conv2d: weight expects " + std::to_string(weight.dim(1)) + " input channels, input dims " +
                         shape_string(input.dims()));
    }
    if (input.height() + 2 * padding < k || input.width() + 2 * padding < k) {
        throw ShapeError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                         shape_string(input.dims()));
    }
    return {input.channels(), weight.dim(0), k, input.height() + 2 * padding - k + 1,
            input.width() + 2 * padding - k + 1};
}

}  // namespace detail

/// Cross-correlation with stride 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t padding) {
    const auto g = detail::conv_geometry(input, weight, padding);
    if (bias.size() != g.cout) {
        throw ShapeError("conv2d: bias dims " + shape_string(bias.dims()) + " for " + std::to_string(g.cout) +
                         " output channels");
    }
    const std::size_t positions = g.out_h * g.out_w;
    const std::size_t row_len = g.cin * g.k * g.k;
    const std::vector<T> rows = detail::im2row(input, g.k, padding, g.out_h, g.out_w);

    // Position-major product against the transposed weight keeps the inner
    // loop a contiguous axpy over output channels.
    std::vector<T> wt(row_len * g.cout);
    for (std::size_t co = 0; co < g.cout; ++co)
        for (std::size_t kk = 0; kk < row_len; ++kk) wt[kk * g.cout + co] = weight[co * row_len + kk];
    std::vector<T> acc(g.cout);
    Tensor<T> out({g.cout, g.out_h, g.out_w});
    for (std::size_t j = 0; j < positions; ++j) {
        std::copy_n(bias.data(), g.cout, acc.data());
        const T* r = rows.data() + j * row_len;
        for (std::size_t kk = 0; kk < row_len; ++kk) {
            const T a = r[kk];
            if (a == T(0)) continue;
            const T* wk = wt.data() + kk * g.cout;
            for (std::size_t co = 0; co < g.cout; ++co) acc[co] += a * wk[co];
        }
        for (std::size_t co = 0; co < g.cout; ++co) out.channel(co)[j] = acc[co];
    }
    require_finite(out, "conv2d");
    return out;
}

template <typename T>
struct ConvGrads {
    Tensor<T> input;
    Tensor<T> weight;
    Tensor<T> bias;
};

/// Exact gradients of conv2d with respect to its three operands.
///
/// Only the first `input_grad_channels` channels of the input gradient are
/// computed (the rest stay zero); pass 0 to skip it entirely, or leave the
/// default for all channels.
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& weight,
                             std::size_t padding, std::size_t input_grad_channels = static_cast<std::size_t>(-1)) {
    const auto g = detail::conv_geometry(input, weight, padding);
    if (grad_out.dims() != Shape{g.cout, g.out_h, g.out_w}) {
        throw ShapeError("conv2d_backward: grad_out dims " + shape_string(grad_out.dims()) + ", expected " +
                         shape_string({g.cout, g.out_h, g.out_w}));
    }
    const std::size_t positions = g.out_h * g.out_w;
    const std::size_t row_len = g.cin * g.k * g.k;
    const std::size_t grad_channels = std::min(input_grad_channels, g.cin);
    const std::size_t grad_len = grad_channels * g.k * g.k;
    const std::vector<T> rows = detail::im2row(input, g.k, padding, g.out_h, g.out_w);

    ConvGrads<T> r{Tensor<T>::zeros_like(input), Tensor<T>::zeros_like(weight), Tensor<T>({g.cout})};
    std::vector<T> grad_rows(grad_len ? positions * row_len : 0, T(0));
    for (std::size_t co = 0; co < g.cout; ++co) {
        const T* go = grad_out.channel(co);
        const T* wrow = weight.data() + co * row_len;
        T* gwrow = r.weight.data() + co * row_len;
        T bsum = 0;
        for (std::size_t j = 0; j < positions; ++j) {
            const T gv = go[j];
            bsum += gv;
            if (gv == T(0)) continue;
            const T* rj = rows.data() + j * row_len;
            for (std::size_t kk = 0; kk < row_len; ++kk) gwrow[kk] += gv * rj[kk];
            if (grad_len) {
                T* gr = grad_rows.data() + j * row_len;
                for (std::size_t kk = 0; kk < grad_len; ++kk) gr[kk] += gv * wrow[kk];
            }
        }
        r.bias[co] = bsum;
    }
    if (grad_len) detail::row2im_add(grad_rows, r.input, row_len, grad_channels, g.k, padding, g.out_h, g.out_w);
    return r;
}

// ---------------------------------------------------------------------------
// Average pooling, count-include-pad: the divisor is always k*k.

inline std::size_t pooled_extent(std::size_t n, std::size_t k, std::size_t stride, std::size_t padding) {
    if (k == 0 || stride == 0) throw ShapeError("avg_pool2d: kernel and stride must be >= 1");
    if (n + 2 * padding < k) {
        throw ShapeError("avg_pool2d: window " + std::to_string(k) + " larger than padded extent " +
                         std::to_string(n + 2 * padding));
    }
    return (n + 2 * padding - k) / stride + 1;
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& input, std::size_t k, std::size_t stride, std::size_t padding) {
    input.require_rank(3, "avg_pool2d");
    const std::size_t h = input.height(), w = input.width();
    const std::size_t oh = pooled_extent(h, k, stride, padding), ow = pooled_extent(w, k, stride, padding);
    const T inv = T(1) / static_cast<T>(k * k);
    Tensor<T> out({input.channels(), oh, ow});
    for (std::size_t c = 0; c < input.channels(); ++c) {
        const T* src = input.channel(c);
        T* dst = out.channel(c);
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                T acc = 0;
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                              static_cast<std::ptrdiff_t>(padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                  static_cast<std::ptrdiff_t>(padding);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                        acc += src[static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)];
                    }
                }
                dst[oy * ow + ox] = acc * inv;
            }
        }
    }
    require_finite(out, "avg_pool2d");
    return out;
}

template <typename T>
Tensor<T> avg_pool2d_backward(const Tensor<T>& grad_out, const Shape& input_dims, std::size_t k, std::size_t stride,
                              std::size_t padding) {
    Tensor<T> grad_in(input_dims);
    grad_in.require_rank(3, "avg_pool2d_backward");
    const std::size_t h = grad_in.height(), w = grad_in.width();
    const std::size_t oh = pooled_extent(h, k, stride, padding), ow = pooled_extent(w, k, stride, padding);
    if (grad_out.dims() != Shape{grad_in.channels(), oh, ow}) {
        throw ShapeError("avg_pool2d_backward: grad_out dims " + shape_string(grad_out.dims()));
    }
    const T inv = T(1) / static_cast<T>(k * k);
    for (std::size_t c = 0; c < grad_in.channels(); ++c) {
        const T* src = grad_out.channel(c);
        T* dst = grad_in.channel(c);
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                const T g = src[oy * ow + ox] * inv;
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                              static_cast<std::ptrdiff_t>(padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                  static_cast<std::ptrdiff_t>(padding);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                        dst[static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)] += g;
                    }
                }
            }
        }
    }
    return grad_in;
}

// ---------------------------------------------------------------------------
// Layer normalization across channels, independently at every (y, x).

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
struct LayerNormCache {
    Tensor<T> normalized;   // x_hat, before gain/bias
    std::vector<T> inv_std; // one per spatial position
};

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& input, const Tensor<T>& gain, const Tensor<T>& bias,
                     LayerNormCache<T>* cache = nullptr) {
    input.require_rank(3, "layer_norm");
    const std::size_t c = input.channels(), n = input.plane();
    if (gain.size() != c || bias.size() != c) {
        throw ShapeError("layer_norm: gain/bias dims " + shape_string(gain.dims()) + "/" + shape_string(bias.dims()) +
                         " for input " + shape_string(input.dims()));
    }
    Tensor<T> xhat = Tensor<T>::zeros_like(input);
    std::vector<T> inv_std(n);
    std::vector<T> mean(n, T(0)), var(n, T(0));
    for (std::size_t ch = 0; ch < c; ++ch) {
        const T* x = input.channel(ch);
        for (std::size_t p = 0; p < n; ++p) mean[p] += x[p];
    }
    for (auto& m : mean) m /= static_cast<T>(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        const T* x = input.channel(ch);
        for (std::size_t p = 0; p < n; ++p) {
            const T d = x[p] - mean[p];
            var[p] += d * d;
        }
    }
    for (std::size_t p = 0; p < n; ++p) {
        inv_std[p] = T(1) / std::sqrt(var[p] / static_cast<T>(c) + static_cast<T>(kLayerNormEps));
    }
    Tensor<T> out = Tensor<T>::zeros_like(input);
    for (std::size_t ch = 0; ch < c; ++ch) {
        const T* x = input.channel(ch);
        T* xh = xhat.channel(ch);
        T* o = out.channel(ch);
        for (std::size_t p = 0; p < n; ++p) {
            xh[p] = (x[p] - mean[p]) * inv_std[p];
            o[p] = gain[ch] * xh[p] + bias[ch];
        }
    }
    require_finite(out, "layer_norm");
    if (cache) {
        cache->normalized = std::move(xhat);
        cache->inv_std = std::move(inv_std);
    }
    return out;
}

template <typename T>
struct LayerNormGrads {
    Tensor<T> input;
    Tensor<T> gain;
    Tensor<T> bias;
};

template <typename T>
LayerNormGrads<T> layer_norm_backward(const Tensor<T>& grad_out, const Tensor<T>& gain, const LayerNormCache<T>& cache) {
    const auto& xhat = cache.normalized;
    xhat.require_same_dims(grad_out, "layer_norm_backward");
    const std::size_t c = xhat.channels(), n = xhat.plane();
    LayerNormGrads<T> r{Tensor<T>::zeros_like(xhat), Tensor<T>({c}), Tensor<T>({c})};
    std::vector<T> sum_d(n, T(0)), sum_dx(n, T(0));
    for (std::size_t ch = 0; ch < c; ++ch) {
        const T* g = grad_out.channel(ch);
        const T* xh = xhat.channel(ch);
        T gg = 0, gb = 0;
        for (std::size_t p = 0; p < n; ++p) {
            gg += g[p] * xh[p];
            gb += g[p];
            const T d = g[p] * gain[ch];
            sum_d[p] += d;
            sum_dx[p] += d * xh[p];
        }
        r.gain[ch] = gg;
        r.bias[ch] = gb;
    }
    const T inv_c = T(1) / static_cast<T>(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        const T* g = grad_out.channel(ch);
        const T* xh = xhat.channel(ch);
        T* gi = r.input.channel(ch);
        for (std::size_t p = 0; p < n; ++p) {
            const T d = g[p] * gain[ch];
            gi[p] = cache.inv_std[p] * (d - inv_c * sum_d[p] - xh[p] * inv_c * sum_dx[p]);
        }
    }
    return r;
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
    Tensor<T> out = input;
    for (auto& v : out.values()) v = v > T(0) ? v : T(0);
    return out;
}

/// Gradient of relu given its forward input.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& input) {
    grad_out.require_same_dims(input, "relu_backward");
    Tensor<T> g = grad_out;
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (!(input[i] > T(0))) g[i] = T(0);
    }
    return g;
}

// ---------------------------------------------------------------------------
// Bilinear resize, half-pixel centres (align_corners = false).

namespace detail {

struct LerpTap {
    std::size_t lo, hi;
    double frac;
};

inline std::vector<LerpTap> bilinear_taps(std::size_t src, std::size_t dst) {
    std::vector<LerpTap> taps(dst);
    const double scale = static_cast<double>(src) / static_cast<double>(dst);
    for (std::size_t i = 0; i < dst; ++i) {
        double s = (static_cast<double>(i) + 0.5) * scale - 0.5;
        if (s < 0.0) s = 0.0;
        auto lo = static_cast<std::size_t>(std::floor(s));
        if (lo > src - 1) lo = src - 1;
        const std::size_t hi = std::min(lo + 1, src - 1);
        taps[i] = {lo, hi, s - static_cast<double>(lo)};
    }
    return taps;
}

}  // namespace detail

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& input, std::size_t out_h, std::size_t out_w) {
    input.require_rank(3, "bilinear_upsample");
    const std::size_t h = input.height(), w = input.width();
    if (out_h < h || out_w < w) {
        throw ShapeError("bilinear_upsample: target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                         " smaller than input " + shape_string(input.dims()));
    }
    const auto ty = detail::bilinear_taps(h, out_h);
    const auto tx = detail::bilinear_taps(w, out_w);
    Tensor<T> out({input.channels(), out_h, out_w});
    for (std::size_t c = 0; c < input.channels(); ++c) {
        const T* src = input.channel(c);
        T* dst = out.channel(c);
        for (std::size_t y = 0; y < out_h; ++y) {
            const auto& a = ty[y];
            const T fy = static_cast<T>(a.frac);
            for (std::size_t x = 0; x < out_w; ++x) {
                const auto& b = tx[x];
                const T fx = static_cast<T>(b.frac);
                const T top = src[a.lo * w + b.lo] * (T(1) - fx) + src[a.lo * w + b.hi] * fx;
                const T bot = src[a.hi * w + b.lo] * (T(1) - fx) + src[a.hi * w + b.hi] * fx;
                dst[y * out_w + x] = top * (T(1) - fy) + bot * fy;
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> bilinear_upsample_backward(const Tensor<T>& grad_out, const Shape& input_dims) {
    Tensor<T> grad_in(input_dims);
    grad_in.require_rank(3, "bilinear_upsample_backward");
    const std::size_t h = grad_in.height(), w = grad_in.width();
    const std::size_t out_h = grad_out.height(), out_w = grad_out.width();
    const auto ty = detail::bilinear_taps(h, out_h);
    const auto tx = detail::bilinear_taps(w, out_w);
    for (std::size_t c = 0; c < grad_in.channels(); ++c) {
        const T* src = grad_out.channel(c);
        T* dst = grad_in.channel(c);
        for (std::size_t y = 0; y < out_h; ++y) {
            const auto& a = ty[y];
            const T fy = static_cast<T>(a.frac);
            for (std::size_t x = 0; x < out_w; ++x) {
                const auto& b = tx[x];
                const T fx = static_cast<T>(b.frac);
                const T g = src[y * out_w + x];
                dst[a.lo * w + b.lo] += g * (T(1) - fy) * (T(1) - fx);
                dst[a.lo * w + b.hi] += g * (T(1) - fy) * fx;
                dst[a.hi * w + b.lo] += g * fy * (T(1) - fx);
                dst[a.hi * w + b.hi] += g * fy * fx;
            }
        }
    }
    return grad_in;
}

// ---------------------------------------------------------------------------

/// Fixed 2-D sinusoidal positional encoding.
///
/// Channels [0, P/2) encode the row index, [P/2, P) the column index; within
/// each half, channel 2i holds sin(pos * f_i) and 2i+1 holds cos(pos * f_i)
/// with f_i = 10000^(-2i / (P/2)).
template <typename T>
Tensor<T> pos_encoding_2d(std::size_t channels, std::size_t height, std::size_t width) {
    if (channels == 0 || channels % 4 != 0) {
        throw ShapeError("pos_encoding_2d: channels must be a positive multiple of 4, got " + std::to_string(channels));
    }
    const std::size_t half = channels / 2;
    Tensor<T> pe({channels, height, width});
    for (std::size_t i = 0; i < half / 2; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(2 * i) / static_cast<double>(half));
        for (std::size_t y = 0; y < height; ++y) {
            for (std::size_t x = 0; x < width; ++x) {
                const double ry = static_cast<double>(y) * freq;
                const double rx = static_cast<double>(x) * freq;
                pe.at(2 * i, y, x) = static_cast<T>(std::sin(ry));
                pe.at(2 * i + 1, y, x) = static_cast<T>(std::cos(ry));
                pe.at(half + 2 * i, y, x) = static_cast<T>(std::sin(rx));
                pe.at(half + 2 * i + 1, y, x) = static_cast<T>(std::cos(rx));
            }
        }
    }
    return pe;
}

}  // namespace msflow
