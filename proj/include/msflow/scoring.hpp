#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "msflow/error.hpp"
#include "msflow/kernels.hpp"
#include "msflow/model.hpp"
#include "msflow/tensor_io.hpp"

namespace msflow {

inline constexpr double kDefaultKFraction = 0.03;

enum class Aggregation { add, mul };

inline const char* aggregation_name(Aggregation a) { return a == Aggregation::add ? "add" : "mul"; }

/// Sum of doubles rounded once at the end (Shewchuk partials).
inline double exact_sum(const std::vector<double>& xs) {
    std::vector<double> partials;
    for (double x : xs) {
        std::size_t i = 0;
        for (double y : partials) {
            if (std::abs(x) < std::abs(y)) std::swap(x, y);
            const double hi = x + y;
            const double lo = y - (hi - x);
            if (lo != 0.0) partials[i++] = lo;
            x = hi;
        }
        partials.resize(i);
        partials.push_back(x);
    }
    // Round-half-even correction as in the reference algorithm.
    if (partials.empty()) return 0.0;
    std::size_t n = partials.size() - 1;
    double hi = partials[n], lo = 0.0;
    while (n > 0) {
        const double x = hi;
        const double y = partials[--n];
        hi = x + y;
        const double yr = hi - x;
        lo = y - yr;
        if (lo != 0.0) break;
    }
    if (n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0))) {
        const double y = lo * 2.0;
        const double x = hi + y;
        if (y == x - hi) hi = x;
    }
    return hi;
}

/// Per-position log-likelihood under the standard normal, normalized by
/// the channel count: -||z_ij||^2 / (2C).
template <typename T>
Tensor<T> loglik_map(const Tensor<T>& z) {
    z.require_rank(3, "loglik_map");
    const std::size_t c = z.channels(), plane = z.plane();
    Tensor<T> out({z.height(), z.width()});
    for (std::size_t i = 0; i < plane; ++i) {
        double acc = 0.0;
        for (std::size_t k = 0; k < c; ++k) {
            const double v = z.channel(k)[i];
            acc += v * v;
        }
        out[i] = static_cast<T>(-acc / (2.0 * static_cast<double>(c)));
    }
    return out;
}

/// Bilinear resize of a [h,w] map to [H,W].
template <typename T>
Tensor<T> upsample_map(const Tensor<T>& map, std::size_t height, std::size_t width) {
    map.require_rank(2, "upsample_map");
    return bilinear_upsample(map.reshaped({1, map.height(), map.width()}), height, width).reshaped({height, width});
}

/// add: sum_i exp(m_i); mul: exp(sum_i m_i).
template <typename T>
Tensor<T> aggregate(const std::vector<Tensor<T>>& logmaps, Aggregation mode) {
    if (logmaps.empty()) throw ShapeError("aggregate: no maps");
    for (const auto& m : logmaps) m.require_same_dims(logmaps.front(), "aggregate");
    Tensor<T> out = Tensor<T>::zeros_like(logmaps.front());
    for (std::size_t i = 0; i < out.size(); ++i) {
        double acc = 0.0;
        for (const auto& m : logmaps) acc += mode == Aggregation::add ? std::exp(static_cast<double>(m[i])) : m[i];
        out[i] = static_cast<T>(mode == Aggregation::add ? acc : std::exp(acc));
    }
    return out;
}

/// S = max(P) - P; higher means more anomalous.
template <typename T>
Tensor<T> anomaly_map(const Tensor<T>& p) {
    if (p.empty()) throw ShapeError("anomaly_map: empty map");
    const T top = *std::max_element(p.values().begin(), p.values().end());
    Tensor<T> s = Tensor<T>::zeros_like(p);
    for (std::size_t i = 0; i < p.size(); ++i) s[i] = top - p[i];
    return s;
}

inline std::size_t topk_count(std::size_t n, double k_fraction) {
    if (!(k_fraction > 0.0 && k_fraction <= 1.0)) {
        throw ConfigError("k_fraction must lie in (0, 1], got " + std::to_string(k_fraction));
    }
    const auto k = static_cast<std::size_t>(std::llround(k_fraction * static_cast<double>(n)));
    return std::clamp<std::size_t>(k, 1, n);
}

/// Mean of the K largest values.
template <typename T>
double topk_mean_count(const Tensor<T>& map, std::size_t k) {
    if (map.empty()) throw ShapeError("image score of an empty map");
    if (k == 0 || k > map.size()) throw ShapeError("top-K count " + std::to_string(k) + " outside [1, N]");
    std::vector<double> v(map.values().begin(), map.values().end());
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k - 1), v.end(), std::greater<>());
    v.resize(k);
    return exact_sum(v) / static_cast<double>(k);
}

/// s_det: mean of the top round(k_fraction * N) values (at least one).
template <typename T>
double image_score(const Tensor<T>& map, double k_fraction = kDefaultKFraction) {
    if (map.empty()) throw ShapeError("image score of an empty map");
    return topk_mean_count(map, topk_count(map.size(), k_fraction));
}

struct ScoreMaps {
    std::vector<Tensor<float>> loglik;  // per scale, image resolution
    Tensor<float> p_add, p_mul;
    Tensor<float> s_loc, s_mul;         // from p_add and p_mul
    double s_det_add = 0.0;
    double s_det_mul = 0.0;

    const Tensor<float>& map(Aggregation a) const { return a == Aggregation::add ? s_loc : s_mul; }
    double s_det(Aggregation a) const { return a == Aggregation::add ? s_det_add : s_det_mul; }
};

/// Scores one image from the model's output latents.
inline ScoreMaps score_latents(const TensorList<float>& latents, std::size_t height, std::size_t width,
                               double k_fraction = kDefaultKFraction) {
    ScoreMaps r;
    for (const auto& z : latents) r.loglik.push_back(upsample_map(loglik_map(z), height, width));
    r.p_add = aggregate(r.loglik, Aggregation::add);
    r.p_mul = aggregate(r.loglik, Aggregation::mul);
    r.s_loc = anomaly_map(r.p_add);
    r.s_mul = anomaly_map(r.p_mul);
    r.s_det_add = image_score(r.s_loc, k_fraction);
    r.s_det_mul = image_score(r.s_mul, k_fraction);
    return r;
}

inline ScoreMaps score_pyramid(const MSFlowModel<float>& model, const TensorList<float>& pyramid, std::size_t height,
                               std::size_t width, double k_fraction = kDefaultKFraction) {
    return score_latents(model.encode(pyramid).latents, height, width, k_fraction);
}

/// 8-bit heatmap, min-max normalized per image, plus a JSON sidecar with
/// the normalization constants.
inline void write_heatmap(const std::filesystem::path& pgm_path, const Tensor<float>& map) {
    map.require_rank(2, "write_heatmap");
    const auto [lo_it, hi_it] = std::minmax_element(map.values().begin(), map.values().end());
    const float lo = *lo_it, hi = *hi_it;
    Tensor<float> norm = Tensor<float>::zeros_like(map);
    if (hi > lo) {
        for (std::size_t i = 0; i < map.size(); ++i) norm[i] = (map[i] - lo) / (hi - lo);
    }
    write_pnm(pgm_path, norm);
    std::filesystem::path side = pgm_path;
    side.replace_extension(".json");
    std::ofstream out(side, std::ios::trunc);
    if (!out) throw DataError("cannot write " + side.string());
    out << nlohmann::json{{"min", lo}, {"max", hi}}.dump(2) << '\n';
}

}  // namespace msflow
