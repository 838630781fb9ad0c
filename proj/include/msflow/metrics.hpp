#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "msflow/error.hpp"
#include "msflow/tensor.hpp"

namespace msflow {

inline void check_binary_problem(std::size_t n_scores, const std::vector<int>& labels, const char* op) {
    if (n_scores != labels.size()) {
        throw DataError(std::string(op) + ": " + std::to_string(n_scores) + " scores vs " +
                        std::to_string(labels.size()) + " labels");
    }
    std::size_t pos = 0;
    for (int l : labels) {
        if (l != 0 && l != 1) throw DataError(std::string(op) + ": labels must be 0 or 1");
        pos += static_cast<std::size_t>(l);
    }
    if (pos == 0 || pos == labels.size()) throw DataError(std::string(op) + ": both classes must be present");
}

/// Mann-Whitney AUROC: P(pos > neg) + P(tie) / 2, via average ranks.
template <typename S>
double auroc(const std::vector<S>& scores, const std::vector<int>& labels) {
    check_binary_problem(scores.size(), labels, "auroc");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0.0;
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        std::size_t pos_in_group = 0;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) pos_in_group += labels[order[j++]];
        // Ranks i+1..j share their mean (i + 1 + j) / 2.
        rank_sum_pos += static_cast<double>(pos_in_group) * static_cast<double>(i + 1 + j) / 2.0;
        n_pos += pos_in_group;
        i = j;
    }
    const double n_p = static_cast<double>(n_pos);
    const double n_n = static_cast<double>(scores.size() - n_pos);
    return (rank_sum_pos - n_p * (n_p + 1.0) / 2.0) / (n_p * n_n);
}

/// ROC points for "score >= threshold", thresholds descending; starts at
/// (0,0) (threshold +inf) and ends at (1,1).
struct RocCurve {
    std::vector<double> thresholds;
    std::vector<double> fpr;
    std::vector<double> tpr;
};

template <typename S>
RocCurve roc_curve(const std::vector<S>& scores, const std::vector<int>& labels) {
    check_binary_problem(scores.size(), labels, "roc_curve");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    const std::size_t n_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
    const std::size_t n_neg = labels.size() - n_pos;
    RocCurve c;
    c.thresholds.push_back(std::numeric_limits<double>::infinity());
    c.fpr.push_back(0.0);
    c.tpr.push_back(0.0);
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < order.size();) {
        const S t = scores[order[i]];
        while (i < order.size() && scores[order[i]] == t) (labels[order[i++]] ? tp : fp)++;
        c.thresholds.push_back(static_cast<double>(t));
        c.fpr.push_back(static_cast<double>(fp) / static_cast<double>(n_neg));
        c.tpr.push_back(static_cast<double>(tp) / static_cast<double>(n_pos));
    }
    return c;
}

inline double trapezoid_area(const std::vector<double>& x, const std::vector<double>& y) {
    double area = 0.0;
    for (std::size_t i = 1; i < x.size(); ++i) area += (x[i] - x[i - 1]) * (y[i] + y[i - 1]) / 2.0;
    return area;
}

/// Area under (x, y) from x[0] to `limit`, interpolating the segment that
/// crosses it. x must be non-decreasing.
inline double truncated_area(const std::vector<double>& x, const std::vector<double>& y, double limit) {
    double area = 0.0;
    for (std::size_t i = 1; i < x.size(); ++i) {
        if (x[i - 1] >= limit) break;
        if (x[i] <= limit) {
            area += (x[i] - x[i - 1]) * (y[i] + y[i - 1]) / 2.0;
        } else {
            const double f = (limit - x[i - 1]) / (x[i] - x[i - 1]);
            const double y_lim = y[i - 1] + f * (y[i] - y[i - 1]);
            area += (limit - x[i - 1]) * (y_lim + y[i - 1]) / 2.0;
        }
    }
    return area;
}

// ---------------------------------------------------------------------------
// Connected components

struct Region {
    std::vector<std::pair<std::size_t, std::size_t>> pixels;  // (row, col), raster order
};

/// 8-connected foreground components of a [H,W] mask (value > 0.5),
/// ordered by their first pixel in raster order.
template <typename T>
std::vector<Region> connected_components(const Tensor<T>& mask) {
    mask.require_rank(2, "connected_components");
    const std::size_t h = mask.height(), w = mask.width();
    std::vector<std::size_t> parent(h * w);
    std::iota(parent.begin(), parent.end(), std::size_t{0});
    const auto find = [&](std::size_t a) {
        while (parent[a] != a) a = parent[a] = parent[parent[a]];
        return a;
    };
    const auto unite = [&](std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
    };
    const auto on = [&](std::size_t y, std::size_t x) { return mask.at(y, x) > T(0.5); };
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            if (!on(y, x)) continue;
            const std::size_t i = y * w + x;
            if (x > 0 && on(y, x - 1)) unite(i, i - 1);
            if (y > 0) {
                if (on(y - 1, x)) unite(i, i - w);
                if (x > 0 && on(y - 1, x - 1)) unite(i, i - w - 1);
                if (x + 1 < w && on(y - 1, x + 1)) unite(i, i - w + 1);
            }
        }
    }
    std::vector<Region> regions;
    std::vector<std::size_t> index(h * w, SIZE_MAX);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            if (!on(y, x)) continue;
            const std::size_t root = find(y * w + x);
            if (index[root] == SIZE_MAX) {
                index[root] = regions.size();
                regions.emplace_back();
            }
            regions[index[root]].pixels.emplace_back(y, x);
        }
    }
    return regions;
}

// ---------------------------------------------------------------------------
// Per-region overlap

inline constexpr double kDefaultFprLimit = 0.3;
inline constexpr std::size_t kDefaultProThresholds = 200;

struct ProCurve {
    std::vector<double> thresholds;  // descending, first is +inf
    std::vector<double> fpr;
    std::vector<double> overlap;
};

/// Pooled threshold sweep. Thresholds are the unique scores, or
/// `n_thresholds` evenly spaced quantiles of them when there are more.
template <typename T>
ProCurve pro_curve(const std::vector<Tensor<T>>& maps, const std::vector<Tensor<T>>& masks,
                   std::size_t n_thresholds = kDefaultProThresholds) {
    if (maps.size() != masks.size()) {
        throw DataError("pro: " + std::to_string(maps.size()) + " score maps vs " + std::to_string(masks.size()) +
                        " masks");
    }
    if (n_thresholds < 2) throw ConfigError("pro: need at least 2 thresholds");
    struct Pixel {
        T score;
        std::int64_t region;  // -1: normal pixel
    };
    std::vector<Pixel> pixels;
    std::vector<double> region_size;
    for (std::size_t m = 0; m < maps.size(); ++m) {
        maps[m].require_same_dims(masks[m], "pro score map vs mask");
        maps[m].require_rank(2, "pro score map");
        std::vector<std::int64_t> label(maps[m].size(), -1);
        for (const auto& r : connected_components(masks[m])) {
            for (const auto& [y, x] : r.pixels) label[y * maps[m].width() + x] = static_cast<std::int64_t>(region_size.size());
            region_size.push_back(static_cast<double>(r.pixels.size()));
        }
        for (std::size_t i = 0; i < maps[m].size(); ++i) pixels.push_back({maps[m][i], label[i]});
    }
    if (region_size.empty()) throw DataError("pro: no anomalous pixels in any ground-truth mask");
    const auto n_normal = static_cast<double>(
        std::count_if(pixels.begin(), pixels.end(), [](const Pixel& p) { return p.region < 0; }));
    if (n_normal == 0.0) throw DataError("pro: no normal pixels, false-positive rate undefined");

    std::sort(pixels.begin(), pixels.end(), [](const Pixel& a, const Pixel& b) { return a.score > b.score; });
    std::vector<T> unique;
    for (const auto& p : pixels) {
        if (unique.empty() || p.score != unique.back()) unique.push_back(p.score);
    }
    std::vector<T> thresholds;  // descending
    if (unique.size() <= n_thresholds) {
        thresholds = unique;
    } else {
        for (std::size_t i = 0; i < n_thresholds; ++i) {
            const std::size_t idx = static_cast<std::size_t>(
                std::llround(static_cast<double>(i) * static_cast<double>(unique.size() - 1) /
                             static_cast<double>(n_thresholds - 1)));
            if (thresholds.empty() || unique[idx] != thresholds.back()) thresholds.push_back(unique[idx]);
        }
    }

    ProCurve c;
    c.thresholds.push_back(std::numeric_limits<double>::infinity());
    c.fpr.push_back(0.0);
    c.overlap.push_back(0.0);
    const double n_regions = static_cast<double>(region_size.size());
    double false_pos = 0.0;
    double overlap_sum = 0.0;
    std::size_t i = 0;
    for (const T t : thresholds) {
        for (; i < pixels.size() && pixels[i].score >= t; ++i) {
            if (pixels[i].region < 0) {
                false_pos += 1.0;
            } else {
                overlap_sum += 1.0 / region_size[static_cast<std::size_t>(pixels[i].region)];
            }
        }
        c.thresholds.push_back(static_cast<double>(t));
        c.fpr.push_back(false_pos / n_normal);
        c.overlap.push_back(std::min(1.0, overlap_sum / n_regions));
    }
    return c;
}

/// Normalized area under mean region overlap vs pixel FPR up to `fpr_limit`.
template <typename T>
double pro_score(const std::vector<Tensor<T>>& maps, const std::vector<Tensor<T>>& masks,
                 double fpr_limit = kDefaultFprLimit, std::size_t n_thresholds = kDefaultProThresholds) {
    if (!(fpr_limit > 0.0 && fpr_limit <= 1.0)) throw ConfigError("pro: fpr_limit must lie in (0, 1]");
    const ProCurve c = pro_curve(maps, masks, n_thresholds);
    return truncated_area(c.fpr, c.overlap, fpr_limit) / fpr_limit;
}

// ---------------------------------------------------------------------------

struct EvalReport {
    double det_auroc = 0.0;
    double loc_auroc = 0.0;
    double loc_pro = 0.0;
};

/// Image-level AUROC on `image_scores`, pixel AUROC over all pixels of all
/// maps, and PRO. `labels` are per image (1 = anomalous).
template <typename T>
EvalReport evaluate(const std::vector<double>& image_scores, const std::vector<int>& labels,
                    const std::vector<Tensor<T>>& maps, const std::vector<Tensor<T>>& masks,
                    double fpr_limit = kDefaultFprLimit, std::size_t n_thresholds = kDefaultProThresholds) {
    if (image_scores.size() != labels.size() || maps.size() != labels.size() || masks.size() != labels.size()) {
        throw DataError("evaluate: inconsistent record counts (" + std::to_string(image_scores.size()) + " scores, " +
                        std::to_string(labels.size()) + " labels, " + std::to_string(maps.size()) + " maps, " +
                        std::to_string(masks.size()) + " masks)");
    }
    EvalReport r;
    r.det_auroc = auroc(image_scores, labels);
    std::vector<T> pixel_scores;
    std::vector<int> pixel_labels;
    for (std::size_t i = 0; i < maps.size(); ++i) {
        maps[i].require_same_dims(masks[i], "evaluate map vs mask");
        pixel_scores.insert(pixel_scores.end(), maps[i].values().begin(), maps[i].values().end());
        for (const T v : masks[i].values()) pixel_labels.push_back(v > T(0.5) ? 1 : 0);
    }
    r.loc_auroc = auroc(pixel_scores, pixel_labels);
    r.loc_pro = pro_score(maps, masks, fpr_limit, n_thresholds);
    return r;
}

}  // namespace msflow
