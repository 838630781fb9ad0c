#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "msflow/dataset.hpp"
#include "msflow/error.hpp"
#include "msflow/model.hpp"
#include "msflow/optim.hpp"

namespace msflow {

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 16;
    double lr = 1e-4;
    double lr_drop_factor = 3.0;
    std::vector<double> lr_drop_points{0.7, 0.9};
    double grad_clip = 10.0;  // global L2 norm; 0 disables
    std::uint64_t seed = 0;

    void validate() const {
        if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
        if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be positive");
        if (!(lr_drop_factor >= 1.0)) throw ConfigError("train: lr_drop_factor must be >= 1");
        for (std::size_t i = 0; i < lr_drop_points.size(); ++i) {
            const double p = lr_drop_points[i];
            if (!(p > 0.0 && p < 1.0)) throw ConfigError("train: lr drop points must lie in (0, 1)");
            if (i > 0 && !(p > lr_drop_points[i - 1])) throw ConfigError("train: lr drop points must increase");
        }
        if (!(grad_clip >= 0.0)) throw ConfigError("train: grad_clip must be >= 0");
    }
};

/// lr / factor^(number of drop points at or before step/total_steps).
inline double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
    if (total_steps == 0 || step >= total_steps) {
        throw ConfigError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + ")");
    }
    const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
    double lr = cfg.lr;
    for (double p : cfg.lr_drop_points) {
        if (progress >= p) lr /= cfg.lr_drop_factor;
    }
    return lr;
}

/// (sum ||z||^2 / 2 - logdet) / n_elements.
template <typename T>
double nll_loss(const TensorList<T>& latents, double total_logdet, std::size_t n_elements) {
    if (n_elements == 0) throw ShapeError("nll_loss: zero elements");
    double sq = 0.0;
    for (const auto& z : latents) sq += squared_norm(z);
    const double loss = (0.5 * sq - total_logdet) / static_cast<double>(n_elements);
    if (!std::isfinite(loss)) throw NumericError("nll_loss: non-finite loss");
    return loss;
}

/// FNV-1a over the raw bytes of every parameter value, in parameter order.
template <typename T>
std::uint64_t parameter_checksum(const MSFlowModel<T>& model) {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto* p : model.parameters()) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.data());
        for (std::size_t i = 0; i < p->value.size() * sizeof(T); ++i) {
            h ^= bytes[i];
            h *= 1099511628211ull;
        }
    }
    return h;
}

struct EpochLog {
    std::size_t epoch = 0;
    double loss = 0.0;     // mean per-element NLL over the epoch's samples
    double lr = 0.0;       // rate of the epoch's last step
    double seconds = 0.0;
    std::uint64_t checksum = 0;
};

struct TrainLog {
    std::vector<EpochLog> epochs;
    std::vector<double> step_lr;
    double initial_loss = 0.0;  // mean loss before the first update
};

inline void write_train_log_csv(const std::filesystem::path& path, const TrainLog& log) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << "epoch,loss,lr,seconds,checksum\n";
    for (const auto& e : log.epochs) {
        std::ostringstream line;
        line << e.epoch << ',' << std::setprecision(9) << e.loss << ',' << e.lr << ',' << std::fixed
             << std::setprecision(3) << e.seconds << ",0x" << std::hex << std::setw(16) << std::setfill('0')
             << e.checksum;
        out << line.str() << '\n';
    }
}

/// Samples for training: pyramids with their labels and ids.
struct TrainingSet {
    std::vector<std::string> ids;
    std::vector<Label> labels;
    std::vector<TensorList<float>> pyramids;

    std::size_t size() const { return pyramids.size(); }
};

/// Mean per-element NLL of `data` under `model`.
template <typename T>
double mean_nll(const MSFlowModel<T>& model, const std::vector<TensorList<T>>& data) {
    if (data.empty()) throw DataError("mean_nll: empty data");
    const std::size_t n = model.latent_elements();
    double total = 0.0;
    for (const auto& y : data) {
        const auto out = model.encode(y);
        total += nll_loss(out.latents, out.total_logdet, n);
    }
    return total / static_cast<double>(data.size());
}

template <typename T>
double clip_global_norm(const std::vector<Parameter<T>*>& params, double max_norm) {
    double sq = 0.0;
    for (const auto* p : params) sq += squared_norm(p->grad);
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const T scale = static_cast<T>(max_norm / norm);
        for (auto* p : params) {
            for (auto& g : p->grad.values()) g *= scale;
        }
    }
    return norm;
}

using EpochCallback = std::function<void(const EpochLog&)>;

/// Minimizes the mean per-element NLL with Adam. Deterministic given
/// cfg.seed: fixed shuffle, samples reduced in batch order.
template <typename T>
TrainLog train(MSFlowModel<T>& model, const std::vector<TensorList<T>>& pyramids, const std::vector<Label>& labels,
               const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    if (labels.size() != pyramids.size()) {
        throw DataError("train: " + std::to_string(pyramids.size()) + " samples vs " + std::to_string(labels.size()) +
                        " labels");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != Label::normal) {
            throw DataError("train: sample " + std::to_string(i) + " is anomalous; training uses normal samples only");
        }
    }
    TrainLog log;
    if (cfg.epochs == 0) return log;
    if (pyramids.empty()) throw DataError("train: no training samples");

    const std::size_t n = pyramids.size();
    const std::size_t batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = batches_per_epoch * cfg.epochs;
    const std::size_t n_elem = model.latent_elements();
    auto params = model.parameters();
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        double lr = 0.0;
        for (std::size_t b = 0; b < batches_per_epoch; ++b, ++step) {
            const std::size_t begin = b * cfg.batch_size;
            const std::size_t end = std::min(n, begin + cfg.batch_size);
            const double scale = 1.0 / (static_cast<double>(end - begin) * static_cast<double>(n_elem));
            model.zero_grad();
            for (std::size_t k = begin; k < end; ++k) {
                typename MSFlowModel<T>::Cache cache;
                ModelOutput<T> out;
                double loss = 0.0;
                try {
                    out = model.encode(pyramids[order[k]], &cache);
                    loss = nll_loss(out.latents, out.total_logdet, n_elem);
                } catch (const NumericError& e) {
                    throw NumericError("train: epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                                       " sample " + std::to_string(order[k]) + ": " + e.what());
                }
                if (step == 0) log.initial_loss += loss / static_cast<double>(end - begin);
                epoch_loss += loss;
                TensorList<T> grad = std::move(out.latents);
                for (auto& g : grad) {
                    for (auto& v : g.values()) v = static_cast<T>(v * scale);
                }
                model.backward(grad, -scale, cache);
            }
            const double norm = clip_global_norm(params, cfg.grad_clip);
            if (!std::isfinite(norm)) {
                throw NumericError("train: non-finite gradient norm at epoch " + std::to_string(epoch) + " step " +
                                   std::to_string(step));
            }
            lr = lr_at(step, total_steps, cfg);
            log.step_lr.push_back(lr);
            for (auto* p : params) adam_step(p->value, p->grad, p->adam, lr);
        }
        EpochLog e;
        e.epoch = epoch;
        e.loss = epoch_loss / static_cast<double>(n);
        e.lr = lr;
        e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        e.checksum = parameter_checksum(model);
        log.epochs.push_back(e);
        if (on_epoch) on_epoch(e);
    }
    return log;
}

}  // namespace msflow
