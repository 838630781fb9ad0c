#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "msflow/error.hpp"
#include "msflow/pyramid.hpp"
#include "msflow/tensor_io.hpp"

namespace msflow {

namespace fs = std::filesystem;

enum class Label { normal, anomalous };

inline const char* label_name(Label l) { return l == Label::normal ? "normal" : "anomalous"; }

inline Label parse_label(const std::string& s) {
    if (s == "normal") return Label::normal;
    if (s == "anomalous") return Label::anomalous;
    throw DataError("unknown sample label '" + s + "'");
}

/// One dataset entry. Paths are relative to the manifest directory.
struct SampleRecord {
    std::string id;
    Label label = Label::normal;
    std::string image;
    std::vector<std::string> features;  // raw stage maps, stage 1 first
    std::optional<std::string> mask;    // absent: no defective pixels
    std::size_t height = 0;
    std::size_t width = 0;

    friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

struct Manifest {
    int version = 1;
    std::string feature_source = "toy";  // toy | imported
    std::uint64_t extractor_seed = 0;
    std::vector<SampleRecord> train;
    std::vector<SampleRecord> test;
    fs::path base_dir;

    fs::path resolve(const std::string& rel) const { return base_dir / rel; }
};

inline constexpr int kManifestVersion = 1;

inline nlohmann::json record_to_json(const SampleRecord& r) {
    nlohmann::json j{{"id", r.id},           {"label", label_name(r.label)}, {"image", r.image},
                     {"features", r.features}, {"height", r.height},          {"width", r.width}};
    j["mask"] = r.mask ? nlohmann::json(*r.mask) : nlohmann::json(nullptr);
    return j;
}

inline SampleRecord record_from_json(const nlohmann::json& j) {
    try {
        SampleRecord r;
        r.id = j.at("id").get<std::string>();
        r.label = parse_label(j.at("label").get<std::string>());
        r.image = j.value("image", std::string{});
        r.features = j.value("features", std::vector<std::string>{});
        if (j.contains("mask") && !j["mask"].is_null()) r.mask = j["mask"].get<std::string>();
        r.height = j.at("height").get<std::size_t>();
        r.width = j.at("width").get<std::size_t>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed sample record: ") + e.what());
    }
}

inline void save_manifest(const fs::path& path, const Manifest& m) {
    nlohmann::json j{{"version", m.version},
                     {"feature_source", m.feature_source},
                     {"extractor_seed", m.extractor_seed},
                     {"train", nlohmann::json::array()},
                     {"test", nlohmann::json::array()}};
    for (const auto& r : m.train) j["train"].push_back(record_to_json(r));
    for (const auto& r : m.test) j["test"].push_back(record_to_json(r));
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write manifest " + path.string());
    out << j.dump(2) << '\n';
}

inline Manifest load_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("manifest " + path.string() + " is not valid JSON: " + e.what());
    }
    Manifest m;
    m.base_dir = path.parent_path();
    try {
        m.version = j.at("version").get<int>();
        m.feature_source = j.value("feature_source", std::string("toy"));
        m.extractor_seed = j.value("extractor_seed", std::uint64_t{0});
        for (const auto& r : j.at("train")) m.train.push_back(record_from_json(r));
        for (const auto& r : j.at("test")) m.test.push_back(record_from_json(r));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("manifest " + path.string() + ": " + e.what());
    }
    if (m.version != kManifestVersion) throw DataError("unsupported manifest version " + std::to_string(m.version));
    if (m.feature_source != "toy" && m.feature_source != "imported") {
        throw DataError("unknown feature source '" + m.feature_source + "'");
    }
    for (const auto* split : {&m.train, &m.test}) {
        for (const auto& r : *split) {
            if (r.features.empty() && (m.feature_source != "toy" || r.image.empty())) {
                throw DataError("record " + r.id + " has neither feature files nor a toy-extractable image");
            }
        }
    }
    return m;
}

/// Raw stage maps of one record: read from disk, or extracted from the
/// image with the toy extractor when the record lists no feature files.
inline std::vector<Tensor<float>> load_stages(const Manifest& m, const SampleRecord& r) {
    std::vector<Tensor<float>> stages;
    if (!r.features.empty()) {
        for (const auto& f : r.features) stages.push_back(read_tensor(m.resolve(f)));
    } else {
        stages = ToyExtractor(m.extractor_seed).extract(read_pnm(m.resolve(r.image)));
    }
    return stages;
}

inline TensorList<float> load_pyramid(const Manifest& m, const SampleRecord& r) {
    try {
        return build_pyramid(load_stages(m, r));
    } catch (const FormatError&) {
        throw;
    } catch (const Error& e) {
        throw DataError("record " + r.id + ": " + e.what());
    }
}

/// Ground-truth mask as a [H,W] tensor of 0/1; all zeros when absent.
inline Tensor<float> load_mask(const Manifest& m, const SampleRecord& r) {
    Tensor<float> mask({r.height, r.width});
    if (!r.mask) return mask;
    const Tensor<float> img = read_pnm(m.resolve(*r.mask));
    if (img.channels() != 1 || img.height() != r.height || img.width() != r.width) {
        throw DataError("record " + r.id + ": mask dims " + shape_string(img.dims()) + " do not match image " +
                        std::to_string(r.height) + "x" + std::to_string(r.width));
    }
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = img[i] > 0.5f ? 1.f : 0.f;
    return mask;
}

// ---------------------------------------------------------------------------
// Synthetic texture dataset

enum class DefectKind { contrast, occlusion, frequency };

inline const char* defect_name(DefectKind k) {
    switch (k) {
        case DefectKind::contrast: return "contrast";
        case DefectKind::occlusion: return "occlusion";
        case DefectKind::frequency: return "frequency";
    }
    return "?";
}

struct GenConfig {
    std::size_t train_count = 200;
    std::size_t test_count = 100;
    std::size_t image_size = 64;
    double anomaly_fraction = 0.5;  // share of defective test images
    double defect_min_fraction = 0.001;
    double defect_max_fraction = 0.4;
    bool log_uniform_area = true;   // otherwise uniform in area fraction
    double noise = 0.03;
    std::uint64_t seed = 0;

    void validate() const {
        if (train_count == 0) throw ConfigError("gen: train_count must be positive");
        if (image_size == 0 || image_size % ToyExtractor::kAlignment != 0) {
            throw ConfigError("gen: image_size must be a positive multiple of " +
                              std::to_string(ToyExtractor::kAlignment));
        }
        if (!(anomaly_fraction >= 0.0 && anomaly_fraction <= 1.0)) throw ConfigError("gen: anomaly_fraction outside [0,1]");
        if (!(defect_min_fraction > 0.0 && defect_min_fraction <= defect_max_fraction && defect_max_fraction < 1.0)) {
            throw ConfigError("gen: need 0 < defect_min_fraction <= defect_max_fraction < 1");
        }
        const double px = static_cast<double>(image_size * image_size);
        if (std::floor(defect_max_fraction * px) < std::ceil(defect_min_fraction * px)) {
            throw ConfigError("gen: defect area range holds no whole pixel count at this image size");
        }
        if (!(noise >= 0.0)) throw ConfigError("gen: noise must be non-negative");
    }
};

/// Procedural texture family: a few oriented sinusoids with per-image
/// phase and orientation jitter plus pixel noise.
class TextureModel {
public:
    struct Wave {
        double angle, frequency, amplitude;
        std::array<double, 3> color;
    };

    explicit TextureModel(std::uint64_t seed) {
        std::mt19937_64 rng(seed ^ 0x7e57u);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (auto& c : base_) c = 0.35 + 0.3 * u(rng);
        for (std::size_t k = 0; k < 3; ++k) {
            Wave w;
            w.angle = std::numbers::pi * (static_cast<double>(k) / 3.0 + 0.2 * u(rng));
            w.frequency = 0.06 + 0.1 * u(rng);
            w.amplitude = 0.08 + 0.06 * u(rng);
            for (auto& c : w.color) c = 0.4 + 0.6 * u(rng);
            waves_.push_back(w);
        }
    }

    const std::vector<Wave>& waves() const { return waves_; }

    /// Renders [3,size,size]. `freq_scale` and `angle_shift` perturb every
    /// wave; the defaults give the normal texture.
    Tensor<float> render(std::size_t size, std::mt19937_64& rng, double noise, double freq_scale = 1.0,
                         double angle_shift = 0.0) const {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        std::normal_distribution<double> n(0.0, 1.0);
        struct Instance {
            double kx, ky, phase;
        };
        std::vector<Instance> inst;
        for (const auto& w : waves_) {
            const double a = w.angle + angle_shift + 0.04 * (u(rng) - 0.5);
            const double f = 2.0 * std::numbers::pi * w.frequency * freq_scale * (1.0 + 0.04 * (u(rng) - 0.5));
            inst.push_back({f * std::cos(a), f * std::sin(a), 2.0 * std::numbers::pi * u(rng)});
        }
        Tensor<float> img({3, size, size});
        for (std::size_t y = 0; y < size; ++y) {
            for (std::size_t x = 0; x < size; ++x) {
                std::array<double, 3> v = base_;
                for (std::size_t k = 0; k < waves_.size(); ++k) {
                    const double s = std::sin(inst[k].kx * static_cast<double>(x) + inst[k].ky * static_cast<double>(y) +
                                              inst[k].phase);
                    for (std::size_t c = 0; c < 3; ++c) v[c] += waves_[k].amplitude * waves_[k].color[c] * s;
                }
                for (std::size_t c = 0; c < 3; ++c) {
                    img.at(c, y, x) = static_cast<float>(std::clamp(v[c] + noise * n(rng), 0.0, 1.0));
                }
            }
        }
        return img;
    }

private:
    std::array<double, 3> base_{};
    std::vector<Wave> waves_;
};

/// Random rotated ellipse whose pixel area lies in the configured range.
inline Tensor<float> random_defect_mask(std::size_t size, double min_fraction, double max_fraction, bool log_uniform,
                                        std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double px = static_cast<double>(size * size);
    for (int attempt = 0; attempt < 1000; ++attempt) {
        const double frac = log_uniform
                                ? std::exp(std::log(min_fraction) + u(rng) * (std::log(max_fraction) - std::log(min_fraction)))
                                : min_fraction + u(rng) * (max_fraction - min_fraction);
        const double area = frac * px;
        const double aspect = 1.0 + 2.0 * u(rng);
        const double ra = std::sqrt(area * aspect / std::numbers::pi);
        const double rb = std::sqrt(area / (aspect * std::numbers::pi));
        const double theta = std::numbers::pi * u(rng);
        const double margin = std::min(ra, static_cast<double>(size) / 2.0);
        const double cy = margin + u(rng) * (static_cast<double>(size) - 2.0 * margin);
        const double cx = margin + u(rng) * (static_cast<double>(size) - 2.0 * margin);
        const double ct = std::cos(theta), st = std::sin(theta);
        Tensor<float> mask({size, size});
        std::size_t count = 0;
        for (std::size_t y = 0; y < size; ++y) {
            for (std::size_t x = 0; x < size; ++x) {
                const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
                const double p = dx * ct + dy * st, q = -dx * st + dy * ct;
                if ((p * p) / (ra * ra) + (q * q) / (rb * rb) <= 1.0) {
                    mask.at(y, x) = 1.f;
                    ++count;
                }
            }
        }
        const double got = static_cast<double>(count) / px;
        if (got >= min_fraction && got <= max_fraction) return mask;
    }
    throw ConfigError("gen: could not place a defect with area in [" + std::to_string(min_fraction) + ", " +
                      std::to_string(max_fraction) + "]");
}

/// Paints a defect of the given kind into `img` where `mask` is set.
inline void apply_defect(Tensor<float>& img, const Tensor<float>& mask, DefectKind kind, const TextureModel& texture,
                         double noise, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> n(0.0, 1.0);
    const std::size_t h = img.height(), w = img.width();
    switch (kind) {
        case DefectKind::contrast: {
            const double gain = u(rng) < 0.5 ? 0.1 + 0.2 * u(rng) : 2.0 + 1.0 * u(rng);
            const double offset = (u(rng) < 0.5 ? -1.0 : 1.0) * (0.08 + 0.1 * u(rng));
            for (std::size_t c = 0; c < 3; ++c) {
                double mean = 0.0;
                for (std::size_t i = 0; i < h * w; ++i) mean += img.channel(c)[i];
                mean /= static_cast<double>(h * w);
                for (std::size_t i = 0; i < h * w; ++i) {
                    if (mask[i] == 0.f) continue;
                    float& v = img.channel(c)[i];
                    v = static_cast<float>(std::clamp(mean + gain * (v - mean) + offset, 0.0, 1.0));
                }
            }
            break;
        }
        case DefectKind::occlusion: {
            std::array<double, 3> color;
            for (auto& c : color) c = u(rng);
            for (std::size_t c = 0; c < 3; ++c) {
                for (std::size_t i = 0; i < h * w; ++i) {
                    if (mask[i] == 0.f) continue;
                    img.channel(c)[i] = static_cast<float>(std::clamp(color[c] + noise * n(rng), 0.0, 1.0));
                }
            }
            break;
        }
        case DefectKind::frequency: {
            const double scale = u(rng) < 0.5 ? 0.4 + 0.2 * u(rng) : 1.8 + 0.7 * u(rng);
            const double shift = std::numbers::pi * (0.25 + 0.5 * u(rng));
            const Tensor<float> alt = texture.render(h, rng, noise, scale, shift);
            for (std::size_t i = 0; i < img.size(); ++i) {
                if (mask[i % (h * w)] != 0.f) img[i] = alt[i];
            }
            break;
        }
    }
}

/// Writes images, masks, raw toy-extractor stage maps and manifest.json
/// under `out_dir`; returns the manifest. A pure function of `cfg`.
inline Manifest generate_synthetic_dataset(const GenConfig& cfg, const fs::path& out_dir) {
    cfg.validate();
    const TextureModel texture(cfg.seed);
    const ToyExtractor extractor(cfg.seed);
    Manifest m;
    m.feature_source = "toy";
    m.extractor_seed = cfg.seed;
    m.base_dir = out_dir;

    const std::size_t n_anomalous = static_cast<std::size_t>(std::llround(cfg.anomaly_fraction * cfg.test_count));
    const auto emit = [&](const std::string& id, std::uint64_t stream, bool defective) {
        std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                          static_cast<std::uint32_t>(stream)};
        std::mt19937_64 rng(seq);
        Tensor<float> img = texture.render(cfg.image_size, rng, cfg.noise);
        SampleRecord r;
        r.id = id;
        r.height = r.width = cfg.image_size;
        r.image = "images/" + id + ".ppm";
        if (defective) {
            r.label = Label::anomalous;
            const Tensor<float> mask = random_defect_mask(cfg.image_size, cfg.defect_min_fraction,
                                                          cfg.defect_max_fraction, cfg.log_uniform_area, rng);
            const auto kind = static_cast<DefectKind>(std::uniform_int_distribution<int>(0, 2)(rng));
            apply_defect(img, mask, kind, texture, cfg.noise, rng);
            r.mask = "masks/" + id + ".pgm";
            write_pnm(out_dir / *r.mask, mask);
        }
        write_pnm(out_dir / r.image, img);
        // Features come from the stored 8-bit image so re-extraction matches.
        const auto stages = extractor.extract(read_pnm(out_dir / r.image));
        for (std::size_t s = 0; s < stages.size(); ++s) {
            r.features.push_back("features/" + id + ".s" + std::to_string(s + 1) + ".msft");
            write_tensor(out_dir / r.features.back(), stages[s]);
        }
        return r;
    };

    for (std::size_t i = 0; i < cfg.train_count; ++i) {
        m.train.push_back(emit("train_" + std::to_string(i), 2 * i, false));
    }
    // Defective and normal test images interleave deterministically.
    for (std::size_t i = 0; i < cfg.test_count; ++i) {
        const bool defective = (i * n_anomalous) / std::max<std::size_t>(cfg.test_count, 1) !=
                               ((i + 1) * n_anomalous) / std::max<std::size_t>(cfg.test_count, 1);
        m.test.push_back(emit("test_" + std::to_string(i), 2 * i + 1, defective));
    }
    save_manifest(out_dir / "manifest.json", m);
    return m;
}

}  // namespace msflow
