#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "msflow/dataset.hpp"
#include "msflow/error.hpp"
#include "msflow/model.hpp"
#include "msflow/scoring.hpp"
#include "msflow/trainer.hpp"

namespace msflow {

enum class AggMode { add, mul, both };

inline const char* agg_mode_name(AggMode m) {
    switch (m) {
        case AggMode::add: return "add";
        case AggMode::mul: return "mul";
        case AggMode::both: return "both";
    }
    return "?";
}

struct ModelOptions {
    std::vector<std::size_t> blocks{2, 5, 8};
    std::size_t pos_channels = 64;
    double clamp = kDefaultClamp;
    bool fusion = true;
    std::size_t fusion_size = 0;
    std::size_t hidden_channels = 0;
};

struct ScoreOptions {
    double k_fraction = kDefaultKFraction;
    AggMode agg = AggMode::both;
    bool heatmaps = false;
};

struct EvalOptions {
    double fpr_limit = 0.3;
    std::size_t n_thresholds = 200;
};

/// Everything a subcommand needs. Sections of the config file map onto
/// the members below; see RunConfig::keys() for the full key list.
struct RunConfig {
    std::filesystem::path out = "msflow_run";
    std::uint64_t seed = 0;
    std::size_t jobs = 1;
    std::size_t checkpoint_every = 0;

    std::string feature_source = "toy";
    std::filesystem::path manifest;  // empty: <out>/data/manifest.json

    GenConfig gen;
    ModelOptions model;
    TrainConfig train;
    ScoreOptions score;
    EvalOptions eval;

    std::filesystem::path manifest_path() const { return manifest.empty() ? out / "data" / "manifest.json" : manifest; }
    std::filesystem::path checkpoint_dir() const { return out / "checkpoint"; }
    std::filesystem::path scores_dir() const { return out / "scores"; }

    /// Seeds of the individual stages, all derived from `seed`.
    std::uint64_t gen_seed() const { return seed; }
    std::uint64_t model_seed() const { return seed ^ 0x9e3779b97f4a7c15ull; }
    std::uint64_t shuffle_seed() const { return seed ^ 0xc2b2ae3d27d4eb4full; }

    struct Key {
        std::string section, name;
        std::function<void(RunConfig&, const std::string&)> set;
        std::function<std::string(const RunConfig&)> get;
    };

    static const std::vector<Key>& keys();

    void set(const std::string& section, const std::string& name, const std::string& value);
    void validate() const;
};

namespace detail {

inline std::string trim(std::string s) {
    const auto not_space = [](unsigned char c) { return !std::isspace(c); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    return s;
}

template <typename N>
N parse_number(const std::string& raw, const std::string& key) {
    const std::string s = trim(raw);
    N v{};
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
        throw ConfigError("config key '" + key + "': cannot parse '" + raw + "' as a number");
    }
    return v;
}

inline bool parse_bool(const std::string& raw, const std::string& key) {
    std::string s = trim(raw);
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError("config key '" + key + "': expected a boolean, got '" + raw + "'");
}

template <typename N>
std::vector<N> parse_list(const std::string& raw, const std::string& key) {
    std::vector<N> out;
    std::stringstream ss(raw);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!trim(item).empty()) out.push_back(parse_number<N>(item, key));
    }
    return out;
}

template <typename N>
std::string format_list(const std::vector<N>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        std::ostringstream o;
        o << std::setprecision(17) << v[i];
        s += o.str();
    }
    return s;
}

inline std::string format_double(double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

}  // namespace detail

inline const std::vector<RunConfig::Key>& RunConfig::keys() {
    using detail::format_double;
    using detail::parse_bool;
    using detail::parse_number;
    using C = RunConfig;
    const auto size_key = [](const char* sec, const char* name, std::size_t C::*a) {
        return Key{sec, name,
                   [a, sec, name](C& c, const std::string& v) {
                       c.*a = parse_number<std::size_t>(v, std::string(sec) + "." + name);
                   },
                   [a](const C& c) { return std::to_string(c.*a); }};
    };
    static const std::vector<Key> table = [&] {
        std::vector<Key> t;
        // [run]
        t.push_back({"run", "out", [](C& c, const std::string& v) { c.out = detail::trim(v); },
                     [](const C& c) { return c.out.string(); }});
        t.push_back({"run", "seed",
                     [](C& c, const std::string& v) { c.seed = parse_number<std::uint64_t>(v, "run.seed"); },
                     [](const C& c) { return std::to_string(c.seed); }});
        t.push_back(size_key("run", "jobs", &C::jobs));
        t.push_back(size_key("run", "checkpoint_every", &C::checkpoint_every));
        // [data]
        t.push_back({"data", "feature_source", [](C& c, const std::string& v) { c.feature_source = detail::trim(v); },
                     [](const C& c) { return c.feature_source; }});
        t.push_back({"data", "manifest", [](C& c, const std::string& v) { c.manifest = detail::trim(v); },
                     [](const C& c) { return c.manifest.string(); }});
        // [gen]
        t.push_back({"gen", "train_count",
                     [](C& c, const std::string& v) { c.gen.train_count = parse_number<std::size_t>(v, "gen.train_count"); },
                     [](const C& c) { return std::to_string(c.gen.train_count); }});
        t.push_back({"gen", "test_count",
                     [](C& c, const std::string& v) { c.gen.test_count = parse_number<std::size_t>(v, "gen.test_count"); },
                     [](const C& c) { return std::to_string(c.gen.test_count); }});
        t.push_back({"gen", "image_size",
                     [](C& c, const std::string& v) { c.gen.image_size = parse_number<std::size_t>(v, "gen.image_size"); },
                     [](const C& c) { return std::to_string(c.gen.image_size); }});
        t.push_back({"gen", "anomaly_fraction",
                     [](C& c, const std::string& v) { c.gen.anomaly_fraction = parse_number<double>(v, "gen.anomaly_fraction"); },
                     [](const C& c) { return format_double(c.gen.anomaly_fraction); }});
        t.push_back({"gen", "defect_min_fraction",
                     [](C& c, const std::string& v) {
                         c.gen.defect_min_fraction = parse_number<double>(v, "gen.defect_min_fraction");
                     },
                     [](const C& c) { return format_double(c.gen.defect_min_fraction); }});
        t.push_back({"gen", "defect_max_fraction",
                     [](C& c, const std::string& v) {
                         c.gen.defect_max_fraction = parse_number<double>(v, "gen.defect_max_fraction");
                     },
                     [](const C& c) { return format_double(c.gen.defect_max_fraction); }});
        t.push_back({"gen", "defect_area_sampling",
                     [](C& c, const std::string& v) {
                         const std::string s = detail::trim(v);
                         if (s == "log_uniform") {
                             c.gen.log_uniform_area = true;
                         } else if (s == "uniform") {
                             c.gen.log_uniform_area = false;
                         } else {
                             throw ConfigError("gen.defect_area_sampling must be log_uniform or uniform, got '" + s + "'");
                         }
                     },
                     [](const C& c) { return std::string(c.gen.log_uniform_area ? "log_uniform" : "uniform"); }});
        t.push_back({"gen", "noise", [](C& c, const std::string& v) { c.gen.noise = parse_number<double>(v, "gen.noise"); },
                     [](const C& c) { return format_double(c.gen.noise); }});
        // [model]
        t.push_back({"model", "blocks",
                     [](C& c, const std::string& v) { c.model.blocks = detail::parse_list<std::size_t>(v, "model.blocks"); },
                     [](const C& c) { return detail::format_list(c.model.blocks); }});
        t.push_back({"model", "pos_channels",
                     [](C& c, const std::string& v) {
                         c.model.pos_channels = parse_number<std::size_t>(v, "model.pos_channels");
                     },
                     [](const C& c) { return std::to_string(c.model.pos_channels); }});
        t.push_back({"model", "clamp", [](C& c, const std::string& v) { c.model.clamp = parse_number<double>(v, "model.clamp"); },
                     [](const C& c) { return format_double(c.model.clamp); }});
        t.push_back({"model", "fusion", [](C& c, const std::string& v) { c.model.fusion = parse_bool(v, "model.fusion"); },
                     [](const C& c) { return std::string(c.model.fusion ? "true" : "false"); }});
        t.push_back({"model", "fusion_size",
                     [](C& c, const std::string& v) { c.model.fusion_size = parse_number<std::size_t>(v, "model.fusion_size"); },
                     [](const C& c) { return std::to_string(c.model.fusion_size); }});
        t.push_back({"model", "hidden_channels",
                     [](C& c, const std::string& v) {
                         c.model.hidden_channels = parse_number<std::size_t>(v, "model.hidden_channels");
                     },
                     [](const C& c) { return std::to_string(c.model.hidden_channels); }});
        // [train]
        t.push_back({"train", "epochs",
                     [](C& c, const std::string& v) { c.train.epochs = parse_number<std::size_t>(v, "train.epochs"); },
                     [](const C& c) { return std::to_string(c.train.epochs); }});
        t.push_back({"train", "batch_size",
                     [](C& c, const std::string& v) { c.train.batch_size = parse_number<std::size_t>(v, "train.batch_size"); },
                     [](const C& c) { return std::to_string(c.train.batch_size); }});
        t.push_back({"train", "lr", [](C& c, const std::string& v) { c.train.lr = parse_number<double>(v, "train.lr"); },
                     [](const C& c) { return format_double(c.train.lr); }});
        t.push_back({"train", "lr_drop_factor",
                     [](C& c, const std::string& v) { c.train.lr_drop_factor = parse_number<double>(v, "train.lr_drop_factor"); },
                     [](const C& c) { return format_double(c.train.lr_drop_factor); }});
        t.push_back({"train", "lr_drop_points",
                     [](C& c, const std::string& v) {
                         c.train.lr_drop_points = detail::parse_list<double>(v, "train.lr_drop_points");
                     },
                     [](const C& c) { return detail::format_list(c.train.lr_drop_points); }});
        t.push_back({"train", "grad_clip",
                     [](C& c, const std::string& v) { c.train.grad_clip = parse_number<double>(v, "train.grad_clip"); },
                     [](const C& c) { return format_double(c.train.grad_clip); }});
        // [score]
        t.push_back({"score", "k_fraction",
                     [](C& c, const std::string& v) { c.score.k_fraction = parse_number<double>(v, "score.k_fraction"); },
                     [](const C& c) { return format_double(c.score.k_fraction); }});
        t.push_back({"score", "agg",
                     [](C& c, const std::string& v) {
                         const std::string s = detail::trim(v);
                         if (s == "add") {
                             c.score.agg = AggMode::add;
                         } else if (s == "mul") {
                             c.score.agg = AggMode::mul;
                         } else if (s == "both") {
                             c.score.agg = AggMode::both;
                         } else {
                             throw ConfigError("score.agg must be add, mul or both, got '" + s + "'");
                         }
                     },
                     [](const C& c) { return std::string(agg_mode_name(c.score.agg)); }});
        t.push_back({"score", "heatmaps", [](C& c, const std::string& v) { c.score.heatmaps = parse_bool(v, "score.heatmaps"); },
                     [](const C& c) { return std::string(c.score.heatmaps ? "true" : "false"); }});
        // [eval]
        t.push_back({"eval", "fpr_limit",
                     [](C& c, const std::string& v) { c.eval.fpr_limit = parse_number<double>(v, "eval.fpr_limit"); },
                     [](const C& c) { return format_double(c.eval.fpr_limit); }});
        t.push_back({"eval", "n_thresholds",
                     [](C& c, const std::string& v) { c.eval.n_thresholds = parse_number<std::size_t>(v, "eval.n_thresholds"); },
                     [](const C& c) { return std::to_string(c.eval.n_thresholds); }});
        return t;
    }();
    return table;
}

inline void RunConfig::set(const std::string& section, const std::string& name, const std::string& value) {
    for (const auto& k : keys()) {
        if (k.section == section && k.name == name) {
            k.set(*this, value);
            return;
        }
    }
    throw ConfigError("unknown config key '" + section + "." + name + "'");
}

inline void RunConfig::validate() const {
    if (feature_source != "toy" && feature_source != "imported") {
        throw ConfigError("data.feature_source must be toy or imported, got '" + feature_source + "'");
    }
    if (feature_source == "imported" && manifest.empty()) {
        throw ConfigError("data.manifest is required when data.feature_source = imported");
    }
    if (out.empty()) throw ConfigError("run.out must not be empty");
    if (jobs == 0) throw ConfigError("run.jobs must be positive");
    if (model.blocks.empty() || model.blocks.size() > kMaxScales) {
        throw ConfigError("model.blocks needs 1 to " + std::to_string(kMaxScales) + " entries");
    }
    if (model.pos_channels % 4 != 0) throw ConfigError("model.pos_channels must be a multiple of 4");
    if (!(model.clamp >= 0.0)) throw ConfigError("model.clamp must be >= 0");
    if (!(score.k_fraction > 0.0 && score.k_fraction <= 1.0)) throw ConfigError("score.k_fraction must lie in (0, 1]");
    if (!(eval.fpr_limit > 0.0 && eval.fpr_limit <= 1.0)) throw ConfigError("eval.fpr_limit must lie in (0, 1]");
    if (eval.n_thresholds < 2) throw ConfigError("eval.n_thresholds must be >= 2");
    gen.validate();
    train.validate();
}

/// Applies an INI file. Every key must belong to a known section.
inline void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::ini_parser::read_ini(path.string(), tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError("config file " + path.string() + ": " + e.what());
    }
    for (const auto& [section, body] : tree) {
        if (body.empty()) throw ConfigError("config file " + path.string() + ": key '" + section + "' outside a section");
        for (const auto& [name, value] : body) cfg.set(section, name, value.get_value<std::string>());
    }
}

/// Applies MSFLOW_<SECTION>_<KEY> environment variables.
inline void apply_environment(RunConfig& cfg, const std::function<const char*(const char*)>& getenv = std::getenv) {
    for (const auto& k : RunConfig::keys()) {
        std::string var = "MSFLOW_" + k.section + "_" + k.name;
        std::transform(var.begin(), var.end(), var.begin(), [](unsigned char c) { return std::toupper(c); });
        if (const char* v = getenv(var.c_str())) k.set(cfg, v);
    }
}

/// Applies a "section.key=value" override.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
        throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
    }
    cfg.set(detail::trim(assignment.substr(0, dot)), detail::trim(assignment.substr(dot + 1, eq - dot - 1)),
            assignment.substr(eq + 1));
}

/// The fully resolved configuration as INI text; reading it back yields
/// an identical RunConfig.
inline std::string config_snapshot(const RunConfig& cfg) {
    std::ostringstream out;
    std::string section;
    for (const auto& k : RunConfig::keys()) {
        if (k.section != section) {
            if (!section.empty()) out << '\n';
            section = k.section;
            out << '[' << section << "]\n";
        }
        out << k.name << " = " << k.get(cfg) << '\n';
    }
    return out.str();
}

inline ModelConfig make_model_config(const RunConfig& cfg, const std::vector<Shape>& pyramid_dims) {
    if (pyramid_dims.size() != cfg.model.blocks.size()) {
        throw ConfigError("model.blocks lists " + std::to_string(cfg.model.blocks.size()) + " scales, data has " +
                          std::to_string(pyramid_dims.size()));
    }
    ModelConfig m = make_model_config(pyramid_dims, cfg.model.pos_channels);
    for (std::size_t i = 0; i < m.scales.size(); ++i) m.scales[i].blocks = cfg.model.blocks[i];
    m.clamp = cfg.model.clamp;
    m.fusion = cfg.model.fusion;
    m.fusion_size = cfg.model.fusion_size;
    m.hidden_channels = cfg.model.hidden_channels;
    m.seed = cfg.model_seed();
    return m;
}

}  // namespace msflow
