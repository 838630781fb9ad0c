#pragma once

#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "msflow/checkpoint.hpp"
#include "msflow/config.hpp"
#include "msflow/dataset.hpp"
#include "msflow/metrics.hpp"
#include "msflow/scoring.hpp"
#include "msflow/trainer.hpp"

namespace msflow {

// Subcommand bodies shared by the command-line tool and the tests. Each
// writes only below cfg.out and leaves a resolved-config snapshot there.

inline void write_snapshot(const RunConfig& cfg, const std::string& command) {
    std::filesystem::create_directories(cfg.out);
    std::ofstream out(cfg.out / (command + ".resolved.ini"), std::ios::trunc);
    if (!out) throw DataError("cannot write config snapshot under " + cfg.out.string());
    out << config_snapshot(cfg);
}

inline std::ostream* g_log = &std::cerr;

inline void log_line(const std::string& s) {
    if (g_log) *g_log << s << std::endl;
}

inline Manifest cmd_gen(const RunConfig& cfg) {
    cfg.validate();
    if (cfg.feature_source != "toy") throw ConfigError("gen only produces toy-feature datasets");
    write_snapshot(cfg, "gen");
    GenConfig g = cfg.gen;
    g.seed = cfg.gen_seed();
    const auto dir = cfg.out / "data";
    auto m = generate_synthetic_dataset(g, dir);
    log_line("gen: " + std::to_string(m.train.size()) + " train / " + std::to_string(m.test.size()) +
             " test samples in " + dir.string());
    return m;
}

inline Manifest load_run_manifest(const RunConfig& cfg) {
    Manifest m = load_manifest(cfg.manifest_path());
    if (m.feature_source != cfg.feature_source) {
        throw ConfigError("data.feature_source is '" + cfg.feature_source + "' but the manifest declares '" +
                          m.feature_source + "'");
    }
    return m;
}

struct TrainResult {
    MSFlowModel<float> model;
    TrainLog log;
};

inline TrainResult cmd_train(const RunConfig& cfg) {
    cfg.validate();
    write_snapshot(cfg, "train");
    const Manifest m = load_run_manifest(cfg);
    if (m.train.empty()) throw DataError("manifest has no training records");
    std::vector<TensorList<float>> pyramids;
    std::vector<Label> labels;
    for (const auto& r : m.train) {
        if (r.label != Label::normal) throw DataError("training record " + r.id + " is labelled anomalous");
        pyramids.push_back(load_pyramid(m, r));
        labels.push_back(r.label);
    }
    std::vector<Shape> dims;
    for (const auto& y : pyramids.front()) dims.push_back(y.dims());
    for (std::size_t i = 0; i < pyramids.size(); ++i) {
        for (std::size_t s = 0; s < dims.size(); ++s) {
            if (pyramids[i].size() != dims.size() || pyramids[i][s].dims() != dims[s]) {
                throw DataError("training record " + m.train[i].id + " has pyramid dims differing from " +
                                m.train.front().id);
            }
        }
    }
    MSFlowModel<float> model(make_model_config(cfg, dims));
    TrainConfig tc = cfg.train;
    tc.seed = cfg.shuffle_seed();
    log_line("train: " + std::to_string(pyramids.size()) + " samples, " + std::to_string(model.parameter_count()) +
             " parameters, " + std::to_string(tc.epochs) + " epochs");
    TrainLog log;
    try {
        log = train(model, pyramids, labels, tc, [&](const EpochLog& e) {
            std::ostringstream s;
            s << "epoch " << e.epoch + 1 << "/" << tc.epochs << " loss " << std::setprecision(6) << e.loss << " lr "
              << e.lr << " (" << std::fixed << std::setprecision(1) << e.seconds << " s)";
            log_line(s.str());
            if (cfg.checkpoint_every > 0 && (e.epoch + 1) % cfg.checkpoint_every == 0) {
                save_checkpoint(cfg.out / ("checkpoint_epoch" + std::to_string(e.epoch + 1)), model);
            }
        });
    } catch (const NumericError&) {
        save_checkpoint(cfg.out / "diagnostic", model);
        log_line("train: numeric failure, parameter snapshot written to " + (cfg.out / "diagnostic").string());
        throw;
    }
    save_checkpoint(cfg.checkpoint_dir(), model);
    write_train_log_csv(cfg.out / "train_log.csv", log);
    return {std::move(model), std::move(log)};
}

struct ScoredSample {
    std::string id;
    Label label = Label::normal;
    ScoreMaps maps;
};

/// Runs `fn(i)` for i in [0, n) on up to `jobs` threads.
template <typename F>
void parallel_for(std::size_t n, std::size_t jobs, F&& fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

inline std::vector<ScoredSample> score_records(const MSFlowModel<float>& model, const Manifest& m,
                                               const std::vector<SampleRecord>& records, double k_fraction,
                                               std::size_t jobs) {
    std::vector<ScoredSample> out(records.size());
    parallel_for(records.size(), jobs, [&](std::size_t i) {
        const auto& r = records[i];
        out[i] = {r.id, r.label, score_pyramid(model, load_pyramid(m, r), r.height, r.width, k_fraction)};
    });
    return out;
}

inline std::string format_metric(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

inline std::vector<Aggregation> aggregations_of(AggMode m) {
    if (m == AggMode::add) return {Aggregation::add};
    if (m == AggMode::mul) return {Aggregation::mul};
    return {Aggregation::add, Aggregation::mul};
}

inline std::vector<ScoredSample> cmd_score(const RunConfig& cfg, const std::filesystem::path& checkpoint) {
    cfg.validate();
    write_snapshot(cfg, "score");
    const MSFlowModel<float> model = load_checkpoint(checkpoint);
    const Manifest m = load_run_manifest(cfg);
    auto scored = score_records(model, m, m.test, cfg.score.k_fraction, cfg.jobs);

    const auto dir = cfg.scores_dir();
    std::filesystem::create_directories(dir / "maps");
    std::ofstream csv(dir / "scores.csv", std::ios::trunc);
    if (!csv) throw DataError("cannot write " + (dir / "scores.csv").string());
    csv << "id,label,s_det_add,s_det_mul\n";
    for (const auto& s : scored) {
        char line[256];
        std::snprintf(line, sizeof line, ",%s,%.17g,%.17g\n", label_name(s.label), s.maps.s_det_add, s.maps.s_det_mul);
        csv << s.id << line;
        for (const auto a : aggregations_of(cfg.score.agg)) {
            const std::string stem = s.id + "." + aggregation_name(a);
            write_tensor(dir / "maps" / (stem + ".msft"), s.maps.map(a));
            if (cfg.score.heatmaps) write_heatmap(dir / "heatmaps" / (stem + ".pgm"), s.maps.map(a));
        }
    }
    log_line("score: " + std::to_string(scored.size()) + " test samples scored into " + dir.string());
    return scored;
}

struct ReportRow {
    std::string agg;  // add | mul | both (detection from mul, localization from add)
    EvalReport report;
};

inline std::string report_csv(const std::vector<ReportRow>& rows) {
    std::string s = "agg,det_auroc,loc_auroc,loc_pro\n";
    for (const auto& r : rows) {
        s += r.agg + "," + format_metric(r.report.det_auroc) + "," + format_metric(r.report.loc_auroc) + "," +
             format_metric(r.report.loc_pro) + "\n";
    }
    return s;
}

/// Evaluates in-memory scores against ground truth.
inline std::vector<ReportRow> evaluate_scores(const std::vector<double>& det_add, const std::vector<double>& det_mul,
                                              const std::vector<Tensor<float>>& maps_add,
                                              const std::vector<Tensor<float>>& maps_mul, const std::vector<int>& labels,
                                              const std::vector<Tensor<float>>& masks, AggMode mode,
                                              const EvalOptions& opt) {
    std::vector<ReportRow> rows;
    if (mode == AggMode::both) {
        // Detection from the multiplied map, localization from the summed one.
        EvalReport both = evaluate(det_mul, labels, maps_add, masks, opt.fpr_limit, opt.n_thresholds);
        rows.push_back({"both", both});
    }
    if (mode != AggMode::mul) rows.push_back({"add", evaluate(det_add, labels, maps_add, masks, opt.fpr_limit, opt.n_thresholds)});
    if (mode != AggMode::add) rows.push_back({"mul", evaluate(det_mul, labels, maps_mul, masks, opt.fpr_limit, opt.n_thresholds)});
    return rows;
}

inline std::vector<ReportRow> cmd_eval(const RunConfig& cfg, const std::filesystem::path& scores_dir) {
    cfg.validate();
    write_snapshot(cfg, "eval");
    const Manifest m = load_run_manifest(cfg);

    std::ifstream csv(scores_dir / "scores.csv");
    if (!csv) throw DataError("no scores at " + (scores_dir / "scores.csv").string());
    std::string line;
    std::getline(csv, line);
    if (line != "id,label,s_det_add,s_det_mul") throw DataError("unexpected scores.csv header '" + line + "'");
    std::vector<std::string> ids;
    std::vector<double> det_add, det_mul;
    while (std::getline(csv, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string id, label, a, b;
        if (!std::getline(ss, id, ',') || !std::getline(ss, label, ',') || !std::getline(ss, a, ',') ||
            !std::getline(ss, b, ',')) {
            throw DataError("malformed scores.csv line '" + line + "'");
        }
        ids.push_back(id);
        try {
            det_add.push_back(std::stod(a));
            det_mul.push_back(std::stod(b));
        } catch (const std::exception&) {
            throw DataError("malformed score values for record " + id);
        }
    }

    std::vector<std::string> expected;
    for (const auto& r : m.test) expected.push_back(r.id);
    if (ids != expected) {
        const std::set<std::string> a(ids.begin(), ids.end()), b(expected.begin(), expected.end());
        std::string offending;
        for (const auto& id : a) {
            if (!b.count(id)) offending += " " + id + "(scores only)";
        }
        for (const auto& id : b) {
            if (!a.count(id)) offending += " " + id + "(manifest only)";
        }
        if (offending.empty()) offending = " (record order differs)";
        throw DataError("scores list " + std::to_string(ids.size()) + " records, manifest test split has " +
                        std::to_string(expected.size()) + ";" + offending);
    }

    std::vector<int> labels;
    std::vector<Tensor<float>> masks, maps_add, maps_mul;
    const auto read_map = [&](const SampleRecord& r, Aggregation a) {
        Tensor<float> t = read_tensor(scores_dir / "maps" / (r.id + "." + aggregation_name(a) + ".msft"));
        if (t.dims() != Shape{r.height, r.width}) {
            throw DataError("score map of " + r.id + " has dims " + shape_string(t.dims()));
        }
        return t;
    };
    for (const auto& r : m.test) {
        labels.push_back(r.label == Label::anomalous ? 1 : 0);
        masks.push_back(load_mask(m, r));
        if (cfg.score.agg != AggMode::mul) maps_add.push_back(read_map(r, Aggregation::add));
        if (cfg.score.agg != AggMode::add) maps_mul.push_back(read_map(r, Aggregation::mul));
    }
    const auto rows = evaluate_scores(det_add, det_mul, maps_add, maps_mul, labels, masks, cfg.score.agg, cfg.eval);

    std::ofstream out(cfg.out / "report.csv", std::ios::trunc);
    if (!out) throw DataError("cannot write report.csv");
    out << report_csv(rows);
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows) {
        j.push_back({{"agg", r.agg},
                     {"det_auroc", r.report.det_auroc},
                     {"loc_auroc", r.report.loc_auroc},
                     {"loc_pro", r.report.loc_pro}});
    }
    std::ofstream(cfg.out / "report.json", std::ios::trunc)
        << nlohmann::json{{"fpr_limit", cfg.eval.fpr_limit}, {"n_thresholds", cfg.eval.n_thresholds}, {"rows", j}}.dump(2)
        << '\n';
    for (const auto& r : rows) {
        log_line("eval[" + r.agg + "]: det AUROC " + format_metric(r.report.det_auroc) + ", loc AUROC " +
                 format_metric(r.report.loc_auroc) + ", PRO " + format_metric(r.report.loc_pro));
    }
    return rows;
}

struct CheckResult {
    double max_encode_decode = 0.0;  // |decode(encode(y)) - y|
    double max_decode_encode = 0.0;  // |encode(decode(z)) - z|
    double max_logdet_mismatch = 0.0;
    double tolerance = 1e-3;
    bool passed = false;
};

/// Invertibility audit on Gaussian draws in the model's input shapes.
inline CheckResult roundtrip_check(const MSFlowModel<float>& model, std::uint64_t seed, std::size_t trials = 4,
                                   double tolerance = 1e-3) {
    CheckResult r;
    r.tolerance = tolerance;
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.f, 1.f);
    for (std::size_t t = 0; t < trials; ++t) {
        TensorList<float> y;
        for (const auto& d : model.input_dims()) {
            Tensor<float> x(d);
            for (auto& v : x.values()) v = normal(rng);
            y.push_back(std::move(x));
        }
        const auto enc = model.encode(y);
        const auto back = model.decode(enc.latents);
        const auto dec = model.decode(y);
        const auto again = model.encode(dec.latents);
        for (std::size_t s = 0; s < y.size(); ++s) {
            r.max_encode_decode = std::max(r.max_encode_decode, static_cast<double>(max_abs_diff(back.latents[s], y[s])));
            r.max_decode_encode = std::max(r.max_decode_encode, static_cast<double>(max_abs_diff(again.latents[s], y[s])));
        }
        const double scale = std::max(1.0, std::abs(enc.total_logdet));
        r.max_logdet_mismatch = std::max(r.max_logdet_mismatch, std::abs(enc.total_logdet + back.total_logdet) / scale);
    }
    r.passed = r.max_encode_decode < tolerance && r.max_decode_encode < tolerance && r.max_logdet_mismatch < tolerance;
    return r;
}

inline CheckResult cmd_check(const RunConfig& cfg, const std::filesystem::path& checkpoint) {
    cfg.validate();
    write_snapshot(cfg, "check");
    const MSFlowModel<float> model = load_checkpoint(checkpoint);
    const CheckResult r = roundtrip_check(model, cfg.seed);
    std::ofstream(cfg.out / "check.json", std::ios::trunc)
        << nlohmann::json{{"checkpoint", checkpoint.string()},
                          {"max_encode_decode_error", r.max_encode_decode},
                          {"max_decode_encode_error", r.max_decode_encode},
                          {"max_logdet_mismatch", r.max_logdet_mismatch},
                          {"tolerance", r.tolerance},
                          {"passed", r.passed}}
               .dump(2)
        << '\n';
    std::ostringstream s;
    s << "check: " << (r.passed ? "PASS" : "FAIL") << " max round-trip error " << std::setprecision(3)
      << std::max(r.max_encode_decode, r.max_decode_encode) << " (tolerance " << r.tolerance << ")";
    log_line(s.str());
    return r;
}

}  // namespace msflow
