// msflow command-line tool: gen | train | score | eval | check.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "msflow/pipeline.hpp"

namespace {

enum ExitCode : int { kOk = 0, kConfigError = 1, kDataError = 2, kNumericError = 3, kInternalError = 70 };

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> jobs;
    std::optional<double> k_fraction;
    std::optional<std::string> agg;
    std::optional<std::string> out;
    std::vector<std::string> overrides;
    std::string checkpoint;
    std::string scores;
};

void add_common(CLI::App* cmd, Flags& f) {
    cmd->add_option("--config", f.config, "INI config file")->check(CLI::ExistingFile);
    cmd->add_option("--seed", f.seed, "Run seed (run.seed)");
    cmd->add_option("--jobs", f.jobs, "Worker threads for scoring (run.jobs)");
    cmd->add_option("--k-fraction", f.k_fraction, "Top-K fraction for image scores (score.k_fraction)");
    cmd->add_option("--agg", f.agg, "Aggregation: add, mul or both (score.agg)");
    cmd->add_option("--out", f.out, "Output directory (run.out)");
    cmd->add_option("--set", f.overrides, "Override any key: section.key=value")->take_all();
}

msflow::RunConfig resolve(const Flags& f) {
    msflow::RunConfig cfg;
    if (!f.config.empty()) msflow::apply_config_file(cfg, f.config);
    msflow::apply_environment(cfg);
    for (const auto& o : f.overrides) msflow::apply_override(cfg, o);
    if (f.seed) cfg.set("run", "seed", std::to_string(*f.seed));
    if (f.jobs) cfg.set("run", "jobs", std::to_string(*f.jobs));
    if (f.k_fraction) cfg.set("score", "k_fraction", msflow::detail::format_double(*f.k_fraction));
    if (f.agg) cfg.set("score", "agg", *f.agg);
    if (f.out) cfg.set("run", "out", *f.out);
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-scale normalizing-flow anomaly detection"};
    app.require_subcommand(1);
    Flags flags;

    auto* gen = app.add_subcommand("gen", "Generate the synthetic texture dataset under <out>/data");
    auto* train = app.add_subcommand("train", "Train a model on the manifest's normal samples");
    auto* score = app.add_subcommand("score", "Score the test split with a checkpoint");
    auto* eval = app.add_subcommand("eval", "Compute AUROC and PRO from stored scores");
    auto* check = app.add_subcommand("check", "Invertibility audit of a checkpoint");
    for (auto* cmd : {gen, train, score, eval, check}) add_common(cmd, flags);
    for (auto* cmd : {score, check}) cmd->add_option("--checkpoint", flags.checkpoint, "Checkpoint directory");
    eval->add_option("--scores", flags.scores, "Scores directory written by 'score'");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfigError;
    }

    try {
        const msflow::RunConfig cfg = resolve(flags);
        const std::filesystem::path ckpt = flags.checkpoint.empty() ? cfg.checkpoint_dir() : std::filesystem::path(flags.checkpoint);
        if (*gen) {
            msflow::cmd_gen(cfg);
        } else if (*train) {
            msflow::cmd_train(cfg);
        } else if (*score) {
            msflow::cmd_score(cfg, ckpt);
        } else if (*eval) {
            msflow::cmd_eval(cfg, flags.scores.empty() ? cfg.scores_dir() : std::filesystem::path(flags.scores));
        } else if (*check) {
            if (!msflow::cmd_check(cfg, ckpt).passed) return kNumericError;
        }
    } catch (const msflow::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const msflow::NumericError& e) {
        std::cerr << "numerical error: " << e.what() << '\n';
        return kNumericError;
    } catch (const msflow::DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kDataError;
    } catch (const msflow::ShapeError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kDataError;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kDataError;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return kInternalError;
    }
    return kOk;
}
