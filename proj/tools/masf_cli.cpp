#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "masf/harness.hpp"

using namespace masf;

namespace {

enum ExitCode { kOk = 0, kConfigError = 1, kRunFailure = 2, kIoError = 3 };

struct Overrides {
    std::optional<std::size_t> iterations;
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> rows;
    std::vector<std::size_t> targets;
    std::optional<std::string> out;
    std::optional<std::size_t> threads;
    std::optional<double> alpha, eta, gamma, beta1, beta2, tau, margin, clip;
    std::optional<std::size_t> batch_size;
    std::optional<std::string> local_loss;
    bool plots = false;
    bool no_metrics = false;

    void attach(CLI::App* app, bool multi_run) {
        app->add_option("--iterations", iterations, "Training iterations per run");
        app->add_option("--out", out, "Output directory (overrides MASF_OUT_DIR and the config)");
        app->add_option("--alpha", alpha, "Inner learning rate");
        app->add_option("--eta", eta, "Outer learning rate");
        app->add_option("--gamma", gamma, "Metric-network learning rate");
        app->add_option("--beta1", beta1, "Global alignment weight");
        app->add_option("--beta2", beta2, "Local clustering weight");
        app->add_option("--tau", tau, "Soft-label temperature");
        app->add_option("--margin", margin, "Metric-loss margin");
        app->add_option("--clip", clip, "Gradient clip threshold");
        app->add_option("--batch-size", batch_size, "Per-domain batch size");
        app->add_option("--local-loss", local_loss, "triplet or contrastive");
        if (multi_run) {
            app->add_option("--seeds", seeds, "Seeds")->delimiter(',');
            app->add_option("--rows", rows, "Ablation rows (deepall, episodic, ..., masf)")->delimiter(',');
            app->add_option("--targets", targets, "Target domain indices")->delimiter(',');
            app->add_option("--threads", threads, "Worker threads (0 = all cores)");
            app->add_flag("--plots", plots, "Write SVG plots");
            app->add_flag("--no-metrics", no_metrics, "Skip per-run metrics files");
        }
    }

    void apply(ExperimentConfig& c) const {
        if (iterations) c.iterations = *iterations;
        if (!seeds.empty()) c.seeds = seeds;
        if (!rows.empty()) {
            c.rows.clear();
            if (rows.size() == 1 && rows[0] == "all") c.rows = all_ablation_rows();
            else
                for (const auto& r : rows) c.rows.push_back(parse_ablation_row(r));
        }
        if (!targets.empty()) c.targets = targets;
        c.output_dir = out ? std::filesystem::path(*out) : resolve_output_dir(c.output_dir);
        if (threads) c.threads = *threads;
        if (alpha) c.hp.alpha = *alpha;
        if (eta) c.hp.eta = *eta;
        if (gamma) c.hp.gamma = *gamma;
        if (beta1) c.hp.beta1 = *beta1;
        if (beta2) c.hp.beta2 = *beta2;
        if (tau) c.hp.tau = *tau;
        if (margin) c.hp.margin = *margin;
        if (clip) c.hp.clip_threshold = *clip;
        if (batch_size) c.hp.batch_size = *batch_size;
        if (local_loss) c.hp.local_loss = parse_local_loss(*local_loss);
        if (plots) c.plots = true;
        if (no_metrics) c.write_metrics = false;
        c.hp.max_iterations = c.iterations;
        c.validate();
    }
};

ExperimentConfig load_with(const std::string& path, const Overrides& o) {
    ExperimentConfig c = load_experiment_config(path);
    o.apply(c);
    return c;
}

std::vector<DomainDataset> load_domains(ExperimentConfig& c) {
    const BenchmarkSpec bench = load_benchmark_spec(c.benchmark);
    c.arch.input_dim = bench.input_dim;
    c.arch.num_classes = bench.num_classes;
    c.arch.validate();
    return make_benchmark(bench, c.data_seed);
}

int cmd_bench_gen(const std::string& spec_path, std::uint64_t seed, const std::string& out) {
    const BenchmarkSpec spec = load_benchmark_spec(spec_path);
    const auto domains = make_benchmark(spec, seed);
    write_datasets_csv(domains, out);
    for (const auto& d : domains) std::printf("domain %d: %zu samples\n", d.domain_id, d.size());
    return kOk;
}

int cmd_train(const std::string& config_path, const Overrides& o, std::size_t target, std::uint64_t seed,
              const std::string& row) {
    ExperimentConfig c = load_with(config_path, o);
    const auto domains = load_domains(c);
    if (target >= domains.size()) throw ConfigError("target index out of range");
    RunKey key{target, parse_ablation_row(row), seed};
    const auto dir = c.output_dir / key.id(domains[target].domain_id);
    std::filesystem::create_directories(dir);
    write_text_file(dir / "config.resolved.json", experiment_config_json(c));
    const RunResult r = run_single(c, domains, key, dir);
    if (!r.accuracy) {
        std::fprintf(stderr, "run failed: %s\n", r.error.c_str());
        return kRunFailure;
    }
    const auto ckpt = save_checkpoint(r.final_state, c.arch, dir);
    std::printf("target=%d row=%s seed=%llu accuracy=%.6f initial=%.6f margin=%.6f alignment=%.6f silhouette=%.6f\n",
                r.target_domain, key.flags.name().c_str(), static_cast<unsigned long long>(seed), *r.accuracy,
                r.initial_accuracy, r.margin, r.alignment, r.silhouette);
    std::printf("checkpoint: %s\n", ckpt.string().c_str());
    return kOk;
}

int cmd_eval(const std::string& config_path, const Overrides& o, const std::string& checkpoint) {
    ExperimentConfig c = load_with(config_path, o);
    const auto domains = load_domains(c);
    const NetParams p = load_checkpoint(checkpoint, c.arch);
    std::printf("domain,accuracy\n");
    for (const auto& d : domains) std::printf("%d,%.6f\n", d.domain_id, evaluate_accuracy(p.psi, p.theta, d));
    return kOk;
}

int cmd_ablate(const std::string& config_path, const Overrides& o) {
    const ExperimentConfig c = load_with(config_path, o);
    const Report report = run_experiment(c);
    std::fputs(summary_csv(report).c_str(), stdout);
    if (!c.output_dir.empty()) std::printf("wrote %s\n", (c.output_dir / "report.csv").string().c_str());
    if (report.failures() > 0) {
        std::fprintf(stderr, "%zu run(s) failed\n", report.failures());
        return kRunFailure;
    }
    return kOk;
}

int cmd_plot(const std::string& dir) {
    const auto files = write_plots(dir);
    for (const auto& f : files) std::printf("%s\n", f.string().c_str());
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Meta-learning domain generalization experiments"};
    app.require_subcommand(1);
    std::string log_level = "warn";
    app.add_option("--log-level", log_level, "trace, debug, info, warn, error, off");

    auto* bench = app.add_subcommand("bench", "Benchmark utilities");
    bench->require_subcommand(1);
    auto* gen = bench->add_subcommand("gen", "Generate a benchmark as CSV");
    std::string spec_path, gen_out;
    std::uint64_t gen_seed = 0;
    gen->add_option("--spec", spec_path, "Benchmark spec JSON")->required();
    gen->add_option("--seed", gen_seed, "Data seed");
    gen->add_option("--out", gen_out, "Output CSV")->required();

    std::string config_path;
    auto* train = app.add_subcommand("train", "Train one run and save a checkpoint");
    Overrides train_o;
    std::size_t target = 0;
    std::uint64_t seed = 0;
    std::string row = "masf";
    train->add_option("--config", config_path, "Experiment config JSON")->required();
    train->add_option("--target", target, "Held-out target domain index");
    train->add_option("--seed", seed, "Run seed");
    train->add_option("--row", row, "Ablation row (deepall, episodic, ..., masf)");
    train_o.attach(train, false);

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on every domain");
    Overrides eval_o;
    std::string checkpoint;
    eval->add_option("--config", config_path, "Experiment config JSON")->required();
    eval->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();

    auto* ablate = app.add_subcommand("ablate", "Run the leave-one-domain-out ablation grid");
    Overrides ablate_o;
    ablate->add_option("--config", config_path, "Experiment config JSON")->required();
    ablate_o.attach(ablate, true);

    auto* plot = app.add_subcommand("plot", "Write SVG curves from an experiment directory");
    std::string plot_dir;
    plot->add_option("--dir", plot_dir, "Experiment output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfigError;
    }

    try {
        spdlog::set_level(spdlog::level::from_str(log_level));
        if (gen->parsed()) return cmd_bench_gen(spec_path, gen_seed, gen_out);
        if (train->parsed()) return cmd_train(config_path, train_o, target, seed, row);
        if (eval->parsed()) return cmd_eval(config_path, eval_o, checkpoint);
        if (ablate->parsed()) return cmd_ablate(config_path, ablate_o);
        if (plot->parsed()) return cmd_plot(plot_dir);
    } catch (const IoError& e) {
        std::fprintf(stderr, "I/O error: %s\n", e.what());
        return kIoError;
    } catch (const std::filesystem::filesystem_error& e) {
        std::fprintf(stderr, "I/O error: %s\n", e.what());
        return kIoError;
    } catch (const NonFiniteError& e) {
        std::fprintf(stderr, "run failed: %s\n", e.what());
        return kRunFailure;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "configuration error: %s\n", e.what());
        return kConfigError;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kRunFailure;
    }
    return kOk;
}
