#pragma once

#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "masf/bench.hpp"
#include "masf/engine.hpp"

namespace masf {

// Argmax of logits per row; ties go to the lowest class index.
Labels predict(const ParamSet& psi, const ParamSet& theta, const Tensor& features);
Labels argmax_rows(const Tensor& logits);

// Fraction of correct predictions. Throws on an empty dataset.
double evaluate_accuracy(const ParamSet& psi, const ParamSet& theta, const DomainDataset& data);

Tensor embed(const ParamSet& psi, const ParamSet& phi, const Tensor& features);

struct MarginEstimate {
    double value = 0.0;
    double std_error = 0.0;
    std::size_t draws = 0;
};

// Monte-Carlo estimate of E[d(a, n) - d(a, p)]: anchors from domain a,
// positive and negative from domain b. Anchors whose class has no usable
// positive in b are redrawn. With same_domain the positive must differ
// from the anchor sample.
MarginEstimate margin_statistic(const Tensor& emb_a, std::span<const std::size_t> labels_a,
                                const Tensor& emb_b, std::span<const std::size_t> labels_b,
                                std::size_t n_pairs, std::mt19937_64& rng, bool same_domain = false);
MarginEstimate margin_statistic(const ParamSet& psi, const ParamSet& phi, const DomainDataset& domain_a,
                                const DomainDataset& domain_b, std::size_t n_pairs, std::mt19937_64& rng);

// Global alignment loss between one source and one target domain,
// evaluated on the full datasets.
double target_alignment(const ParamSet& psi, const ParamSet& theta, const DomainDataset& source,
                        const DomainDataset& target, double tau);

// Mean silhouette with Euclidean distance; singleton clusters score 0 and
// 0/0 is taken as 0. Throws std::invalid_argument with fewer than two classes.
double silhouette_score(const Tensor& embeddings, std::span<const std::size_t> labels);

struct AblationFlags {
    bool episodic = true;
    bool global = true;
    bool local = true;

    bool operator==(const AblationFlags&) const = default;
    auto operator<=>(const AblationFlags&) const = default;
    std::string name() const;  // "deepall", "episodic", ..., "masf"
};

// The eight rows in the order DeepAll, then episodic/global/local singles,
// then pairs, then full MASF.
std::vector<AblationFlags> all_ablation_rows();
AblationFlags parse_ablation_row(std::string_view name);

Hyperparams apply_flags(Hyperparams hp, const AblationFlags& flags);

struct ExperimentConfig {
    std::filesystem::path benchmark;
    std::uint64_t data_seed = 0;
    Architecture arch;
    Hyperparams hp;
    std::vector<AblationFlags> rows = all_ablation_rows();
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::vector<std::size_t> targets;  // empty = every domain
    std::size_t iterations = 1000;
    std::filesystem::path output_dir = "out";
    double train_fraction = 0.8;   // source data used for training; the rest is held out
    std::size_t diag_every = 0;    // 0 = diagnostics only at the end
    std::size_t margin_pairs = 2000;
    std::size_t threads = 0;       // 0 = hardware concurrency
    bool plots = false;
    std::size_t checkpoint_every = 0;
    bool write_metrics = true;

    void validate() const;
};

// Relative benchmark paths resolve against `base_dir`. Unknown keys are
// rejected. Throws ConfigError.
ExperimentConfig parse_experiment_config(const std::string& json_text, const std::filesystem::path& base_dir);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
std::string experiment_config_json(const ExperimentConfig& config);

struct RunKey {
    std::size_t target = 0;  // index into the domain list
    AblationFlags flags;
    std::uint64_t seed = 0;

    auto operator<=>(const RunKey&) const = default;
    std::string id(int target_domain_id) const;
};

struct RunResult {
    RunKey key;
    int target_domain = 0;
    std::optional<double> accuracy;  // empty when the run failed
    std::string error;
    double margin = 0.0;
    double margin_se = 0.0;
    double alignment = 0.0;
    double silhouette = 0.0;
    double initial_accuracy = 0.0;
    std::vector<MetricsRecord> metrics;
    EpisodeState final_state;
};

struct RunData {
    std::vector<DomainDataset> train_sources;
    std::vector<DomainDataset> heldout_sources;
    DomainDataset target;
};

// Train/held-out split of every source domain, deterministic in the seed and
// independent of the ablation flags.
RunData prepare_run_data(const std::vector<DomainDataset>& domains, const LooSplit& split,
                         double train_fraction, std::uint64_t seed);

// Trains one (target, row, seed) configuration and computes its final
// diagnostics. Non-finite losses are reported through RunResult::error.
RunResult run_single(const ExperimentConfig& config, const std::vector<DomainDataset>& domains, const RunKey& key,
                     const std::filesystem::path& run_dir = {});

struct SummaryRow {
    std::string target;  // domain id, or "avg"
    AblationFlags flags;
    std::size_t n = 0;
    std::optional<double> mean;
    std::optional<double> stddev;  // needs >= 2 successful seeds
};

struct Report {
    std::vector<RunResult> runs;  // sorted by (target, row order, seed)
    std::vector<SummaryRow> summary;

    // Mean accuracy of a row over every target and seed; empty if any failed.
    std::optional<double> mean_accuracy(const AblationFlags& flags) const;
    std::size_t failures() const;
};

Report run_experiment(const ExperimentConfig& config);

std::string report_csv(const Report& report);
std::string diagnostics_csv(const Report& report);
std::string summary_csv(const Report& report);
std::string metrics_csv(std::span<const MetricsRecord> records);

// Line chart of named series as standalone SVG.
struct PlotSeries {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};
std::string line_plot_svg(const std::string& title, const std::string& y_label, std::span<const PlotSeries> series);

// Reads runs/*/metrics.csv under an experiment directory and writes
// per-target margin and alignment SVGs averaged over seeds. Returns the
// files written.
std::vector<std::filesystem::path> write_plots(const std::filesystem::path& experiment_dir);

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

// MASF_OUT_DIR, when set and non-empty, replaces `fallback`.
std::filesystem::path resolve_output_dir(const std::filesystem::path& fallback);

}  // namespace masf
