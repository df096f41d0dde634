#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>

#include "masf/errors.hpp"
#include "masf/harness.hpp"
#include "oracles.hpp"

using namespace masf;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "masf_test_harness" / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

BenchmarkSpec small_bench() {
    BenchmarkSpec b;
    b.name = "small";
    b.input_dim = 4;
    b.num_classes = 3;
    b.latent_seed = 3;
    for (int k = 0; k < 3; ++k) {
        DomainSpec d;
        d.id = 10 + k;
        d.rotation_deg = 25.0 * k;
        d.noise_sigma = 0.2;
        d.n_samples = 60;
        b.domains.push_back(d);
    }
    return b;
}

std::string small_config_json(std::size_t iterations) {
    return R"({
  "benchmark": "small.json",
  "architecture": {"feature_widths": [8], "metric_widths": [6, 3]},
  "hyperparams": {"alpha": 0.05, "eta": 0.05, "gamma": 0.05, "beta1": 1.0, "beta2": 0.1,
                  "batch_size": 9, "n_meta_train": 1, "n_meta_test": 1, "decay_every": 100},
  "rows": ["deepall", "masf"],
  "seeds": [0, 1],
  "iterations": )" + std::to_string(iterations) + R"(,
  "margin_pairs": 200
})";
}

ExperimentConfig small_config(const std::filesystem::path& dir, std::size_t iterations) {
    save_benchmark_spec(small_bench(), dir / "small.json");
    ExperimentConfig c = parse_experiment_config(small_config_json(iterations), dir);
    c.output_dir = dir / "out";
    return c;
}

}  // namespace

TEST(Accuracy, ArgmaxTiesGoToLowestIndex) {
    EXPECT_EQ(argmax_rows(Tensor::matrix(3, 3, {1, 1, 0, 0, 2, 2, 0, 0, 5})), (Labels{0, 1, 2}));
}

TEST(Accuracy, HandCases) {
    const Architecture arch{2, {3}, 2, {2}};
    const NetParams p = init_params(arch, 1);
    // Zero weights and a bias favouring class 1 predict class 1 everywhere.
    const ParamSet theta = p.theta.with_values({Tensor(Shape{3, 2}), Tensor::vector({0.0, 1.0})});
    const DomainDataset d{0, Tensor::matrix(4, 2, {1, 2, 3, 4, 5, 6, 7, 8}), {1, 1, 0, 1}};
    EXPECT_DOUBLE_EQ(evaluate_accuracy(p.psi, theta, d), 0.75);
    EXPECT_THROW(evaluate_accuracy(p.psi, theta, DomainDataset{0, Tensor(Shape{0, 2}), {}}), std::invalid_argument);
}

TEST(Margin, IdenticalEmbeddingsGiveZero) {
    const Tensor e(Shape{6, 2}, 0.5);
    const Labels y{0, 1, 2, 0, 1, 2};
    std::mt19937_64 rng(1);
    const MarginEstimate m = margin_statistic(e, y, e, y, 500, rng);
    EXPECT_EQ(m.value, 0.0);
    EXPECT_EQ(m.draws, 500u);
}

TEST(Margin, ClusteredAtKnownSeparation) {
    // Classes collapsed to points at distance delta apart: every draw gives delta.
    const double delta = 2.5;
    const Tensor a = Tensor::matrix(4, 1, {0, 0, delta, delta});
    const Tensor b = Tensor::matrix(4, 1, {0, delta, 0, delta});
    std::mt19937_64 rng(2);
    const MarginEstimate m = margin_statistic(a, Labels{0, 0, 1, 1}, b, Labels{0, 1, 0, 1}, 300, rng);
    EXPECT_NEAR(m.value, delta, 1e-12);
    EXPECT_NEAR(m.std_error, 0.0, 1e-12);
}

TEST(Margin, SwappingDomainsChangesLessThanTwoStandardErrors) {
    std::mt19937_64 gen(3);
    const Tensor a = oracle::random_tensor({40, 3}, gen);
    const Tensor b = oracle::random_tensor({40, 3}, gen, 1.5);
    Labels y(40);
    for (std::size_t i = 0; i < 40; ++i) y[i] = i % 4;
    std::mt19937_64 r1(4), r2(5);
    const MarginEstimate ab = margin_statistic(a, y, b, y, 20000, r1);
    const MarginEstimate ba = margin_statistic(b, y, a, y, 20000, r2);
    EXPECT_LT(std::abs(ab.value - ba.value), 2.0 * std::hypot(ab.std_error, ba.std_error));
}

TEST(Margin, AgreesWithBruteForceExpectation) {
    std::mt19937_64 gen(5);
    const Tensor a = oracle::random_tensor({6, 2}, gen);
    const Tensor b = oracle::random_tensor({6, 2}, gen);
    const Labels la{0, 1, 2, 0, 1, 2}, lb{0, 0, 1, 1, 2, 2};
    double exact = 0.0;
    std::size_t terms = 0;
    for (std::size_t i = 0; i < 6; ++i) {
        // Average over positives and negatives of the anchor's class.
        double pos = 0.0, neg = 0.0;
        std::size_t np = 0, nn = 0;
        for (std::size_t j = 0; j < 6; ++j) {
            const double d = std::hypot(a.at(i, 0) - b.at(j, 0), a.at(i, 1) - b.at(j, 1));
            if (lb[j] == la[i]) {
                pos += d;
                ++np;
            } else {
                neg += d;
                ++nn;
            }
        }
        exact += neg / nn - pos / np;
        ++terms;
    }
    exact /= terms;
    std::mt19937_64 rng(6);
    const MarginEstimate m = margin_statistic(a, la, b, lb, 200000, rng);
    EXPECT_LT(std::abs(m.value - exact), 4.0 * m.std_error);
}

TEST(Margin, InvalidInputs) {
    std::mt19937_64 rng(1);
    const Tensor e(Shape{2, 1});
    EXPECT_THROW(margin_statistic(e, Labels{0, 0}, e, Labels{0, 1}, 10, rng), std::invalid_argument);
    EXPECT_THROW(margin_statistic(e, Labels{0, 1}, e, Labels{0, 1}, 0, rng), std::invalid_argument);
}

TEST(Silhouette, UnitSquare) {
    const Tensor e = Tensor::matrix(4, 2, {0, 0, 1, 0, 0, 1, 1, 1});
    const Labels y{0, 0, 1, 1};
    EXPECT_NEAR(silhouette_score(e, y), 3.0 - 2.0 * std::sqrt(2.0), 1e-12);
    EXPECT_NEAR(silhouette_score(e, y), 0.171573, 1e-6);
}

TEST(Silhouette, MatchesReferenceOnRandomData) {
    std::mt19937_64 gen(7);
    const Tensor e = oracle::random_tensor({30, 3}, gen);
    Labels y(30);
    std::vector<int> yi(30);
    std::vector<oracle::Vec> pts;
    for (std::size_t i = 0; i < 30; ++i) {
        y[i] = i % 4;
        yi[i] = static_cast<int>(i % 4);
        const auto r = e.row(i);
        pts.emplace_back(r.begin(), r.end());
    }
    EXPECT_NEAR(silhouette_score(e, y), oracle::silhouette(pts, yi), 1e-12);
}

TEST(Silhouette, TightClustersScoreNearOne) {
    std::mt19937_64 gen(8);
    std::normal_distribution<double> n(0.0, 0.01);
    Tensor e(Shape{30, 2});
    Labels y(30);
    for (std::size_t i = 0; i < 30; ++i) {
        y[i] = i % 3;
        e.data[2 * i] = 10.0 * static_cast<double>(y[i]) + n(gen);
        e.data[2 * i + 1] = n(gen);
    }
    EXPECT_GE(silhouette_score(e, y), 0.9);
}

TEST(Silhouette, DegenerateCases) {
    EXPECT_EQ(silhouette_score(Tensor(Shape{4, 2}, 1.0), Labels{0, 0, 1, 1}), 0.0);
    EXPECT_EQ(silhouette_score(Tensor::matrix(3, 1, {0, 1, 5}), Labels{0, 1, 2}), 0.0);
    EXPECT_THROW(silhouette_score(Tensor(Shape{3, 2}), Labels{1, 1, 1}), std::invalid_argument);
}

TEST(Silhouette, InvariantToRelabelingTranslationAndRotation) {
    std::mt19937_64 gen(9);
    const Tensor e = oracle::random_tensor({20, 2}, gen);
    Labels y(20), renamed(20);
    Tensor shifted = e, rotated = e;
    const double c = std::cos(0.7), s = std::sin(0.7);
    for (std::size_t i = 0; i < 20; ++i) {
        y[i] = i % 3;
        renamed[i] = (y[i] + 1) % 3;
        shifted.data[2 * i] += 7.0;
        rotated.data[2 * i] = c * e.at(i, 0) - s * e.at(i, 1);
        rotated.data[2 * i + 1] = s * e.at(i, 0) + c * e.at(i, 1);
    }
    EXPECT_NEAR(silhouette_score(e, y), silhouette_score(e, renamed), 1e-12);
    EXPECT_NEAR(silhouette_score(e, y), silhouette_score(shifted, y), 1e-12);
    EXPECT_NEAR(silhouette_score(e, y), silhouette_score(rotated, y), 1e-12);
}

TEST(Alignment, SourceEqualToTargetGivesZero) {
    const auto domains = make_benchmark(small_bench(), 0);
    const NetParams p = init_params(Architecture{4, {8}, 3, {6, 3}}, 1);
    EXPECT_NEAR(target_alignment(p.psi, p.theta, domains[0], domains[0], 2.0), 0.0, 1e-15);
    EXPECT_GT(target_alignment(p.psi, p.theta, domains[0], domains[2], 2.0), 0.0);
}

TEST(Ablation, RowNamesAndOrder) {
    const auto rows = all_ablation_rows();
    ASSERT_EQ(rows.size(), 8u);
    EXPECT_EQ(rows.front().name(), "deepall");
    EXPECT_EQ(rows[1].name(), "episodic");
    EXPECT_EQ(rows[2].name(), "global");
    EXPECT_EQ(rows[3].name(), "local");
    EXPECT_EQ(rows.back().name(), "masf");
    for (const auto& r : rows) EXPECT_EQ(parse_ablation_row(r.name()), r);
    EXPECT_THROW(parse_ablation_row("everything"), ConfigError);
}

TEST(Ablation, FlagsZeroTheDisabledWeights) {
    Hyperparams hp;
    const Hyperparams d = apply_flags(hp, AblationFlags{false, false, false});
    EXPECT_FALSE(d.episodic);
    EXPECT_EQ(d.beta1, 0.0);
    EXPECT_EQ(d.beta2, 0.0);
    const Hyperparams g = apply_flags(hp, AblationFlags{false, true, false});
    EXPECT_EQ(g.beta1, hp.beta1);
    EXPECT_EQ(g.beta2, 0.0);
}

TEST(Config, ParsesAndRoundTrips) {
    const auto dir = temp_dir("config");
    const ExperimentConfig c = small_config(dir, 7);
    EXPECT_EQ(c.benchmark, dir / "small.json");
    EXPECT_EQ(c.iterations, 7u);
    EXPECT_EQ(c.rows.size(), 2u);
    EXPECT_EQ(c.hp.batch_size, 9u);
    const ExperimentConfig again = parse_experiment_config(experiment_config_json(c), dir);
    EXPECT_EQ(experiment_config_json(again), experiment_config_json(c));
}

TEST(Config, ErrorsAreConfigErrors) {
    const auto dir = temp_dir("config_errors");
    EXPECT_THROW(parse_experiment_config("{not json", dir), ConfigError);
    EXPECT_THROW(parse_experiment_config(R"({"benchmark": "x.json", "unknown_key": 1})", dir), ConfigError);
    EXPECT_THROW(parse_experiment_config(R"({"benchmark": "x.json", "hyperparams": {"tau": -1}})", dir),
                 ConfigError);
    EXPECT_THROW(parse_experiment_config(R"({"benchmark": "x.json", "rows": ["bogus"]})", dir), ConfigError);
    EXPECT_THROW(load_experiment_config(dir / "missing.json"), IoError);
}

TEST(Config, OutputDirEnvironmentOverride) {
    ::unsetenv("MASF_OUT_DIR");
    EXPECT_EQ(resolve_output_dir("fallback"), std::filesystem::path("fallback"));
    ::setenv("MASF_OUT_DIR", "/tmp/elsewhere", 1);
    EXPECT_EQ(resolve_output_dir("fallback"), std::filesystem::path("/tmp/elsewhere"));
    ::unsetenv("MASF_OUT_DIR");
}

TEST(Run, TrainingImprovesOnUntrainedAccuracy) {
    const auto dir = temp_dir("run_single");
    ExperimentConfig c = small_config(dir, 150);
    const BenchmarkSpec spec = small_bench();
    c.arch.input_dim = spec.input_dim;
    c.arch.num_classes = spec.num_classes;
    const auto domains = make_benchmark(spec, c.data_seed);
    const RunResult r = run_single(c, domains, RunKey{1, AblationFlags{}, 0}, dir / "run");
    ASSERT_TRUE(r.accuracy.has_value()) << r.error;
    EXPECT_GT(*r.accuracy, r.initial_accuracy);
    EXPECT_EQ(r.metrics.size(), 150u);
    EXPECT_TRUE(std::filesystem::exists(dir / "run" / "metrics.csv"));
    EXPECT_TRUE(std::isfinite(r.margin));
    EXPECT_GT(r.silhouette, -1.0);
}

TEST(Run, TrainedBeatsUntrainedOnCanonicalBenchmark) {
    const auto root = std::filesystem::path(MASF_SOURCE_DIR) / "bench/specs";
    ExperimentConfig c = load_experiment_config(root / "experiment.json");
    c.iterations = 100;
    const BenchmarkSpec spec = load_benchmark_spec(c.benchmark);
    c.arch.input_dim = spec.input_dim;
    c.arch.num_classes = spec.num_classes;
    const auto domains = make_benchmark(spec, c.data_seed);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const RunResult r = run_single(c, domains, RunKey{3, AblationFlags{}, seed});
        ASSERT_TRUE(r.accuracy.has_value()) << r.error;
        EXPECT_GT(*r.accuracy, r.initial_accuracy) << "seed " << seed;
    }
}

TEST(Run, SourceSplitDoesNotDependOnFlags) {
    const auto domains = make_benchmark(small_bench(), 0);
    const LooSplit split{{0, 2}, 1};
    const RunData a = prepare_run_data(domains, split, 0.8, 3);
    const RunData b = prepare_run_data(domains, split, 0.8, 3);
    ASSERT_EQ(a.train_sources.size(), 2u);
    EXPECT_EQ(a.train_sources[0].features, b.train_sources[0].features);
    EXPECT_EQ(a.heldout_sources[1].labels, b.heldout_sources[1].labels);
    EXPECT_EQ(a.train_sources[0].size(), 48u);
    EXPECT_EQ(a.target.domain_id, 11);
}

TEST(Experiment, ReportIsByteIdenticalAcrossThreadCounts) {
    const auto dir = temp_dir("experiment");
    ExperimentConfig c = small_config(dir, 20);
    c.threads = 1;
    c.output_dir = dir / "one";
    const Report r1 = run_experiment(c);
    c.threads = 3;
    c.output_dir = dir / "three";
    const Report r3 = run_experiment(c);
    EXPECT_EQ(r1.runs.size(), 3u * 2u * 2u);
    EXPECT_EQ(r1.failures(), 0u);
    const std::string a = read_text_file(dir / "one" / "report.csv");
    EXPECT_EQ(a, read_text_file(dir / "three" / "report.csv"));
    EXPECT_EQ(a.substr(0, a.find('\n')), "target,episodic,global,local,seed,accuracy");
    EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 13);
    EXPECT_TRUE(std::filesystem::exists(dir / "one" / "summary.csv"));
    EXPECT_TRUE(std::filesystem::exists(dir / "one" / "diagnostics.csv"));
    EXPECT_TRUE(std::filesystem::exists(dir / "one" / "config.resolved.json"));
    EXPECT_TRUE(r1.mean_accuracy(AblationFlags{}).has_value());
}

TEST(Plots, SvgFromMetrics) {
    const auto dir = temp_dir("plots");
    ExperimentConfig c = small_config(dir, 10);
    c.diag_every = 5;
    c.rows = {AblationFlags{}};
    c.seeds = {0};
    c.targets = {0};
    run_experiment(c);
    const auto files = write_plots(c.output_dir);
    ASSERT_EQ(files.size(), 2u);
    const std::string svg = read_text_file(files[0]);
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_NE(svg.find("</svg>"), std::string::npos);
}
