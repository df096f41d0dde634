#include "masf/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <limits>
#include <mutex>
#include <thread>

#include <spdlog/spdlog.h>

namespace masf {

Labels argmax_rows(const Tensor& logits) {
    const std::size_t n = logits.rows(), c = logits.cols();
    Labels out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < c; ++k) {
            if (logits.data[i * c + k] > logits.data[i * c + best]) best = k;
        }
        out[i] = best;
    }
    return out;
}

Labels predict(const ParamSet& psi, const ParamSet& theta, const Tensor& features) {
    return argmax_rows(task_forward(theta, feature_forward(psi, leaf(features))).value());
}

double evaluate_accuracy(const ParamSet& psi, const ParamSet& theta, const DomainDataset& data) {
    if (data.size() == 0) throw std::invalid_argument("cannot evaluate accuracy on an empty dataset");
    const Labels pred = predict(psi, theta, data.features);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == data.labels[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

Tensor embed(const ParamSet& psi, const ParamSet& phi, const Tensor& features) {
    return metric_forward(phi, feature_forward(psi, leaf(features))).value();
}

namespace {

double row_distance(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
    const std::size_t d = a.cols();
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
        const double diff = a.data[i * d + k] - b.data[j * d + k];
        s += diff * diff;
    }
    return std::sqrt(s);
}

std::size_t count_classes(std::span<const std::size_t> labels) {
    std::vector<std::size_t> seen(labels.begin(), labels.end());
    std::sort(seen.begin(), seen.end());
    return static_cast<std::size_t>(std::unique(seen.begin(), seen.end()) - seen.begin());
}

std::size_t uniform_index(std::size_t n, std::mt19937_64& rng) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

}  // namespace

MarginEstimate margin_statistic(const Tensor& emb_a, std::span<const std::size_t> labels_a,
                                const Tensor& emb_b, std::span<const std::size_t> labels_b,
                                std::size_t n_pairs, std::mt19937_64& rng, bool same_domain) {
    if (n_pairs == 0) throw std::invalid_argument("margin statistic needs at least one draw");
    if (emb_a.rows() != labels_a.size() || emb_b.rows() != labels_b.size() || emb_a.cols() != emb_b.cols()) {
        throw ShapeError("margin statistic: embedding and label shapes disagree");
    }
    if (count_classes(labels_a) < 2 || count_classes(labels_b) < 2) {
        throw std::invalid_argument("margin statistic needs at least two classes per domain");
    }
    std::size_t max_label = 0;
    for (auto l : labels_b) max_label = std::max(max_label, l);
    std::vector<std::vector<std::size_t>> by_class(max_label + 1);
    for (std::size_t j = 0; j < labels_b.size(); ++j) by_class[labels_b[j]].push_back(j);

    auto usable = [&](std::size_t anchor) {
        const std::size_t c = labels_a[anchor];
        if (c >= by_class.size()) return false;
        const std::size_t n = by_class[c].size();
        return same_domain ? n >= 2 : n >= 1;
    };
    bool any = false;
    for (std::size_t i = 0; i < labels_a.size() && !any; ++i) any = usable(i);
    if (!any) throw std::invalid_argument("margin statistic: no anchor has a positive in the other domain");

    double sum = 0.0, sum_sq = 0.0;
    for (std::size_t draw = 0; draw < n_pairs; ++draw) {
        std::size_t anchor = uniform_index(labels_a.size(), rng);
        while (!usable(anchor)) anchor = uniform_index(labels_a.size(), rng);
        const std::size_t c = labels_a[anchor];
        const auto& pos_pool = by_class[c];
        std::size_t pos = pos_pool[uniform_index(pos_pool.size(), rng)];
        while (same_domain && pos == anchor) pos = pos_pool[uniform_index(pos_pool.size(), rng)];
        std::size_t neg = uniform_index(labels_b.size(), rng);
        while (labels_b[neg] == c) neg = uniform_index(labels_b.size(), rng);
        const double m = row_distance(emb_a, anchor, emb_b, neg) - row_distance(emb_a, anchor, emb_b, pos);
        sum += m;
        sum_sq += m * m;
    }
    const double n = static_cast<double>(n_pairs);
    MarginEstimate est;
    est.value = sum / n;
    est.draws = n_pairs;
    if (n_pairs > 1) {
        const double var = std::max(0.0, (sum_sq - n * est.value * est.value) / (n - 1.0));
        est.std_error = std::sqrt(var / n);
    }
    return est;
}

MarginEstimate margin_statistic(const ParamSet& psi, const ParamSet& phi, const DomainDataset& domain_a,
                                const DomainDataset& domain_b, std::size_t n_pairs, std::mt19937_64& rng) {
    const Tensor ea = embed(psi, phi, domain_a.features);
    const Tensor eb = embed(psi, phi, domain_b.features);
    return margin_statistic(ea, domain_a.labels, eb, domain_b.labels, n_pairs, rng, &domain_a == &domain_b);
}

double target_alignment(const ParamSet& psi, const ParamSet& theta, const DomainDataset& source,
                        const DomainDataset& target, double tau) {
    const std::size_t classes = theta[1].shape()[0];
    const auto ms = soft_label_matrix(theta, feature_forward(psi, leaf(source.features)), source.labels,
                                      classes, tau);
    const auto mt = soft_label_matrix(theta, feature_forward(psi, leaf(target.features)), target.labels,
                                      classes, tau);
    return pair_alignment_loss(ms, mt).item();
}

double silhouette_score(const Tensor& embeddings, std::span<const std::size_t> labels) {
    const std::size_t n = labels.size();
    if (embeddings.rows() != n) throw ShapeError("silhouette: embeddings and labels disagree");
    if (count_classes(labels) < 2) throw std::invalid_argument("silhouette needs at least two classes");
    std::size_t max_label = 0;
    for (auto l : labels) max_label = std::max(max_label, l);
    const std::size_t k = max_label + 1;
    std::vector<std::size_t> sizes(k, 0);
    for (auto l : labels) ++sizes[l];

    double total = 0.0;
    std::vector<double> dist_sum(k);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t own = labels[i];
        if (sizes[own] < 2) continue;
        std::fill(dist_sum.begin(), dist_sum.end(), 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            if (j != i) dist_sum[labels[j]] += row_distance(embeddings, i, embeddings, j);
        }
        const double a = dist_sum[own] / static_cast<double>(sizes[own] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c) {
            if (c != own && sizes[c] > 0) b = std::min(b, dist_sum[c] / static_cast<double>(sizes[c]));
        }
        const double denom = std::max(a, b);
        if (denom > 0.0) total += (b - a) / denom;
    }
    return total / static_cast<double>(n);
}

std::string AblationFlags::name() const {
    if (!episodic && !global && !local) return "deepall";
    if (episodic && global && local) return "masf";
    std::string s;
    auto add = [&](bool on, const char* part) {
        if (!on) return;
        if (!s.empty()) s += "+";
        s += part;
    };
    add(episodic, "episodic");
    add(global, "global");
    add(local, "local");
    return s;
}

std::vector<AblationFlags> all_ablation_rows() {
    return {
        {false, false, false}, {true, false, false}, {false, true, false}, {false, false, true},
        {true, true, false},   {true, false, true},  {false, true, true},  {true, true, true},
    };
}

AblationFlags parse_ablation_row(std::string_view name) {
    for (const auto& f : all_ablation_rows()) {
        if (f.name() == name) return f;
    }
    throw ConfigError("unknown ablation row '" + std::string(name) + "'");
}

Hyperparams apply_flags(Hyperparams hp, const AblationFlags& flags) {
    hp.episodic = flags.episodic;
    if (!flags.global) hp.beta1 = 0.0;
    if (!flags.local) hp.beta2 = 0.0;
    return hp;
}

std::string RunKey::id(int target_domain_id) const {
    return "t" + std::to_string(target_domain_id) + "_" + flags.name() + "_s" + std::to_string(seed);
}

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t target, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(target), static_cast<std::uint32_t>(stream)};
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

enum Stream : std::uint64_t { kInit = 1, kHoldout = 2, kData = 3, kAlgorithm = 4, kDiagnostics = 5 };

double mean_target_alignment(const EpisodeState& s, std::span<const DomainDataset> sources,
                             const DomainDataset& target) {
    double total = 0.0;
    for (const auto& src : sources) total += target_alignment(s.params.psi, s.params.theta, src, target, s.hp.tau);
    return total / static_cast<double>(sources.size());
}

}  // namespace

RunData prepare_run_data(const std::vector<DomainDataset>& domains, const LooSplit& split,
                         double train_fraction, std::uint64_t seed) {
    RunData d;
    std::mt19937_64 rng(derive_seed(seed, split.target, kHoldout));
    for (auto k : split.sources) {
        if (train_fraction >= 1.0) {
            d.train_sources.push_back(domains[k]);
            continue;
        }
        auto tt = train_test_split(domains[k], train_fraction, rng);
        d.train_sources.push_back(std::move(tt.train));
        d.heldout_sources.push_back(std::move(tt.test));
    }
    d.target = domains[split.target];
    return d;
}

RunResult run_single(const ExperimentConfig& config, const std::vector<DomainDataset>& domains, const RunKey& key,
                     const std::filesystem::path& run_dir) {
    RunResult r;
    r.key = key;
    r.target_domain = domains.at(key.target).domain_id;

    LooSplit split;
    split.target = key.target;
    for (std::size_t k = 0; k < domains.size(); ++k) {
        if (k != key.target) split.sources.push_back(k);
    }
    const RunData data = prepare_run_data(domains, split, config.train_fraction, key.seed);

    Hyperparams hp = apply_flags(config.hp, key.flags);
    hp.max_iterations = config.iterations;
    EpisodeState state = make_initial_state(config.arch, hp, derive_seed(key.seed, key.target, kInit));
    state.rng.seed(derive_seed(key.seed, key.target, kAlgorithm));
    std::mt19937_64 data_rng(derive_seed(key.seed, key.target, kData));
    std::mt19937_64 diag_rng(derive_seed(key.seed, key.target, kDiagnostics));
    r.initial_accuracy = evaluate_accuracy(state.params.psi, state.params.theta, data.target);

    const DomainDataset pooled_sources = concat(data.train_sources);
    const std::size_t diag_pairs = std::max<std::size_t>(1, config.margin_pairs / 4);

    std::ofstream metrics_out;
    const bool write = !run_dir.empty() && config.write_metrics;
    if (write) {
        std::filesystem::create_directories(run_dir);
        metrics_out.open(run_dir / "metrics.csv", std::ios::binary);
        if (!metrics_out) throw IoError("cannot write " + (run_dir / "metrics.csv").string());
        metrics_out << metrics_csv({});
    }

    auto hook = [&](const EpisodeState& s, MetricsRecord& rec) {
        if (config.diag_every > 0 && s.iteration % config.diag_every == 0) {
            rec.margin = margin_statistic(s.params.psi, s.params.phi, pooled_sources, data.target, diag_pairs, diag_rng)
                             .value;
            rec.target_alignment = mean_target_alignment(s, data.train_sources, data.target);
        }
        if (write && config.checkpoint_every > 0 && s.iteration % config.checkpoint_every == 0) {
            save_checkpoint(s, config.arch, run_dir);
        }
    };
    auto sink = [&](const MetricsRecord& rec) {
        r.metrics.push_back(rec);
        if (write) {
            const std::string line = metrics_csv(std::span<const MetricsRecord>(&rec, 1));
            metrics_out << line.substr(line.find('\n') + 1);
            metrics_out.flush();
        }
    };

    try {
        state = train(std::move(state), data.train_sources, config.iterations, data_rng, sink, hook);
    } catch (const NonFiniteError& e) {
        r.error = e.what();
        spdlog::warn("run {} aborted: {}", key.id(r.target_domain), e.what());
        return r;
    }

    r.accuracy = evaluate_accuracy(state.params.psi, state.params.theta, data.target);
    const auto m = margin_statistic(state.params.psi, state.params.phi, pooled_sources, data.target,
                                    config.margin_pairs, diag_rng);
    r.margin = m.value;
    r.margin_se = m.std_error;
    r.alignment = mean_target_alignment(state, data.train_sources, data.target);
    const DomainDataset heldout = data.heldout_sources.empty() ? pooled_sources : concat(data.heldout_sources);
    r.silhouette = silhouette_score(embed(state.params.psi, state.params.phi, heldout.features), heldout.labels);
    r.final_state = std::move(state);
    return r;
}

std::optional<double> Report::mean_accuracy(const AblationFlags& flags) const {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& r : runs) {
        if (r.key.flags != flags) continue;
        if (!r.accuracy) return std::nullopt;
        total += *r.accuracy;
        ++n;
    }
    if (n == 0) return std::nullopt;
    return total / static_cast<double>(n);
}

std::size_t Report::failures() const {
    return static_cast<std::size_t>(std::count_if(runs.begin(), runs.end(), [](const RunResult& r) {
        return !r.accuracy.has_value();
    }));
}

namespace {

std::vector<SummaryRow> summarize(const std::vector<RunResult>& runs, const std::vector<AblationFlags>& rows,
                                  const std::vector<int>& targets) {
    auto stats = [](std::vector<double> v, std::size_t n, SummaryRow& row) {
        row.n = n;
        if (v.size() != n || v.empty()) return;
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        row.mean = mean;
        if (v.size() >= 2) {
            double ss = 0.0;
            for (double x : v) ss += (x - mean) * (x - mean);
            row.stddev = std::sqrt(ss / static_cast<double>(v.size() - 1));
        }
    };
    std::vector<SummaryRow> out;
    for (int t : targets) {
        for (const auto& f : rows) {
            SummaryRow row;
            row.target = std::to_string(t);
            row.flags = f;
            std::vector<double> v;
            std::size_t n = 0;
            for (const auto& r : runs) {
                if (r.target_domain != t || r.key.flags != f) continue;
                ++n;
                if (r.accuracy) v.push_back(*r.accuracy);
            }
            stats(std::move(v), n, row);
            out.push_back(row);
        }
    }
    // Average over targets per seed, then mean and std over seeds.
    for (const auto& f : rows) {
        SummaryRow row;
        row.target = "avg";
        row.flags = f;
        std::vector<std::uint64_t> seeds;
        for (const auto& r : runs) {
            if (r.key.flags == f) seeds.push_back(r.key.seed);
        }
        std::sort(seeds.begin(), seeds.end());
        seeds.erase(std::unique(seeds.begin(), seeds.end()), seeds.end());
        std::vector<double> v;
        for (auto s : seeds) {
            double total = 0.0;
            std::size_t n = 0;
            bool ok = true;
            for (const auto& r : runs) {
                if (r.key.flags != f || r.key.seed != s) continue;
                if (!r.accuracy) ok = false;
                else total += *r.accuracy;
                ++n;
            }
            if (ok && n > 0) v.push_back(total / static_cast<double>(n));
        }
        stats(std::move(v), seeds.size(), row);
        out.push_back(row);
    }
    return out;
}

}  // namespace

Report run_experiment(const ExperimentConfig& input) {
    input.validate();
    ExperimentConfig config = input;
    const BenchmarkSpec bench = load_benchmark_spec(config.benchmark);
    config.arch.input_dim = bench.input_dim;
    config.arch.num_classes = bench.num_classes;
    config.arch.validate();
    const auto domains = make_benchmark(bench, config.data_seed);
    if (config.targets.empty()) {
        for (std::size_t k = 0; k < domains.size(); ++k) config.targets.push_back(k);
    }
    for (auto t : config.targets) {
        if (t >= domains.size()) throw ConfigError("target index " + std::to_string(t) + " out of range");
    }

    std::vector<RunKey> keys;
    for (auto t : config.targets) {
        for (const auto& f : config.rows) {
            for (auto s : config.seeds) keys.push_back({t, f, s});
        }
    }

    const bool write = !config.output_dir.empty();
    if (write) {
        std::error_code ec;
        std::filesystem::create_directories(config.output_dir, ec);
        if (ec) throw IoError("cannot create " + config.output_dir.string() + ": " + ec.message());
        write_text_file(config.output_dir / "config.resolved.json", experiment_config_json(config));
    }

    std::vector<RunResult> results(keys.size());
    std::vector<std::exception_ptr> errors(keys.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < keys.size(); i = next++) {
            try {
                const auto dir = write ? config.output_dir / "runs" / keys[i].id(domains[keys[i].target].domain_id)
                                       : std::filesystem::path{};
                results[i] = run_single(config, domains, keys[i], dir);
                results[i].metrics.shrink_to_fit();
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::size_t threads = config.threads > 0 ? config.threads : std::max(1u, std::thread::hardware_concurrency());
    threads = std::min(threads, keys.size());
    std::vector<std::thread> pool;
    for (std::size_t i = 1; i < threads; ++i) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    Report report;
    report.runs = std::move(results);
    auto row_index = [&](const AblationFlags& f) {
        return std::find(config.rows.begin(), config.rows.end(), f) - config.rows.begin();
    };
    std::stable_sort(report.runs.begin(), report.runs.end(), [&](const RunResult& a, const RunResult& b) {
        if (a.target_domain != b.target_domain) return a.target_domain < b.target_domain;
        const auto ra = row_index(a.key.flags), rb = row_index(b.key.flags);
        if (ra != rb) return ra < rb;
        return a.key.seed < b.key.seed;
    });
    std::vector<int> target_ids;
    for (auto t : config.targets) target_ids.push_back(domains[t].domain_id);
    std::sort(target_ids.begin(), target_ids.end());
    report.summary = summarize(report.runs, config.rows, target_ids);

    if (write) {
        write_text_file(config.output_dir / "report.csv", report_csv(report));
        write_text_file(config.output_dir / "diagnostics.csv", diagnostics_csv(report));
        write_text_file(config.output_dir / "summary.csv", summary_csv(report));
        if (config.plots && config.write_metrics) write_plots(config.output_dir);
    }
    return report;
}

std::filesystem::path resolve_output_dir(const std::filesystem::path& fallback) {
    const char* env = std::getenv("MASF_OUT_DIR");
    if (env != nullptr && *env != '\0') return std::filesystem::path(env);
    return fallback;
}

}  // namespace masf
