#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "masf/bench.hpp"
#include "masf/losses.hpp"
#include "masf/nets.hpp"

namespace masf {

enum class LocalLossKind { Triplet, Contrastive };
enum class OuterOptimizer { Sgd };

std::string_view to_string(LocalLossKind kind);
LocalLossKind parse_local_loss(std::string_view s);

struct Hyperparams {
    double alpha = 1e-5;  // inner learning rate
    double eta = 1e-3;    // outer learning rate for (psi, theta), decayed
    double gamma = 1e-5;  // metric-net learning rate, not decayed
    double beta1 = 1.0;   // global alignment weight
    double beta2 = 0.005; // local clustering weight
    double tau = 2.0;
    double margin = 1.0;
    double clip_threshold = 2.0;
    bool clip_outer = true;
    bool clip_phi = false;
    double decay_rate = 0.02;
    std::size_t decay_every = 1000;
    std::size_t batch_size = 128;  // per source domain
    std::size_t n_meta_train = 2;
    std::size_t n_meta_test = 1;
    LocalLossKind local_loss = LocalLossKind::Triplet;
    OuterOptimizer outer_optimizer = OuterOptimizer::Sgd;
    std::size_t max_iterations = 1000;
    // false: no domain split and no inner step; the meta losses (if
    // weighted) are added to the task loss at the original parameters.
    bool episodic = true;
    // Evaluate the outer task loss on all source domains instead of D_tr.
    bool outer_task_on_all = false;

    // Throws ConfigError.
    void validate() const;
    bool uses_global() const { return beta1 > 0.0; }
    bool uses_local() const { return beta2 > 0.0; }
};

struct EpisodeState {
    NetParams params;
    std::uint64_t iteration = 0;
    std::mt19937_64 rng;  // algorithmic randomness: splits and pairings
    Hyperparams hp;
};

EpisodeState make_initial_state(const Architecture& arch, const Hyperparams& hp, std::uint64_t seed);

struct DomainSplit {
    std::vector<std::size_t> meta_train;
    std::vector<std::size_t> meta_test;
};

// Uniformly random partition of K domain indices; both parts sorted.
DomainSplit split_domains(std::size_t num_domains, std::size_t n_train, std::size_t n_test, std::mt19937_64& rng);

// eta0 * (1 - decay_rate)^floor(t / decay_every)
double decayed_lr(double eta0, std::uint64_t t, double decay_rate, std::size_t decay_every);

// Mean over batches of the per-batch task loss.
Expr mean_task_loss(const ParamSet& psi, const ParamSet& theta, std::span<const Batch> batches);

struct InnerResult {
    ParamSet psi;   // differentiable in the original psi, theta
    ParamSet theta;
    Expr task_loss; // at the original parameters
    double grad_norm = 0.0;  // before clipping
};

// One clipped plain gradient step on the mean task loss of `batches`.
InnerResult inner_update(const ParamSet& psi, const ParamSet& theta, std::span<const Batch> batches,
                         double alpha, double clip_threshold);

// The local clustering loss on pooled batches (features from psi,
// embeddings from phi).
Expr local_loss(const ParamSet& psi, const ParamSet& phi, std::span<const Batch> batches,
                const Hyperparams& hp, std::mt19937_64& rng);

// Scalar graph of the full outer objective (task + beta1 global + beta2
// local) given an explicit split, exposed for gradient checking.
struct MetaObjective {
    Expr total;
    Expr task;
    Expr global;  // invalid when unused
    Expr local;   // invalid when unused
    double inner_grad_norm = 0.0;
};

MetaObjective build_meta_objective(const NetParams& params, std::span<const Batch> batches,
                                   const DomainSplit& split, const Hyperparams& hp, std::mt19937_64& rng);

struct StepReport {
    double task = 0.0;
    double global = 0.0;
    double local = 0.0;
    double eta = 0.0;
    double inner_grad_norm = 0.0;
    double outer_grad_norm = 0.0;
    double phi_grad_norm = 0.0;
    DomainSplit split;
};

// One iteration: split, inner update, meta losses, outer update of
// (psi, theta) and the separate update of phi. `batches` holds one batch per
// source domain. Throws NonFiniteError on non-finite losses or gradients.
EpisodeState meta_step(const EpisodeState& state, std::span<const Batch> batches, StepReport* report = nullptr);

struct MetricsRecord {
    std::uint64_t iteration = 0;
    double task = 0.0;
    double global = 0.0;
    double local = 0.0;
    double eta = 0.0;
    double alpha = 0.0;
    double gamma = 0.0;
    double inner_grad_norm = 0.0;
    double outer_grad_norm = 0.0;
    double phi_grad_norm = 0.0;
    std::optional<double> margin;            // unseen-domain margin statistic
    std::optional<double> target_alignment;  // source-target alignment loss
};

using MetricsSink = std::function<void(const MetricsRecord&)>;
// Called after each step; may attach diagnostics to the record.
using StepHook = std::function<void(const EpisodeState&, MetricsRecord&)>;

// Runs `iterations` meta steps with stratified per-domain batches drawn
// from `data_rng`, emitting one record per step.
EpisodeState train(EpisodeState state, std::span<const DomainDataset> sources, std::size_t iterations,
                   std::mt19937_64& data_rng, const MetricsSink& sink, const StepHook& hook = {});

// Writes {run_dir}/ckpt_{t}/{psi,theta,phi}.bin and returns the directory.
std::filesystem::path save_checkpoint(const EpisodeState& state, const Architecture& arch,
                                      const std::filesystem::path& run_dir);
NetParams load_checkpoint(const std::filesystem::path& ckpt_dir, const Architecture& arch);

}  // namespace masf
