#include "masf/engine.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace masf {

std::string_view to_string(LocalLossKind kind) {
    return kind == LocalLossKind::Triplet ? "triplet" : "contrastive";
}

LocalLossKind parse_local_loss(std::string_view s) {
    if (s == "triplet") return LocalLossKind::Triplet;
    if (s == "contrastive") return LocalLossKind::Contrastive;
    throw ConfigError("unknown local loss '" + std::string(s) + "'");
}

void Hyperparams::validate() const {
    if (!(alpha > 0.0 && eta > 0.0 && gamma > 0.0)) throw ConfigError("learning rates must be positive");
    if (beta1 < 0.0 || beta2 < 0.0) throw ConfigError("meta-loss weights must be non-negative");
    if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
    if (!(margin > 0.0)) throw ConfigError("margin must be positive");
    if (!(clip_threshold > 0.0)) throw ConfigError("clip threshold must be positive");
    if (decay_rate < 0.0 || decay_rate >= 1.0) throw ConfigError("decay rate must be in [0, 1)");
    if (decay_every == 0) throw ConfigError("decay_every must be >= 1");
    if (batch_size < 2) throw ConfigError("batch size must be >= 2");
    if (episodic && (n_meta_train < 1 || n_meta_test < 1)) throw ConfigError("meta-train and meta-test need >= 1 domain");
}

EpisodeState make_initial_state(const Architecture& arch, const Hyperparams& hp, std::uint64_t seed) {
    hp.validate();
    EpisodeState s;
    s.params = init_params(arch, seed);
    s.rng.seed(seed ^ 0x9e3779b97f4a7c15ULL);
    s.hp = hp;
    return s;
}

DomainSplit split_domains(std::size_t num_domains, std::size_t n_train, std::size_t n_test, std::mt19937_64& rng) {
    if (num_domains < 2) throw ConfigError("episodic training needs at least two source domains");
    if (n_train < 1 || n_test < 1 || n_train + n_test != num_domains) {
        throw ConfigError("split sizes " + std::to_string(n_train) + "+" + std::to_string(n_test) +
                          " do not cover " + std::to_string(num_domains) + " domains");
    }
    std::vector<std::size_t> order(num_domains);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    DomainSplit s;
    s.meta_train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.meta_test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
    std::sort(s.meta_train.begin(), s.meta_train.end());
    std::sort(s.meta_test.begin(), s.meta_test.end());
    return s;
}

double decayed_lr(double eta0, std::uint64_t t, double decay_rate, std::size_t decay_every) {
    const auto k = static_cast<double>(t / decay_every);
    return eta0 * std::pow(1.0 - decay_rate, k);
}

Expr mean_task_loss(const ParamSet& psi, const ParamSet& theta, std::span<const Batch> batches) {
    if (batches.empty()) throw std::invalid_argument("task loss needs at least one batch");
    Expr total;
    for (const auto& b : batches) {
        const Expr l = task_loss(task_forward(theta, feature_forward(psi, leaf(b.features))), b.labels);
        total = total.valid() ? add(total, l) : l;
    }
    return batches.size() == 1 ? total : scale(total, 1.0 / static_cast<double>(batches.size()));
}

namespace {

std::vector<Expr> concat_tensors(const ParamSet& a, const ParamSet& b) {
    std::vector<Expr> out = a.tensors();
    for (const auto& e : b.entries()) out.push_back(e.tensor);
    return out;
}

void require_finite(double v, std::string_view what) {
    if (!std::isfinite(v)) throw NonFiniteError(std::string(what) + " is not finite");
}

std::vector<Batch> select(std::span<const Batch> batches, const std::vector<std::size_t>& idx) {
    std::vector<Batch> out;
    for (auto i : idx) out.push_back(batches[i]);
    return out;
}

Batch pool(std::span<const Batch> batches) {
    std::vector<DomainDataset> parts;
    for (const auto& b : batches) parts.push_back(DomainDataset{b.domain_id, b.features, b.labels});
    DomainDataset all = concat(parts);
    return Batch{all.domain_id, std::move(all.features), std::move(all.labels)};
}

ParamSet descend(const ParamSet& params, const GradMap& grads, double lr) {
    return sgd_step(params, grads, lr).detach();
}

}  // namespace

InnerResult inner_update(const ParamSet& psi, const ParamSet& theta, std::span<const Batch> batches,
                         double alpha, double clip_threshold) {
    InnerResult r;
    r.task_loss = mean_task_loss(psi, theta, batches);
    require_finite(r.task_loss.item(), "inner task loss");
    const auto params = concat_tensors(psi, theta);
    GradMap g = grad(r.task_loss, params);
    r.grad_norm = g.global_norm();
    require_finite(r.grad_norm, "inner gradient norm");
    g = clip_by_norm(g, clip_threshold);
    r.psi = sgd_step(psi, g, alpha);
    r.theta = sgd_step(theta, g, alpha);
    return r;
}

Expr local_loss(const ParamSet& psi, const ParamSet& phi, std::span<const Batch> batches,
                const Hyperparams& hp, std::mt19937_64& rng) {
    const Batch all = pool(batches);
    const Expr e = metric_forward(phi, feature_forward(psi, leaf(all.features)));
    if (hp.local_loss == LocalLossKind::Triplet) return triplet_loss_semihard(e, all.labels, hp.margin);
    return contrastive_loss(e, all.labels, hp.margin, rng);
}

MetaObjective build_meta_objective(const NetParams& params, std::span<const Batch> batches,
                                   const DomainSplit& split, const Hyperparams& hp, std::mt19937_64& rng) {
    MetaObjective m;
    const std::size_t classes = params.theta[1].shape()[0];
    ParamSet psi_adapted = params.psi;
    ParamSet theta_adapted = params.theta;
    Expr task;

    if (hp.episodic) {
        const auto tr = select(batches, split.meta_train);
        InnerResult inner = inner_update(params.psi, params.theta, tr, hp.alpha, hp.clip_threshold);
        psi_adapted = inner.psi;
        theta_adapted = inner.theta;
        m.inner_grad_norm = inner.grad_norm;
        task = hp.outer_task_on_all ? mean_task_loss(params.psi, params.theta, batches) : inner.task_loss;

        if (hp.uses_global()) {
            const auto te = select(batches, split.meta_test);
            m.global = global_alignment_loss(tr, te, psi_adapted, theta_adapted, hp.tau);
        }
    } else {
        task = mean_task_loss(params.psi, params.theta, batches);
        if (hp.uses_global()) {
            // Without a split, align every unordered pair of source domains.
            std::vector<SoftLabelMatrix> mats;
            for (const auto& b : batches) {
                const Expr z = feature_forward(params.psi, leaf(b.features));
                mats.push_back(soft_label_matrix(params.theta, z, b.labels, classes, hp.tau));
            }
            Expr total;
            std::size_t pairs = 0;
            for (std::size_t i = 0; i < mats.size(); ++i) {
                for (std::size_t j = i + 1; j < mats.size(); ++j) {
                    const Expr l = pair_alignment_loss(mats[i], mats[j]);
                    total = total.valid() ? add(total, l) : l;
                    ++pairs;
                }
            }
            if (pairs > 0) m.global = scale(total, 1.0 / static_cast<double>(pairs));
        }
    }

    if (hp.uses_local()) m.local = local_loss(psi_adapted, params.phi, batches, hp, rng);

    m.task = task;
    Expr total = task;
    if (m.global.valid()) total = add(total, scale(m.global, hp.beta1));
    if (m.local.valid()) total = add(total, scale(m.local, hp.beta2));
    m.total = total;
    return m;
}

EpisodeState meta_step(const EpisodeState& state, std::span<const Batch> batches, StepReport* report) {
    const Hyperparams& hp = state.hp;
    EpisodeState next = state;

    DomainSplit split;
    if (hp.episodic) {
        split = split_domains(batches.size(), hp.n_meta_train, hp.n_meta_test, next.rng);
    } else {
        split.meta_train.resize(batches.size());
        std::iota(split.meta_train.begin(), split.meta_train.end(), std::size_t{0});
    }

    const MetaObjective m = build_meta_objective(state.params, batches, split, hp, next.rng);
    require_finite(m.total.item(), "meta objective");

    const double eta = decayed_lr(hp.eta, state.iteration, hp.decay_rate, hp.decay_every);
    const auto outer_params = concat_tensors(state.params.psi, state.params.theta);
    GradMap g = grad(m.total, outer_params);
    const double outer_norm = g.global_norm();
    require_finite(outer_norm, "outer gradient norm");
    if (hp.clip_outer) g = clip_by_norm(g, hp.clip_threshold);
    next.params.psi = descend(state.params.psi, g, eta);
    next.params.theta = descend(state.params.theta, g, eta);

    double phi_norm = 0.0;
    if (m.local.valid()) {
        const auto phi_params = state.params.phi.tensors();
        GradMap gp = grad(m.local, phi_params);
        phi_norm = gp.global_norm();
        require_finite(phi_norm, "metric gradient norm");
        if (hp.clip_phi) gp = clip_by_norm(gp, hp.clip_threshold);
        next.params.phi = descend(state.params.phi, gp, hp.gamma);
    }
    ++next.iteration;

    if (report) {
        report->task = m.task.item();
        report->global = m.global.valid() ? m.global.item() : 0.0;
        report->local = m.local.valid() ? m.local.item() : 0.0;
        report->eta = eta;
        report->inner_grad_norm = m.inner_grad_norm;
        report->outer_grad_norm = outer_norm;
        report->phi_grad_norm = phi_norm;
        report->split = split;
    }
    return next;
}

EpisodeState train(EpisodeState state, std::span<const DomainDataset> sources, std::size_t iterations,
                   std::mt19937_64& data_rng, const MetricsSink& sink, const StepHook& hook) {
    if (iterations < 1) throw ConfigError("iterations must be >= 1");
    if (sources.empty()) throw ConfigError("no source domains");
    state.hp.validate();
    const std::size_t classes = state.params.theta[1].shape()[0];
    if (state.hp.batch_size < 2 * classes) throw ConfigError("batch size must be >= 2C for stratification");
    if (state.hp.episodic && state.hp.n_meta_train + state.hp.n_meta_test != sources.size()) {
        throw ConfigError("n_meta_train + n_meta_test must equal the number of source domains");
    }

    std::vector<Batch> batches(sources.size());
    for (std::size_t it = 0; it < iterations; ++it) {
        for (std::size_t k = 0; k < sources.size(); ++k) {
            const std::size_t bs = std::min(state.hp.batch_size, sources[k].size());
            batches[k] = sample_batch(sources[k], bs, true, classes, data_rng);
        }
        StepReport rep;
        state = meta_step(state, batches, &rep);
        MetricsRecord rec;
        rec.iteration = state.iteration;
        rec.task = rep.task;
        rec.global = rep.global;
        rec.local = rep.local;
        rec.eta = rep.eta;
        rec.alpha = state.hp.episodic ? state.hp.alpha : 0.0;
        rec.gamma = state.hp.gamma;
        rec.inner_grad_norm = rep.inner_grad_norm;
        rec.outer_grad_norm = rep.outer_grad_norm;
        rec.phi_grad_norm = rep.phi_grad_norm;
        if (hook) hook(state, rec);
        if (sink) sink(rec);
    }
    return state;
}

std::filesystem::path save_checkpoint(const EpisodeState& state, const Architecture& arch,
                                      const std::filesystem::path& run_dir) {
    const auto dir = run_dir / ("ckpt_" + std::to_string(state.iteration));
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    save_params(state.params.psi, arch, dir / "psi.bin");
    save_params(state.params.theta, arch, dir / "theta.bin");
    save_params(state.params.phi, arch, dir / "phi.bin");
    return dir;
}

NetParams load_checkpoint(const std::filesystem::path& ckpt_dir, const Architecture& arch) {
    NetParams p;
    p.psi = load_params(ckpt_dir / "psi.bin", arch, NetRole::FeatureExtractor);
    p.theta = load_params(ckpt_dir / "theta.bin", arch, NetRole::TaskNet);
    p.phi = load_params(ckpt_dir / "phi.bin", arch, NetRole::MetricNet);
    return p;
}

}  // namespace masf
