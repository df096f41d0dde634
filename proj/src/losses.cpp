#include "masf/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include <spdlog/spdlog.h>

namespace masf {

Expr task_loss(const Expr& logits, std::span<const std::size_t> labels) {
    if (logits.shape().size() != 2 || logits.shape()[0] != labels.size()) {
        throw ShapeError("task_loss: logits " + to_string(logits.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
    }
    const std::size_t classes = logits.shape()[1];
    for (auto y : labels) {
        if (y >= classes) throw std::out_of_range("label " + std::to_string(y) + " out of range");
    }
    const Expr picked = pick(log_softmax(logits), {labels.begin(), labels.end()});
    return neg(mean(picked));
}

ClassMeans class_means(const Expr& z, std::span<const std::size_t> labels, std::size_t num_classes) {
    if (z.shape().size() != 2 || z.shape()[0] != labels.size() || labels.empty()) {
        throw ShapeError("class_means: features " + to_string(z.shape()));
    }
    ClassMeans out;
    out.counts.assign(num_classes, 0);
    for (auto y : labels) {
        if (y >= num_classes) throw std::out_of_range("label out of range");
        ++out.counts[y];
    }
    const std::size_t n = labels.size();
    Tensor avg(Shape{num_classes, n});
    for (std::size_t i = 0; i < n; ++i) {
        avg.data[labels[i] * n + i] = 1.0 / static_cast<double>(out.counts[labels[i]]);
    }
    out.means = matmul(leaf(std::move(avg)), z);
    out.present.resize(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) out.present[c] = out.counts[c] > 0;
    return out;
}

namespace {

void check_tau(double tau) {
    if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
}

std::vector<std::size_t> shared_classes(const SoftLabelMatrix& a, const SoftLabelMatrix& b) {
    std::vector<std::size_t> idx;
    for (std::size_t c = 0; c < a.present.size() && c < b.present.size(); ++c)
        if (a.present[c] && b.present[c]) idx.push_back(c);
    return idx;
}

// 0.5 * sum over the last axis of (p - q) * (log p - log q).
Expr symm_kl_from_logs(const Expr& p, const Expr& lp, const Expr& q, const Expr& lq) {
    const Expr terms = mul(sub(p, q), sub(lp, lq));
    if (terms.shape().size() == 1) return scale(sum(terms), 0.5);
    return scale(sum(terms, 1), 0.5);
}

void check_distribution(const Tensor& t) {
    const std::size_t w = t.cols();
    for (std::size_t r = 0; r * w < t.size(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < w; ++c) {
            const double v = t.data[r * w + c];
            if (!(v >= 0.0)) throw std::invalid_argument("symm_kl: negative probability");
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-6) throw std::invalid_argument("symm_kl: row does not sum to 1");
    }
}

}  // namespace

Expr soft_labels(const ParamSet& theta, const Expr& class_mean, double tau) {
    check_tau(tau);
    if (class_mean.shape().size() == 1) {
        const Expr m = reshape(class_mean, {1, class_mean.shape()[0]});
        const Expr p = softmax(scale(task_forward(theta, m), 1.0 / tau));
        return reshape(p, {p.shape()[1]});
    }
    return softmax(scale(task_forward(theta, class_mean), 1.0 / tau));
}

SoftLabelMatrix soft_label_matrix(const ParamSet& theta, const Expr& z,
                                  std::span<const std::size_t> labels, std::size_t num_classes,
                                  double tau) {
    check_tau(tau);
    ClassMeans cm = class_means(z, labels, num_classes);
    SoftLabelMatrix s;
    s.log_probs = log_softmax(scale(task_forward(theta, cm.means), 1.0 / tau));
    s.probs = exp(s.log_probs);
    s.present = std::move(cm.present);
    s.tau = tau;
    return s;
}

Expr symm_kl(const Expr& p, const Expr& q) {
    if (p.shape() != q.shape() || p.shape().empty() || p.shape().size() > 2) {
        throw ShapeError("symm_kl: " + to_string(p.shape()) + " vs " + to_string(q.shape()));
    }
    check_distribution(p.value());
    check_distribution(q.value());
    return symm_kl_from_logs(p, log(p), q, log(q));
}

Expr pair_alignment_loss(const SoftLabelMatrix& a, const SoftLabelMatrix& b) {
    const auto idx = shared_classes(a, b);
    if (idx.empty()) throw ConfigError("alignment: domains share no class");
    const Expr per_class = symm_kl_from_logs(gather_rows(a.probs, idx), gather_rows(a.log_probs, idx),
                                             gather_rows(b.probs, idx), gather_rows(b.log_probs, idx));
    return mean(per_class);
}

Expr mean_alignment_loss(std::span<const SoftLabelMatrix> first, std::span<const SoftLabelMatrix> second) {
    if (first.empty() || second.empty()) throw ConfigError("alignment needs domains on both sides");
    Expr total;
    for (const auto& a : first) {
        for (const auto& b : second) {
            const Expr l = pair_alignment_loss(a, b);
            total = total.valid() ? add(total, l) : l;
        }
    }
    return scale(total, 1.0 / static_cast<double>(first.size() * second.size()));
}

Expr global_alignment_loss(std::span<const Batch> meta_train, std::span<const Batch> meta_test,
                           const ParamSet& psi, const ParamSet& theta, double tau) {
    const std::size_t classes = theta[1].shape()[0];
    auto matrices = [&](std::span<const Batch> batches) {
        std::vector<SoftLabelMatrix> out;
        for (const auto& b : batches) {
            const Expr z = feature_forward(psi, leaf(b.features));
            out.push_back(soft_label_matrix(theta, z, b.labels, classes, tau));
        }
        return out;
    };
    const auto tr = matrices(meta_train);
    const auto te = matrices(meta_test);
    return mean_alignment_loss(tr, te);
}

Expr pairwise_distance(const Expr& e_n, const Expr& e_m) {
    return sqrt(sum(square(sub(e_n, e_m))));
}

std::vector<PairSample> shuffle_pairs(std::span<const std::size_t> labels, std::mt19937_64& rng) {
    if (labels.size() < 2) throw std::invalid_argument("contrastive pairing needs at least two samples");
    std::vector<std::size_t> order(labels.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<PairSample> pairs;
    pairs.reserve(order.size() / 2);
    for (std::size_t i = 0; i + 1 < order.size(); i += 2) {
        const auto a = order[i], b = order[i + 1];
        pairs.push_back({a, b, labels[a] == labels[b]});
    }
    return pairs;
}

Expr contrastive_loss(const Expr& embeddings, std::span<const PairSample> pairs, double margin) {
    if (pairs.empty()) throw std::invalid_argument("contrastive loss needs at least one pair");
    std::vector<std::size_t> pos_a, pos_b, neg_a, neg_b;
    for (const auto& p : pairs) {
        (p.same_class ? pos_a : neg_a).push_back(p.first);
        (p.same_class ? pos_b : neg_b).push_back(p.second);
    }
    auto sq_dist = [&](std::vector<std::size_t> a, std::vector<std::size_t> b) {
        return sum(square(sub(gather_rows(embeddings, std::move(a)), gather_rows(embeddings, std::move(b)))), 1);
    };
    Expr total;
    if (!pos_a.empty()) total = sum(sq_dist(std::move(pos_a), std::move(pos_b)));
    if (!neg_a.empty()) {
        const Expr d = sqrt(sq_dist(std::move(neg_a), std::move(neg_b)));
        const Expr hinge = sum(square(relu(shift(neg(d), margin))));
        total = total.valid() ? add(total, hinge) : hinge;
    }
    return scale(total, 1.0 / static_cast<double>(pairs.size()));
}

Expr contrastive_loss(const Expr& embeddings, std::span<const std::size_t> labels, double margin,
                      std::mt19937_64& rng) {
    if (embeddings.shape().empty() || embeddings.shape()[0] != labels.size()) {
        throw ShapeError("contrastive_loss: embeddings " + to_string(embeddings.shape()));
    }
    const auto pairs = shuffle_pairs(labels, rng);
    return contrastive_loss(embeddings, pairs, margin);
}

std::vector<TripletSample> mine_semihard(const Tensor& embeddings, std::span<const std::size_t> labels) {
    const std::size_t n = labels.size();
    if (embeddings.rank() != 2 || embeddings.shape[0] != n) throw ShapeError("mine_semihard: shape");
    const std::size_t dim = embeddings.shape[1];
    std::vector<double> d2(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < dim; ++k) {
                const double diff = embeddings.data[i * dim + k] - embeddings.data[j * dim + k];
                s += diff * diff;
            }
            d2[i * n + j] = s;
        }
    }
    std::vector<TripletSample> out;
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t p = 0; p < n; ++p) {
            if (p == a || labels[p] != labels[a]) continue;
            const double dap = d2[a * n + p];
            std::size_t semi = n, far = n;
            for (std::size_t m = 0; m < n; ++m) {
                if (labels[m] == labels[a]) continue;
                const double dan = d2[a * n + m];
                if (dan > dap && (semi == n || dan < d2[a * n + semi])) semi = m;
                if (far == n || dan > d2[a * n + far]) far = m;
            }
            if (far == n) continue;  // no negative for this anchor
            out.push_back({a, p, semi != n ? semi : far});
        }
    }
    return out;
}

Expr triplet_loss(const Expr& embeddings, std::span<const TripletSample> triplets, double margin) {
    if (triplets.empty()) throw std::invalid_argument("triplet loss needs at least one triplet");
    std::vector<std::size_t> a, p, n;
    for (const auto& t : triplets) {
        a.push_back(t.anchor);
        p.push_back(t.positive);
        n.push_back(t.negative);
    }
    const Expr anchors = gather_rows(embeddings, a);
    const Expr dap = sum(square(sub(anchors, gather_rows(embeddings, std::move(p)))), 1);
    const Expr dan = sum(square(sub(anchors, gather_rows(embeddings, std::move(n)))), 1);
    return mean(relu(shift(sub(dap, dan), margin)));
}

Expr triplet_loss_semihard(const Expr& embeddings, std::span<const std::size_t> labels, double margin) {
    const auto triplets = mine_semihard(embeddings.value(), labels);
    if (triplets.empty()) {
        spdlog::warn("triplet loss: batch of {} samples has no valid triplet", labels.size());
        return constant(0.0);
    }
    return triplet_loss(embeddings, triplets, margin);
}

}  // namespace masf
