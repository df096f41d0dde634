#pragma once

// Reference computations written directly against std::vector<double>,
// sharing no code with the library beyond the Tensor container.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "masf/autodiff.hpp"

namespace oracle {

using Vec = std::vector<double>;

inline masf::Tensor random_tensor(masf::Shape shape, std::mt19937_64& rng, double sigma = 1.0) {
    std::normal_distribution<double> n(0.0, sigma);
    masf::Tensor t(std::move(shape));
    for (auto& v : t.data) v = n(rng);
    return t;
}

inline double symm_kl(const Vec& p, const Vec& q) {
    double kl_pq = 0.0, kl_qp = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        kl_pq += p[i] * std::log(p[i] / q[i]);
        kl_qp += q[i] * std::log(q[i] / p[i]);
    }
    return 0.5 * (kl_pq + kl_qp);
}

inline double euclid(const masf::Tensor& e, std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t k = 0; k < e.cols(); ++k) {
        const double d = e.at(i, k) - e.at(j, k);
        s += d * d;
    }
    return std::sqrt(s);
}

// Average contrastive term over all N(N-1)/2 unordered pairs.
inline double all_pairs_contrastive(const masf::Tensor& e, const std::vector<std::size_t>& labels, double margin) {
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        for (std::size_t j = i + 1; j < labels.size(); ++j) {
            const double d = euclid(e, i, j);
            total += labels[i] == labels[j] ? d * d : std::pow(std::max(0.0, margin - d), 2.0);
            ++n;
        }
    }
    return total / static_cast<double>(n);
}

// Central differences obtained by rebuilding the whole graph from perturbed
// parameter values. Returns max relative error |a-n|/max(1,|a|,|n|).
using Builder = std::function<masf::Expr(const std::vector<masf::Expr>&)>;

inline double rebuild_fd_error(const Builder& build, const std::vector<masf::Tensor>& values, double h = 1e-5) {
    std::vector<masf::Expr> params;
    for (const auto& v : values) params.push_back(masf::leaf(v));
    const masf::Expr f = build(params);
    const masf::GradMap g = masf::grad(f, params);
    double worst = 0.0;
    for (std::size_t p = 0; p < values.size(); ++p) {
        const masf::Tensor analytic = g.at(params[p]).value();
        for (std::size_t i = 0; i < values[p].size(); ++i) {
            auto eval_at = [&](double delta) {
                std::vector<masf::Expr> shifted;
                for (std::size_t q = 0; q < values.size(); ++q) {
                    masf::Tensor t = values[q];
                    if (q == p) t.data[i] += delta;
                    shifted.push_back(masf::leaf(std::move(t)));
                }
                return build(shifted).item();
            };
            const double numeric = (eval_at(h) - eval_at(-h)) / (2.0 * h);
            const double a = analytic.data[i];
            worst = std::max(worst, std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)}));
        }
    }
    return worst;
}

// Dense layer parameters stored row-major as [in, out] plus bias [out].
struct Layer {
    std::size_t in = 0, out = 0;
    Vec w, b;
};

// Hand-written forward and backward pass for an MLP with ReLU after every
// hidden layer and a linear softmax head, trained with plain SGD on the mean
// of per-batch cross-entropies. Global-norm clipping optional.
struct PlainClassifier {
    std::vector<Layer> feature;
    Layer head;

    struct Cache {
        std::vector<Vec> acts;  // input, then post-ReLU activations
        Vec logits;
    };

    static Vec affine(const Vec& x, std::size_t n, const Layer& l) {
        Vec y(n * l.out);
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t j = 0; j < l.out; ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < l.in; ++k) s += x[r * l.in + k] * l.w[k * l.out + j];
                y[r * l.out + j] = s + l.b[j];
            }
        }
        return y;
    }

    Cache forward(const Vec& x, std::size_t n) const {
        Cache c;
        c.acts.push_back(x);
        for (const auto& l : feature) {
            Vec h = affine(c.acts.back(), n, l);
            for (auto& v : h) v = std::max(0.0, v);
            c.acts.push_back(std::move(h));
        }
        c.logits = affine(c.acts.back(), n, head);
        return c;
    }

    // Adds d(weight * mean CE)/d(params) into the gradient buffers.
    void backward(const Vec& x, const std::vector<std::size_t>& labels, double weight, std::vector<Layer>& gf,
                  Layer& gh) const {
        const std::size_t n = labels.size(), C = head.out;
        const Cache c = forward(x, n);
        Vec dlogits(n * C);
        for (std::size_t r = 0; r < n; ++r) {
            double m = c.logits[r * C];
            for (std::size_t k = 1; k < C; ++k) m = std::max(m, c.logits[r * C + k]);
            double z = 0.0;
            for (std::size_t k = 0; k < C; ++k) z += std::exp(c.logits[r * C + k] - m);
            for (std::size_t k = 0; k < C; ++k) {
                const double p = std::exp(c.logits[r * C + k] - m) / z;
                dlogits[r * C + k] = weight * (p - (k == labels[r] ? 1.0 : 0.0)) / static_cast<double>(n);
            }
        }
        Vec delta = dlogits;
        auto accumulate = [&](const Layer& l, Layer& g, const Vec& input, const Vec& d) {
            for (std::size_t k = 0; k < l.in; ++k) {
                for (std::size_t j = 0; j < l.out; ++j) {
                    double s = 0.0;
                    for (std::size_t r = 0; r < n; ++r) s += input[r * l.in + k] * d[r * l.out + j];
                    g.w[k * l.out + j] += s;
                }
            }
            for (std::size_t j = 0; j < l.out; ++j) {
                double s = 0.0;
                for (std::size_t r = 0; r < n; ++r) s += d[r * l.out + j];
                g.b[j] += s;
            }
        };
        auto back_input = [&](const Layer& l, const Vec& d) {
            Vec out(n * l.in, 0.0);
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t k = 0; k < l.in; ++k) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < l.out; ++j) s += d[r * l.out + j] * l.w[k * l.out + j];
                    out[r * l.in + k] = s;
                }
            }
            return out;
        };
        accumulate(head, gh, c.acts.back(), delta);
        delta = back_input(head, delta);
        for (std::size_t li = feature.size(); li-- > 0;) {
            const Vec& post = c.acts[li + 1];
            for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = post[i] > 0.0 ? delta[i] : 0.0;
            accumulate(feature[li], gf[li], c.acts[li], delta);
            if (li > 0) delta = back_input(feature[li], delta);
        }
    }

    // One SGD step on the mean over batches of the mean cross-entropy.
    void step(const std::vector<Vec>& xs, const std::vector<std::vector<std::size_t>>& ys, double lr,
              double clip) {
        std::vector<Layer> gf = feature;
        Layer gh = head;
        for (auto& l : gf) {
            std::fill(l.w.begin(), l.w.end(), 0.0);
            std::fill(l.b.begin(), l.b.end(), 0.0);
        }
        std::fill(gh.w.begin(), gh.w.end(), 0.0);
        std::fill(gh.b.begin(), gh.b.end(), 0.0);
        for (std::size_t i = 0; i < xs.size(); ++i) backward(xs[i], ys[i], 1.0 / static_cast<double>(xs.size()), gf, gh);
        double sq = 0.0;
        auto sum_sq = [&](const Layer& l) {
            for (double v : l.w) sq += v * v;
            for (double v : l.b) sq += v * v;
        };
        for (const auto& l : gf) sum_sq(l);
        sum_sq(gh);
        const double norm = std::sqrt(sq);
        const double factor = clip > 0.0 && norm > clip ? clip / norm : 1.0;
        auto apply = [&](Layer& p, const Layer& g) {
            for (std::size_t i = 0; i < p.w.size(); ++i) p.w[i] -= lr * (g.w[i] * factor);
            for (std::size_t i = 0; i < p.b.size(); ++i) p.b[i] -= lr * (g.b[i] * factor);
        };
        for (std::size_t l = 0; l < feature.size(); ++l) apply(feature[l], gf[l]);
        apply(head, gh);
    }
};

inline double silhouette(const std::vector<Vec>& pts, const std::vector<int>& labels) {
    double total = 0.0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        auto dist = [&](std::size_t j) {
            double s = 0.0;
            for (std::size_t k = 0; k < pts[i].size(); ++k) s += std::pow(pts[i][k] - pts[j][k], 2.0);
            return std::sqrt(s);
        };
        double a = 0.0;
        int na = 0;
        std::vector<double> other_sum(16, 0.0);
        std::vector<int> other_n(16, 0);
        for (std::size_t j = 0; j < pts.size(); ++j) {
            if (j == i) continue;
            if (labels[j] == labels[i]) {
                a += dist(j);
                ++na;
            } else {
                other_sum[labels[j]] += dist(j);
                ++other_n[labels[j]];
            }
        }
        if (na == 0) continue;
        a /= na;
        double b = 1e300;
        for (int c = 0; c < 16; ++c)
            if (other_n[c] > 0) b = std::min(b, other_sum[c] / other_n[c]);
        const double m = std::max(a, b);
        if (m > 0) total += (b - a) / m;
    }
    return total / static_cast<double>(pts.size());
}

}  // namespace oracle
