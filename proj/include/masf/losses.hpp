#pragma once

#include <random>
#include <span>
#include <vector>

#include "masf/data.hpp"
#include "masf/nets.hpp"

namespace masf {

// Mean cross-entropy of [N, C] logits against labels, via log-sum-exp.
Expr task_loss(const Expr& logits, std::span<const std::size_t> labels);

struct ClassMeans {
    Expr means;                      // [C, d_z]; rows of absent classes are zero
    std::vector<bool> present;       // false where the class has no sample
    std::vector<std::size_t> counts;
};

ClassMeans class_means(const Expr& z, std::span<const std::size_t> labels, std::size_t num_classes);

// softmax(T_theta(mean) / tau) for a [d_z] mean (returns [C]) or a [M, d_z]
// stack of means (returns [M, C]).
Expr soft_labels(const ParamSet& theta, const Expr& class_mean, double tau);

// Per-domain soft confusion matrix: row c is the softened class distribution
// of the class-c mean feature.
struct SoftLabelMatrix {
    Expr log_probs;  // [C, C]
    Expr probs;      // [C, C]
    std::vector<bool> present;
    double tau = 1.0;
};

SoftLabelMatrix soft_label_matrix(const ParamSet& theta, const Expr& z,
                                  std::span<const std::size_t> labels, std::size_t num_classes,
                                  double tau);

// 0.5 * [KL(p||q) + KL(q||p)] with epsilon-guarded logs. Rank-1 inputs give
// a scalar; rank-2 inputs give one value per row.
Expr symm_kl(const Expr& p, const Expr& q);

// Mean over classes present in both matrices of the row-wise symmetric KL.
// Throws ConfigError when the two share no class.
Expr pair_alignment_loss(const SoftLabelMatrix& a, const SoftLabelMatrix& b);

// Average of pair_alignment_loss over every (first[i], second[j]).
Expr mean_alignment_loss(std::span<const SoftLabelMatrix> first, std::span<const SoftLabelMatrix> second);

// Soft confusion matrices of each batch are computed with (psi, theta) and
// aligned over all (meta_train x meta_test) pairs.
Expr global_alignment_loss(std::span<const Batch> meta_train, std::span<const Batch> meta_test,
                           const ParamSet& psi, const ParamSet& theta, double tau);

Expr pairwise_distance(const Expr& e_n, const Expr& e_m);

struct PairSample {
    std::size_t first = 0;
    std::size_t second = 0;
    bool same_class = false;
};

struct TripletSample {
    std::size_t anchor = 0;
    std::size_t positive = 0;
    std::size_t negative = 0;
};

// Shuffle then pair (0,1), (2,3), ...: floor(N/2) pairs. Throws for N < 2.
std::vector<PairSample> shuffle_pairs(std::span<const std::size_t> labels, std::mt19937_64& rng);

// Mean over `pairs` of d^2 (same class) or max(0, margin - d)^2 (different).
Expr contrastive_loss(const Expr& embeddings, std::span<const PairSample> pairs, double margin);
Expr contrastive_loss(const Expr& embeddings, std::span<const std::size_t> labels, double margin,
                      std::mt19937_64& rng);

// For every ordered anchor-positive pair, the negative with the smallest
// distance strictly beyond d(a, p); the farthest negative when none is.
// Ties go to the lowest sample index.
std::vector<TripletSample> mine_semihard(const Tensor& embeddings, std::span<const std::size_t> labels);

// Mean over triplets of max(0, d(a,p)^2 - d(a,n)^2 + margin).
Expr triplet_loss(const Expr& embeddings, std::span<const TripletSample> triplets, double margin);
// Mines semi-hard triplets; returns 0 (with a warning) when none exist.
Expr triplet_loss_semihard(const Expr& embeddings, std::span<const std::size_t> labels, double margin);

}  // namespace masf
