#pragma once

#include <span>
#include <unordered_map>
#include <vector>

#include "masf/expr.hpp"

namespace masf {

// Gradients of one scalar with respect to an ordered list of leaves. Each
// entry is itself an Expr, so it can be differentiated again.
class GradMap {
public:
    GradMap() = default;

    void set(const Expr& param, Expr g);
    void set(NodeId id, Expr g);
    bool contains(const Expr& param) const { return index_.contains(param.id()); }
    const Expr& at(const Expr& param) const;
    const Expr& at(NodeId id) const;

    std::size_t size() const { return entries_.size(); }
    const std::vector<std::pair<NodeId, Expr>>& entries() const { return entries_; }

    // L2 norm over all entries taken as one concatenated vector.
    double global_norm() const;

private:
    std::vector<std::pair<NodeId, Expr>> entries_;
    std::unordered_map<NodeId, std::size_t> index_;
};

// Reverse-mode gradient of `scalar` (shape []) with respect to each leaf in
// `params`. Params the scalar does not depend on get zero gradients.
GradMap grad(const Expr& scalar, std::span<const Expr> params);

// Rescales every entry by threshold / n when the global norm n exceeds
// `threshold`. The rescaling is built from differentiable ops.
GradMap clip_by_norm(const GradMap& grads, double threshold);

// Max over every parameter component of |analytic - numeric| / max(1, |a|, |n|),
// with central differences of step h.
double finite_diff_check(const Expr& scalar, std::span<const Expr> params, double h = 1e-5);

}  // namespace masf
