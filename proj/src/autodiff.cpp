#include "masf/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace masf {

void GradMap::set(const Expr& param, Expr g) {
    if (g.shape() != param.shape()) {
        throw ShapeError("gradient shape " + to_string(g.shape()) + " for parameter " +
                         to_string(param.shape()));
    }
    set(param.id(), std::move(g));
}

void GradMap::set(NodeId id, Expr g) {
    auto it = index_.find(id);
    if (it != index_.end()) {
        entries_[it->second].second = std::move(g);
        return;
    }
    index_.emplace(id, entries_.size());
    entries_.emplace_back(id, std::move(g));
}

const Expr& GradMap::at(const Expr& param) const { return at(param.id()); }

const Expr& GradMap::at(NodeId id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw std::out_of_range("no gradient for node " + std::to_string(id));
    return entries_[it->second].second;
}

double GradMap::global_norm() const {
    double s = 0.0;
    for (const auto& [id, g] : entries_)
        for (double v : g.value().data) s += v * v;
    return std::sqrt(s);
}

namespace {

// Vector-Jacobian product of `node` for input `which`, given the upstream
// gradient `g`. Returns an invalid Expr when the contribution is identically
// zero.
Expr vjp(const Expr& node, std::size_t which, const Expr& g) {
    const auto in = node.inputs();
    const Node& n = node.node();
    switch (node.op()) {
    case Op::Leaf:
        return {};
    case Op::Add:
        return g;
    case Op::Sub:
        return which == 0 ? g : neg(g);
    case Op::Mul:
        return mul(g, in[1 - which]);
    case Op::Div:
        if (which == 0) return div(g, in[1]);
        return neg(div(mul(g, node), in[1]));
    case Op::Scale:
        return scale(g, n.scalar);
    case Op::Shift:
        return g;
    case Op::MatMul:
        if (which == 0) return matmul(g, transpose(in[1]));
        return matmul(transpose(in[0]), g);
    case Op::Transpose:
        return transpose(g);
    case Op::Relu:
        return mul(g, step(in[0]));
    case Op::Step:
        return {};
    case Op::Exp:
        return mul(g, node);
    case Op::Log:
        return div(g, in[0]);
    case Op::Sqrt:
        return div(scale(g, 0.5), node);
    case Op::Square:
        return mul(g, scale(in[0], 2.0));
    case Op::Broadcast:
        return sum_to(g, in[0].shape());
    case Op::SumTo:
        return broadcast_to(g, in[0].shape());
    case Op::Reshape:
        return reshape(g, in[0].shape());
    case Op::Max:
        return unpick(g, n.indices, n.extent);
    case Op::LogSumExp: {
        const Shape& s = in[0].shape();
        return mul(expand_last(g, s), exp(sub(in[0], expand_last(node, s))));
    }
    case Op::GatherRows:
        return scatter_rows(g, n.indices, n.extent);
    case Op::ScatterRows:
        return gather_rows(g, n.indices);
    case Op::Pick:
        return unpick(g, n.indices, n.extent);
    case Op::Unpick:
        return pick(g, n.indices);
    }
    throw std::logic_error("unhandled op in vjp");
}

}  // namespace

GradMap grad(const Expr& scalar, std::span<const Expr> params) {
    if (!scalar.shape().empty()) {
        throw ShapeError("grad needs a scalar root, got shape " + to_string(scalar.shape()));
    }
    std::unordered_set<NodeId> targets;
    for (const auto& p : params) targets.insert(p.id());

    // Post-order over the reachable graph, recording which nodes depend on
    // any target.
    std::vector<const Expr*> order;
    std::unordered_map<NodeId, bool> depends;
    std::vector<std::pair<const Expr*, bool>> stack{{&scalar, false}};
    while (!stack.empty()) {
        auto [e, expanded] = stack.back();
        stack.pop_back();
        if (depends.contains(e->id())) continue;
        if (!expanded) {
            stack.emplace_back(e, true);
            for (const auto& in : e->inputs())
                if (!depends.contains(in.id())) stack.emplace_back(&in, false);
            continue;
        }
        bool dep = targets.contains(e->id());
        for (const auto& in : e->inputs()) dep = dep || depends.at(in.id());
        depends.emplace(e->id(), dep);
        order.push_back(e);
    }

    std::unordered_map<NodeId, Expr> acc;
    if (depends.at(scalar.id())) acc.emplace(scalar.id(), constant(1.0));

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const Expr& e = **it;
        auto found = acc.find(e.id());
        if (found == acc.end()) continue;
        const Expr g = found->second;
        if (targets.contains(e.id()) && e.is_leaf()) continue;
        const auto inputs = e.inputs();
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            if (!depends.at(inputs[i].id())) continue;
            Expr contrib = vjp(e, i, g);
            if (!contrib.valid()) continue;
            auto [slot, inserted] = acc.try_emplace(inputs[i].id(), contrib);
            if (!inserted) slot->second = add(slot->second, contrib);
        }
        // Intermediate gradients are no longer needed once propagated.
        if (!targets.contains(e.id())) acc.erase(e.id());
    }

    GradMap out;
    for (const auto& p : params) {
        auto it = acc.find(p.id());
        out.set(p, it != acc.end() ? it->second : zeros(p.shape()));
    }
    return out;
}

GradMap clip_by_norm(const GradMap& grads, double threshold) {
    if (!(threshold > 0.0)) throw std::invalid_argument("clip threshold must be positive");
    if (grads.size() == 0 || grads.global_norm() <= threshold) return grads;

    Expr sq;
    for (const auto& [id, g] : grads.entries()) {
        Expr s = sum(square(g));
        sq = sq.valid() ? add(sq, s) : s;
    }
    const Expr factor = div(constant(threshold), sqrt(sq));
    GradMap out;
    for (const auto& [id, g] : grads.entries()) {
        out.set(id, mul(g, factor));
    }
    return out;
}

double finite_diff_check(const Expr& scalar, std::span<const Expr> params, double h) {
    if (!(h > 0.0)) throw std::invalid_argument("finite difference step must be positive");
    const GradMap analytic = grad(scalar, params);
    double worst = 0.0;
    for (const auto& p : params) {
        if (!p.is_leaf()) throw std::invalid_argument("finite_diff_check needs leaf parameters");
        const Tensor& base = p.value();
        const Tensor& a = analytic.at(p).value();
        for (std::size_t k = 0; k < base.size(); ++k) {
            Tensor plus = base, minus = base;
            plus.data[k] += h;
            minus.data[k] -= h;
            const double fp = reevaluate(scalar, {{p.id(), plus}}).item();
            const double fm = reevaluate(scalar, {{p.id(), minus}}).item();
            const double numeric = (fp - fm) / (2.0 * h);
            const double denom = std::max({1.0, std::abs(a.data[k]), std::abs(numeric)});
            worst = std::max(worst, std::abs(a.data[k] - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace masf
