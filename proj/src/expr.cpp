#include "masf/expr.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <string>

namespace masf {
namespace {

std::atomic<NodeId> g_next_id{1};

[[noreturn]] void shape_fail(std::string_view what, const Shape& a, const Shape& b = {}) {
    std::string msg(what);
    msg += ": " + to_string(a);
    if (!b.empty()) msg += " vs " + to_string(b);
    throw ShapeError(msg);
}

bool broadcastable(const Shape& from, const Shape& to) {
    if (from.size() > to.size()) return false;
    const std::size_t off = to.size() - from.size();
    for (std::size_t d = 0; d < from.size(); ++d) {
        if (from[d] != 1 && from[d] != to[d + off]) return false;
    }
    return true;
}

Shape common_shape(const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r, 1);
    for (std::size_t d = 0; d < r; ++d) {
        const std::size_t da = d + a.size() >= r ? a[d + a.size() - r] : 1;
        const std::size_t db = d + b.size() >= r ? b[d + b.size() - r] : 1;
        if (da != db && da != 1 && db != 1) shape_fail("incompatible shapes", a, b);
        out[d] = std::max(da, db);
    }
    return out;
}

// Input strides aligned to `target`, zero along broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& target) {
    const std::size_t r = target.size();
    const std::size_t off = r - in.size();
    std::vector<std::size_t> strides(r, 0);
    std::size_t s = 1;
    for (std::size_t d = in.size(); d-- > 0;) {
        if (in[d] != 1) strides[d + off] = s;
        s *= in[d];
    }
    return strides;
}

template <typename F>
void for_each_broadcast(const Shape& in, const Shape& target, F&& f) {
    const auto strides = broadcast_strides(in, target);
    const std::size_t r = target.size();
    const std::size_t total = numel(target);
    std::vector<std::size_t> idx(r, 0);
    std::size_t src = 0;
    for (std::size_t i = 0; i < total; ++i) {
        f(i, src);
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            src += strides[d];
            if (idx[d] < target[d]) break;
            src -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

template <typename F>
Tensor map_unary(const Tensor& a, F&& f) {
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = f(a.data[i]);
    return out;
}

template <typename F>
Tensor map_binary(const Tensor& a, const Tensor& b, F&& f) {
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = f(a.data[i], b.data[i]);
    return out;
}

std::size_t last_extent(const Shape& s) { return s.empty() ? 1 : s.back(); }

Shape drop_last(const Shape& s) { return Shape(s.begin(), s.end() - 1); }

std::vector<std::size_t> argmax_last(const Tensor& a) {
    const std::size_t w = last_extent(a.shape);
    const std::size_t n = a.size() / w;
    std::vector<std::size_t> idx(n, 0);
    for (std::size_t r = 0; r < n; ++r) {
        const double* row = a.data.data() + r * w;
        std::size_t best = 0;
        for (std::size_t c = 1; c < w; ++c) {
            if (row[c] > row[best]) best = c;
        }
        idx[r] = best;
    }
    return idx;
}

Tensor compute(const Node& n, std::span<const Tensor* const> in) {
    switch (n.op) {
    case Op::Leaf:
        return n.value;
    case Op::Add:
        return map_binary(*in[0], *in[1], [](double x, double y) { return x + y; });
    case Op::Sub:
        return map_binary(*in[0], *in[1], [](double x, double y) { return x - y; });
    case Op::Mul:
        return map_binary(*in[0], *in[1], [](double x, double y) { return x * y; });
    case Op::Div:
        return map_binary(*in[0], *in[1], [](double x, double y) {
            const double d = y + kGuardEpsilon;
            if (d == 0.0) throw DomainError("division by zero beyond epsilon guard");
            return x / d;
        });
    case Op::Scale: {
        const double k = n.scalar;
        return map_unary(*in[0], [k](double x) { return k * x; });
    }
    case Op::Shift: {
        const double c = n.scalar;
        return map_unary(*in[0], [c](double x) { return x + c; });
    }
    case Op::MatMul: {
        const Tensor& a = *in[0];
        const Tensor& b = *in[1];
        const std::size_t rows = a.shape[0], inner = a.shape[1], cols = b.shape[1];
        Tensor out(Shape{rows, cols});
        for (std::size_t i = 0; i < rows; ++i) {
            double* orow = out.data.data() + i * cols;
            const double* arow = a.data.data() + i * inner;
            for (std::size_t k = 0; k < inner; ++k) {
                const double av = arow[k];
                if (av == 0.0) continue;
                const double* brow = b.data.data() + k * cols;
                for (std::size_t j = 0; j < cols; ++j) orow[j] += av * brow[j];
            }
        }
        return out;
    }
    case Op::Transpose: {
        const Tensor& a = *in[0];
        const std::size_t rows = a.shape[0], cols = a.shape[1];
        Tensor out(Shape{cols, rows});
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) out.data[j * rows + i] = a.data[i * cols + j];
        return out;
    }
    case Op::Relu:
        return map_unary(*in[0], [](double x) { return x > 0.0 ? x : 0.0; });
    case Op::Step:
        return map_unary(*in[0], [](double x) { return x > 0.0 ? 1.0 : 0.0; });
    case Op::Exp:
        return map_unary(*in[0], [](double x) { return std::exp(x); });
    case Op::Log:
        return map_unary(*in[0], [](double x) {
            const double g = x + kGuardEpsilon;
            if (!(g > 0.0)) throw DomainError("log of non-positive value " + std::to_string(x));
            return std::log(g);
        });
    case Op::Sqrt:
        return map_unary(*in[0], [](double x) {
            if (x < -kGuardEpsilon || std::isnan(x)) {
                throw DomainError("sqrt of negative value " + std::to_string(x));
            }
            return x > 0.0 ? std::sqrt(x) : 0.0;
        });
    case Op::Square:
        return map_unary(*in[0], [](double x) { return x * x; });
    case Op::Broadcast: {
        const Tensor& a = *in[0];
        Tensor out(n.target_shape);
        for_each_broadcast(a.shape, n.target_shape,
                           [&](std::size_t dst, std::size_t src) { out.data[dst] = a.data[src]; });
        return out;
    }
    case Op::SumTo: {
        const Tensor& a = *in[0];
        Tensor out(n.target_shape);
        for_each_broadcast(n.target_shape, a.shape,
                           [&](std::size_t src, std::size_t dst) { out.data[dst] += a.data[src]; });
        return out;
    }
    case Op::Reshape:
        return Tensor(n.target_shape, in[0]->data);
    case Op::Max: {
        const Tensor& a = *in[0];
        const auto idx = argmax_last(a);
        const std::size_t w = last_extent(a.shape);
        Tensor out(drop_last(a.shape));
        for (std::size_t r = 0; r < idx.size(); ++r) out.data[r] = a.data[r * w + idx[r]];
        return out;
    }
    case Op::LogSumExp: {
        const Tensor& a = *in[0];
        const std::size_t w = last_extent(a.shape);
        Tensor out(drop_last(a.shape));
        for (std::size_t r = 0; r < out.size(); ++r) {
            const double* row = a.data.data() + r * w;
            const double m = *std::max_element(row, row + w);
            double s = 0.0;
            for (std::size_t c = 0; c < w; ++c) s += std::exp(row[c] - m);
            out.data[r] = m + std::log(s);
        }
        return out;
    }
    case Op::GatherRows: {
        const Tensor& a = *in[0];
        const std::size_t w = a.rank() == 2 ? a.shape[1] : 1;
        Shape s = a.shape;
        s[0] = n.indices.size();
        Tensor out(s);
        for (std::size_t r = 0; r < n.indices.size(); ++r) {
            std::copy_n(a.data.data() + n.indices[r] * w, w, out.data.data() + r * w);
        }
        return out;
    }
    case Op::ScatterRows: {
        const Tensor& a = *in[0];
        const std::size_t w = a.rank() == 2 ? a.shape[1] : 1;
        Shape s = a.shape;
        s[0] = n.extent;
        Tensor out(s);
        for (std::size_t r = 0; r < n.indices.size(); ++r) {
            double* dst = out.data.data() + n.indices[r] * w;
            const double* src = a.data.data() + r * w;
            for (std::size_t c = 0; c < w; ++c) dst[c] += src[c];
        }
        return out;
    }
    case Op::Pick: {
        const Tensor& a = *in[0];
        const std::size_t w = last_extent(a.shape);
        Tensor out(drop_last(a.shape));
        for (std::size_t r = 0; r < n.indices.size(); ++r) out.data[r] = a.data[r * w + n.indices[r]];
        return out;
    }
    case Op::Unpick: {
        const Tensor& a = *in[0];
        Shape s = a.shape;
        s.push_back(n.extent);
        Tensor out(s);
        for (std::size_t r = 0; r < n.indices.size(); ++r) out.data[r * n.extent + n.indices[r]] = a.data[r];
        return out;
    }
    }
    throw std::logic_error("unhandled op");
}

Expr build(Op op, std::vector<Expr> inputs, Node attrs = {}) {
    attrs.op = op;
    attrs.inputs = std::move(inputs);
    std::vector<const Tensor*> vals;
    vals.reserve(attrs.inputs.size());
    for (const auto& e : attrs.inputs) vals.push_back(&e.value());
    attrs.value = compute(attrs, vals);
    return make_node(std::move(attrs));
}

template <Op op>
Expr binary(const Expr& a, const Expr& b) {
    if (a.shape() == b.shape()) return build(op, {a, b});
    const Shape s = common_shape(a.shape(), b.shape());
    return build(op, {broadcast_to(a, s), broadcast_to(b, s)});
}

void check_indices(const std::vector<std::size_t>& idx, std::size_t bound, std::string_view what) {
    for (auto i : idx) {
        if (i >= bound) {
            throw ShapeError(std::string(what) + ": index " + std::to_string(i) + " out of range " +
                             std::to_string(bound));
        }
    }
}

}  // namespace

std::string_view op_name(Op op) {
    switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Scale: return "scale";
    case Op::Shift: return "shift";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Relu: return "relu";
    case Op::Step: return "step";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Sqrt: return "sqrt";
    case Op::Square: return "square";
    case Op::Broadcast: return "broadcast";
    case Op::SumTo: return "sum_to";
    case Op::Reshape: return "reshape";
    case Op::Max: return "max";
    case Op::LogSumExp: return "log_sum_exp";
    case Op::GatherRows: return "gather_rows";
    case Op::ScatterRows: return "scatter_rows";
    case Op::Pick: return "pick";
    case Op::Unpick: return "unpick";
    }
    return "?";
}

Expr make_node(Node node) {
    node.id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    return Expr(std::make_shared<const Node>(std::move(node)));
}

Expr leaf(Tensor value) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(value);
    return make_node(std::move(n));
}

Expr constant(double v) { return leaf(Tensor::scalar(v)); }

Expr zeros(const Shape& shape) { return leaf(Tensor(shape)); }

Expr add(const Expr& a, const Expr& b) { return binary<Op::Add>(a, b); }
Expr sub(const Expr& a, const Expr& b) { return binary<Op::Sub>(a, b); }
Expr mul(const Expr& a, const Expr& b) { return binary<Op::Mul>(a, b); }
Expr div(const Expr& a, const Expr& b) { return binary<Op::Div>(a, b); }

Expr scale(const Expr& a, double k) {
    Node n;
    n.scalar = k;
    return build(Op::Scale, {a}, std::move(n));
}

Expr shift(const Expr& a, double c) {
    Node n;
    n.scalar = c;
    return build(Op::Shift, {a}, std::move(n));
}

Expr neg(const Expr& a) { return scale(a, -1.0); }

Expr matmul(const Expr& a, const Expr& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
        shape_fail("matmul", a.shape(), b.shape());
    }
    return build(Op::MatMul, {a, b});
}

Expr transpose(const Expr& a) {
    if (a.shape().size() != 2) shape_fail("transpose needs rank 2", a.shape());
    return build(Op::Transpose, {a});
}

Expr relu(const Expr& a) { return build(Op::Relu, {a}); }
Expr step(const Expr& a) { return build(Op::Step, {a}); }
Expr exp(const Expr& a) { return build(Op::Exp, {a}); }
Expr log(const Expr& a) { return build(Op::Log, {a}); }
Expr sqrt(const Expr& a) { return build(Op::Sqrt, {a}); }
Expr square(const Expr& a) { return build(Op::Square, {a}); }

Expr broadcast_to(const Expr& a, const Shape& shape) {
    if (a.shape() == shape) return a;
    if (!broadcastable(a.shape(), shape)) shape_fail("broadcast", a.shape(), shape);
    Node n;
    n.target_shape = shape;
    return build(Op::Broadcast, {a}, std::move(n));
}

Expr sum_to(const Expr& a, const Shape& shape) {
    if (a.shape() == shape) return a;
    if (!broadcastable(shape, a.shape())) shape_fail("sum_to", a.shape(), shape);
    Node n;
    n.target_shape = shape;
    return build(Op::SumTo, {a}, std::move(n));
}

Expr reshape(const Expr& a, const Shape& shape) {
    if (a.shape() == shape) return a;
    if (numel(a.shape()) != numel(shape)) shape_fail("reshape", a.shape(), shape);
    Node n;
    n.target_shape = shape;
    return build(Op::Reshape, {a}, std::move(n));
}

Expr sum(const Expr& a) { return sum_to(a, Shape{}); }

Expr mean(const Expr& a) {
    const auto count = static_cast<double>(numel(a.shape()));
    return scale(sum(a), 1.0 / count);
}

Expr sum(const Expr& a, std::size_t axis) {
    if (a.shape().size() != 2 || axis > 1) shape_fail("axis sum needs rank 2", a.shape());
    Shape keep = a.shape();
    keep[axis] = 1;
    Shape dropped{a.shape()[1 - axis]};
    return reshape(sum_to(a, keep), dropped);
}

Expr mean(const Expr& a, std::size_t axis) {
    const Expr s = sum(a, axis);
    return scale(s, 1.0 / static_cast<double>(a.shape()[axis]));
}

Expr max_last(const Expr& a) {
    if (a.shape().empty() || a.shape().size() > 2) shape_fail("max needs rank 1 or 2", a.shape());
    Node n;
    n.indices = argmax_last(a.value());
    n.extent = a.shape().back();
    return build(Op::Max, {a}, std::move(n));
}

Expr log_sum_exp(const Expr& a) {
    if (a.shape().empty() || a.shape().size() > 2) shape_fail("log_sum_exp needs rank 1 or 2", a.shape());
    return build(Op::LogSumExp, {a});
}

Expr expand_last(const Expr& a, const Shape& shape) {
    Shape keep = a.shape();
    keep.push_back(1);
    if (drop_last(shape) != a.shape()) shape_fail("expand_last", a.shape(), shape);
    return broadcast_to(reshape(a, keep), shape);
}

Expr log_softmax(const Expr& a) {
    return sub(a, expand_last(log_sum_exp(a), a.shape()));
}

Expr softmax(const Expr& a) { return exp(log_softmax(a)); }

Expr gather_rows(const Expr& a, std::vector<std::size_t> idx) {
    if (a.shape().empty() || a.shape().size() > 2) shape_fail("gather_rows needs rank 1 or 2", a.shape());
    check_indices(idx, a.shape()[0], "gather_rows");
    Node n;
    n.indices = std::move(idx);
    n.extent = a.shape()[0];
    return build(Op::GatherRows, {a}, std::move(n));
}

Expr scatter_rows(const Expr& a, std::vector<std::size_t> idx, std::size_t n_rows) {
    if (a.shape().empty() || a.shape().size() > 2 || a.shape()[0] != idx.size()) {
        shape_fail("scatter_rows", a.shape());
    }
    check_indices(idx, n_rows, "scatter_rows");
    Node n;
    n.indices = std::move(idx);
    n.extent = n_rows;
    return build(Op::ScatterRows, {a}, std::move(n));
}

Expr pick(const Expr& a, std::vector<std::size_t> idx) {
    if (a.shape().empty() || a.shape().size() > 2) shape_fail("pick needs rank 1 or 2", a.shape());
    if (idx.size() != numel(a.shape()) / a.shape().back()) shape_fail("pick index count", a.shape());
    check_indices(idx, a.shape().back(), "pick");
    Node n;
    n.indices = std::move(idx);
    n.extent = a.shape().back();
    return build(Op::Pick, {a}, std::move(n));
}

Expr unpick(const Expr& a, std::vector<std::size_t> idx, std::size_t width) {
    if (a.shape().size() > 1 || idx.size() != numel(a.shape())) shape_fail("unpick", a.shape());
    check_indices(idx, width, "unpick");
    Node n;
    n.indices = std::move(idx);
    n.extent = width;
    return build(Op::Unpick, {a}, std::move(n));
}

Tensor reevaluate(const Expr& root, const std::unordered_map<NodeId, Tensor>& overrides) {
    std::unordered_map<NodeId, Tensor> memo;
    // Iterative post-order walk; graphs can be thousands of nodes deep.
    std::vector<std::pair<const Expr*, bool>> stack{{&root, false}};
    while (!stack.empty()) {
        auto [e, expanded] = stack.back();
        stack.pop_back();
        if (memo.contains(e->id())) continue;
        if (e->is_leaf()) {
            auto it = overrides.find(e->id());
            if (it != overrides.end()) {
                if (it->second.shape != e->shape()) shape_fail("override", it->second.shape, e->shape());
                memo.emplace(e->id(), it->second);
            } else {
                memo.emplace(e->id(), e->value());
            }
            continue;
        }
        if (!expanded) {
            stack.emplace_back(e, true);
            for (const auto& in : e->inputs()) {
                if (!memo.contains(in.id())) stack.emplace_back(&in, false);
            }
            continue;
        }
        std::vector<const Tensor*> vals;
        for (const auto& in : e->inputs()) vals.push_back(&memo.at(in.id()));
        memo.emplace(e->id(), compute(e->node(), vals));
    }
    return memo.at(root.id());
}

}  // namespace masf
