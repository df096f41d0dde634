#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "masf/tensor.hpp"

namespace masf {

using NodeId = std::uint64_t;

// Additive guard applied to log arguments and division denominators.
inline constexpr double kGuardEpsilon = 1e-12;

enum class Op : std::uint8_t {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,        // a / (b + eps)
    Scale,      // k * a
    Shift,      // a + c
    MatMul,
    Transpose,
    Relu,
    Step,       // 1[a > 0], derivative zero
    Exp,
    Log,        // log(a + eps)
    Sqrt,       // sqrt(a), derivative 0.5 / (sqrt(a) + eps)
    Square,
    Broadcast,  // right-aligned, size-1 or missing dims expand
    SumTo,      // inverse of Broadcast
    Reshape,
    Max,        // over the last axis
    LogSumExp,  // over the last axis
    GatherRows,
    ScatterRows,
    Pick,       // out[i] = a[i, idx[i]]
    Unpick,     // inverse of Pick, zero elsewhere
};

std::string_view op_name(Op op);

class Expr;

struct Node {
    NodeId id = 0;
    Op op = Op::Leaf;
    std::vector<Expr> inputs;
    Tensor value;
    // Op attributes; unused fields stay default.
    double scalar = 0.0;
    Shape target_shape;
    std::vector<std::size_t> indices;
    std::size_t extent = 0;
};

// Handle to an immutable node of the computation graph. Values are computed
// when the node is constructed, so shape errors surface at the call site.
class Expr {
public:
    Expr() = default;

    NodeId id() const { return node_->id; }
    Op op() const { return node_->op; }
    const Tensor& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape; }
    std::span<const Expr> inputs() const { return node_->inputs; }
    const Node& node() const { return *node_; }
    double item() const { return node_->value.item(); }
    bool valid() const { return node_ != nullptr; }
    bool is_leaf() const { return node_->op == Op::Leaf; }

private:
    friend Expr make_node(Node node);
    explicit Expr(std::shared_ptr<const Node> n) : node_(std::move(n)) {}
    std::shared_ptr<const Node> node_;
};

Expr make_node(Node node);

// Leaves.
Expr leaf(Tensor value);
Expr constant(double v);
Expr zeros(const Shape& shape);

// Elementwise binary ops broadcast their operands to a common shape by
// inserting explicit Broadcast nodes.
Expr add(const Expr& a, const Expr& b);
Expr sub(const Expr& a, const Expr& b);
Expr mul(const Expr& a, const Expr& b);
Expr div(const Expr& a, const Expr& b);
Expr scale(const Expr& a, double k);
Expr shift(const Expr& a, double c);
Expr neg(const Expr& a);

Expr matmul(const Expr& a, const Expr& b);
Expr transpose(const Expr& a);

Expr relu(const Expr& a);
Expr step(const Expr& a);
Expr exp(const Expr& a);
Expr log(const Expr& a);
Expr sqrt(const Expr& a);
Expr square(const Expr& a);

Expr broadcast_to(const Expr& a, const Shape& shape);
Expr sum_to(const Expr& a, const Shape& shape);
Expr reshape(const Expr& a, const Shape& shape);

Expr sum(const Expr& a);
Expr mean(const Expr& a);
// Reduce a rank-2 tensor over `axis`, dropping that axis.
Expr sum(const Expr& a, std::size_t axis);
Expr mean(const Expr& a, std::size_t axis);

Expr max_last(const Expr& a);
Expr log_sum_exp(const Expr& a);
Expr softmax(const Expr& a);
Expr log_softmax(const Expr& a);

Expr gather_rows(const Expr& a, std::vector<std::size_t> idx);
Expr scatter_rows(const Expr& a, std::vector<std::size_t> idx, std::size_t n_rows);
Expr pick(const Expr& a, std::vector<std::size_t> idx);
Expr unpick(const Expr& a, std::vector<std::size_t> idx, std::size_t width);

// Expand a reduced tensor (last axis dropped) back to `shape`.
Expr expand_last(const Expr& a, const Shape& shape);

// Recompute `root` from its leaves, substituting the given leaf values.
// Without overrides the result equals root.value() bit for bit.
Tensor reevaluate(const Expr& root, const std::unordered_map<NodeId, Tensor>& overrides = {});

}  // namespace masf
