#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace levi {

using Extent = std::int64_t;
using Shape = std::vector<Extent>;

std::string shape_str(const Shape& s);

// Dense 64-bit float tensor, row-major flat storage. Rank 0..2 is what the
// ops below accept; a scalar is any tensor with one element.
struct Tensor {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;

    Tensor() = default;

    static Tensor zeros(Shape s);
    static Tensor filled(Shape s, double v);
    static Tensor scalar(double v);
    static Tensor row(std::vector<double> values); // shape [n]
    static Tensor from(Shape s, std::vector<double> values);

    Extent numel() const;
    int rank() const { return static_cast<int>(shape.size()); }
    bool is_scalar() const { return numel() == 1; }

    // rank-2 accessors; rank-1 tensors behave as [n] with rows()==n, cols()==1
    Extent rows() const { return shape.empty() ? 1 : shape[0]; }
    Extent cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    double& at(Extent i) { return data[static_cast<std::size_t>(i)]; }
    double at(Extent i) const { return data[static_cast<std::size_t>(i)]; }
    double& at(Extent i, Extent j) { return data[static_cast<std::size_t>(i * cols() + j)]; }
    double at(Extent i, Extent j) const { return data[static_cast<std::size_t>(i * cols() + j)]; }

    bool all_finite() const;
};

bool same_shape(const Tensor& a, const Tensor& b);

// reinterpret with a new shape of equal element count
Tensor reshape(Tensor t, Shape s);

// inverse of a two-way concat at `boundary` along `axis`
std::pair<Tensor, Tensor> split(const Tensor& t, int axis, Extent boundary);

enum class Op {
    leaf,
    matmul,
    add,
    mul,
    relu,
    tanh_fn,
    concat,
    mean,
    sum,
    embed_lookup,
    softmax_xent,
    mse,
};

const char* op_name(Op op);
Op op_from_name(std::string_view name); // throws on unknown kind

using NodeId = std::size_t;
using GradMap = std::unordered_map<NodeId, Tensor>;

// Eager single-use computation graph. Nodes are appended in evaluation order,
// so the node list is already topological; backward walks it once in reverse.
//
// Per-op shape rules (the only broadcasting that exists):
//   matmul        [m,k]x[k,n]->[m,n], [m,k]x[k]->[m], [k]x[k,n]->[n]
//   add           equal shapes, or [m,n]+[n] (row-wise bias)
//   mul           equal shapes, or either side scalar
//   relu, tanh    elementwise, any shape
//   concat        k>=2 inputs along axis 0 (rank 1) or axis 0/1 (rank 2);
//                 equal extents on all non-concatenated axes
//   mean, sum     full reduction to a scalar [1]
//   embed_lookup  table [v,e] x indices [m] -> [m,e]; indices are whole
//                 numbers in [0,v); no gradient flows into indices
//   softmax_xent  logits [m,c] x labels [m] -> per-sample loss [m]
//   mse           equal shapes -> elementwise squared difference
class Graph {
  public:
    NodeId leaf(Tensor t);
    NodeId constant(Tensor t); // leaf that never requires grad

    NodeId apply(Op op, std::vector<NodeId> inputs, int axis = -1);

    NodeId matmul(NodeId a, NodeId b) { return apply(Op::matmul, {a, b}); }
    NodeId add(NodeId a, NodeId b) { return apply(Op::add, {a, b}); }
    NodeId mul(NodeId a, NodeId b) { return apply(Op::mul, {a, b}); }
    NodeId relu(NodeId a) { return apply(Op::relu, {a}); }
    NodeId tanh(NodeId a) { return apply(Op::tanh_fn, {a}); }
    NodeId concat(std::vector<NodeId> parts, int axis) { return apply(Op::concat, std::move(parts), axis); }
    NodeId mean(NodeId a) { return apply(Op::mean, {a}); }
    NodeId sum(NodeId a) { return apply(Op::sum, {a}); }
    NodeId embed_lookup(NodeId table, NodeId indices) { return apply(Op::embed_lookup, {table, indices}); }
    NodeId softmax_xent(NodeId logits, NodeId labels) { return apply(Op::softmax_xent, {logits, labels}); }
    NodeId mse(NodeId pred, NodeId label) { return apply(Op::mse, {pred, label}); }

    const Tensor& value(NodeId id) const;
    Tensor& mutable_leaf(NodeId id); // for replay; throws on non-leaf
    std::size_t node_count() const { return nodes_.size(); }
    Op op_of(NodeId id) const;
    const std::vector<NodeId>& inputs_of(NodeId id) const;
    bool needs_grad(NodeId id) const;
    std::vector<NodeId> trainable_leaves() const;

    // re-evaluate every op node from the current leaf values
    void recompute();

    // smallest |x| fed into any relu node during the last evaluation;
    // +inf when the graph has no relu nodes
    double min_abs_relu_input() const;

    // Gradients of a scalar loss with respect to every trainable leaf.
    // Leaves the loss does not depend on get zero gradients.
    GradMap backward(NodeId loss) const;

  private:
    struct Node {
        Op op = Op::leaf;
        std::vector<NodeId> in;
        int axis = -1;
        bool needs = false;
        Tensor val;
    };
    std::vector<Node> nodes_;

    const Node& node(NodeId id) const;
    Tensor eval_node(const Node& n) const;
};

// Finite-difference audit of backward() on an already-built graph: perturbs
// each trainable leaf entry, replays the forward pass, and compares the
// central difference with the autodiff gradient. Entries whose evaluation
// passes within `relu_margin` of a relu kink are excluded from the pass/fail
// verdict (subgradient points).
struct GradCheckParamStat {
    NodeId param = 0;
    double max_rel_err = 0.0;
    Extent checked = 0;
    Extent excluded = 0;
};

struct GradCheckReport {
    std::vector<GradCheckParamStat> params;
    double tolerance = 0.0;
    double max_rel_err = 0.0;
    Extent excluded = 0;
    bool pass = false;
};

GradCheckReport grad_check(Graph& g, NodeId loss, double tolerance, double fd_step = 1e-5,
                           double relu_margin = 1e-3);

// Randomized gradient audit over every op kind.
struct OpGradStat {
    Op op = Op::leaf;
    int instances = 0;
    double max_rel_err = 0.0;
    bool pass = false;
};

struct GradSuiteReport {
    std::vector<OpGradStat> ops;
    double tolerance = 0.0;
    bool pass = false;
};

GradSuiteReport gradcheck_suite(int instances_per_op, double tolerance, std::uint64_t seed);

} // namespace levi
