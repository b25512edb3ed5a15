#include "levi/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "levi/rng.hpp"

namespace levi {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

Extent shape_numel(const Shape& s) {
    Extent n = 1;
    for (Extent e : s) {
        n *= e;
    }
    return n;
}

void check_shape(const Shape& s) {
    if (s.size() > 2) {
        fail("tensor rank " + std::to_string(s.size()) + " unsupported (max 2)");
    }
    for (Extent e : s) {
        if (e <= 0) {
            fail("non-positive extent in shape " + shape_str(s));
        }
    }
}

// ---- matmul kernels; inner loops stay contiguous ----

// C[m,n] += A[m,k] * B[k,n]
void mm_nn(const double* a, const double* b, double* c, Extent m, Extent k, Extent n) {
    for (Extent i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (Extent p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + p * n;
            for (Extent j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

// C[m,k] += A[m,n] * B^T where B is [k,n]
void mm_nt(const double* a, const double* b, double* c, Extent m, Extent n, Extent k) {
    for (Extent i = 0; i < m; ++i) {
        const double* arow = a + i * n;
        double* crow = c + i * k;
        for (Extent p = 0; p < k; ++p) {
            const double* brow = b + p * n;
            double acc = 0.0;
            for (Extent j = 0; j < n; ++j) {
                acc += arow[j] * brow[j];
            }
            crow[p] += acc;
        }
    }
}

// C[k,n] += A^T * B where A is [m,k], B is [m,n]
void mm_tn(const double* a, const double* b, double* c, Extent m, Extent k, Extent n) {
    for (Extent i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (Extent p = 0; p < k; ++p) {
            const double av = arow[p];
            double* crow = c + p * n;
            for (Extent j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

Extent whole_index(double v, Extent limit, const char* op) {
    const double r = std::nearbyint(v);
    if (r != v || r < 0 || r >= static_cast<double>(limit)) {
        fail(std::string(op) + ": index " + std::to_string(v) + " not a whole number in [0, " +
             std::to_string(limit) + ")");
    }
    return static_cast<Extent>(r);
}

} // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream out;
    out << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        out << (i ? " x " : "") << s[i];
    }
    out << "]";
    return out.str();
}

Tensor Tensor::zeros(Shape s) {
    check_shape(s);
    Tensor t;
    t.shape = std::move(s);
    t.data.assign(static_cast<std::size_t>(shape_numel(t.shape)), 0.0);
    return t;
}

Tensor Tensor::filled(Shape s, double v) {
    Tensor t = zeros(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

Tensor Tensor::row(std::vector<double> values) {
    const Extent n = static_cast<Extent>(values.size());
    return from({n}, std::move(values));
}

Tensor Tensor::from(Shape s, std::vector<double> values) {
    check_shape(s);
    if (shape_numel(s) != static_cast<Extent>(values.size())) {
        fail("tensor data length " + std::to_string(values.size()) + " does not match shape " + shape_str(s));
    }
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(values);
    return t;
}

Extent Tensor::numel() const { return static_cast<Extent>(data.size()); }

bool Tensor::all_finite() const {
    for (double v : data) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

Tensor reshape(Tensor t, Shape s) {
    check_shape(s);
    if (shape_numel(s) != t.numel()) {
        fail("reshape from " + shape_str(t.shape) + " to " + shape_str(s) + " changes element count");
    }
    t.shape = std::move(s);
    return t;
}

std::pair<Tensor, Tensor> split(const Tensor& t, int axis, Extent boundary) {
    if (t.rank() == 1 && axis == 0) {
        if (boundary <= 0 || boundary >= t.shape[0]) {
            fail("split boundary " + std::to_string(boundary) + " outside " + shape_str(t.shape));
        }
        Tensor a = Tensor::zeros({boundary});
        Tensor b = Tensor::zeros({t.shape[0] - boundary});
        std::copy(t.data.begin(), t.data.begin() + boundary, a.data.begin());
        std::copy(t.data.begin() + boundary, t.data.end(), b.data.begin());
        return {std::move(a), std::move(b)};
    }
    if (t.rank() == 2 && (axis == 0 || axis == 1)) {
        const Extent limit = t.shape[static_cast<std::size_t>(axis)];
        if (boundary <= 0 || boundary >= limit) {
            fail("split boundary " + std::to_string(boundary) + " outside " + shape_str(t.shape));
        }
        if (axis == 0) {
            Tensor a = Tensor::zeros({boundary, t.cols()});
            Tensor b = Tensor::zeros({t.rows() - boundary, t.cols()});
            std::copy(t.data.begin(), t.data.begin() + boundary * t.cols(), a.data.begin());
            std::copy(t.data.begin() + boundary * t.cols(), t.data.end(), b.data.begin());
            return {std::move(a), std::move(b)};
        }
        Tensor a = Tensor::zeros({t.rows(), boundary});
        Tensor b = Tensor::zeros({t.rows(), t.cols() - boundary});
        for (Extent i = 0; i < t.rows(); ++i) {
            for (Extent j = 0; j < boundary; ++j) {
                a.at(i, j) = t.at(i, j);
            }
            for (Extent j = boundary; j < t.cols(); ++j) {
                b.at(i, j - boundary) = t.at(i, j);
            }
        }
        return {std::move(a), std::move(b)};
    }
    fail("split: axis " + std::to_string(axis) + " invalid for " + shape_str(t.shape));
}

const char* op_name(Op op) {
    switch (op) {
    case Op::leaf: return "leaf";
    case Op::matmul: return "matmul";
    case Op::add: return "add";
    case Op::mul: return "mul";
    case Op::relu: return "relu";
    case Op::tanh_fn: return "tanh";
    case Op::concat: return "concat";
    case Op::mean: return "mean";
    case Op::sum: return "sum";
    case Op::embed_lookup: return "embed_lookup";
    case Op::softmax_xent: return "softmax_xent";
    case Op::mse: return "mse";
    }
    return "?";
}

Op op_from_name(std::string_view name) {
    static const std::pair<std::string_view, Op> table[] = {
        {"matmul", Op::matmul},       {"add", Op::add},
        {"mul", Op::mul},             {"relu", Op::relu},
        {"tanh", Op::tanh_fn},        {"concat", Op::concat},
        {"mean", Op::mean},           {"sum", Op::sum},
        {"embed_lookup", Op::embed_lookup},
        {"softmax_xent", Op::softmax_xent},
        {"mse", Op::mse},
    };
    for (const auto& [k, v] : table) {
        if (k == name) {
            return v;
        }
    }
    fail("unknown op kind '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

NodeId Graph::leaf(Tensor t) {
    check_shape(t.shape);
    Node n;
    n.op = Op::leaf;
    n.needs = t.requires_grad;
    n.val = std::move(t);
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
}

NodeId Graph::constant(Tensor t) {
    t.requires_grad = false;
    return leaf(std::move(t));
}

const Graph::Node& Graph::node(NodeId id) const {
    if (id >= nodes_.size()) {
        fail("node id " + std::to_string(id) + " out of range");
    }
    return nodes_[id];
}

const Tensor& Graph::value(NodeId id) const { return node(id).val; }

Tensor& Graph::mutable_leaf(NodeId id) {
    if (id >= nodes_.size() || nodes_[id].op != Op::leaf) {
        fail("node " + std::to_string(id) + " is not a leaf");
    }
    return nodes_[id].val;
}

Op Graph::op_of(NodeId id) const { return node(id).op; }

const std::vector<NodeId>& Graph::inputs_of(NodeId id) const { return node(id).in; }

bool Graph::needs_grad(NodeId id) const { return node(id).needs; }

std::vector<NodeId> Graph::trainable_leaves() const {
    std::vector<NodeId> out;
    for (NodeId id = 0; id < nodes_.size(); ++id) {
        if (nodes_[id].op == Op::leaf && nodes_[id].needs) {
            out.push_back(id);
        }
    }
    return out;
}

Tensor Graph::eval_node(const Node& n) const {
    auto in = [&](std::size_t i) -> const Tensor& { return nodes_[n.in[i]].val; };
    switch (n.op) {
    case Op::leaf:
        return n.val;
    case Op::matmul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        const Extent m = a.rank() == 2 ? a.shape[0] : 1;
        const Extent k = a.rank() == 2 ? a.shape[1] : a.shape[0];
        const Extent nn = b.rank() == 2 ? b.shape[1] : 1;
        Shape out_shape;
        if (a.rank() == 2 && b.rank() == 2) {
            out_shape = {m, nn};
        } else if (a.rank() == 2 && b.rank() == 1) {
            out_shape = {m};
        } else {
            out_shape = {nn};
        }
        Tensor out = Tensor::zeros(out_shape);
        mm_nn(a.data.data(), b.data.data(), out.data.data(), m, k, nn);
        return out;
    }
    case Op::add: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        Tensor out = a;
        out.requires_grad = false;
        if (same_shape(a, b)) {
            for (std::size_t i = 0; i < out.data.size(); ++i) {
                out.data[i] += b.data[i];
            }
        } else { // [m,n] + [n]
            for (Extent i = 0; i < a.rows(); ++i) {
                for (Extent j = 0; j < a.cols(); ++j) {
                    out.at(i, j) += b.at(j);
                }
            }
        }
        return out;
    }
    case Op::mul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        if (a.is_scalar() && !b.is_scalar()) {
            Tensor out = b;
            out.requires_grad = false;
            for (double& v : out.data) {
                v *= a.data[0];
            }
            return out;
        }
        Tensor out = a;
        out.requires_grad = false;
        if (b.is_scalar()) {
            for (double& v : out.data) {
                v *= b.data[0];
            }
        } else {
            for (std::size_t i = 0; i < out.data.size(); ++i) {
                out.data[i] *= b.data[i];
            }
        }
        return out;
    }
    case Op::relu: {
        Tensor out = in(0);
        out.requires_grad = false;
        for (double& v : out.data) {
            v = v > 0.0 ? v : 0.0;
        }
        return out;
    }
    case Op::tanh_fn: {
        Tensor out = in(0);
        out.requires_grad = false;
        for (double& v : out.data) {
            v = std::tanh(v);
        }
        return out;
    }
    case Op::concat: {
        const int axis = n.axis;
        if (in(0).rank() == 1) {
            Extent total = 0;
            for (NodeId id : n.in) {
                total += nodes_[id].val.shape[0];
            }
            Tensor out = Tensor::zeros({total});
            Extent off = 0;
            for (NodeId id : n.in) {
                const Tensor& p = nodes_[id].val;
                std::copy(p.data.begin(), p.data.end(), out.data.begin() + off);
                off += p.shape[0];
            }
            return out;
        }
        if (axis == 0) {
            Extent total = 0;
            for (NodeId id : n.in) {
                total += nodes_[id].val.rows();
            }
            Tensor out = Tensor::zeros({total, in(0).cols()});
            Extent off = 0;
            for (NodeId id : n.in) {
                const Tensor& p = nodes_[id].val;
                std::copy(p.data.begin(), p.data.end(), out.data.begin() + off);
                off += p.numel();
            }
            return out;
        }
        Extent total_cols = 0;
        for (NodeId id : n.in) {
            total_cols += nodes_[id].val.cols();
        }
        Tensor out = Tensor::zeros({in(0).rows(), total_cols});
        Extent col_off = 0;
        for (NodeId id : n.in) {
            const Tensor& p = nodes_[id].val;
            for (Extent i = 0; i < p.rows(); ++i) {
                for (Extent j = 0; j < p.cols(); ++j) {
                    out.at(i, col_off + j) = p.at(i, j);
                }
            }
            col_off += p.cols();
        }
        return out;
    }
    case Op::mean: {
        const Tensor& a = in(0);
        double acc = 0.0;
        for (double v : a.data) {
            acc += v;
        }
        return Tensor::scalar(acc / static_cast<double>(a.numel()));
    }
    case Op::sum: {
        const Tensor& a = in(0);
        double acc = 0.0;
        for (double v : a.data) {
            acc += v;
        }
        return Tensor::scalar(acc);
    }
    case Op::embed_lookup: {
        const Tensor& table = in(0);
        const Tensor& idx = in(1);
        const Extent m = idx.shape[0];
        const Extent e = table.shape[1];
        Tensor out = Tensor::zeros({m, e});
        for (Extent i = 0; i < m; ++i) {
            const Extent r = whole_index(idx.at(i), table.shape[0], "embed_lookup");
            for (Extent j = 0; j < e; ++j) {
                out.at(i, j) = table.at(r, j);
            }
        }
        return out;
    }
    case Op::softmax_xent: {
        const Tensor& logits = in(0);
        const Tensor& labels = in(1);
        const Extent m = logits.rows();
        const Extent c = logits.cols();
        Tensor out = Tensor::zeros({m});
        for (Extent i = 0; i < m; ++i) {
            double mx = logits.at(i, 0);
            for (Extent j = 1; j < c; ++j) {
                mx = std::max(mx, logits.at(i, j));
            }
            double z = 0.0;
            for (Extent j = 0; j < c; ++j) {
                z += std::exp(logits.at(i, j) - mx);
            }
            const Extent label = whole_index(labels.at(i), c, "softmax_xent");
            out.at(i) = mx + std::log(z) - logits.at(i, label);
        }
        return out;
    }
    case Op::mse: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        Tensor out = Tensor::zeros(a.shape);
        for (std::size_t i = 0; i < out.data.size(); ++i) {
            const double d = a.data[i] - b.data[i];
            out.data[i] = d * d;
        }
        return out;
    }
    }
    fail("unknown op kind");
}

NodeId Graph::apply(Op op, std::vector<NodeId> inputs, int axis) {
    auto arity = [&](std::size_t want) {
        if (inputs.size() != want) {
            fail(std::string(op_name(op)) + ": expected " + std::to_string(want) + " inputs, got " +
                 std::to_string(inputs.size()));
        }
    };
    for (NodeId id : inputs) {
        if (id >= nodes_.size()) {
            fail(std::string(op_name(op)) + ": input node " + std::to_string(id) + " out of range");
        }
    }
    auto shape_of = [&](std::size_t i) -> const Shape& { return nodes_[inputs[i]].val.shape; };

    switch (op) {
    case Op::leaf:
        fail("leaf nodes are created via Graph::leaf");
    case Op::matmul: {
        arity(2);
        const Shape& a = shape_of(0);
        const Shape& b = shape_of(1);
        const Extent ak = a.size() == 2 ? a[1] : a[0];
        const Extent bk = b[0];
        if (a.size() > 2 || b.size() > 2 || ak != bk) {
            fail("matmul: lhs " + shape_str(a) + " incompatible with rhs " + shape_str(b));
        }
        if (a.size() == 1 && b.size() == 1) {
            fail("matmul: two rank-1 operands " + shape_str(a) + ", " + shape_str(b) +
                 " (use mul+sum for dot products)");
        }
        break;
    }
    case Op::add: {
        arity(2);
        const Shape& a = shape_of(0);
        const Shape& b = shape_of(1);
        const bool bias_row = a.size() == 2 && b.size() == 1 && b[0] == a[1];
        if (a != b && !bias_row) {
            fail("add: shapes " + shape_str(a) + " and " + shape_str(b) + " do not match");
        }
        break;
    }
    case Op::mul: {
        arity(2);
        const Shape& a = shape_of(0);
        const Shape& b = shape_of(1);
        const bool scalar = shape_numel(a) == 1 || shape_numel(b) == 1;
        if (a != b && !scalar) {
            fail("mul: shapes " + shape_str(a) + " and " + shape_str(b) + " do not match");
        }
        break;
    }
    case Op::relu:
    case Op::tanh_fn:
    case Op::mean:
    case Op::sum:
        arity(1);
        break;
    case Op::concat: {
        if (inputs.size() < 2) {
            fail("concat: needs at least 2 inputs");
        }
        const int rank = static_cast<int>(shape_of(0).size());
        if (rank == 1 && axis != 0) {
            fail("concat: axis " + std::to_string(axis) + " invalid for rank-1 input");
        }
        if (rank == 2 && axis != 0 && axis != 1) {
            fail("concat: axis " + std::to_string(axis) + " invalid for rank-2 input");
        }
        for (std::size_t i = 1; i < inputs.size(); ++i) {
            const Shape& s0 = shape_of(0);
            const Shape& si = shape_of(i);
            if (static_cast<int>(si.size()) != rank) {
                fail("concat: mixed ranks " + shape_str(s0) + " and " + shape_str(si));
            }
            if (rank == 2 && si[static_cast<std::size_t>(1 - axis)] != s0[static_cast<std::size_t>(1 - axis)]) {
                fail("concat: extent mismatch off axis " + std::to_string(axis) + " between " + shape_str(s0) +
                     " and " + shape_str(si));
            }
        }
        break;
    }
    case Op::embed_lookup: {
        arity(2);
        if (shape_of(0).size() != 2 || shape_of(1).size() != 1) {
            fail("embed_lookup: table " + shape_str(shape_of(0)) + " must be rank 2 and indices " +
                 shape_str(shape_of(1)) + " rank 1");
        }
        break;
    }
    case Op::softmax_xent: {
        arity(2);
        if (shape_of(0).size() != 2 || shape_of(1).size() != 1 || shape_of(1)[0] != shape_of(0)[0]) {
            fail("softmax_xent: logits " + shape_str(shape_of(0)) + " incompatible with labels " +
                 shape_str(shape_of(1)));
        }
        break;
    }
    case Op::mse: {
        arity(2);
        if (shape_of(0) != shape_of(1)) {
            fail("mse: shapes " + shape_str(shape_of(0)) + " and " + shape_str(shape_of(1)) + " do not match");
        }
        break;
    }
    }

    Node n;
    n.op = op;
    n.in = std::move(inputs);
    n.axis = axis;
    for (NodeId id : n.in) {
        n.needs = n.needs || nodes_[id].needs;
    }
    if (op == Op::embed_lookup) {
        n.needs = nodes_[n.in[0]].needs; // indices never carry gradient
    }
    n.val = eval_node(n);
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
}

void Graph::recompute() {
    for (Node& n : nodes_) {
        if (n.op != Op::leaf) {
            n.val = eval_node(n);
        }
    }
}

double Graph::min_abs_relu_input() const {
    double best = std::numeric_limits<double>::infinity();
    for (const Node& n : nodes_) {
        if (n.op != Op::relu) {
            continue;
        }
        for (double v : nodes_[n.in[0]].val.data) {
            best = std::min(best, std::abs(v));
        }
    }
    return best;
}

GradMap Graph::backward(NodeId loss) const {
    if (loss >= nodes_.size()) {
        fail("backward: loss node out of range");
    }
    if (!node(loss).val.is_scalar()) {
        fail("backward: loss must be scalar-shaped, got " + shape_str(node(loss).val.shape));
    }

    std::vector<Tensor> grads(nodes_.size());
    std::vector<bool> has_grad(nodes_.size(), false);
    auto accum = [&](NodeId id, Extent flat, double v) {
        if (!has_grad[id]) {
            grads[id] = Tensor::zeros(nodes_[id].val.shape);
            has_grad[id] = true;
        }
        grads[id].at(flat) += v;
    };
    auto grad_buf = [&](NodeId id) -> Tensor& {
        if (!has_grad[id]) {
            grads[id] = Tensor::zeros(nodes_[id].val.shape);
            has_grad[id] = true;
        }
        return grads[id];
    };

    grad_buf(loss).data[0] = 1.0;

    for (NodeId id = loss + 1; id-- > 0;) {
        const Node& n = nodes_[id];
        if (!has_grad[id] || n.op == Op::leaf) {
            continue;
        }
        const Tensor& g = grads[id];
        auto wants = [&](std::size_t i) { return nodes_[n.in[i]].needs; };
        switch (n.op) {
        case Op::leaf:
            break;
        case Op::matmul: {
            const Tensor& a = nodes_[n.in[0]].val;
            const Tensor& b = nodes_[n.in[1]].val;
            const Extent m = a.rank() == 2 ? a.shape[0] : 1;
            const Extent k = a.rank() == 2 ? a.shape[1] : a.shape[0];
            const Extent nn = b.rank() == 2 ? b.shape[1] : 1;
            if (wants(0)) {
                mm_nt(g.data.data(), b.data.data(), grad_buf(n.in[0]).data.data(), m, nn, k);
            }
            if (wants(1)) {
                mm_tn(a.data.data(), g.data.data(), grad_buf(n.in[1]).data.data(), m, k, nn);
            }
            break;
        }
        case Op::add: {
            const Tensor& a = nodes_[n.in[0]].val;
            const Tensor& b = nodes_[n.in[1]].val;
            if (wants(0)) {
                Tensor& ga = grad_buf(n.in[0]);
                for (std::size_t i = 0; i < g.data.size(); ++i) {
                    ga.data[i] += g.data[i];
                }
            }
            if (wants(1)) {
                Tensor& gb = grad_buf(n.in[1]);
                if (same_shape(a, b)) {
                    for (std::size_t i = 0; i < g.data.size(); ++i) {
                        gb.data[i] += g.data[i];
                    }
                } else {
                    for (Extent i = 0; i < a.rows(); ++i) {
                        for (Extent j = 0; j < a.cols(); ++j) {
                            gb.at(j) += g.at(i, j);
                        }
                    }
                }
            }
            break;
        }
        case Op::mul: {
            const Tensor& a = nodes_[n.in[0]].val;
            const Tensor& b = nodes_[n.in[1]].val;
            auto side = [&](std::size_t me, const Tensor& mine, const Tensor& other) {
                if (!wants(me)) {
                    return;
                }
                Tensor& gm = grad_buf(n.in[me]);
                if (mine.is_scalar() && !other.is_scalar()) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < g.data.size(); ++i) {
                        acc += g.data[i] * other.data[i];
                    }
                    gm.data[0] += acc;
                } else if (other.is_scalar() && !mine.is_scalar()) {
                    for (std::size_t i = 0; i < g.data.size(); ++i) {
                        gm.data[i] += g.data[i] * other.data[0];
                    }
                } else {
                    for (std::size_t i = 0; i < g.data.size(); ++i) {
                        gm.data[i] += g.data[i] * other.data[i];
                    }
                }
            };
            side(0, a, b);
            side(1, b, a);
            break;
        }
        case Op::relu: {
            if (wants(0)) {
                const Tensor& x = nodes_[n.in[0]].val;
                Tensor& gx = grad_buf(n.in[0]);
                for (std::size_t i = 0; i < g.data.size(); ++i) {
                    if (x.data[i] > 0.0) { // subgradient at 0 is 0
                        gx.data[i] += g.data[i];
                    }
                }
            }
            break;
        }
        case Op::tanh_fn: {
            if (wants(0)) {
                const Tensor& y = n.val;
                Tensor& gx = grad_buf(n.in[0]);
                for (std::size_t i = 0; i < g.data.size(); ++i) {
                    gx.data[i] += g.data[i] * (1.0 - y.data[i] * y.data[i]);
                }
            }
            break;
        }
        case Op::concat: {
            if (n.val.rank() == 1 || n.axis == 0) {
                Extent off = 0;
                for (std::size_t i = 0; i < n.in.size(); ++i) {
                    const Extent cnt = nodes_[n.in[i]].val.numel();
                    if (wants(i)) {
                        Tensor& gp = grad_buf(n.in[i]);
                        for (Extent e = 0; e < cnt; ++e) {
                            gp.at(e) += g.at(off + e);
                        }
                    }
                    off += cnt;
                }
            } else {
                Extent col_off = 0;
                for (std::size_t i = 0; i < n.in.size(); ++i) {
                    const Tensor& p = nodes_[n.in[i]].val;
                    if (wants(i)) {
                        Tensor& gp = grad_buf(n.in[i]);
                        for (Extent r = 0; r < p.rows(); ++r) {
                            for (Extent c = 0; c < p.cols(); ++c) {
                                gp.at(r, c) += g.at(r, col_off + c);
                            }
                        }
                    }
                    col_off += p.cols();
                }
            }
            break;
        }
        case Op::mean: {
            if (wants(0)) {
                const double gv = g.data[0] / static_cast<double>(nodes_[n.in[0]].val.numel());
                Tensor& gx = grad_buf(n.in[0]);
                for (double& v : gx.data) {
                    v += gv;
                }
            }
            break;
        }
        case Op::sum: {
            if (wants(0)) {
                const double gv = g.data[0];
                Tensor& gx = grad_buf(n.in[0]);
                for (double& v : gx.data) {
                    v += gv;
                }
            }
            break;
        }
        case Op::embed_lookup: {
            if (wants(0)) {
                const Tensor& table = nodes_[n.in[0]].val;
                const Tensor& idx = nodes_[n.in[1]].val;
                Tensor& gt = grad_buf(n.in[0]);
                const Extent e = table.shape[1];
                for (Extent i = 0; i < idx.shape[0]; ++i) {
                    const Extent r = static_cast<Extent>(idx.at(i));
                    for (Extent j = 0; j < e; ++j) {
                        gt.at(r, j) += g.at(i, j);
                    }
                }
            }
            break;
        }
        case Op::softmax_xent: {
            if (wants(0)) {
                const Tensor& logits = nodes_[n.in[0]].val;
                const Tensor& labels = nodes_[n.in[1]].val;
                Tensor& gl = grad_buf(n.in[0]);
                const Extent m = logits.rows();
                const Extent c = logits.cols();
                for (Extent i = 0; i < m; ++i) {
                    double mx = logits.at(i, 0);
                    for (Extent j = 1; j < c; ++j) {
                        mx = std::max(mx, logits.at(i, j));
                    }
                    double z = 0.0;
                    for (Extent j = 0; j < c; ++j) {
                        z += std::exp(logits.at(i, j) - mx);
                    }
                    const Extent label = static_cast<Extent>(labels.at(i));
                    for (Extent j = 0; j < c; ++j) {
                        const double p = std::exp(logits.at(i, j) - mx) / z;
                        gl.at(i, j) += g.at(i) * (p - (j == label ? 1.0 : 0.0));
                    }
                }
            }
            break;
        }
        case Op::mse: {
            const Tensor& a = nodes_[n.in[0]].val;
            const Tensor& b = nodes_[n.in[1]].val;
            if (wants(0)) {
                Tensor& ga = grad_buf(n.in[0]);
                for (std::size_t i = 0; i < g.data.size(); ++i) {
                    ga.data[i] += g.data[i] * 2.0 * (a.data[i] - b.data[i]);
                }
            }
            if (wants(1)) {
                Tensor& gb = grad_buf(n.in[1]);
                for (std::size_t i = 0; i < g.data.size(); ++i) {
                    gb.data[i] += g.data[i] * 2.0 * (b.data[i] - a.data[i]);
                }
            }
            break;
        }
        }
    }

    GradMap out;
    for (NodeId id = 0; id < nodes_.size(); ++id) {
        if (nodes_[id].op == Op::leaf && nodes_[id].needs) {
            out.emplace(id, has_grad[id] ? std::move(grads[id]) : Tensor::zeros(nodes_[id].val.shape));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

GradCheckReport grad_check(Graph& g, NodeId loss, double tolerance, double fd_step, double relu_margin) {
    const std::vector<NodeId> params = g.trainable_leaves();
    if (params.empty()) {
        throw std::runtime_error("grad_check: graph has no trainable parameters");
    }
    const GradMap analytic = g.backward(loss);

    GradCheckReport report;
    report.tolerance = tolerance;

    for (NodeId p : params) {
        GradCheckParamStat stat;
        stat.param = p;
        Tensor& leaf = g.mutable_leaf(p);
        const Tensor& grad = analytic.at(p);
        for (Extent i = 0; i < leaf.numel(); ++i) {
            const double saved = leaf.at(i);
            bool near_kink = false;

            leaf.at(i) = saved + fd_step;
            g.recompute();
            const double up = g.value(loss).data[0];
            near_kink = near_kink || g.min_abs_relu_input() < relu_margin;

            leaf.at(i) = saved - fd_step;
            g.recompute();
            const double down = g.value(loss).data[0];
            near_kink = near_kink || g.min_abs_relu_input() < relu_margin;

            leaf.at(i) = saved;

            if (near_kink) {
                ++stat.excluded;
                continue;
            }
            const double fd = (up - down) / (2.0 * fd_step);
            const double rel = std::abs(grad.at(i) - fd) / std::max(1.0, std::abs(fd));
            stat.max_rel_err = std::max(stat.max_rel_err, rel);
            ++stat.checked;
        }
        report.max_rel_err = std::max(report.max_rel_err, stat.max_rel_err);
        report.excluded += stat.excluded;
        report.params.push_back(stat);
    }
    g.recompute(); // restore clean forward values
    report.pass = report.max_rel_err <= tolerance;
    return report;
}

namespace {

Tensor random_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
    Tensor t = Tensor::zeros(std::move(s));
    for (double& v : t.data) {
        v = rng.uniform(lo, hi);
    }
    t.requires_grad = requires_grad;
    return t;
}

// values kept away from the relu kink so finite differences stay clean
Tensor random_away_from_zero(Rng& rng, Shape s) {
    Tensor t = Tensor::zeros(std::move(s));
    for (double& v : t.data) {
        const double mag = rng.uniform(0.1, 1.0);
        v = rng.uniform01() < 0.5 ? -mag : mag;
    }
    t.requires_grad = true;
    return t;
}

// one random scalar-loss graph exercising `op`; returns the loss node
NodeId build_suite_graph(Graph& g, Op op, Rng& rng) {
    const Extent m = 2 + rng.below(3);
    const Extent k = 2 + rng.below(3);
    const Extent n = 2 + rng.below(3);
    switch (op) {
    case Op::matmul: {
        const NodeId a = g.leaf(random_tensor(rng, {m, k}));
        const NodeId b = g.leaf(random_tensor(rng, {k, n}));
        const NodeId v = g.leaf(random_tensor(rng, {n}));
        return g.sum(g.matmul(g.matmul(a, b), v));
    }
    case Op::add: {
        const NodeId a = g.leaf(random_tensor(rng, {m, n}));
        const NodeId bias = g.leaf(random_tensor(rng, {n}));
        const NodeId b = g.leaf(random_tensor(rng, {m, n}));
        return g.sum(g.mul(g.add(g.add(a, b), bias), g.constant(random_tensor(rng, {m, n}, -1, 1, false))));
    }
    case Op::mul: {
        const NodeId a = g.leaf(random_tensor(rng, {m, n}));
        const NodeId b = g.leaf(random_tensor(rng, {m, n}));
        const NodeId s = g.leaf(random_tensor(rng, {1}));
        return g.sum(g.mul(g.mul(a, b), s));
    }
    case Op::relu: {
        const NodeId a = g.leaf(random_away_from_zero(rng, {m, n}));
        return g.sum(g.relu(a));
    }
    case Op::tanh_fn: {
        const NodeId a = g.leaf(random_tensor(rng, {m, n}));
        return g.sum(g.tanh(g.matmul(a, g.leaf(random_tensor(rng, {n})))));
    }
    case Op::concat: {
        const NodeId a = g.leaf(random_tensor(rng, {m, k}));
        const NodeId b = g.leaf(random_tensor(rng, {m, n}));
        const NodeId w = g.leaf(random_tensor(rng, {k + n}));
        return g.sum(g.matmul(g.concat({a, b}, 1), w));
    }
    case Op::mean: {
        const NodeId a = g.leaf(random_tensor(rng, {m, n}));
        return g.mean(g.mul(a, a));
    }
    case Op::sum: {
        const NodeId a = g.leaf(random_tensor(rng, {m}));
        return g.sum(g.mul(a, a));
    }
    case Op::embed_lookup: {
        const Extent vocab = 4 + rng.below(4);
        const NodeId table = g.leaf(random_tensor(rng, {vocab, n}));
        Tensor idx = Tensor::zeros({m});
        for (Extent i = 0; i < m; ++i) {
            idx.at(i) = static_cast<double>(rng.below(vocab));
        }
        const NodeId ids = g.constant(std::move(idx));
        return g.sum(g.tanh(g.embed_lookup(table, ids)));
    }
    case Op::softmax_xent: {
        const NodeId logits = g.leaf(random_tensor(rng, {m, n}));
        Tensor lab = Tensor::zeros({m});
        for (Extent i = 0; i < m; ++i) {
            lab.at(i) = static_cast<double>(rng.below(n));
        }
        return g.mean(g.softmax_xent(logits, g.constant(std::move(lab))));
    }
    case Op::mse: {
        const NodeId a = g.leaf(random_tensor(rng, {m, n}));
        const NodeId b = g.leaf(random_tensor(rng, {m, n}));
        return g.mean(g.mse(a, b));
    }
    case Op::leaf:
        break;
    }
    throw std::runtime_error("gradcheck_suite: op not covered");
}

} // namespace

GradSuiteReport gradcheck_suite(int instances_per_op, double tolerance, std::uint64_t seed) {
    static const Op kOps[] = {Op::matmul, Op::add,  Op::mul,          Op::relu,
                              Op::tanh_fn, Op::concat, Op::mean,      Op::sum,
                              Op::embed_lookup, Op::softmax_xent, Op::mse};
    GradSuiteReport report;
    report.tolerance = tolerance;
    report.pass = true;
    for (Op op : kOps) {
        OpGradStat stat;
        stat.op = op;
        stat.instances = instances_per_op;
        for (int i = 0; i < instances_per_op; ++i) {
            Rng rng(derive_seed(seed, SeedPurpose::suite,
                                static_cast<std::uint64_t>(op) * 1000 + static_cast<std::uint64_t>(i)));
            Graph g;
            const NodeId loss = build_suite_graph(g, op, rng);
            const GradCheckReport r = grad_check(g, loss, tolerance);
            stat.max_rel_err = std::max(stat.max_rel_err, r.max_rel_err);
        }
        stat.pass = stat.max_rel_err <= tolerance;
        report.pass = report.pass && stat.pass;
        report.ops.push_back(stat);
    }
    return report;
}

} // namespace levi
