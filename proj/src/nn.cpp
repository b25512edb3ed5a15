#include "levi/nn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace levi {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

void fill_uniform_fan_in(Tensor& t, Extent fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : t.data) {
        v = rng.uniform(-bound, bound);
    }
}

} // namespace

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

std::size_t ParamStore::add(std::string name, Tensor value, bool frozen) {
    if (index_.count(name)) {
        fail("duplicate parameter name '" + name + "'");
    }
    Param p;
    p.name = std::move(name);
    p.value = std::move(value);
    p.frozen = frozen;
    params_.push_back(std::move(p));
    index_.emplace(params_.back().name, params_.size() - 1);
    return params_.size() - 1;
}

Param* ParamStore::find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
}

const Param* ParamStore::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
}

Extent ParamStore::count_elements(bool trainable_only) const {
    Extent n = 0;
    for (const Param& p : params_) {
        if (!trainable_only || !p.frozen) {
            n += p.value.numel();
        }
    }
    return n;
}

void ParamStore::set_frozen_all(bool frozen) {
    for (Param& p : params_) {
        p.frozen = frozen;
    }
}

void ParamStore::set_frozen_prefix(const std::string& prefix, bool frozen) {
    for (Param& p : params_) {
        if (p.name.rfind(prefix, 0) == 0) {
            p.frozen = frozen;
        }
    }
}

bool ParamStore::same_structure(const ParamStore& other) const {
    if (params_.size() != other.params_.size()) {
        return false;
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (params_[i].name != other.params_[i].name || params_[i].value.shape != other.params_[i].value.shape) {
            return false;
        }
    }
    return true;
}

ParamStore interpolate_stores(const ParamStore& a, const ParamStore& b, double alpha) {
    if (!a.same_structure(b)) {
        fail("interpolate_stores: stores differ in names or shapes");
    }
    if (alpha < 0.0 || alpha > 1.0) {
        fail("interpolate_stores: alpha " + std::to_string(alpha) + " outside [0, 1]");
    }
    if (alpha == 1.0) {
        return a;
    }
    if (alpha == 0.0) {
        return b;
    }
    ParamStore out = a;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const Param& pb = b.at(i);
        Param& po = out.at(i);
        for (std::size_t k = 0; k < po.value.data.size(); ++k) {
            po.value.data[k] = alpha * po.value.data[k] + (1.0 - alpha) * pb.value.data[k];
        }
    }
    return out;
}

void assign_values(ParamStore& dst, const ParamStore& src) {
    if (!dst.same_structure(src)) {
        fail("assign_values: stores differ in names or shapes");
    }
    for (std::size_t i = 0; i < dst.size(); ++i) {
        dst.at(i).value.data = src.at(i).value.data;
    }
}

void assign_values_by_name(ParamStore& dst, const ParamStore& src) {
    for (const Param& p : src) {
        Param* q = dst.find(p.name);
        if (!q) {
            fail("assign_values_by_name: destination lacks parameter '" + p.name + "'");
        }
        if (q->value.shape != p.value.shape) {
            fail("assign_values_by_name: shape mismatch on '" + p.name + "'");
        }
        q->value.data = p.value.data;
    }
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

ParamBinding bind_params(const ParamStore& store, Graph& g) {
    ParamBinding b;
    b.node_of.reserve(store.size());
    for (const Param& p : store) {
        Tensor t = p.value;
        t.requires_grad = !p.frozen;
        b.node_of.push_back(g.leaf(std::move(t)));
    }
    return b;
}

Linear make_linear(ParamStore& store, const std::string& name, Extent in, Extent out, Rng& rng) {
    Linear l;
    l.in = in;
    l.out = out;
    Tensor w = Tensor::zeros({in, out});
    Tensor b = Tensor::zeros({out});
    fill_uniform_fan_in(w, in, rng);
    fill_uniform_fan_in(b, in, rng);
    l.w = store.add(name + ".w", std::move(w));
    l.b = store.add(name + ".b", std::move(b));
    return l;
}

void reinit_linear(ParamStore& store, const Linear& layer, Rng& rng) {
    fill_uniform_fan_in(store.at(layer.w).value, layer.in, rng);
    fill_uniform_fan_in(store.at(layer.b).value, layer.in, rng);
}

NodeId linear_forward(Graph& g, const ParamBinding& b, const Linear& layer, NodeId x) {
    NodeId w = b.node_of[layer.w];
    if (layer.has_adapter) {
        w = g.add(w, g.matmul(b.node_of[layer.adapter_down], b.node_of[layer.adapter_up]));
    }
    return g.add(g.matmul(x, w), b.node_of[layer.b]);
}

// ---------------------------------------------------------------------------
// backbone
// ---------------------------------------------------------------------------

BackboneDesc build_backbone(ParamStore& store, const BackboneDims& dims, Rng& rng, const std::string& prefix) {
    if (dims.input <= 0 || dims.width <= 0 || dims.blocks < 0 || dims.output <= 0) {
        fail("backbone dims must be positive (blocks may be 0)");
    }
    BackboneDesc net;
    net.dims = dims;
    net.input_proj = make_linear(store, prefix + "input_proj", dims.input, dims.width, rng);
    for (Extent i = 1; i <= dims.blocks; ++i) {
        ResidualBlock blk;
        const std::string base = prefix + "block" + std::to_string(i);
        blk.fc1 = make_linear(store, base + ".fc1", dims.width, dims.width, rng);
        blk.fc2 = make_linear(store, base + ".fc2", dims.width, dims.width, rng);
        net.blocks.push_back(blk);
    }
    net.head = make_linear(store, prefix + "head", dims.width, dims.output, rng);
    return net;
}

void reinit_backbone(ParamStore& store, const BackboneDesc& net, Rng& rng) {
    reinit_linear(store, net.input_proj, rng);
    for (const ResidualBlock& blk : net.blocks) {
        reinit_linear(store, blk.fc1, rng);
        reinit_linear(store, blk.fc2, rng);
    }
    reinit_linear(store, net.head, rng);
}

BackboneForward backbone_forward(Graph& g, const ParamBinding& b, const BackboneDesc& net, NodeId x) {
    if (g.value(x).cols() != net.dims.input) {
        fail("backbone: input width " + std::to_string(g.value(x).cols()) + " does not match " +
             std::to_string(net.dims.input));
    }
    BackboneForward out;
    NodeId h = linear_forward(g, b, net.input_proj, x);
    for (const ResidualBlock& blk : net.blocks) {
        const NodeId t = g.tanh(linear_forward(g, b, blk.fc1, h));
        h = g.add(h, linear_forward(g, b, blk.fc2, t));
        out.block_outputs.push_back(h);
    }
    out.final_output = linear_forward(g, b, net.head, h);
    return out;
}

Backbone::Backbone(const BackboneDims& dims, std::uint64_t init_seed) {
    Rng rng(init_seed);
    net_ = build_backbone(store_, dims, rng);
}

NodeId Backbone::output(Graph& g, const ParamBinding& b, NodeId x) const {
    return backbone_forward(g, b, net_, x).final_output;
}

void Backbone::reinit(std::uint64_t seed) {
    Rng rng(seed);
    reinit_backbone(store_, net_, rng);
}

std::vector<std::string> Backbone::linear_layer_names() const {
    std::vector<std::string> names;
    names.push_back("backbone.input_proj");
    for (Extent i = 1; i <= net_.dims.blocks; ++i) {
        names.push_back("backbone.block" + std::to_string(i) + ".fc1");
        names.push_back("backbone.block" + std::to_string(i) + ".fc2");
    }
    names.push_back("backbone.head");
    return names;
}

Linear* Backbone::find_layer(const std::string& name) {
    if (name == "backbone.input_proj") {
        return &net_.input_proj;
    }
    if (name == "backbone.head") {
        return &net_.head;
    }
    for (Extent i = 1; i <= net_.dims.blocks; ++i) {
        const std::string base = "backbone.block" + std::to_string(i);
        if (name == base + ".fc1") {
            return &net_.blocks[static_cast<std::size_t>(i - 1)].fc1;
        }
        if (name == base + ".fc2") {
            return &net_.blocks[static_cast<std::size_t>(i - 1)].fc2;
        }
    }
    return nullptr;
}

void Backbone::apply_lora(const std::vector<std::string>& targets, Extent rank, std::uint64_t seed) {
    if (rank < 1) {
        fail("apply_lora: rank must be >= 1");
    }
    Rng rng(derive_seed(seed, SeedPurpose::backbone_init, 1000));
    for (const std::string& name : targets) {
        Linear* layer = find_layer(name);
        if (!layer) {
            fail("apply_lora: unknown layer '" + name + "'");
        }
        if (layer->has_adapter) {
            fail("apply_lora: layer '" + name + "' already has an adapter");
        }
        if (rank > std::min(layer->in, layer->out)) {
            fail("apply_lora: rank " + std::to_string(rank) + " exceeds min(in, out) of layer '" + name + "'");
        }
        Tensor down = Tensor::zeros({layer->in, rank});
        fill_uniform_fan_in(down, layer->in, rng);
        Tensor up = Tensor::zeros({rank, layer->out}); // zeros: adapted output equals base at start
        layer->adapter_down = store_.add(name + ".lora_down", std::move(down));
        layer->adapter_up = store_.add(name + ".lora_up", std::move(up));
        layer->adapter_rank = rank;
        layer->has_adapter = true;
    }
    // only adapters stay trainable
    store_.set_frozen_all(true);
    for (Param& p : store_) {
        if (p.name.ends_with(".lora_down") || p.name.ends_with(".lora_up")) {
            p.frozen = false;
        }
    }
}

std::pair<Tensor, std::vector<Tensor>> Backbone::run(const Tensor& x) const {
    Graph g;
    const ParamBinding b = bind_params(store_, g);
    const BackboneForward f = backbone_forward(g, b, net_, g.constant(x));
    std::vector<Tensor> taps;
    taps.reserve(f.block_outputs.size());
    for (NodeId id : f.block_outputs) {
        taps.push_back(g.value(id));
    }
    return {g.value(f.final_output), std::move(taps)};
}

// ---------------------------------------------------------------------------
// task model
// ---------------------------------------------------------------------------

TaskModelDesc build_task_model(ParamStore& store, const TaskModelDims& dims, Rng& rng, const std::string& prefix) {
    if (dims.input < 0 || dims.hidden1 <= 0 || dims.hidden2 <= 0 || dims.output <= 0) {
        fail("task model dims must be positive");
    }
    TaskModelDesc net;
    net.dims = dims;
    Extent trunk_in = dims.input;
    for (std::size_t i = 0; i < dims.embeddings.size(); ++i) {
        const auto& e = dims.embeddings[i];
        if (e.cardinality <= 0 || e.dim <= 0) {
            fail("embedding spec must have positive cardinality and dim");
        }
        Tensor table = Tensor::zeros({e.cardinality, e.dim});
        fill_uniform_fan_in(table, e.dim, rng);
        net.embed_tables.push_back(store.add(prefix + "emb" + std::to_string(i), std::move(table)));
        trunk_in += e.dim;
    }
    if (trunk_in <= 0) {
        fail("task model has no input features");
    }
    net.fc1 = make_linear(store, prefix + "fc1", trunk_in, dims.hidden1, rng);
    net.fc2 = make_linear(store, prefix + "fc2", dims.hidden1, dims.hidden2, rng);
    net.out = make_linear(store, prefix + "out", dims.hidden2, dims.output, rng);
    return net;
}

NodeId task_model_forward(Graph& g, const ParamBinding& b, const TaskModelDesc& net, NodeId x) {
    const Extent cat = static_cast<Extent>(net.dims.embeddings.size());
    if (g.value(x).cols() != net.dims.input + cat) {
        fail("task model: input width " + std::to_string(g.value(x).cols()) + " does not match " +
             std::to_string(net.dims.input + cat));
    }
    NodeId trunk_in = x;
    if (cat > 0) {
        // leading columns hold category ids; remaining columns are continuous
        const Tensor& xv = g.value(x);
        std::vector<NodeId> parts;
        for (Extent c = 0; c < cat; ++c) {
            Tensor ids = Tensor::zeros({xv.rows()});
            for (Extent r = 0; r < xv.rows(); ++r) {
                ids.at(r) = xv.at(r, c);
            }
            parts.push_back(g.embed_lookup(b.node_of[net.embed_tables[static_cast<std::size_t>(c)]],
                                           g.constant(std::move(ids))));
        }
        if (net.dims.input > 0) {
            Tensor cont = Tensor::zeros({xv.rows(), net.dims.input});
            for (Extent r = 0; r < xv.rows(); ++r) {
                for (Extent c = 0; c < net.dims.input; ++c) {
                    cont.at(r, c) = xv.at(r, cat + c);
                }
            }
            parts.push_back(g.constant(std::move(cont)));
        }
        trunk_in = parts.size() == 1 ? parts[0] : g.concat(std::move(parts), 1);
    }
    const NodeId h1 = g.relu(linear_forward(g, b, net.fc1, trunk_in));
    const NodeId h2 = g.relu(linear_forward(g, b, net.fc2, h1));
    return linear_forward(g, b, net.out, h2);
}

// ---------------------------------------------------------------------------
// adapting head
// ---------------------------------------------------------------------------

HeadDesc build_head(ParamStore& store, const std::string& prefix, const HeadDims& dims, Rng& rng) {
    HeadDesc head;
    head.fc1 = make_linear(store, prefix + "fc1", dims.input, dims.hidden, rng);
    head.out = make_linear(store, prefix + "out", dims.hidden, dims.output, rng);
    return head;
}

NodeId head_forward(Graph& g, const ParamBinding& b, const HeadDesc& head, NodeId x) {
    return linear_forward(g, b, head.out, g.tanh(linear_forward(g, b, head.fc1, x)));
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

NodeId Model::loss_node(Graph& g, const ParamBinding& b, NodeId x, NodeId y, const LossSpec& loss) const {
    return mean_loss(g, output(g, b, x), y, loss);
}

Tensor Model::predict(const Tensor& x) const {
    Graph g;
    const ParamBinding b = bind_params(store(), g);
    return g.value(output(g, b, g.constant(x)));
}

// ---------------------------------------------------------------------------
// LeviComposition
// ---------------------------------------------------------------------------

LeviComposition::LeviComposition(const LeviDims& dims, std::uint64_t seed) : dims_(dims) {
    if (dims_.taps.empty()) {
        for (Extent i = 1; i <= dims_.backbone.blocks; ++i) {
            dims_.taps.push_back(i); // default: tap every block
        }
    }
    if (dims_.taps.empty()) {
        fail("levi composition needs at least one tap (backbone has no blocks)");
    }
    for (std::size_t i = 0; i < dims_.taps.size(); ++i) {
        if (dims_.taps[i] < 1 || dims_.taps[i] > dims_.backbone.blocks) {
            fail("tap index " + std::to_string(dims_.taps[i]) + " out of range 1.." +
                 std::to_string(dims_.backbone.blocks));
        }
        if (i > 0 && dims_.taps[i] <= dims_.taps[i - 1]) {
            fail("tap indices must be strictly increasing");
        }
    }

    Rng bb_rng(derive_seed(seed, SeedPurpose::backbone_init));
    backbone_ = build_backbone(store_, dims_.backbone, bb_rng);

    Extent head_in = dims_.backbone.width;
    if (dims_.use_task_model) {
        Rng task_rng(derive_seed(seed, SeedPurpose::task_init));
        task_ = build_task_model(store_, dims_.task, task_rng);
        head_in += dims_.task.output;
    }

    HeadDims hd;
    hd.input = head_in;
    hd.hidden = dims_.head_hidden;
    hd.output = dims_.backbone.output;
    for (std::size_t j = 0; j < dims_.taps.size(); ++j) {
        Rng head_rng(derive_seed(seed, SeedPurpose::head_init, j));
        heads_.push_back(build_head(store_, "head" + std::to_string(j + 1) + ".", hd, head_rng));
    }

    if (dims_.head_weights.empty()) {
        head_weights_ = HeadWeights::uniform(heads_.size());
    } else {
        head_weights_.weights = dims_.head_weights;
        if (head_weights_.weights.size() != heads_.size()) {
            fail("head weight count does not match head count");
        }
        head_weights_.validate();
    }
}

void LeviComposition::set_head_weights(HeadWeights w) {
    if (w.weights.size() != heads_.size()) {
        fail("head weight count does not match head count");
    }
    w.validate();
    head_weights_ = std::move(w);
}

void LeviComposition::load_backbone(const ParamStore& pretrained) {
    assign_values_by_name(store_, pretrained);
}

std::vector<NodeId> LeviComposition::forward_heads(Graph& g, const ParamBinding& b, NodeId x) const {
    const BackboneForward bb = backbone_forward(g, b, backbone_, x);
    NodeId task_out = 0;
    if (task_) {
        task_out = task_model_forward(g, b, *task_, x);
    }
    std::vector<NodeId> preds;
    preds.reserve(heads_.size());
    for (std::size_t j = 0; j < heads_.size(); ++j) {
        const NodeId tap = bb.block_outputs[static_cast<std::size_t>(dims_.taps[j] - 1)];
        const NodeId head_in = task_ ? g.concat({tap, task_out}, 1) : tap;
        preds.push_back(head_forward(g, b, heads_[j], head_in));
    }
    return preds;
}

NodeId LeviComposition::output(Graph& g, const ParamBinding& b, NodeId x) const {
    // aggregate in tap order, so the prediction is identical under any joint
    // permutation of taps and heads
    const std::vector<NodeId> preds = forward_heads(g, b, x);
    std::vector<std::size_t> order(preds.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t c) { return dims_.taps[a] < dims_.taps[c]; });
    std::vector<NodeId> sorted_preds;
    std::vector<double> sorted_weights;
    for (std::size_t i : order) {
        sorted_preds.push_back(preds[i]);
        sorted_weights.push_back(head_weights_.weights[i]);
    }
    return weighted_mean_nodes(g, sorted_preds, sorted_weights);
}

NodeId LeviComposition::loss_node(Graph& g, const ParamBinding& b, NodeId x, NodeId y,
                                  const LossSpec& loss) const {
    return levi_loss(g, forward_heads(g, b, x), y, head_weights_, loss);
}

std::vector<Tensor> LeviComposition::predict_heads(const Tensor& x) const {
    Graph g;
    const ParamBinding b = bind_params(store_, g);
    std::vector<Tensor> out;
    for (NodeId id : forward_heads(g, b, g.constant(x))) {
        out.push_back(g.value(id));
    }
    return out;
}

void LeviComposition::permute_heads(const std::vector<std::size_t>& order) {
    if (order.size() != heads_.size()) {
        fail("permute_heads: order size mismatch");
    }
    std::vector<HeadDesc> heads;
    std::vector<Extent> taps;
    std::vector<double> weights;
    for (std::size_t idx : order) {
        heads.push_back(heads_[idx]);
        taps.push_back(dims_.taps[idx]);
        weights.push_back(head_weights_.weights[idx]);
    }
    heads_ = std::move(heads);
    dims_.taps = std::move(taps);
    head_weights_.weights = std::move(weights);
}

// ---------------------------------------------------------------------------
// TaskOnlyModel
// ---------------------------------------------------------------------------

TaskOnlyModel::TaskOnlyModel(const TaskModelDims& task, Extent head_hidden, Extent label_dim, std::size_t heads,
                             std::uint64_t seed) {
    if (heads == 0) {
        fail("task-only model needs at least one head");
    }
    Rng task_rng(derive_seed(seed, SeedPurpose::task_init));
    task_ = build_task_model(store_, task, task_rng);
    HeadDims hd;
    hd.input = task.output;
    hd.hidden = head_hidden;
    hd.output = label_dim;
    for (std::size_t j = 0; j < heads; ++j) {
        Rng head_rng(derive_seed(seed, SeedPurpose::head_init, j));
        heads_.push_back(build_head(store_, "head" + std::to_string(j + 1) + ".", hd, head_rng));
    }
}

std::vector<NodeId> TaskOnlyModel::forward_heads(Graph& g, const ParamBinding& b, NodeId x) const {
    const NodeId task_out = task_model_forward(g, b, task_, x);
    std::vector<NodeId> preds;
    for (const HeadDesc& head : heads_) {
        preds.push_back(head_forward(g, b, head, task_out));
    }
    return preds;
}

NodeId TaskOnlyModel::output(Graph& g, const ParamBinding& b, NodeId x) const {
    const std::vector<NodeId> preds = forward_heads(g, b, x);
    return weighted_mean_nodes(g, preds, HeadWeights::uniform(preds.size()).weights);
}

NodeId TaskOnlyModel::loss_node(Graph& g, const ParamBinding& b, NodeId x, NodeId y, const LossSpec& loss) const {
    return levi_loss(g, forward_heads(g, b, x), y, HeadWeights::uniform(heads_.size()), loss);
}

} // namespace levi
