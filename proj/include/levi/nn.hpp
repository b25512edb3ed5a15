#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "levi/loss.hpp"
#include "levi/rng.hpp"
#include "levi/tensor.hpp"

namespace levi {

// ---------------------------------------------------------------------------
// parameter store
// ---------------------------------------------------------------------------

struct Param {
    std::string name;
    Tensor value;
    bool frozen = false;
};

// Named, ordered collection of parameter tensors. Order is construction
// order and is part of the checkpoint contract.
class ParamStore {
  public:
    std::size_t add(std::string name, Tensor value, bool frozen = false);

    std::size_t size() const { return params_.size(); }
    Param& at(std::size_t i) { return params_[i]; }
    const Param& at(std::size_t i) const { return params_[i]; }
    Param* find(const std::string& name);
    const Param* find(const std::string& name) const;

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    Extent count_elements(bool trainable_only) const;

    void set_frozen_all(bool frozen);
    void set_frozen_prefix(const std::string& prefix, bool frozen);

    bool same_structure(const ParamStore& other) const; // names, shapes, order

  private:
    std::vector<Param> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

// elementwise alpha*a + (1-alpha)*b over structurally identical stores;
// alpha 0 and 1 return the respective endpoint bit-exactly
ParamStore interpolate_stores(const ParamStore& a, const ParamStore& b, double alpha);

// copy values (not freeze flags) between structurally identical stores
void assign_values(ParamStore& dst, const ParamStore& src);

// copy values of every src param into the structurally matching dst param of
// the same name; every src name must exist in dst
void assign_values_by_name(ParamStore& dst, const ParamStore& src);

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

// Binds store params to graph leaves for one forward/backward pass. Frozen
// params enter the graph as constants.
struct ParamBinding {
    std::vector<NodeId> node_of; // param index -> leaf node
};

ParamBinding bind_params(const ParamStore& store, Graph& g);

struct Linear {
    std::size_t w = 0; // [in, out]
    std::size_t b = 0; // [out]
    Extent in = 0;
    Extent out = 0;
    // low-rank adapter (absent by default); effective weight w + down*up
    bool has_adapter = false;
    std::size_t adapter_down = 0; // [in, r]
    std::size_t adapter_up = 0;   // [r, out], zero-initialized
    Extent adapter_rank = 0;
};

Linear make_linear(ParamStore& store, const std::string& name, Extent in, Extent out, Rng& rng);
void reinit_linear(ParamStore& store, const Linear& layer, Rng& rng);
NodeId linear_forward(Graph& g, const ParamBinding& b, const Linear& layer, NodeId x);

// ---------------------------------------------------------------------------
// network descriptors (structure over some ParamStore)
// ---------------------------------------------------------------------------

struct BackboneDims {
    Extent input = 3;
    Extent width = 32; // H
    Extent blocks = 4; // B
    Extent output = 2; // label dimension
};

struct ResidualBlock {
    Linear fc1;
    Linear fc2;
};

// Stand-in for the large pre-trained model: input projection to width H,
// B residual blocks (linear -> tanh -> linear, residual add), final linear
// head. Block outputs are the tappable intermediates, indexed 1..B.
struct BackboneDesc {
    BackboneDims dims;
    Linear input_proj;
    std::vector<ResidualBlock> blocks;
    Linear head;
};

BackboneDesc build_backbone(ParamStore& store, const BackboneDims& dims, Rng& rng,
                            const std::string& prefix = "backbone.");
void reinit_backbone(ParamStore& store, const BackboneDesc& net, Rng& rng);

struct BackboneForward {
    NodeId final_output = 0;
    std::vector<NodeId> block_outputs; // size B; tap index k maps to [k-1]
};

BackboneForward backbone_forward(Graph& g, const ParamBinding& b, const BackboneDesc& net, NodeId x);

struct TaskModelDims {
    Extent input = 3; // continuous feature count (categorical columns extra)
    Extent hidden1 = 32;
    Extent hidden2 = 32;
    Extent output = 16; // E
    // optional per-categorical-feature embedding tables; categorical features
    // occupy the leading input columns, holding whole-number category ids
    struct EmbeddingSpec {
        Extent cardinality = 0;
        Extent dim = 0;
    };
    std::vector<EmbeddingSpec> embeddings;
};

// Small trained-from-scratch model: optional embedding lookups concatenated
// with the continuous features, then a two-hidden-layer relu MLP emitting an
// E-dimensional representation.
struct TaskModelDesc {
    TaskModelDims dims;
    std::vector<std::size_t> embed_tables;
    Linear fc1;
    Linear fc2;
    Linear out;
};

TaskModelDesc build_task_model(ParamStore& store, const TaskModelDims& dims, Rng& rng,
                               const std::string& prefix = "task.");
NodeId task_model_forward(Graph& g, const ParamBinding& b, const TaskModelDesc& net, NodeId x);

struct HeadDims {
    Extent input = 48;  // tap width (+ task output width)
    Extent hidden = 64; // A
    Extent output = 2;
};

// Adapting head: one tanh hidden layer and a linear output to label space.
struct HeadDesc {
    Linear fc1;
    Linear out;
};

HeadDesc build_head(ParamStore& store, const std::string& prefix, const HeadDims& dims, Rng& rng);
NodeId head_forward(Graph& g, const ParamBinding& b, const HeadDesc& head, NodeId x);

// ---------------------------------------------------------------------------
// models
// ---------------------------------------------------------------------------

class Model {
  public:
    virtual ~Model() = default;
    virtual ParamStore& store() = 0;
    const ParamStore& store() const { return const_cast<Model*>(this)->store(); }

    // single prediction-path output for input node x
    virtual NodeId output(Graph& g, const ParamBinding& b, NodeId x) const = 0;

    // scalar training loss for a batch; default is mean_loss(output(x), y)
    virtual NodeId loss_node(Graph& g, const ParamBinding& b, NodeId x, NodeId y, const LossSpec& loss) const;

    // forward pass used for flop accounting; multi-head models count the
    // pass that produces every head prediction
    virtual void accounting_forward(Graph& g, const ParamBinding& b, NodeId x) const { (void)output(g, b, x); }

    // graph-free convenience for evaluation
    Tensor predict(const Tensor& x) const;
};

class Backbone : public Model {
  public:
    Backbone(const BackboneDims& dims, std::uint64_t init_seed);

    ParamStore& store() override { return store_; }
    const BackboneDims& dims() const { return net_.dims; }
    const BackboneDesc& desc() const { return net_; }

    BackboneForward forward_all(Graph& g, const ParamBinding& b, NodeId x) const {
        return backbone_forward(g, b, net_, x);
    }

    NodeId output(Graph& g, const ParamBinding& b, NodeId x) const override;

    // re-draw every base parameter from `seed` exactly as construction did
    void reinit(std::uint64_t seed);

    // attach low-rank adapters to the named linear layers; freezes all base
    // parameters so only adapter matrices remain trainable
    void apply_lora(const std::vector<std::string>& targets, Extent rank, std::uint64_t seed);

    std::vector<std::string> linear_layer_names() const;

    // graph-free forward returning the final output and every block output
    std::pair<Tensor, std::vector<Tensor>> run(const Tensor& x) const;

  private:
    ParamStore store_;
    BackboneDesc net_;

    Linear* find_layer(const std::string& name);
};

struct LeviDims {
    BackboneDims backbone;
    TaskModelDims task;
    Extent head_hidden = 64;          // A
    std::vector<Extent> taps;         // strictly increasing 1-based block indices
    std::vector<double> head_weights; // empty means uniform
    bool use_task_model = true;       // false: heads consume the tap alone
};

// The layer-wise ensemble: a tappable backbone, a small task model, and one
// adapting head per tap consuming concat(tap output, task output). Training
// minimizes the weighted per-head loss; prediction is the head-weight
// weighted mean of the per-head predictions.
class LeviComposition : public Model {
  public:
    LeviComposition(const LeviDims& dims, std::uint64_t seed);

    ParamStore& store() override { return store_; }
    const LeviDims& dims() const { return dims_; }
    std::size_t head_count() const { return heads_.size(); }
    const HeadWeights& head_weights() const { return head_weights_; }
    void set_head_weights(HeadWeights w);

    // adopt pre-trained backbone values (params named backbone.*)
    void load_backbone(const ParamStore& pretrained);
    void freeze_backbone(bool frozen) { store_.set_frozen_prefix("backbone.", frozen); }

    std::vector<NodeId> forward_heads(Graph& g, const ParamBinding& b, NodeId x) const;
    NodeId output(Graph& g, const ParamBinding& b, NodeId x) const override;
    NodeId loss_node(Graph& g, const ParamBinding& b, NodeId x, NodeId y, const LossSpec& loss) const override;
    void accounting_forward(Graph& g, const ParamBinding& b, NodeId x) const override {
        (void)forward_heads(g, b, x);
    }

    // per-head predictions without a graph, for evaluation
    std::vector<Tensor> predict_heads(const Tensor& x) const;

    // reorder taps and heads together; head weights follow the permutation
    void permute_heads(const std::vector<std::size_t>& order);

    const BackboneDesc& backbone_desc() const { return backbone_; }

  private:
    LeviDims dims_;
    ParamStore store_;
    BackboneDesc backbone_;
    std::optional<TaskModelDesc> task_;
    std::vector<HeadDesc> heads_;
    HeadWeights head_weights_;
};

// Task model plus one or more adapting heads and no backbone; multi-head
// predictions are averaged.
class TaskOnlyModel : public Model {
  public:
    TaskOnlyModel(const TaskModelDims& task, Extent head_hidden, Extent label_dim, std::size_t heads,
                  std::uint64_t seed);

    ParamStore& store() override { return store_; }
    std::size_t head_count() const { return heads_.size(); }

    std::vector<NodeId> forward_heads(Graph& g, const ParamBinding& b, NodeId x) const;
    NodeId output(Graph& g, const ParamBinding& b, NodeId x) const override;
    NodeId loss_node(Graph& g, const ParamBinding& b, NodeId x, NodeId y, const LossSpec& loss) const override;
    void accounting_forward(Graph& g, const ParamBinding& b, NodeId x) const override {
        (void)forward_heads(g, b, x);
    }

  private:
    ParamStore store_;
    TaskModelDesc task_;
    std::vector<HeadDesc> heads_;
};

} // namespace levi
