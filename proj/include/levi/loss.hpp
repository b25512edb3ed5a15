#pragma once

#include <vector>

#include "levi/tensor.hpp"

namespace levi {

// Training loss: mean over samples of a per-sample loss.
struct LossSpec {
    enum class Kind { mse, softmax_xent };
    Kind kind = Kind::mse;
};

// Per-head loss weights: nonnegative, summing to 1 within 1e-12.
struct HeadWeights {
    std::vector<double> weights;

    static HeadWeights uniform(std::size_t n);
    void validate() const; // throws on violation
    bool is_uniform() const;
};

// Mean per-sample loss of one prediction against labels. For mse the
// prediction and label shapes must match; for softmax_xent the prediction is
// [m,c] logits and labels are [m] class ids.
NodeId mean_loss(Graph& g, NodeId pred, NodeId labels, const LossSpec& loss);

// Weighted sum over heads of each head's mean per-sample loss. With uniform
// weights this equals the double average over samples and heads. Heads with
// zero weight contribute no graph edge, so no gradient flows into them.
NodeId levi_loss(Graph& g, const std::vector<NodeId>& per_head_preds, NodeId labels, const HeadWeights& weights,
                 const LossSpec& loss);

// Weighted combination of prediction nodes with the same zero-weight
// short-circuit; weight 1 on a single head returns that head's node as is.
NodeId weighted_mean_nodes(Graph& g, const std::vector<NodeId>& preds, const std::vector<double>& weights);

} // namespace levi
