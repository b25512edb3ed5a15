#include "levi/loss.hpp"

#include <cmath>
#include <stdexcept>

namespace levi {

HeadWeights HeadWeights::uniform(std::size_t n) {
    if (n == 0) {
        throw std::runtime_error("head weights: need at least one head");
    }
    HeadWeights w;
    w.weights.assign(n, 1.0 / static_cast<double>(n));
    return w;
}

void HeadWeights::validate() const {
    if (weights.empty()) {
        throw std::runtime_error("head weights: need at least one head");
    }
    double total = 0.0;
    for (double w : weights) {
        if (w < 0.0) {
            throw std::runtime_error("head weights: negative weight " + std::to_string(w));
        }
        total += w;
    }
    if (std::abs(total - 1.0) > 1e-12) {
        throw std::runtime_error("head weights: sum " + std::to_string(total) + " is not 1");
    }
}

bool HeadWeights::is_uniform() const {
    const double u = 1.0 / static_cast<double>(weights.size());
    for (double w : weights) {
        if (w != u) {
            return false;
        }
    }
    return true;
}

NodeId mean_loss(Graph& g, NodeId pred, NodeId labels, const LossSpec& loss) {
    switch (loss.kind) {
    case LossSpec::Kind::mse:
        return g.mean(g.mse(pred, labels));
    case LossSpec::Kind::softmax_xent:
        return g.mean(g.softmax_xent(pred, labels));
    }
    throw std::runtime_error("unknown loss kind");
}

NodeId weighted_mean_nodes(Graph& g, const std::vector<NodeId>& preds, const std::vector<double>& weights) {
    if (preds.empty() || preds.size() != weights.size()) {
        throw std::runtime_error("weighted combination: prediction/weight count mismatch");
    }
    NodeId acc = 0;
    bool have = false;
    for (std::size_t j = 0; j < preds.size(); ++j) {
        if (weights[j] == 0.0) {
            continue; // no edge, no gradient
        }
        const NodeId term =
            weights[j] == 1.0 ? preds[j] : g.mul(preds[j], g.constant(Tensor::scalar(weights[j])));
        acc = have ? g.add(acc, term) : term;
        have = true;
    }
    if (!have) {
        throw std::runtime_error("weighted combination: all weights are zero");
    }
    return acc;
}

NodeId levi_loss(Graph& g, const std::vector<NodeId>& per_head_preds, NodeId labels, const HeadWeights& weights,
                 const LossSpec& loss) {
    if (per_head_preds.empty()) {
        throw std::runtime_error("levi loss: need at least one head prediction");
    }
    if (weights.weights.size() != per_head_preds.size()) {
        throw std::runtime_error("levi loss: weight count " + std::to_string(weights.weights.size()) +
                                 " does not match head count " + std::to_string(per_head_preds.size()));
    }
    weights.validate();
    const Shape& first = g.value(per_head_preds[0]).shape;
    for (NodeId p : per_head_preds) {
        if (g.value(p).shape != first) {
            throw std::runtime_error("levi loss: per-head prediction shapes differ");
        }
    }
    std::vector<NodeId> head_losses;
    head_losses.reserve(per_head_preds.size());
    for (NodeId p : per_head_preds) {
        head_losses.push_back(mean_loss(g, p, labels, loss));
    }
    return weighted_mean_nodes(g, head_losses, weights.weights);
}

} // namespace levi
