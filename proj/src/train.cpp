#include "levi/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace levi {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

// Adam/SGD over the trainable subset of a store. State is keyed by parameter
// index and lives for one train() call.
class Optimizer {
  public:
    Optimizer(const OptimizerConfig& cfg, const ParamStore& store) : cfg_(cfg) {
        if (cfg.lr <= 0.0) {
            fail("optimizer: learning rate must be > 0");
        }
        if (cfg.kind == OptimizerKind::adam) {
            m_.resize(store.size());
            v_.resize(store.size());
            for (std::size_t i = 0; i < store.size(); ++i) {
                if (!store.at(i).frozen) {
                    m_[i].assign(store.at(i).value.data.size(), 0.0);
                    v_[i].assign(store.at(i).value.data.size(), 0.0);
                }
            }
        }
    }

    void step(ParamStore& store, const std::vector<const Tensor*>& grads) {
        ++t_;
        for (std::size_t i = 0; i < store.size(); ++i) {
            Param& p = store.at(i);
            if (p.frozen || !grads[i]) {
                continue;
            }
            const Tensor& g = *grads[i];
            if (cfg_.kind == OptimizerKind::sgd) {
                for (std::size_t k = 0; k < p.value.data.size(); ++k) {
                    p.value.data[k] -= cfg_.lr * g.data[k];
                }
                continue;
            }
            const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
            const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
            std::vector<double>& m = m_[i];
            std::vector<double>& v = v_[i];
            for (std::size_t k = 0; k < p.value.data.size(); ++k) {
                m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g.data[k];
                v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g.data[k] * g.data[k];
                const double mhat = m[k] / bc1;
                const double vhat = v[k] / bc2;
                p.value.data[k] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

  private:
    OptimizerConfig cfg_;
    std::int64_t t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

// deterministic minibatch cursor: shuffled epochs, every batch full-sized
class BatchCursor {
  public:
    BatchCursor(Extent rows, Extent batch, std::uint64_t seed)
        : rows_(rows), batch_(std::min(batch, rows)), rng_(derive_seed(seed, SeedPurpose::batch_order)) {
        order_.resize(static_cast<std::size_t>(rows_));
        std::iota(order_.begin(), order_.end(), 0);
        full_ = batch_ >= rows_;
        if (!full_) {
            rng_.shuffle(order_);
        }
    }

    // indices of the next batch; nullptr means "use the whole split as is"
    const std::vector<Extent>* next() {
        if (full_) {
            return nullptr;
        }
        if (offset_ + batch_ > rows_) {
            rng_.shuffle(order_);
            offset_ = 0;
        }
        batch_ids_.assign(order_.begin() + offset_, order_.begin() + offset_ + batch_);
        offset_ += batch_;
        return &batch_ids_;
    }

  private:
    Extent rows_;
    Extent batch_;
    Rng rng_;
    std::vector<Extent> order_;
    std::vector<Extent> batch_ids_;
    Extent offset_ = 0;
    bool full_ = false;
};

DataSplit gather(const DataSplit& data, const std::vector<Extent>& ids) {
    const Extent d = data.x.cols();
    DataSplit out;
    out.x = Tensor::zeros({static_cast<Extent>(ids.size()), d});
    out.y = Tensor::zeros({static_cast<Extent>(ids.size())});
    for (std::size_t r = 0; r < ids.size(); ++r) {
        for (Extent c = 0; c < d; ++c) {
            out.x.at(static_cast<Extent>(r), c) = data.x.at(ids[r], c);
        }
        out.y.at(static_cast<Extent>(r)) = data.y.at(ids[r]);
    }
    return out;
}

// mse compares against [m,1] column labels; xent takes [m] class ids
NodeId label_node(Graph& g, const Tensor& y, const LossSpec& loss) {
    if (loss.kind == LossSpec::Kind::mse) {
        return g.constant(reshape(y, {y.rows(), 1}));
    }
    return g.constant(y);
}

} // namespace

const char* regime_name(Regime r) {
    switch (r) {
    case Regime::levi: return "levi";
    case Regime::ft: return "ft";
    case Regime::ht: return "ht";
    case Regime::lp: return "lp";
    case Regime::fs: return "fs";
    case Regime::lp_then_ft: return "lp_then_ft";
    case Regime::ens_output: return "ens_output";
    case Regime::ens_weight: return "ens_weight";
    case Regime::lora: return "lora";
    case Regime::task: return "task";
    }
    return "?";
}

Regime regime_from_name(const std::string& name) {
    static const std::pair<const char*, Regime> table[] = {
        {"levi", Regime::levi},       {"ft", Regime::ft},
        {"ht", Regime::ht},           {"lp", Regime::lp},
        {"fs", Regime::fs},           {"lp_then_ft", Regime::lp_then_ft},
        {"ens_output", Regime::ens_output}, {"ens_weight", Regime::ens_weight},
        {"lora", Regime::lora},       {"task", Regime::task},
    };
    for (const auto& [k, v] : table) {
        if (name == k) {
            return v;
        }
    }
    fail("unknown regime '" + name + "'");
}

TrainResult train(Model& model, const DataSplit& data, const TrainConfig& cfg) {
    if (data.rows() == 0) {
        fail("train: empty data split");
    }
    if (cfg.batch < 1) {
        fail("train: batch size must be >= 1");
    }
    if (cfg.steps < 0) {
        fail("train: negative step count");
    }
    ParamStore& store = model.store();
    Optimizer opt(cfg.opt, store);
    BatchCursor cursor(data.rows(), cfg.batch, cfg.seed);

    TrainResult result;
    result.trace.reserve(static_cast<std::size_t>(cfg.steps));

    DataSplit batch;
    for (Extent step = 0; step < cfg.steps; ++step) {
        const std::vector<Extent>* ids = cursor.next();
        const DataSplit& view = ids ? (batch = gather(data, *ids), batch) : data;

        Graph g;
        const ParamBinding binding = bind_params(store, g);
        const NodeId x = g.constant(view.x);
        const NodeId y = label_node(g, view.y, cfg.loss);
        const NodeId loss = model.loss_node(g, binding, x, y, cfg.loss);
        const double loss_value = g.value(loss).data[0];
        if (!std::isfinite(loss_value)) {
            fail("train: non-finite loss at step " + std::to_string(step));
        }
        result.trace.push_back(loss_value);

        const GradMap grads = g.backward(loss);
        std::vector<const Tensor*> by_param(store.size(), nullptr);
        for (std::size_t i = 0; i < store.size(); ++i) {
            if (!store.at(i).frozen) {
                auto it = grads.find(binding.node_of[i]);
                if (it != grads.end()) {
                    by_param[i] = &it->second;
                }
            }
        }
        opt.step(store, by_param);
    }
    return result;
}

void set_regime_mask(Backbone& model, Regime regime, std::uint64_t seed) {
    ParamStore& store = model.store();
    switch (regime) {
    case Regime::ft:
        store.set_frozen_all(false);
        return;
    case Regime::fs:
        store.set_frozen_all(false);
        model.reinit(seed);
        return;
    case Regime::lp:
        store.set_frozen_all(true);
        store.set_frozen_prefix("backbone.head", false);
        return;
    case Regime::ht: {
        const Extent blocks = model.dims().blocks;
        const Extent upper = (blocks + 1) / 2; // output-nearest ceil(B/2)
        store.set_frozen_all(true);
        for (Extent i = blocks - upper + 1; i <= blocks; ++i) {
            store.set_frozen_prefix("backbone.block" + std::to_string(i) + ".", false);
        }
        store.set_frozen_prefix("backbone.head", false);
        return;
    }
    case Regime::lora: {
        bool any = false;
        for (Param& p : store) {
            const bool adapter = p.name.ends_with(".lora_down") || p.name.ends_with(".lora_up");
            p.frozen = !adapter;
            any = any || adapter;
        }
        if (!any) {
            fail("set_regime_mask: lora regime requires adapters (apply_lora first)");
        }
        return;
    }
    default:
        fail(std::string("set_regime_mask: regime '") + regime_name(regime) +
             "' has no backbone mask");
    }
}

TrainResult lp_then_ft(Backbone& model, const DataSplit& data, const TwoPhaseConfig& cfg) {
    set_regime_mask(model, Regime::lp);
    TrainResult r1 = train(model, data, cfg.phase1);
    set_regime_mask(model, Regime::ft);
    TrainResult r2 = train(model, data, cfg.phase2);
    r1.trace.insert(r1.trace.end(), r2.trace.begin(), r2.trace.end());
    return r1;
}

Tensor ensemble_output(const std::vector<const Model*>& members, const Tensor& x) {
    if (members.empty()) {
        fail("ensemble_output: need at least one member");
    }
    Tensor acc = members[0]->predict(x);
    for (std::size_t i = 1; i < members.size(); ++i) {
        const Tensor p = members[i]->predict(x);
        if (!same_shape(acc, p)) {
            fail("ensemble_output: member prediction shapes differ (" + shape_str(acc.shape) + " vs " +
                 shape_str(p.shape) + ")");
        }
        for (std::size_t k = 0; k < acc.data.size(); ++k) {
            acc.data[k] += p.data[k];
        }
    }
    if (members.size() > 1) {
        const double inv = 1.0 / static_cast<double>(members.size());
        for (double& v : acc.data) {
            v *= inv;
        }
    }
    return acc;
}

ParamStore ensemble_weight(const ParamStore& w_ft, const ParamStore& w_zero, double alpha) {
    return interpolate_stores(w_ft, w_zero, alpha);
}

} // namespace levi
