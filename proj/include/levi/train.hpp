#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "levi/loss.hpp"
#include "levi/nn.hpp"

namespace levi {

// one dataset split: features [m,d], labels [m]
struct DataSplit {
    Tensor x;
    Tensor y;
    Extent rows() const { return x.rows(); }
};

enum class Regime {
    levi,
    ft,
    ht,
    lp,
    fs,
    lp_then_ft,
    ens_output,
    ens_weight,
    lora,
    task, // task model alone (no backbone)
};

const char* regime_name(Regime r);
Regime regime_from_name(const std::string& name);

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adam;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainConfig {
    OptimizerConfig opt;
    Extent steps = 2000;
    Extent batch = 2000; // clamped to the split size; >= rows means full batch
    std::uint64_t seed = 0;
    LossSpec loss;
};

struct TrainResult {
    std::vector<double> trace; // per-step loss, length == steps
};

// Deterministic minibatch training of any model: same (seed, initial
// parameters, config, data) reproduces the same trace and final parameters.
// Frozen parameters are never touched. A non-finite loss aborts with the
// step number in the diagnostic.
TrainResult train(Model& model, const DataSplit& data, const TrainConfig& cfg);

// Freeze-flag recipes on the backbone:
//   ft         everything trainable
//   fs         everything trainable, re-initialized from `seed`
//   lp         only the final head trainable
//   ht         the output-nearest ceil(B/2) blocks plus final head trainable
//   lora       only adapter matrices trainable (adapters must be attached)
void set_regime_mask(Backbone& model, Regime regime, std::uint64_t seed = 0);

struct TwoPhaseConfig {
    TrainConfig phase1; // linear probing
    TrainConfig phase2; // full fine-tuning
};

// linear probe first, then unfreeze everything and continue; the returned
// trace concatenates both phases
TrainResult lp_then_ft(Backbone& model, const DataSplit& data, const TwoPhaseConfig& cfg);

// arithmetic mean of member predictions
Tensor ensemble_output(const std::vector<const Model*>& members, const Tensor& x);

// elementwise alpha*w_ft + (1-alpha)*w_zero (endpoints bit-exact)
ParamStore ensemble_weight(const ParamStore& w_ft, const ParamStore& w_zero, double alpha);

} // namespace levi
