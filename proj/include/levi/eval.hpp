#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "levi/data.hpp"
#include "levi/train.hpp"

namespace levi {

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

// sqrt(sum((y - yhat)^2) / m); preds [m] or [m,1]
double rmse(const Tensor& preds, const Tensor& labels);

// 100 * (#correct / m); rank-2 preds are argmaxed per row first
double accuracy_percent(const Tensor& preds, const Tensor& labels);

// mean |y - yhat|
double l1(const Tensor& preds, const Tensor& labels);

enum class Metric { rmse, accuracy, l1 };
const char* metric_name(Metric m);
Metric metric_from_name(const std::string& name);
bool metric_higher_is_better(Metric m);
double evaluate_metric(Metric m, const Tensor& preds, const Tensor& labels);

// ---------------------------------------------------------------------------
// parameter and flop accounting
// ---------------------------------------------------------------------------

Extent count_params(const Model& model, bool trainable_only);

// Forward-pass flops derived from a recorded graph, by documented per-op
// rules (matmul [m,k]x[k,n]: 2mkn; add/mul/relu/tanh: one per output
// element; sum/mean: one per input element; mse: two per element;
// softmax_xent: 4c+2 per row; concat, embed_lookup and leaves: free).
Extent graph_flops(const Graph& g);

// Flops of one prediction pass over a zero probe input of the given shape.
// For the layer-wise composition this counts the pass producing every
// per-head prediction, so composition flops are exactly the sum of the
// backbone, task model and head passes.
Extent count_flops(const Model& model, const Shape& input_shape);

// ---------------------------------------------------------------------------
// experiment configuration (resolved values; parsing lives in config.cpp)
// ---------------------------------------------------------------------------

struct RegimeSpec {
    Regime kind = Regime::ft;
    std::string name;           // row label; defaults to the kind name
    OptimizerConfig opt;        // adam lr 1e-3 by default
    Extent steps = 2000;
    Extent batch = 0;           // 0 resolves to the split size (full batch)
    // lp_then_ft second phase
    OptimizerConfig phase2_opt;
    Extent phase2_steps = 0;
    // ens_weight: fixed alpha, or negative to select on the id split over
    // the grid 0.1..0.9
    double alpha = -1.0;
    // ens_output member kinds (ft, fs, lp, ht, task)
    std::vector<Regime> members;
    // lora
    Extent lora_rank = 2;
    std::vector<std::string> lora_targets; // empty: every block linear
    // levi
    bool use_task_model = true;
    enum class BackboneMode { frozen, ht, ft };
    BackboneMode backbone_mode = BackboneMode::frozen;
    std::vector<Extent> taps_override; // empty: use the model-level taps
    // task-only model
    Extent task_heads = 1;
};

struct ModelSpec {
    Extent width = 32;  // backbone H
    Extent blocks = 4;  // backbone B
    Extent task_hidden1 = 32;
    Extent task_hidden2 = 32;
    Extent task_output = 16; // E
    Extent head_hidden = 64; // A
    std::vector<Extent> taps;         // empty: every block
    std::vector<double> head_weights; // empty: uniform
};

struct PretrainSpec {
    OptimizerConfig opt;
    Extent steps = 2000;
    Extent batch = 0;
};

struct ExperimentConfig {
    std::string experiment_id = "experiment";
    SpuriousSpec data;
    bool export_data = false;
    ModelSpec model;
    PretrainSpec pretrain;
    std::vector<RegimeSpec> regimes;
    std::vector<std::uint64_t> seeds;
    std::vector<Metric> metrics; // defaulted from the label kind when empty
    std::string output_dir = "runs";
    std::vector<std::pair<std::string, std::string>> echo; // resolved keys
};

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

struct MetricRecord {
    std::string experiment_id;
    std::string regime;
    std::uint64_t seed = 0;
    std::string split;  // id | ood
    std::string metric; // rmse | accuracy | l1
    double value = 0.0;
};

struct AggregateStat {
    double median = 0.0;
    double mean = 0.0;
    double stddev = 0.0;
};

// regime -> split -> metric -> stat
using AggregateMap = std::map<std::string, std::map<std::string, std::map<std::string, AggregateStat>>>;

struct ExperimentReport {
    std::vector<MetricRecord> records;
    AggregateMap aggregates;
    std::string csv_path;
    std::string summary_path;
};

AggregateMap aggregate_records(const std::vector<MetricRecord>& records);

using RunLogger = std::function<void(const std::string&)>;

// Trains every (regime, seed) member, evaluates on the id and ood test
// splits, and writes report.csv plus summary.json into cfg.output_dir.
// Fully deterministic for a fixed config; members may run concurrently.
ExperimentReport run_experiment(const ExperimentConfig& cfg, int jobs = 1, const RunLogger& log = {});

// Single-tap sweep over every backbone block, using the lone configured
// levi regime as the template. Emits sweep.csv next to the usual report.
struct SweepRow {
    Extent tap = 0;
    double id_median = 0.0;
    double ood_median = 0.0;
};

struct SweepReport {
    ExperimentReport base;
    std::vector<SweepRow> rows;
    Metric metric = Metric::accuracy;
    Extent id_best_tap = 0;
    Extent ood_best_tap = 0;
    bool late_id_early_ood = false; // last tap best on id and first best on ood
    std::string sweep_csv_path;
};

SweepReport layer_sweep(const ExperimentConfig& cfg, int jobs = 1, const RunLogger& log = {});

// Re-reads every record CSV in `dir`, revalidates, recomputes aggregates and
// rewrites summary.json.
ExperimentReport reaggregate_dir(const std::string& dir);

// serialization helpers shared with the command layer
std::string records_to_csv(const std::vector<MetricRecord>& records);
std::vector<MetricRecord> records_from_csv(const std::string& text, const std::string& source_name);

} // namespace levi
