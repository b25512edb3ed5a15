#include "levi/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "levi/checkpoint.hpp"

namespace levi {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::vector<double> flatten_predictions(const Tensor& preds) {
    if (preds.rank() == 2 && preds.cols() != 1) {
        fail("metric expects scalar predictions, got " + shape_str(preds.shape));
    }
    return preds.data;
}

} // namespace

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

double rmse(const Tensor& preds, const Tensor& labels) {
    const std::vector<double> p = flatten_predictions(preds);
    if (p.empty() || p.size() != labels.data.size()) {
        fail("rmse: need equal, nonempty prediction and label lengths");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double d = labels.data[i] - p[i];
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(p.size()));
}

double accuracy_percent(const Tensor& preds, const Tensor& labels) {
    const Extent m = preds.rows();
    if (m == 0 || m != labels.numel()) {
        fail("accuracy: need equal, nonempty prediction and label lengths");
    }
    Extent correct = 0;
    for (Extent i = 0; i < m; ++i) {
        double predicted;
        if (preds.rank() == 2 && preds.cols() > 1) {
            Extent best = 0;
            for (Extent c = 1; c < preds.cols(); ++c) {
                if (preds.at(i, c) > preds.at(i, best)) {
                    best = c;
                }
            }
            predicted = static_cast<double>(best);
        } else {
            predicted = preds.rank() == 2 ? preds.at(i, 0) : preds.at(i);
        }
        if (predicted == labels.at(i)) {
            ++correct;
        }
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(m);
}

double l1(const Tensor& preds, const Tensor& labels) {
    const std::vector<double> p = flatten_predictions(preds);
    if (p.empty() || p.size() != labels.data.size()) {
        fail("l1: need equal, nonempty prediction and label lengths");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        acc += std::abs(labels.data[i] - p[i]);
    }
    return acc / static_cast<double>(p.size());
}

const char* metric_name(Metric m) {
    switch (m) {
    case Metric::rmse: return "rmse";
    case Metric::accuracy: return "accuracy";
    case Metric::l1: return "l1";
    }
    return "?";
}

Metric metric_from_name(const std::string& name) {
    if (name == "rmse") {
        return Metric::rmse;
    }
    if (name == "accuracy") {
        return Metric::accuracy;
    }
    if (name == "l1") {
        return Metric::l1;
    }
    fail("unknown metric '" + name + "'");
}

bool metric_higher_is_better(Metric m) { return m == Metric::accuracy; }

double evaluate_metric(Metric m, const Tensor& preds, const Tensor& labels) {
    switch (m) {
    case Metric::rmse: return rmse(preds, labels);
    case Metric::accuracy: return accuracy_percent(preds, labels);
    case Metric::l1: return l1(preds, labels);
    }
    fail("unknown metric");
}

// ---------------------------------------------------------------------------
// accounting
// ---------------------------------------------------------------------------

Extent count_params(const Model& model, bool trainable_only) {
    return model.store().count_elements(trainable_only);
}

Extent graph_flops(const Graph& g) {
    Extent total = 0;
    for (NodeId id = 0; id < g.node_count(); ++id) {
        const Tensor& out = g.value(id);
        switch (g.op_of(id)) {
        case Op::leaf:
        case Op::concat:
        case Op::embed_lookup:
            break;
        case Op::matmul: {
            const Tensor& a = g.value(g.inputs_of(id)[0]);
            const Extent m = a.rank() == 2 ? a.shape[0] : 1;
            const Extent k = a.rank() == 2 ? a.shape[1] : a.shape[0];
            const Extent n = out.numel() / m;
            total += 2 * m * k * n;
            break;
        }
        case Op::add:
        case Op::mul:
        case Op::relu:
        case Op::tanh_fn:
            total += out.numel();
            break;
        case Op::mean:
        case Op::sum:
            total += g.value(g.inputs_of(id)[0]).numel();
            break;
        case Op::mse:
            total += 2 * out.numel();
            break;
        case Op::softmax_xent: {
            const Tensor& logits = g.value(g.inputs_of(id)[0]);
            total += logits.rows() * (4 * logits.cols() + 2);
            break;
        }
        }
    }
    return total;
}

Extent count_flops(const Model& model, const Shape& input_shape) {
    Graph g;
    const ParamBinding b = bind_params(model.store(), g);
    const NodeId x = g.constant(Tensor::zeros(input_shape));
    model.accounting_forward(g, b, x);
    return graph_flops(g);
}

// ---------------------------------------------------------------------------
// experiment members
// ---------------------------------------------------------------------------

namespace {

struct TaskSetup {
    Extent label_dim = 1;
    LossSpec loss;
    std::vector<Metric> metrics;
};

TaskSetup task_setup(const ExperimentConfig& cfg) {
    TaskSetup s;
    if (cfg.data.label == LabelKind::binary) {
        s.label_dim = 2;
        s.loss.kind = LossSpec::Kind::softmax_xent;
        s.metrics = {Metric::accuracy};
    } else {
        s.label_dim = 1;
        s.loss.kind = LossSpec::Kind::mse;
        s.metrics = {Metric::rmse, Metric::l1};
    }
    if (!cfg.metrics.empty()) {
        s.metrics = cfg.metrics;
    }
    return s;
}

BackboneDims backbone_dims(const ExperimentConfig& cfg, Extent label_dim) {
    BackboneDims d;
    d.input = cfg.data.feature_dim();
    d.width = cfg.model.width;
    d.blocks = cfg.model.blocks;
    d.output = label_dim;
    return d;
}

TaskModelDims task_dims(const ExperimentConfig& cfg) {
    TaskModelDims d;
    d.input = cfg.data.feature_dim();
    d.hidden1 = cfg.model.task_hidden1;
    d.hidden2 = cfg.model.task_hidden2;
    d.output = cfg.model.task_output;
    return d;
}

Extent resolve_batch(Extent batch, Extent rows) { return batch <= 0 ? rows : batch; }

// Deterministic seeds: every member of a run derives its streams from the
// run seed. Member index 0 is the standalone model; output-ensemble members
// k>0 get their own init and batch streams.
std::uint64_t member_init_seed(std::uint64_t run_seed, std::size_t member_k) {
    return derive_seed(run_seed, SeedPurpose::backbone_init, member_k);
}

std::uint64_t member_batch_seed(std::uint64_t run_seed, std::size_t member_k) {
    return member_k == 0 ? run_seed : derive_seed(run_seed, SeedPurpose::member, member_k);
}

// pretrained backbone snapshots, shared across regimes of one run seed
class PretrainCache {
  public:
    PretrainCache(const ExperimentConfig& cfg, const TaskSetup& setup) : cfg_(cfg), setup_(setup) {}

    std::shared_ptr<const ParamStore> get(const SpuriousDatasetBundle& bundle, std::uint64_t run_seed,
                                          std::size_t member_k) {
        const std::uint64_t key = derive_seed(run_seed, SeedPurpose::pretrain_batch, member_k);
        {
            std::lock_guard<std::mutex> lock(mu_);
            auto it = cache_.find(key);
            if (it != cache_.end()) {
                return it->second;
            }
        }
        Backbone bb(backbone_dims(cfg_, setup_.label_dim), member_init_seed(run_seed, member_k));
        set_regime_mask(bb, Regime::ft);
        TrainConfig tc;
        tc.opt = cfg_.pretrain.opt;
        tc.steps = cfg_.pretrain.steps;
        tc.batch = resolve_batch(cfg_.pretrain.batch, bundle.pretrain.rows());
        tc.seed = key;
        tc.loss = setup_.loss;
        train(bb, bundle.pretrain, tc);
        auto snapshot = std::make_shared<const ParamStore>(bb.store());
        std::lock_guard<std::mutex> lock(mu_);
        auto [it, inserted] = cache_.emplace(key, std::move(snapshot));
        return it->second;
    }

  private:
    const ExperimentConfig& cfg_;
    TaskSetup setup_;
    std::mutex mu_;
    std::map<std::uint64_t, std::shared_ptr<const ParamStore>> cache_;
};

// a trained member: either one model or an output ensemble
struct TrainedEntity {
    std::vector<std::unique_ptr<Model>> models;

    Tensor predict(const Tensor& x) const {
        if (models.size() == 1) {
            return models[0]->predict(x);
        }
        std::vector<const Model*> members;
        for (const auto& m : models) {
            members.push_back(m.get());
        }
        return ensemble_output(members, x);
    }
};

TrainConfig finetune_config(const RegimeSpec& regime, const TaskSetup& setup, Extent rows,
                            std::uint64_t run_seed, std::size_t member_k) {
    TrainConfig tc;
    tc.opt = regime.opt;
    tc.steps = regime.steps;
    tc.batch = resolve_batch(regime.batch, rows);
    tc.seed = member_batch_seed(run_seed, member_k);
    tc.loss = setup.loss;
    return tc;
}

std::unique_ptr<Model> train_simple(const ExperimentConfig& cfg, const TaskSetup& setup, const RegimeSpec& regime,
                                    Regime kind, const SpuriousDatasetBundle& bundle, std::uint64_t run_seed,
                                    std::size_t member_k, PretrainCache& pretrained) {
    const TrainConfig tc = finetune_config(regime, setup, bundle.finetune.rows(), run_seed, member_k);

    if (kind == Regime::task) {
        auto model = std::make_unique<TaskOnlyModel>(task_dims(cfg), cfg.model.head_hidden, setup.label_dim,
                                                     static_cast<std::size_t>(regime.task_heads),
                                                     member_k == 0 ? run_seed
                                                                   : derive_seed(run_seed, SeedPurpose::member,
                                                                                 10000 + member_k));
        train(*model, bundle.finetune, tc);
        return model;
    }

    auto bb = std::make_unique<Backbone>(backbone_dims(cfg, setup.label_dim), member_init_seed(run_seed, member_k));
    switch (kind) {
    case Regime::ft:
    case Regime::ht:
    case Regime::lp: {
        bb->store() = *pretrained.get(bundle, run_seed, member_k);
        set_regime_mask(*bb, kind);
        train(*bb, bundle.finetune, tc);
        return bb;
    }
    case Regime::fs: {
        set_regime_mask(*bb, Regime::fs, member_init_seed(run_seed, member_k));
        train(*bb, bundle.finetune, tc);
        return bb;
    }
    case Regime::lp_then_ft: {
        bb->store() = *pretrained.get(bundle, run_seed, member_k);
        TwoPhaseConfig two;
        two.phase1 = tc;
        two.phase2 = tc;
        two.phase2.opt = regime.phase2_opt;
        two.phase2.steps = regime.phase2_steps;
        lp_then_ft(*bb, bundle.finetune, two);
        return bb;
    }
    case Regime::lora: {
        bb->store() = *pretrained.get(bundle, run_seed, member_k);
        std::vector<std::string> targets = regime.lora_targets;
        if (targets.empty()) {
            for (Extent k = 1; k <= cfg.model.blocks; ++k) {
                targets.push_back("backbone.block" + std::to_string(k) + ".fc1");
                targets.push_back("backbone.block" + std::to_string(k) + ".fc2");
            }
        }
        bb->apply_lora(targets, regime.lora_rank, member_init_seed(run_seed, member_k));
        set_regime_mask(*bb, Regime::lora);
        train(*bb, bundle.finetune, tc);
        return bb;
    }
    default:
        fail(std::string("regime '") + regime_name(kind) + "' is not a simple trainable member");
    }
}

LeviDims levi_dims(const ExperimentConfig& cfg, const TaskSetup& setup, const RegimeSpec& regime) {
    LeviDims d;
    d.backbone = backbone_dims(cfg, setup.label_dim);
    d.task = task_dims(cfg);
    d.head_hidden = cfg.model.head_hidden;
    d.taps = regime.taps_override.empty() ? cfg.model.taps : regime.taps_override;
    d.head_weights = regime.taps_override.empty() ? cfg.model.head_weights : std::vector<double>{};
    d.use_task_model = regime.use_task_model;
    return d;
}

std::unique_ptr<Model> train_levi(const ExperimentConfig& cfg, const TaskSetup& setup, const RegimeSpec& regime,
                                  const SpuriousDatasetBundle& bundle, std::uint64_t run_seed,
                                  PretrainCache& pretrained) {
    auto levi = std::make_unique<LeviComposition>(levi_dims(cfg, setup, regime), run_seed);
    levi->load_backbone(*pretrained.get(bundle, run_seed, 0));
    levi->freeze_backbone(true);
    if (regime.backbone_mode == RegimeSpec::BackboneMode::ft) {
        levi->store().set_frozen_prefix("backbone.", false);
    } else if (regime.backbone_mode == RegimeSpec::BackboneMode::ht) {
        const Extent blocks = cfg.model.blocks;
        const Extent upper = (blocks + 1) / 2;
        for (Extent i = blocks - upper + 1; i <= blocks; ++i) {
            levi->store().set_frozen_prefix("backbone.block" + std::to_string(i) + ".", false);
        }
    }
    const TrainConfig tc = finetune_config(regime, setup, bundle.finetune.rows(), run_seed, 0);
    train(*levi, bundle.finetune, tc);
    return levi;
}

TrainedEntity train_member(const ExperimentConfig& cfg, const TaskSetup& setup, const RegimeSpec& regime,
                           const SpuriousDatasetBundle& bundle, std::uint64_t run_seed, PretrainCache& pretrained) {
    TrainedEntity entity;
    switch (regime.kind) {
    case Regime::levi:
        entity.models.push_back(train_levi(cfg, setup, regime, bundle, run_seed, pretrained));
        return entity;
    case Regime::ens_output: {
        if (regime.members.empty()) {
            fail("ens_output regime '" + regime.name + "' has no members");
        }
        for (std::size_t k = 0; k < regime.members.size(); ++k) {
            entity.models.push_back(
                train_simple(cfg, setup, regime, regime.members[k], bundle, run_seed, k, pretrained));
        }
        return entity;
    }
    case Regime::ens_weight: {
        auto ft = train_simple(cfg, setup, regime, Regime::ft, bundle, run_seed, 0, pretrained);
        const std::shared_ptr<const ParamStore> zero = pretrained.get(bundle, run_seed, 0);
        double alpha = regime.alpha;
        if (alpha < 0.0) {
            // grid selection on the id split by the first configured metric
            const Metric metric = setup.metrics[0];
            const bool higher = metric_higher_is_better(metric);
            double best_score = 0.0;
            bool first = true;
            Backbone probe(backbone_dims(cfg, setup.label_dim), member_init_seed(run_seed, 0));
            for (int g = 1; g <= 9; ++g) {
                const double a = static_cast<double>(g) / 10.0;
                assign_values(probe.store(), interpolate_stores(ft->store(), *zero, a));
                const double score = evaluate_metric(metric, probe.predict(bundle.id_test.x), bundle.id_test.y);
                if (first || (higher ? score > best_score : score < best_score)) {
                    best_score = score;
                    alpha = a;
                    first = false;
                }
            }
        }
        auto blended = std::make_unique<Backbone>(backbone_dims(cfg, setup.label_dim), member_init_seed(run_seed, 0));
        assign_values(blended->store(), ensemble_weight(ft->store(), *zero, alpha));
        entity.models.push_back(std::move(blended));
        return entity;
    }
    default:
        entity.models.push_back(train_simple(cfg, setup, regime, regime.kind, bundle, run_seed, 0, pretrained));
        return entity;
    }
}

std::vector<MetricRecord> evaluate_member(const ExperimentConfig& cfg, const TaskSetup& setup,
                                          const RegimeSpec& regime, const TrainedEntity& entity,
                                          const SpuriousDatasetBundle& bundle, std::uint64_t run_seed) {
    std::vector<MetricRecord> records;
    const std::pair<const char*, const DataSplit*> splits[] = {
        {"id", &bundle.id_test},
        {"ood", &bundle.ood_test},
    };
    for (const auto& [split_name, split] : splits) {
        const Tensor preds = entity.predict(split->x);
        for (Metric m : setup.metrics) {
            MetricRecord rec;
            rec.experiment_id = cfg.experiment_id;
            rec.regime = regime.name.empty() ? regime_name(regime.kind) : regime.name;
            rec.seed = run_seed;
            rec.split = split_name;
            rec.metric = metric_name(m);
            rec.value = evaluate_metric(m, preds, split->y);
            records.push_back(std::move(rec));
        }
    }
    return records;
}

double median_of(std::vector<double> values) {
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

void validate_record_uniqueness(const std::vector<MetricRecord>& records) {
    std::map<std::string, int> counts;
    for (const MetricRecord& r : records) {
        const std::string key = r.regime + "|" + std::to_string(r.seed) + "|" + r.split + "|" + r.metric;
        if (++counts[key] > 1) {
            fail("duplicate metric record for (" + r.regime + ", seed " + std::to_string(r.seed) + ", " +
                 r.split + ", " + r.metric + ")");
        }
    }
}

nlohmann::ordered_json aggregates_to_json(const AggregateMap& aggregates) {
    nlohmann::ordered_json out = nlohmann::ordered_json::object();
    for (const auto& [regime, splits] : aggregates) {
        for (const auto& [split, metrics] : splits) {
            for (const auto& [metric, stat] : metrics) {
                out[regime][split][metric] = {
                    {"median", stat.median}, {"mean", stat.mean}, {"std", stat.stddev}};
            }
        }
    }
    return out;
}

std::string summary_json(const ExperimentConfig& cfg, const AggregateMap& aggregates,
                         const nlohmann::ordered_json& extra) {
    nlohmann::ordered_json j;
    j["schema_version"] = 1;
    j["experiment_id"] = cfg.experiment_id;
    nlohmann::ordered_json echo = nlohmann::ordered_json::object();
    for (const auto& [k, v] : cfg.echo) {
        echo[k] = v;
    }
    j["config"] = echo;
    j["aggregates"] = aggregates_to_json(aggregates);
    for (const auto& [k, v] : extra.items()) {
        j[k] = v;
    }
    return j.dump(2) + "\n";
}

} // namespace

AggregateMap aggregate_records(const std::vector<MetricRecord>& records) {
    std::map<std::string, std::map<std::string, std::map<std::string, std::vector<double>>>> grouped;
    for (const MetricRecord& r : records) {
        grouped[r.regime][r.split][r.metric].push_back(r.value);
    }
    AggregateMap out;
    for (auto& [regime, splits] : grouped) {
        for (auto& [split, metrics] : splits) {
            for (auto& [metric, values] : metrics) {
                AggregateStat stat;
                stat.median = median_of(values);
                double mean = 0.0;
                for (double v : values) {
                    mean += v;
                }
                mean /= static_cast<double>(values.size());
                stat.mean = mean;
                if (values.size() > 1) {
                    double ss = 0.0;
                    for (double v : values) {
                        ss += (v - mean) * (v - mean);
                    }
                    stat.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
                }
                out[regime][split][metric] = stat;
            }
        }
    }
    return out;
}

std::string records_to_csv(const std::vector<MetricRecord>& records) {
    std::ostringstream out;
    out << "experiment_id,regime,seed,split,metric,value\n";
    for (const MetricRecord& r : records) {
        out << r.experiment_id << "," << r.regime << "," << r.seed << "," << r.split << "," << r.metric << ","
            << format_g17(r.value) << "\n";
    }
    return out.str();
}

std::vector<MetricRecord> records_from_csv(const std::string& text, const std::string& source_name) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "experiment_id,regime,seed,split,metric,value") {
        fail("'" + source_name + "' is not a record csv (bad header)");
    }
    std::vector<MetricRecord> records;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> fields;
        std::size_t pos = 0;
        while (fields.size() < 5) {
            const std::size_t comma = line.find(',', pos);
            if (comma == std::string::npos) {
                break;
            }
            fields.push_back(line.substr(pos, comma - pos));
            pos = comma + 1;
        }
        fields.push_back(line.substr(pos));
        if (fields.size() != 6) {
            fail(source_name + ":" + std::to_string(line_no) + ": expected 6 fields");
        }
        MetricRecord r;
        r.experiment_id = fields[0];
        r.regime = fields[1];
        r.seed = std::stoull(fields[2]);
        r.split = fields[3];
        r.metric = fields[4];
        r.value = std::stod(fields[5]);
        records.push_back(std::move(r));
    }
    return records;
}

ExperimentReport run_experiment(const ExperimentConfig& cfg, int jobs, const RunLogger& log) {
    if (cfg.regimes.empty()) {
        fail("experiment has no regimes");
    }
    if (cfg.seeds.empty()) {
        fail("experiment has no seeds");
    }
    const TaskSetup setup = task_setup(cfg);
    PretrainCache pretrained(cfg, setup);

    struct MemberKey {
        std::size_t regime_idx;
        std::size_t seed_idx;
    };
    std::vector<MemberKey> members;
    for (std::size_t r = 0; r < cfg.regimes.size(); ++r) {
        for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
            members.push_back({r, s});
        }
    }

    // bundles per seed, generated once
    std::vector<SpuriousDatasetBundle> bundles;
    for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
        SpuriousSpec spec = cfg.data;
        spec.seed = cfg.seeds[s];
        bundles.push_back(generate_bundle(spec));
        if (cfg.export_data) {
            export_bundle(bundles.back(), cfg.output_dir + "/data/seed" + std::to_string(cfg.seeds[s]));
        }
    }

    std::vector<std::vector<MetricRecord>> results(members.size());
    std::atomic<std::size_t> next{0};
    std::mutex log_mu;
    std::mutex err_mu;
    std::string first_error;

    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= members.size()) {
                return;
            }
            const RegimeSpec& regime = cfg.regimes[members[i].regime_idx];
            const std::uint64_t seed = cfg.seeds[members[i].seed_idx];
            try {
                const SpuriousDatasetBundle& bundle = bundles[members[i].seed_idx];
                const TrainedEntity entity = train_member(cfg, setup, regime, bundle, seed, pretrained);
                results[i] = evaluate_member(cfg, setup, regime, entity, bundle, seed);
                if (log) {
                    std::ostringstream line;
                    line << "[" << cfg.experiment_id << " "
                         << (regime.name.empty() ? regime_name(regime.kind) : regime.name) << " s" << seed << "]";
                    for (const MetricRecord& r : results[i]) {
                        line << " " << r.split << " " << r.metric << "=" << format_g17(r.value);
                    }
                    std::lock_guard<std::mutex> lock(log_mu);
                    log(line.str());
                }
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (first_error.empty()) {
                    first_error = "member (" +
                                  (regime.name.empty() ? std::string(regime_name(regime.kind)) : regime.name) +
                                  ", seed " + std::to_string(seed) + ") failed: " + e.what();
                }
                return;
            }
        }
    };

    const int thread_count = std::max(1, std::min<int>(jobs, static_cast<int>(members.size())));
    if (thread_count == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < thread_count; ++t) {
            pool.emplace_back(worker);
        }
        for (std::thread& t : pool) {
            t.join();
        }
    }
    if (!first_error.empty()) {
        fail(first_error);
    }

    ExperimentReport report;
    for (const std::vector<MetricRecord>& r : results) {
        report.records.insert(report.records.end(), r.begin(), r.end());
    }
    validate_record_uniqueness(report.records);
    report.aggregates = aggregate_records(report.records);

    std::filesystem::create_directories(cfg.output_dir);
    report.csv_path = cfg.output_dir + "/report.csv";
    report.summary_path = cfg.output_dir + "/summary.json";
    atomic_write_file(report.csv_path, records_to_csv(report.records));
    atomic_write_file(report.summary_path,
                      summary_json(cfg, report.aggregates, nlohmann::ordered_json::object()));
    return report;
}

SweepReport layer_sweep(const ExperimentConfig& cfg, int jobs, const RunLogger& log) {
    if (cfg.regimes.size() != 1 || cfg.regimes[0].kind != Regime::levi) {
        fail("layer sweep needs exactly one configured regime of kind levi");
    }
    if (cfg.model.blocks < 1) {
        fail("layer sweep needs a backbone with at least one block");
    }

    // one single-tap composition per block, sharing one pretraining cache
    ExperimentConfig sweep_cfg = cfg;
    sweep_cfg.regimes.clear();
    for (Extent tap = 1; tap <= cfg.model.blocks; ++tap) {
        RegimeSpec r = cfg.regimes[0];
        r.name = "tap" + std::to_string(tap);
        r.taps_override = {tap};
        sweep_cfg.regimes.push_back(std::move(r));
    }

    const TaskSetup setup = task_setup(cfg);
    const Metric metric = setup.metrics[0];

    SweepReport sweep;
    sweep.metric = metric;
    sweep.base = run_experiment(sweep_cfg, jobs, log);

    const std::string mname = metric_name(metric);
    for (Extent tap = 1; tap <= cfg.model.blocks; ++tap) {
        SweepRow row;
        row.tap = tap;
        const auto& agg = sweep.base.aggregates.at("tap" + std::to_string(tap));
        row.id_median = agg.at("id").at(mname).median;
        row.ood_median = agg.at("ood").at(mname).median;
        sweep.rows.push_back(row);
    }

    const bool higher = metric_higher_is_better(metric);
    auto better = [&](double a, double b) { return higher ? a > b : a < b; };
    sweep.id_best_tap = sweep.rows[0].tap;
    sweep.ood_best_tap = sweep.rows[0].tap;
    for (const SweepRow& row : sweep.rows) {
        if (better(row.id_median, sweep.rows[static_cast<std::size_t>(sweep.id_best_tap - 1)].id_median)) {
            sweep.id_best_tap = row.tap;
        }
        if (better(row.ood_median, sweep.rows[static_cast<std::size_t>(sweep.ood_best_tap - 1)].ood_median)) {
            sweep.ood_best_tap = row.tap;
        }
    }
    sweep.late_id_early_ood = sweep.id_best_tap == cfg.model.blocks && sweep.ood_best_tap == 1;

    sweep.sweep_csv_path = cfg.output_dir + "/sweep.csv";

    std::ostringstream sweep_csv;
    sweep_csv << "tap,id_" << mname << "_median,ood_" << mname << "_median\n";
    for (const SweepRow& row : sweep.rows) {
        sweep_csv << row.tap << "," << format_g17(row.id_median) << "," << format_g17(row.ood_median) << "\n";
    }
    atomic_write_file(sweep.sweep_csv_path, sweep_csv.str());

    nlohmann::ordered_json extra;
    extra["sweep"] = {{"metric", mname},
                      {"id_best_tap", sweep.id_best_tap},
                      {"ood_best_tap", sweep.ood_best_tap},
                      {"late_id_early_ood", sweep.late_id_early_ood}};
    atomic_write_file(sweep.base.summary_path, summary_json(cfg, sweep.base.aggregates, extra));
    return sweep;
}

ExperimentReport reaggregate_dir(const std::string& dir) {
    std::vector<std::string> csvs;
    if (!std::filesystem::is_directory(dir)) {
        fail("'" + dir + "' is not a directory");
    }
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".csv") {
            std::ifstream in(entry.path());
            std::string header;
            std::getline(in, header);
            if (header == "experiment_id,regime,seed,split,metric,value") {
                csvs.push_back(entry.path().string());
            }
        }
    }
    if (csvs.empty()) {
        fail("no record csv files found in '" + dir + "'");
    }
    std::sort(csvs.begin(), csvs.end());

    ExperimentReport report;
    for (const std::string& path : csvs) {
        std::ifstream in(path);
        std::stringstream buf;
        buf << in.rdbuf();
        const std::vector<MetricRecord> records = records_from_csv(buf.str(), path);
        report.records.insert(report.records.end(), records.begin(), records.end());
    }
    validate_record_uniqueness(report.records);
    report.aggregates = aggregate_records(report.records);

    ExperimentConfig echo_cfg;
    echo_cfg.experiment_id = report.records.empty() ? "unknown" : report.records[0].experiment_id;
    echo_cfg.echo = {{"source", "reaggregated"}};
    report.summary_path = dir + "/summary.json";
    atomic_write_file(report.summary_path,
                      summary_json(echo_cfg, report.aggregates, nlohmann::ordered_json::object()));
    return report;
}

} // namespace levi
