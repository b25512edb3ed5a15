#include "levi/app.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>

#include "levi/checkpoint.hpp"
#include "levi/data.hpp"
#include "levi/tensor.hpp"

namespace levi::app {

namespace {

// exact-rational rendering for the fixture table (all values are thirds,
// quarters or halves by construction)
std::string fixture_value(double v) {
    for (int den : {1, 2, 3, 4}) {
        const double scaled = v * den;
        if (std::abs(scaled - std::round(scaled)) < 1e-12) {
            const long num = static_cast<long>(std::round(scaled));
            if (den == 1) {
                return std::to_string(num);
            }
            return std::to_string(num) + "/" + std::to_string(den);
        }
    }
    return format_g17(v);
}

std::string fixture_point(const LinearFixture::Vec5& x) {
    std::string out = "[";
    for (std::size_t i = 0; i < 5; ++i) {
        out += (i ? ", " : "") + fixture_value(x[i]);
    }
    return out + "]";
}

std::string aggregates_text(const AggregateMap& aggregates) {
    std::ostringstream out;
    for (const auto& [regime, splits] : aggregates) {
        for (const auto& [split, metrics] : splits) {
            for (const auto& [metric, stat] : metrics) {
                char line[160];
                std::snprintf(line, sizeof(line), "  %-14s %-4s %-9s median=%-12.6g mean=%-12.6g std=%.6g",
                              regime.c_str(), split.c_str(), metric.c_str(), stat.median, stat.mean,
                              stat.stddev);
                out << line << "\n";
            }
        }
    }
    return out.str();
}

CmdResult classify_failure(const std::exception& e) {
    CmdResult r;
    r.code = dynamic_cast<const ConfigError*>(&e) ? kConfigError : kRunError;
    r.text = std::string("error: ") + e.what() + "\n";
    return r;
}

} // namespace

std::string resolve_output_dir(const std::string& config_dir, const std::string& override_dir) {
    if (!override_dir.empty()) {
        return override_dir;
    }
    if (const char* env = std::getenv("LEVI_OUT_DIR"); env && *env) {
        return env;
    }
    return config_dir;
}

CmdResult cmd_fixture() {
    CmdResult result;
    const LinearFixture fx = linear_fixture();
    const FixtureTable table = fixture_table(fx);

    std::ostringstream out;
    out << "linear fixture: 4 test points x 3 models\n";
    out << "optimal weights " << fixture_point(fx.w_true) << " predict every point exactly\n\n";
    char line[160];
    std::snprintf(line, sizeof(line), "%-28s %-6s %-10s %-8s %s\n", "x_test", "y", "model", "yhat", "l1");
    out << line;
    for (const FixtureRow& row : table.rows) {
        const auto& point = fx.test_points[static_cast<std::size_t>(row.test_point - 1)];
        std::snprintf(line, sizeof(line), "%-28s %-6s %-10s %-8s %s\n",
                      row.model == "pretrain" ? fixture_point(point.first).c_str() : "",
                      row.model == "pretrain" ? fixture_value(row.label).c_str() : "", row.model.c_str(),
                      fixture_value(row.prediction).c_str(), fixture_value(row.l1).c_str());
        out << line;
    }
    out << "\nmean l1: pretrain " << fixture_value(table.mean_l1_pretrain) << ", scratch "
        << fixture_value(table.mean_l1_scratch) << ", finetune " << fixture_value(table.mean_l1_finetune)
        << "\n";

    const FixtureCheck check = check_fixture_table(table);
    if (check.pass) {
        out << "verdict: pass (every value exact within 1e-12; fine-tuned model strictly worst)\n";
        result.code = kOk;
    } else {
        out << "verdict: FAIL at " << check.first_mismatch << "\n";
        result.code = kRunError;
    }
    result.text = out.str();
    return result;
}

CmdResult cmd_gradcheck(double tolerance, int instances_per_op, std::uint64_t seed) {
    CmdResult result;
    try {
        const GradSuiteReport report = gradcheck_suite(instances_per_op, tolerance, seed);
        std::ostringstream out;
        out << "gradient audit: autodiff vs central finite differences, " << instances_per_op
            << " random instances per op, tolerance " << tolerance << "\n";
        for (const OpGradStat& stat : report.ops) {
            char line[120];
            std::snprintf(line, sizeof(line), "  %-13s max_rel_err %-12.3e %s\n", op_name(stat.op),
                          stat.max_rel_err, stat.pass ? "pass" : "FAIL");
            out << line;
        }
        out << (report.pass ? "verdict: pass\n" : "verdict: FAIL\n");
        result.text = out.str();
        result.code = report.pass ? kOk : kRunError;
    } catch (const std::exception& e) {
        return classify_failure(e);
    }
    return result;
}

CmdResult cmd_run(const std::string& config_path, const std::string& out_dir_override, int jobs,
                  const RunLogger& log) {
    CmdResult result;
    try {
        ExperimentConfig cfg = load_experiment_config(config_path);
        cfg.output_dir = resolve_output_dir(cfg.output_dir, out_dir_override);
        const ExperimentReport report = run_experiment(cfg, jobs, log);
        std::ostringstream out;
        out << "experiment '" << cfg.experiment_id << "': " << report.records.size() << " records\n";
        out << aggregates_text(report.aggregates);
        out << "report: " << report.csv_path << "\nsummary: " << report.summary_path << "\n";
        result.text = out.str();
        result.csv_path = report.csv_path;
        result.summary_path = report.summary_path;
    } catch (const std::exception& e) {
        return classify_failure(e);
    }
    return result;
}

CmdResult cmd_layer_sweep(const std::string& config_path, const std::string& out_dir_override, int jobs,
                          const RunLogger& log) {
    CmdResult result;
    try {
        ExperimentConfig cfg = load_experiment_config(config_path);
        cfg.output_dir = resolve_output_dir(cfg.output_dir, out_dir_override);
        const SweepReport sweep = layer_sweep(cfg, jobs, log);
        std::ostringstream out;
        out << "layer sweep over " << sweep.rows.size() << " taps (" << metric_name(sweep.metric) << ")\n";
        for (const SweepRow& row : sweep.rows) {
            char line[120];
            std::snprintf(line, sizeof(line), "  tap %-3lld id=%-12.6g ood=%.6g\n",
                          static_cast<long long>(row.tap), row.id_median, row.ood_median);
            out << line;
        }
        out << "id_best_tap: " << sweep.id_best_tap << "\nood_best_tap: " << sweep.ood_best_tap << "\n";
        out << "late_id_early_ood: " << (sweep.late_id_early_ood ? "true" : "false") << "\n";
        out << "sweep: " << sweep.sweep_csv_path << "\nreport: " << sweep.base.csv_path << "\nsummary: "
            << sweep.base.summary_path << "\n";
        result.text = out.str();
        result.csv_path = sweep.base.csv_path;
        result.summary_path = sweep.base.summary_path;
    } catch (const std::exception& e) {
        return classify_failure(e);
    }
    return result;
}

CmdResult cmd_report(const std::string& dir) {
    CmdResult result;
    try {
        const ExperimentReport report = reaggregate_dir(dir);
        std::ostringstream out;
        out << "re-aggregated " << report.records.size() << " records from " << dir << "\n";
        out << aggregates_text(report.aggregates);
        out << "summary: " << report.summary_path << "\n";
        result.text = out.str();
        result.summary_path = report.summary_path;
    } catch (const std::exception& e) {
        return classify_failure(e);
    }
    return result;
}

} // namespace levi::app
