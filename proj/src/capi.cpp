#include "levi/levi.h"

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

#include "levi/app.hpp"

struct levi_report {
    std::string csv_path;
    std::string summary_path;
    std::string text;
};

namespace {

thread_local std::string g_last_error;

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (out) {
        std::memcpy(out, s.c_str(), s.size() + 1);
    }
    return out;
}

int finish_command(const levi::app::CmdResult& result, char** out_text, levi_report** out_report) {
    g_last_error = result.code == levi::app::kOk ? "" : result.text;
    if (out_text) {
        *out_text = dup_string(result.text);
    }
    if (out_report) {
        *out_report = nullptr;
        if (result.code == levi::app::kOk) {
            auto* report = new levi_report;
            report->csv_path = result.csv_path;
            report->summary_path = result.summary_path;
            report->text = result.text;
            *out_report = report;
        }
    }
    return result.code;
}

void print_run_line(const std::string& line) { std::fprintf(stderr, "%s\n", line.c_str()); }

} // namespace

extern "C" {

const char* levi_version(void) { return "1.0.0"; }

const char* levi_last_error(void) { return g_last_error.c_str(); }

void levi_string_free(char* s) { std::free(s); }

int levi_fixture(char** out_text) { return finish_command(levi::app::cmd_fixture(), out_text, nullptr); }

int levi_gradcheck(double tolerance, int instances_per_op, char** out_text) {
    const int instances = instances_per_op <= 0 ? 20 : instances_per_op;
    return finish_command(levi::app::cmd_gradcheck(tolerance, instances), out_text, nullptr);
}

int levi_run(const char* config_path, const char* out_dir, int jobs, levi_report** out) {
    if (!config_path) {
        g_last_error = "config path is null";
        return LEVI_ERR_CONFIG;
    }
    return finish_command(
        levi::app::cmd_run(config_path, out_dir ? out_dir : "", jobs, print_run_line), nullptr, out);
}

int levi_layer_sweep(const char* config_path, const char* out_dir, int jobs, levi_report** out) {
    if (!config_path) {
        g_last_error = "config path is null";
        return LEVI_ERR_CONFIG;
    }
    return finish_command(
        levi::app::cmd_layer_sweep(config_path, out_dir ? out_dir : "", jobs, print_run_line), nullptr, out);
}

int levi_reaggregate(const char* dir, levi_report** out) {
    if (!dir) {
        g_last_error = "report directory is null";
        return LEVI_ERR_CONFIG;
    }
    return finish_command(levi::app::cmd_report(dir), nullptr, out);
}

const char* levi_report_csv_path(const levi_report* report) {
    return report ? report->csv_path.c_str() : "";
}

const char* levi_report_summary_path(const levi_report* report) {
    return report ? report->summary_path.c_str() : "";
}

int levi_report_text(const levi_report* report, char** out_text) {
    if (!report || !out_text) {
        g_last_error = "null report handle";
        return LEVI_ERR_RUN;
    }
    *out_text = dup_string(report->text);
    return LEVI_OK;
}

void levi_report_free(levi_report* report) { delete report; }

} // extern "C"
