// Command-line front end. Talks to the core exclusively through the shared
// library's C interface.

#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "levi/levi.h"

namespace {

void print_text(char* text) {
    if (text) {
        std::fputs(text, stdout);
        levi_string_free(text);
    }
}

int print_report(int code, levi_report* report) {
    if (report) {
        char* text = nullptr;
        if (levi_report_text(report, &text) == LEVI_OK) {
            print_text(text);
        }
        levi_report_free(report);
    } else if (code != LEVI_OK) {
        std::fprintf(stderr, "%s", levi_last_error());
    }
    return code;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"levi: layer-wise ensembling laboratory"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(levi_version()));

    auto* fixture = app.add_subcommand("fixture", "print and verify the closed-form linear fixture table");

    std::string run_config;
    std::string run_out;
    int jobs = 1;
    auto* run = app.add_subcommand("run", "run an experiment from a config file");
    run->add_option("config", run_config, "config file path")->required();
    run->add_option("--out", run_out, "output directory (overrides LEVI_OUT_DIR and the config)");
    run->add_option("--jobs", jobs, "concurrent (regime, seed) members")->check(CLI::PositiveNumber);

    std::string sweep_config;
    std::string sweep_out;
    int sweep_jobs = 1;
    auto* sweep = app.add_subcommand("layer-sweep", "per-tap sweep of single-head compositions");
    sweep->add_option("config", sweep_config, "config file path")->required();
    sweep->add_option("--out", sweep_out, "output directory (overrides LEVI_OUT_DIR and the config)");
    sweep->add_option("--jobs", sweep_jobs, "concurrent (regime, seed) members")->check(CLI::PositiveNumber);

    double tolerance = 1e-4;
    int instances = 20;
    auto* gradcheck = app.add_subcommand("gradcheck", "audit autodiff gradients against finite differences");
    gradcheck->add_option("--tolerance", tolerance, "max relative error")->check(CLI::PositiveNumber);
    gradcheck->add_option("--instances", instances, "random instances per op")->check(CLI::PositiveNumber);

    std::string report_dir;
    auto* report = app.add_subcommand("report", "re-aggregate record csv files in a directory");
    report->add_option("dir", report_dir, "directory holding record csv files")->required();

    CLI11_PARSE(app, argc, argv);

    if (fixture->parsed()) {
        char* text = nullptr;
        const int code = levi_fixture(&text);
        print_text(text);
        return code;
    }
    if (run->parsed()) {
        levi_report* handle = nullptr;
        const int code = levi_run(run_config.c_str(), run_out.empty() ? nullptr : run_out.c_str(), jobs, &handle);
        return print_report(code, handle);
    }
    if (sweep->parsed()) {
        levi_report* handle = nullptr;
        const int code = levi_layer_sweep(sweep_config.c_str(), sweep_out.empty() ? nullptr : sweep_out.c_str(),
                                          sweep_jobs, &handle);
        return print_report(code, handle);
    }
    if (gradcheck->parsed()) {
        char* text = nullptr;
        const int code = levi_gradcheck(tolerance, instances, &text);
        print_text(text);
        return code;
    }
    if (report->parsed()) {
        levi_report* handle = nullptr;
        const int code = levi_reaggregate(report_dir.c_str(), &handle);
        return print_report(code, handle);
    }
    return 0;
}
