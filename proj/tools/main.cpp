#include "d2dfl/harness.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>

namespace {

int emit(const std::vector<d2dfl::ResultRow>& rows, const std::string& out) {
    if (out.empty() || out == "-") {
        d2dfl::write_csv(std::cout, rows);
        return 0;
    }
    std::ofstream f(out, std::ios::binary);
    if (!f) {
        std::cerr << "cannot write " << out << '\n';
        return 1;
    }
    d2dfl::write_csv(f, rows);
    return 0;
}

int run_config(d2dfl::ExperimentConfig cfg, std::optional<std::uint64_t> seed, std::string out, int jobs) {
    if (seed) cfg.seeds = {*seed};
    if (out.empty()) out = cfg.output;
    const auto res = d2dfl::run_pipeline(cfg, jobs);
    if (int rc = emit(res.rows, out); rc != 0) return rc;
    if (res.failed_cells > 0) {
        std::cerr << res.failed_cells << " cell(s) failed; see error rows\n";
        return 2;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"D2D data-exchange graph discovery and federated learning simulator"};
    app.require_subcommand(1);

    std::optional<std::uint64_t> seed;
    std::string out;
    int jobs = 1;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--seed", seed, "run only this seed");
        sub->add_option("--out", out, "output path ('-' for stdout)");
        sub->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
    };

    std::string config_path;
    auto* run = app.add_subcommand("run", "run an experiment config");
    run->add_option("config", config_path, "JSON config")->required();
    common(run);

    std::string name;
    bool print_only = false;
    auto* scen = app.add_subcommand("scenario", "run a named scenario");
    scen->add_option("name", name, "scenario name")->required();
    scen->add_flag("--print", print_only, "print the scenario config instead of running it");
    common(scen);

    std::string csv_path;
    double threshold = 0.7;
    auto* summ = app.add_subcommand("summarize", "aggregate a results CSV");
    summ->add_option("csv", csv_path, "results CSV")->required();
    summ->add_option("--threshold", threshold, "metric threshold for rounds/energy-to-threshold");
    summ->add_option("--out", out, "output path ('-' for stdout)");

    auto* orc = app.add_subcommand("oracle", "exhaustive optimum for a small supervised config");
    orc->add_option("config", config_path, "JSON config")->required();
    common(orc);

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return run_config(d2dfl::load_config(config_path), seed, out, jobs);
        if (scen->parsed()) {
            const auto cfg = d2dfl::scenario(name);
            if (print_only) {
                std::cout << cfg.raw.dump(2) << '\n';
                return 0;
            }
            return run_config(cfg, seed, out.empty() ? name + ".csv" : out, jobs);
        }
        if (summ->parsed()) {
            std::ifstream in(csv_path, std::ios::binary);
            if (!in) {
                std::cerr << "cannot open " << csv_path << '\n';
                return 1;
            }
            const auto rows = d2dfl::read_csv(in);
            if (rows.empty()) {
                std::cerr << "no rows in " << csv_path << '\n';
                return 1;
            }
            const auto table = d2dfl::summarize(rows, threshold);
            if (out.empty() || out == "-") {
                d2dfl::write_summary(std::cout, table);
            } else {
                std::ofstream f(out, std::ios::binary);
                d2dfl::write_summary(f, table);
            }
            return 0;
        }
        if (orc->parsed()) {
            auto cfg = d2dfl::load_config(config_path);
            if (seed) cfg.seeds = {*seed};
            return emit(d2dfl::run_oracle(cfg), out.empty() ? "-" : out);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
