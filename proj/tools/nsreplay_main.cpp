#include "nsreplay/harness.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

namespace {

namespace fs = std::filesystem;
using nsreplay::binio::write_file;

nsreplay::ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config: " + path);
    nlohmann::json j;
    in >> j;
    return nsreplay::config_from_json(j);
}

/// Precedence: CLI flag, then environment variable, then config file.
void apply_overrides(nsreplay::ExperimentConfig& config, const std::string& out_flag,
                     std::optional<std::uint64_t> seed_flag) {
    if (const char* env = std::getenv("NSREPLAY_OUT"); env && *env) config.output_dir = env;
    if (const char* env = std::getenv("NSREPLAY_SEED"); env && *env)
        config.seed = std::strtoull(env, nullptr, 10);
    if (!out_flag.empty()) config.output_dir = out_flag;
    if (seed_flag) config.seed = *seed_flag;
}

int cmd_gen_data(const std::string& config_path, const std::string& out_flag,
                 const std::string& format) {
    nsreplay::ExperimentConfig config = load_config(config_path);
    apply_overrides(config, out_flag, std::nullopt);
    if (config.output_dir.empty()) throw std::runtime_error("gen-data: no output directory");

    const auto stages = nsreplay::generate(config.task);
    const fs::path dir = config.output_dir;
    fs::create_directories(dir);
    if (format == "csv" || format == "both")
        write_file(dir / "dataset.csv",
                   nsreplay::to_csv(stages, config.task.input_dim, config.task.regression_dim));
    if (format == "bin" || format == "both")
        write_file(dir / "dataset.bin",
                   nsreplay::serialize(stages, config.task.input_dim, config.task.regression_dim));

    std::cout << "stages: " << stages.size() << "\n"
              << "checksum: " << std::hex
              << nsreplay::dataset_checksum(stages, config.task.input_dim,
                                            config.task.regression_dim)
              << std::dec << "\n";
    return 0;
}

int cmd_run(const std::string& config_path, const std::string& out_flag,
            std::optional<std::uint64_t> seed_flag, const std::string& method_flag) {
    nsreplay::ExperimentConfig config = load_config(config_path);
    apply_overrides(config, out_flag, seed_flag);
    if (!method_flag.empty()) config.method = nsreplay::parse_method(method_flag);

    const nsreplay::MetricsRecord record = nsreplay::run_experiment(config);
    if (!record.validate()) {
        std::cerr << "metrics failed validation\n";
        return 1;
    }
    std::cout << "method: " << record.method << "\n"
              << "avg_old_accuracy: " << record.avg_old_accuracy << "\n"
              << "avg_all_accuracy: " << record.avg_all_accuracy << "\n"
              << "base_new_avg: " << record.base_new_avg << "\n";
    if (!config.output_dir.empty()) std::cout << "outputs: " << config.output_dir << "\n";
    return 0;
}

int cmd_anatomy(const std::string& config_path, const std::string& run_dir,
                const std::string& out_flag) {
    nsreplay::ExperimentConfig config = load_config(config_path);
    const auto stages = nsreplay::generate(config.task);
    std::vector<std::vector<nsreplay::Sample>> test_splits;
    for (const auto& s : stages) test_splits.push_back(s.test);

    const auto checkpoints =
        nsreplay::load_checkpoints(run_dir, static_cast<int>(stages.size()));
    const auto rows = nsreplay::anatomy_report(checkpoints, test_splits);

    const fs::path dir = out_flag.empty() ? fs::path(run_dir) : fs::path(out_flag);
    write_file(dir / "anatomy.csv", nsreplay::to_csv(rows));
    write_file(dir / "anatomy.json", nsreplay::to_json(rows).dump(2) + "\n");
    std::cout << "anatomy rows: " << rows.size() << " -> " << (dir / "anatomy.csv").string()
              << "\n";
    return 0;
}

int cmd_spectra(const std::string& input, const std::string& output) {
    const auto accumulators =
        nsreplay::deserialize_covariance(nsreplay::binio::read_file(input));
    std::ostringstream out;
    out << "layer,index,lambda\n";
    for (const auto& acc : accumulators) {
        Eigen::SelfAdjointEigenSolver<nsreplay::Matrix> solver{acc.second_moment()};
        if (solver.info() != Eigen::Success)
            throw nsreplay::numerical_error("spectra: eigendecomposition failed for layer '" +
                                            acc.label + "'");
        for (nsreplay::Index i = 0; i < acc.dim; ++i) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.17g", solver.eigenvalues()[acc.dim - 1 - i]);
            out << acc.label << "," << i << "," << buf << "\n";
        }
    }
    write_file(fs::path(output), out.str());
    std::cout << "spectra for " << accumulators.size() << " layers -> " << output << "\n";
    return 0;
}

int cmd_emit_plots(const std::string& metrics_path, const std::string& out_dir) {
    std::ifstream in(metrics_path);
    if (!in) throw std::runtime_error("cannot open metrics: " + metrics_path);
    nlohmann::json j;
    in >> j;
    const nsreplay::MetricsRecord record = nsreplay::metrics_from_json(j);

    const fs::path dir = out_dir;
    fs::create_directories(dir);

    auto fmt = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };

    // Long-format curves: one line per eval stage as the model advances.
    std::ostringstream acc;
    acc << "eval_stage,model_stage,accuracy\n";
    std::ostringstream mse;
    mse << "eval_stage,model_stage,mse\n";
    for (int i = 0; i < record.eval_stages; ++i)
        for (int t = 0; t < record.model_stages; ++t) {
            acc << i << "," << t << "," << fmt(record.accuracy(t, i)) << "\n";
            mse << i << "," << t << "," << fmt(record.mse(t, i)) << "\n";
        }
    write_file(dir / "plot_accuracy.csv", acc.str());
    write_file(dir / "plot_mse.csv", mse.str());

    std::ostringstream forg;
    forg << "eval_stage,forgetting\n";
    for (std::size_t i = 0; i < record.forgetting.size(); ++i)
        forg << i << "," << fmt(record.forgetting[i]) << "\n";
    write_file(dir / "plot_forgetting.csv", forg.str());

    std::cout << "plot files -> " << dir.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Continual-learning toolkit: prototype replay with null-space gradient "
                 "projection on a toy incremental learner"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_flag;
    std::string method_flag;
    std::string format = "both";
    std::string run_dir;
    std::string input;
    std::string output;
    std::optional<std::uint64_t> seed_flag;

    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic staged dataset");
    gen->add_option("--config", config_path, "Experiment config (JSON)")->required();
    gen->add_option("--out", out_flag, "Output directory (overrides config/env)");
    gen->add_option("--format", format, "csv, bin, or both")
        ->check(CLI::IsMember({"csv", "bin", "both"}));

    auto* run = app.add_subcommand("run", "Run one incremental experiment");
    run->add_option("--config", config_path, "Experiment config (JSON)")->required();
    run->add_option("--out", out_flag, "Output directory (overrides config/env)");
    run->add_option("--seed", seed_flag, "Experiment seed (overrides config/env)");
    run->add_option("--method", method_flag,
                    "finetune|nsgp|repre_coarse|repre_fine|nsgp_repre|joint");

    auto* anatomy = app.add_subcommand("anatomy", "Component-wise forgetting report");
    anatomy->add_option("--config", config_path, "Experiment config (JSON)")->required();
    anatomy->add_option("--run", run_dir, "Run directory with stage checkpoints")->required();
    anatomy->add_option("--out", out_flag, "Output directory (default: run directory)");

    auto* spectra = app.add_subcommand("spectra", "Dump singular-value spectra as CSV");
    spectra->add_option("--input", input, "covariance.bin from a run")->required();
    spectra->add_option("--out", output, "Output CSV path")->required();

    auto* plots = app.add_subcommand("emit-plots", "Plot-ready CSVs from a metrics file");
    plots->add_option("--metrics", input, "metrics.json from a run")->required();
    plots->add_option("--out", output, "Output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(config_path, out_flag, format);
        if (run->parsed()) return cmd_run(config_path, out_flag, seed_flag, method_flag);
        if (anatomy->parsed()) return cmd_anatomy(config_path, run_dir, out_flag);
        if (spectra->parsed()) return cmd_spectra(input, output);
        if (plots->parsed()) return cmd_emit_plots(input, output);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
