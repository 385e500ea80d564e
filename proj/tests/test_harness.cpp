#include "nsreplay/harness.hpp"

#include "oracle_helpers.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

using namespace nsreplay;

namespace {

namespace fs = std::filesystem;

/// Two stages x two classes, small enough for fast harness tests.
ExperimentConfig tiny_config(Method method, std::uint64_t seed = 7) {
    ExperimentConfig config;
    config.task.input_dim = 6;
    config.task.classes_per_stage = {2, 2};
    config.task.train_per_class = 40;
    config.task.test_per_class = 15;
    config.task.seed = 3;
    config.method = method;
    config.hyper.epochs = 8;
    config.hyper.batch = 16;
    config.hyper.trunk = {8, 6};
    config.hyper.prototype_budget = 4;
    config.seed = seed;
    return config;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name)
        : path(fs::temp_directory_path() / ("nsreplay_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("metrics emit has a fixed schema and identical csv/json values", "[harness]") {
    MetricsRecord record;
    record.method = "finetune";
    record.model_stages = 2;
    record.eval_stages = 2;
    record.cells = {{0, 0, 0.9, 0.125}, {0, 1, 0.25, 0.5}, {1, 0, 0.5, 0.25}, {1, 1, 0.875, 0.0625}};
    record.finalize();
    REQUIRE(record.validate());

    const std::string csv = to_csv(record);
    REQUIRE(csv.rfind("model_stage,eval_stage,accuracy,mse\n", 0) == 0);

    const nlohmann::json j = to_json(record);
    std::size_t k = 0;
    for (const auto& cell : j.at("cells")) {
        REQUIRE(cell.at("accuracy").get<double>() == record.cells[k].accuracy);
        REQUIRE(cell.at("mse").get<double>() == record.cells[k].mse);
        ++k;
    }
    const MetricsRecord back = metrics_from_json(j);
    REQUIRE(to_csv(back) == csv);

    REQUIRE(record.avg_old_accuracy == 0.5);
    REQUIRE(record.forgetting.size() == 2);
    REQUIRE(record.forgetting[0] == 0.9 - 0.5);
}

TEST_CASE("emit re-writes byte-identical files", "[harness]") {
    TempDir dir("emit");
    MetricsRecord record;
    record.method = "nsgp";
    record.model_stages = 1;
    record.eval_stages = 1;
    record.cells = {{0, 0, 1.0 / 3.0, 0.7071067811865476}};
    record.finalize();

    emit(record, EmitFormat::csv, dir.path / "m.csv");
    const std::string first = slurp(dir.path / "m.csv");
    emit(record, EmitFormat::csv, dir.path / "m.csv");
    REQUIRE(slurp(dir.path / "m.csv") == first);

    emit(record, EmitFormat::json, dir.path / "m.json");
    const std::string jfirst = slurp(dir.path / "m.json");
    emit(record, EmitFormat::json, dir.path / "m.json");
    REQUIRE(slurp(dir.path / "m.json") == jfirst);
}

TEST_CASE("experiment config json round-trips", "[harness]") {
    ExperimentConfig config = tiny_config(Method::nsgp_repre);
    config.hyper.nullity = NullityPolicy::exact_zero(1e-9, 1);
    config.hyper.normalized_groups = {LayerGroup::backbone, LayerGroup::neck};
    config.hyper.fine_strategy = FineStrategy::kmeans;
    config.output_dir = "somewhere";

    const ExperimentConfig back = config_from_json(to_json(config));
    REQUIRE(to_json(back) == to_json(config));
    REQUIRE(back.method == Method::nsgp_repre);
    REQUIRE(back.hyper.nullity.mode == NullityPolicy::Mode::exact_zero);
    REQUIRE(back.hyper.nullity.min_nullity == 1);
}

TEST_CASE("method names parse and reject unknowns", "[harness]") {
    REQUIRE(parse_method("finetune") == Method::finetune);
    REQUIRE(parse_method("nsgp_repre") == Method::nsgp_repre);
    REQUIRE_THROWS_AS(parse_method("magic"), invalid_input);
}

TEST_CASE("a tiny experiment runs, validates, and writes outputs", "[harness]") {
    TempDir dir("run");
    ExperimentConfig config = tiny_config(Method::nsgp_repre);
    config.output_dir = dir.path.string();

    const MetricsRecord record = run_experiment(config);
    REQUIRE(record.validate());
    REQUIRE(record.model_stages == 2);
    REQUIRE(record.eval_stages == 2);
    REQUIRE(record.cells.size() == 4);

    REQUIRE(fs::exists(dir.path / "metrics.csv"));
    REQUIRE(fs::exists(dir.path / "metrics.json"));
    REQUIRE(fs::exists(dir.path / "stage_0.model"));
    REQUIRE(fs::exists(dir.path / "stage_1.model"));
    REQUIRE(fs::exists(dir.path / "covariance.bin"));
    REQUIRE(fs::exists(dir.path / "store.bin"));

    // Stage-0 accuracy right after stage 0 should be high on this easy task.
    REQUIRE(record.accuracy(0, 0) > 0.9);
}

TEST_CASE("experiment reruns are byte-identical", "[harness]") {
    TempDir dir_a("det_a");
    TempDir dir_b("det_b");
    ExperimentConfig config = tiny_config(Method::repre_fine, 99);

    config.output_dir = dir_a.path.string();
    run_experiment(config);
    config.output_dir = dir_b.path.string();
    run_experiment(config);

    REQUIRE(slurp(dir_a.path / "metrics.csv") == slurp(dir_b.path / "metrics.csv"));
    REQUIRE(slurp(dir_a.path / "metrics.json") == slurp(dir_b.path / "metrics.json"));
    REQUIRE(slurp(dir_a.path / "store.bin") == slurp(dir_b.path / "store.bin"));
}

TEST_CASE("joint method trains one pooled stage", "[harness]") {
    const MetricsRecord record = run_experiment(tiny_config(Method::joint));
    REQUIRE(record.model_stages == 1);
    REQUIRE(record.eval_stages == 2);
    REQUIRE(record.accuracy(0, 0) > 0.9);
    REQUIRE(record.accuracy(0, 1) > 0.9);
}

TEST_CASE("anatomy diagonal coincides with plain metrics", "[harness]") {
    TempDir dir("anatomy");
    ExperimentConfig config = tiny_config(Method::finetune);
    config.output_dir = dir.path.string();
    const MetricsRecord record = run_experiment(config);

    const auto stages = generate(config.task);
    std::vector<std::vector<Sample>> test_splits;
    for (const auto& s : stages) test_splits.push_back(s.test);
    const auto checkpoints = load_checkpoints(dir.path, 2);
    const auto rows = anatomy_report(checkpoints, test_splits);

    REQUIRE(rows.size() == 3);  // (0,0), (1,0), (1,1)
    for (const AnatomyRow& row : rows) {
        if (row.model_stage == row.eval_stage) {
            REQUIRE(row.accuracy == row.fresh_accuracy);
            REQUIRE(row.mse == row.fresh_mse);
            REQUIRE(row.designated_mse == row.mse);
        }
        REQUIRE(row.accuracy ==
                record.accuracy(row.model_stage, row.eval_stage));
    }

    const std::string csv = to_csv(rows);
    REQUIRE(csv.rfind("model_stage,eval_stage,accuracy,mse,fresh_accuracy,fresh_mse,"
                      "designated_accuracy,designated_mse\n",
                      0) == 0);
}

TEST_CASE("anatomy requires every checkpoint", "[harness]") {
    TempDir dir("anatomy_missing");
    REQUIRE_THROWS_WITH(load_checkpoints(dir.path, 2),
                        Catch::Matchers::ContainsSubstring("missing checkpoint"));
}

TEST_CASE("kmeans fine strategy builds a comparable store", "[harness]") {
    ExperimentConfig config = tiny_config(Method::repre_fine);
    config.hyper.fine_strategy = FineStrategy::kmeans;
    const MetricsRecord record = run_experiment(config);
    REQUIRE(record.validate());
}
