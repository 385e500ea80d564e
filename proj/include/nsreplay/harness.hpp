#pragma once

#include "nsreplay/metrics.hpp"
#include "nsreplay/nsgp.hpp"
#include "nsreplay/prototypes.hpp"
#include "nsreplay/synth_data.hpp"
#include "nsreplay/toy_model.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace nsreplay {

enum class Method { finetune, nsgp, repre_coarse, repre_fine, nsgp_repre, joint };

inline const char* to_string(Method m) {
    switch (m) {
        case Method::finetune: return "finetune";
        case Method::nsgp: return "nsgp";
        case Method::repre_coarse: return "repre_coarse";
        case Method::repre_fine: return "repre_fine";
        case Method::nsgp_repre: return "nsgp_repre";
        case Method::joint: return "joint";
    }
    return "?";
}

inline Method parse_method(const std::string& name) {
    for (Method m : {Method::finetune, Method::nsgp, Method::repre_coarse, Method::repre_fine,
                     Method::nsgp_repre, Method::joint})
        if (name == to_string(m)) return m;
    throw invalid_input("unknown method '" + name + "'");
}

inline bool uses_replay(Method m) {
    return m == Method::repre_coarse || m == Method::repre_fine || m == Method::nsgp_repre;
}

inline bool uses_nsgp(Method m) { return m == Method::nsgp || m == Method::nsgp_repre; }

/// How fine-grained prototypes are produced for replay methods.
enum class FineStrategy { density, kmeans };

struct HyperParams {
    double learning_rate = 0.02;
    int epochs = 40;
    int batch = 32;
    int prototype_budget = 10;  // per-class total, coarse included
    double radius = 0.6;
    NullityPolicy nullity = NullityPolicy::energy(0.99);
    std::vector<LayerGroup> normalized_groups = {LayerGroup::backbone};
    std::vector<Index> trunk = {32, 24};
    int cov_stride = 1;
    FineStrategy fine_strategy = FineStrategy::density;
};

struct ExperimentConfig {
    TaskSpec task;
    Method method = Method::finetune;
    HyperParams hyper;
    std::string output_dir;  // empty: keep everything in memory
    std::uint64_t seed = 7;
    bool save_checkpoints = true;
};

namespace detail {

inline bool group_normalized(const HyperParams& hyper, LayerGroup g) {
    for (LayerGroup n : hyper.normalized_groups)
        if (n == g) return true;
    return false;
}

inline std::vector<LayerProjection> identity_projections(const ToyModel& model) {
    std::vector<LayerProjection> projs;
    for (std::size_t l = 0; l < model.trunk.size(); ++l)
        projs.push_back(LayerProjection::identity(model.trunk[l].in_dim() + 1,
                                                  "trunk" + std::to_string(l)));
    return projs;
}

/// Trunk features of the given samples, grouped per class.
inline std::map<int, FeatureMatrix> features_by_class(const ToyModel& model,
                                                      const std::vector<Sample>& samples) {
    Matrix inputs(static_cast<Index>(samples.size()), model.input_dim());
    for (std::size_t i = 0; i < samples.size(); ++i)
        inputs.row(static_cast<Index>(i)) = samples[i].input.transpose();
    const ForwardTrace trace = forward(model, inputs);

    std::map<int, std::vector<Index>> rows_by_class;
    for (std::size_t i = 0; i < samples.size(); ++i)
        rows_by_class[samples[i].label].push_back(static_cast<Index>(i));

    std::map<int, FeatureMatrix> out;
    for (const auto& [cls, rows] : rows_by_class) {
        FeatureMatrix fm;
        fm.class_id = cls;
        fm.values = Matrix(static_cast<Index>(rows.size()), model.feature_dim());
        for (std::size_t i = 0; i < rows.size(); ++i)
            fm.values.row(static_cast<Index>(i)) = trace.feature.row(rows[i]);
        out[cls] = std::move(fm);
    }
    return out;
}

/// Per-class budget of `budget` prototypes built with k-means fine
/// prototypes instead of density selection (appendix-style comparison).
inline PrototypeStore build_store_kmeans(const std::map<int, FeatureMatrix>& per_class,
                                         double radius, int budget, const PrototypeStore& prior,
                                         std::uint64_t seed) {
    PrototypeStore store = prior;
    store.budget = budget;
    store.radius = radius;
    for (const auto& [cls, feats] : per_class) {
        if (prior.has_class(cls))
            throw invalid_input("build_store_kmeans: class " + std::to_string(cls) +
                                " already present");
        store.coarse[cls] = compute_coarse_prototype(feats);
        const int fine_k = std::min<int>(budget - 1, static_cast<int>(feats.rows()));
        if (fine_k >= 1)
            store.fine[cls] = kmeans_prototypes(feats, fine_k,
                                                seed ^ static_cast<std::uint64_t>(cls));
    }
    return store;
}

inline void write_metrics(const MetricsRecord& record, const std::filesystem::path& dir) {
    emit(record, EmitFormat::csv, dir / "metrics.csv");
    emit(record, EmitFormat::json, dir / "metrics.json");
}

}  // namespace detail

/// Runs one experiment: the staged incremental protocol (or pooled joint
/// training), per-stage evaluation on every test split, prototype-store and
/// covariance bookkeeping as the method requires, and metrics/checkpoint
/// output after every stage. Training data of finished stages is dropped
/// before the next stage starts; only test splits stay reachable.
inline MetricsRecord run_experiment(const ExperimentConfig& config) {
    const TaskSpec& task = config.task;
    std::vector<StageDataset> stages = generate(task);
    const int stage_count = static_cast<int>(stages.size());

    std::vector<std::vector<Sample>> test_splits;
    test_splits.reserve(stages.size());
    for (StageDataset& s : stages) test_splits.push_back(s.test);

    const std::filesystem::path out_dir = config.output_dir;
    const bool writing = !config.output_dir.empty();
    if (writing) std::filesystem::create_directories(out_dir);

    ToyModel model = make_model(task.input_dim, config.hyper.trunk, task.regression_dim,
                                config.seed);

    TrainHyper train_hyper;
    train_hyper.learning_rate = config.hyper.learning_rate;
    train_hyper.epochs = config.hyper.epochs;
    train_hyper.batch = config.hyper.batch;
    train_hyper.cov_stride = config.hyper.cov_stride;

    MetricsRecord record;
    record.method = to_string(config.method);
    record.eval_stages = stage_count;

    auto evaluate_all = [&](int model_stage) {
        for (int i = 0; i < stage_count; ++i) {
            const EvalResult r = evaluate(model, test_splits[static_cast<std::size_t>(i)]);
            record.cells.push_back({model_stage, i, r.accuracy, r.mse});
        }
    };

    if (config.method == Method::joint) {
        StageDataset pooled;
        pooled.stage = 0;
        for (StageDataset& s : stages) {
            pooled.train.insert(pooled.train.end(), s.train.begin(), s.train.end());
            s.train.clear();
        }
        grow_classifier(model, task.total_classes());
        train_hyper.seed = Rng(config.seed).derive(0x7a0).next_u64();
        train_stage(model, pooled, PrototypeStore{}, detail::identity_projections(model),
                    train_hyper);
        record.model_stages = 1;
        evaluate_all(0);
        record.finalize();
        if (!record.validate()) throw numerical_error("run_experiment: invalid metrics");
        if (writing) {
            if (config.save_checkpoints) save(model, out_dir / "stage_0.model");
            detail::write_metrics(record, out_dir);
        }
        return record;
    }

    PrototypeStore store;
    store.budget = config.hyper.prototype_budget;
    store.radius = config.hyper.radius;

    std::vector<CovarianceAccumulator> accumulators;
    for (std::size_t l = 0; l < model.trunk.size(); ++l)
        accumulators.emplace_back(model.trunk[l].in_dim() + 1, "trunk" + std::to_string(l));

    std::vector<LayerProjection> projections = detail::identity_projections(model);

    const PrototypeStore empty_store;
    record.model_stages = stage_count;
    for (int t = 0; t < stage_count; ++t) {
        // Take ownership of this stage's training data; earlier stages'
        // train splits are already cleared, so old data is unreachable here.
        StageDataset stage = std::move(stages[static_cast<std::size_t>(t)]);
        stages[static_cast<std::size_t>(t)] = StageDataset{};

        grow_classifier(model, task.classes_per_stage[static_cast<std::size_t>(t)]);
        train_hyper.seed = Rng(config.seed).derive(0x7a0 + static_cast<std::uint64_t>(t)).next_u64();

        const PrototypeStore& replay_store = uses_replay(config.method) ? store : empty_store;
        train_stage(model, stage, replay_store, projections, train_hyper,
                    uses_nsgp(config.method) ? &accumulators : nullptr);

        evaluate_all(t);

        if (uses_replay(config.method)) {
            const auto per_class = detail::features_by_class(model, stage.train);
            const int budget =
                config.method == Method::repre_coarse ? 1 : config.hyper.prototype_budget;
            if (config.hyper.fine_strategy == FineStrategy::kmeans && budget > 1)
                store = detail::build_store_kmeans(per_class, config.hyper.radius, budget, store,
                                                   config.seed);
            else
                store = build_store_for_stage(per_class, config.hyper.radius, budget, store);
        }

        if (uses_nsgp(config.method)) {
            for (CovarianceAccumulator& acc : accumulators) commit_stage(acc);
            projections.clear();
            for (std::size_t l = 0; l < model.trunk.size(); ++l)
                projections.push_back(compute_projection(
                    accumulators[l], config.hyper.nullity,
                    detail::group_normalized(config.hyper, model.trunk[l].group)));
        }

        if (writing) {
            if (config.save_checkpoints)
                save(model, out_dir / ("stage_" + std::to_string(t) + ".model"));
            MetricsRecord partial = record;
            partial.model_stages = t + 1;
            if (t + 1 == stage_count) partial.finalize();
            detail::write_metrics(partial, out_dir);
        }
    }

    record.finalize();
    if (!record.validate()) throw numerical_error("run_experiment: invalid metrics");
    if (writing) {
        detail::write_metrics(record, out_dir);
        if (uses_nsgp(config.method))
            binio::write_file(out_dir / "covariance.bin", serialize(accumulators));
        if (uses_replay(config.method))
            binio::write_file(out_dir / "store.bin", serialize(store));
    }
    return record;
}

// --- anatomy -----------------------------------------------------------------

/// One anatomy cell: plain metrics of checkpoint t on stage i, next to the
/// designated-classification pairing (class decisions from the fresh model
/// M_i, regression from M_t).
struct AnatomyRow {
    int model_stage = 0;
    int eval_stage = 0;
    double accuracy = 0.0;        // M_t classification on stage i
    double mse = 0.0;             // M_t regression on stage i
    double fresh_accuracy = 0.0;  // M_i on stage i
    double fresh_mse = 0.0;       // M_i on stage i
    double designated_accuracy = 0.0;  // = fresh_accuracy by construction
    double designated_mse = 0.0;       // = mse: regression comes from M_t
};

inline std::vector<AnatomyRow> anatomy_report(const std::vector<ToyModel>& checkpoints,
                                              const std::vector<std::vector<Sample>>& test_splits) {
    if (checkpoints.empty()) throw invalid_input("anatomy_report: no checkpoints");
    if (checkpoints.size() != test_splits.size())
        throw invalid_input("anatomy_report: checkpoint/stage count mismatch");

    const int n = static_cast<int>(checkpoints.size());
    std::vector<EvalResult> fresh(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        fresh[static_cast<std::size_t>(i)] = evaluate(checkpoints[static_cast<std::size_t>(i)],
                                                      test_splits[static_cast<std::size_t>(i)]);

    std::vector<AnatomyRow> rows;
    for (int t = 0; t < n; ++t) {
        for (int i = 0; i <= t; ++i) {
            const EvalResult plain = evaluate(checkpoints[static_cast<std::size_t>(t)],
                                              test_splits[static_cast<std::size_t>(i)]);
            AnatomyRow row;
            row.model_stage = t;
            row.eval_stage = i;
            row.accuracy = plain.accuracy;
            row.mse = plain.mse;
            row.fresh_accuracy = fresh[static_cast<std::size_t>(i)].accuracy;
            row.fresh_mse = fresh[static_cast<std::size_t>(i)].mse;
            row.designated_accuracy = row.fresh_accuracy;
            row.designated_mse = row.mse;
            rows.push_back(row);
        }
    }
    return rows;
}

/// Loads stage checkpoints "stage_<t>.model" from a run directory.
inline std::vector<ToyModel> load_checkpoints(const std::filesystem::path& run_dir,
                                              int stage_count) {
    std::vector<ToyModel> models;
    for (int t = 0; t < stage_count; ++t) {
        const std::filesystem::path path = run_dir / ("stage_" + std::to_string(t) + ".model");
        if (!std::filesystem::exists(path))
            throw invalid_input("anatomy: missing checkpoint " + path.string());
        models.push_back(load_model(path));
    }
    return models;
}

inline std::string to_csv(const std::vector<AnatomyRow>& rows) {
    std::ostringstream out;
    out << "model_stage,eval_stage,accuracy,mse,fresh_accuracy,fresh_mse,"
           "designated_accuracy,designated_mse\n";
    for (const AnatomyRow& r : rows)
        out << r.model_stage << "," << r.eval_stage << "," << detail::format_metric(r.accuracy)
            << "," << detail::format_metric(r.mse) << ","
            << detail::format_metric(r.fresh_accuracy) << ","
            << detail::format_metric(r.fresh_mse) << ","
            << detail::format_metric(r.designated_accuracy) << ","
            << detail::format_metric(r.designated_mse) << "\n";
    return out.str();
}

inline nlohmann::json to_json(const std::vector<AnatomyRow>& rows) {
    nlohmann::json j = nlohmann::json::array();
    for (const AnatomyRow& r : rows)
        j.push_back({{"model_stage", r.model_stage},
                     {"eval_stage", r.eval_stage},
                     {"accuracy", r.accuracy},
                     {"mse", r.mse},
                     {"fresh_accuracy", r.fresh_accuracy},
                     {"fresh_mse", r.fresh_mse},
                     {"designated_accuracy", r.designated_accuracy},
                     {"designated_mse", r.designated_mse}});
    return j;
}

// --- config (de)serialization -------------------------------------------------

inline nlohmann::json to_json(const TaskSpec& task) {
    return {{"input_dim", task.input_dim},
            {"classes_per_stage", task.classes_per_stage},
            {"train_per_class", task.train_per_class},
            {"test_per_class", task.test_per_class},
            {"cluster_spread", task.cluster_spread},
            {"regression_dim", task.regression_dim},
            {"regression_noise", task.regression_noise},
            {"class_agnostic_regression", task.class_agnostic_regression},
            {"seed", task.seed}};
}

inline TaskSpec task_from_json(const nlohmann::json& j) {
    TaskSpec task;
    if (j.contains("input_dim")) task.input_dim = j.at("input_dim").get<Index>();
    if (j.contains("classes_per_stage"))
        task.classes_per_stage = j.at("classes_per_stage").get<std::vector<int>>();
    if (j.contains("train_per_class")) task.train_per_class = j.at("train_per_class").get<int>();
    if (j.contains("test_per_class")) task.test_per_class = j.at("test_per_class").get<int>();
    if (j.contains("cluster_spread")) task.cluster_spread = j.at("cluster_spread").get<double>();
    if (j.contains("regression_dim")) task.regression_dim = j.at("regression_dim").get<Index>();
    if (j.contains("regression_noise"))
        task.regression_noise = j.at("regression_noise").get<double>();
    if (j.contains("class_agnostic_regression"))
        task.class_agnostic_regression = j.at("class_agnostic_regression").get<bool>();
    if (j.contains("seed")) task.seed = j.at("seed").get<std::uint64_t>();
    return task;
}

inline nlohmann::json to_json(const ExperimentConfig& config) {
    nlohmann::json groups = nlohmann::json::array();
    for (LayerGroup g : config.hyper.normalized_groups) groups.push_back(to_string(g));
    return {{"task", to_json(config.task)},
            {"method", to_string(config.method)},
            {"hyper",
             {{"learning_rate", config.hyper.learning_rate},
              {"epochs", config.hyper.epochs},
              {"batch", config.hyper.batch},
              {"prototype_budget", config.hyper.prototype_budget},
              {"radius", config.hyper.radius},
              {"nullity",
               {{"mode",
                 config.hyper.nullity.mode == NullityPolicy::Mode::energy ? "energy"
                                                                          : "exact_zero"},
                {"zero_tol", config.hyper.nullity.zero_tol},
                {"energy_keep", config.hyper.nullity.energy_keep},
                {"min_nullity", config.hyper.nullity.min_nullity}}},
              {"normalized_groups", groups},
              {"trunk", config.hyper.trunk},
              {"cov_stride", config.hyper.cov_stride},
              {"fine_strategy",
               config.hyper.fine_strategy == FineStrategy::kmeans ? "kmeans" : "density"}}},
            {"output_dir", config.output_dir},
            {"seed", config.seed},
            {"save_checkpoints", config.save_checkpoints}};
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig config;
    if (j.contains("task")) config.task = task_from_json(j.at("task"));
    if (j.contains("method")) config.method = parse_method(j.at("method").get<std::string>());
    if (j.contains("hyper")) {
        const auto& h = j.at("hyper");
        if (h.contains("learning_rate"))
            config.hyper.learning_rate = h.at("learning_rate").get<double>();
        if (h.contains("epochs")) config.hyper.epochs = h.at("epochs").get<int>();
        if (h.contains("batch")) config.hyper.batch = h.at("batch").get<int>();
        if (h.contains("prototype_budget"))
            config.hyper.prototype_budget = h.at("prototype_budget").get<int>();
        if (h.contains("radius")) config.hyper.radius = h.at("radius").get<double>();
        if (h.contains("nullity")) {
            const auto& np = h.at("nullity");
            if (np.contains("mode")) {
                const std::string mode = np.at("mode").get<std::string>();
                if (mode == "energy")
                    config.hyper.nullity.mode = NullityPolicy::Mode::energy;
                else if (mode == "exact_zero")
                    config.hyper.nullity.mode = NullityPolicy::Mode::exact_zero;
                else
                    throw invalid_input("unknown nullity mode '" + mode + "'");
            }
            if (np.contains("zero_tol"))
                config.hyper.nullity.zero_tol = np.at("zero_tol").get<double>();
            if (np.contains("energy_keep"))
                config.hyper.nullity.energy_keep = np.at("energy_keep").get<double>();
            if (np.contains("min_nullity"))
                config.hyper.nullity.min_nullity = np.at("min_nullity").get<int>();
        }
        if (h.contains("normalized_groups")) {
            config.hyper.normalized_groups.clear();
            for (const auto& g : h.at("normalized_groups")) {
                const std::string name = g.get<std::string>();
                if (name == "backbone")
                    config.hyper.normalized_groups.push_back(LayerGroup::backbone);
                else if (name == "neck")
                    config.hyper.normalized_groups.push_back(LayerGroup::neck);
                else
                    throw invalid_input("unknown layer group '" + name + "'");
            }
        }
        if (h.contains("trunk")) config.hyper.trunk = h.at("trunk").get<std::vector<Index>>();
        if (h.contains("cov_stride")) config.hyper.cov_stride = h.at("cov_stride").get<int>();
        if (h.contains("fine_strategy")) {
            const std::string fs = h.at("fine_strategy").get<std::string>();
            if (fs == "density")
                config.hyper.fine_strategy = FineStrategy::density;
            else if (fs == "kmeans")
                config.hyper.fine_strategy = FineStrategy::kmeans;
            else
                throw invalid_input("unknown fine_strategy '" + fs + "'");
        }
    }
    if (j.contains("output_dir")) config.output_dir = j.at("output_dir").get<std::string>();
    if (j.contains("seed")) config.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("save_checkpoints"))
        config.save_checkpoints = j.at("save_checkpoints").get<bool>();
    return config;
}

}  // namespace nsreplay
