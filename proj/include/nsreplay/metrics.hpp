#pragma once

#include "nsreplay/binio.hpp"
#include "nsreplay/common.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

namespace nsreplay {

/// One (model stage, eval stage) measurement.
struct StageEval {
    int model_stage = 0;
    int eval_stage = 0;
    double accuracy = 0.0;
    double mse = 0.0;
};

/// Per-experiment metrics: the full (t, i) grid plus the derived aggregates
/// used for reporting. Old-stage averages are taken over the final model.
struct MetricsRecord {
    std::string method;
    int model_stages = 0;
    int eval_stages = 0;
    std::vector<StageEval> cells;  // row-major over (model_stage, eval_stage)

    double avg_old_accuracy = 0.0;   // final model, eval stages before the last
    double avg_all_accuracy = 0.0;   // final model, all eval stages
    double base_new_avg = 0.0;       // mean of base-stage and new-stage accuracy
    double plasticity = 0.0;         // mean over t of accuracy(t, t)
    std::vector<double> forgetting;  // accuracy(i, i) - accuracy(last, i)

    const StageEval& cell(int t, int i) const {
        return cells[static_cast<std::size_t>(t) * static_cast<std::size_t>(eval_stages) +
                     static_cast<std::size_t>(i)];
    }

    double accuracy(int t, int i) const { return cell(t, i).accuracy; }
    double mse(int t, int i) const { return cell(t, i).mse; }

    /// Fills the derived fields from the cell grid.
    void finalize() {
        const int last = model_stages - 1;
        double old_sum = 0.0;
        double all_sum = 0.0;
        for (int i = 0; i < eval_stages; ++i) {
            all_sum += accuracy(last, i);
            if (i < eval_stages - 1) old_sum += accuracy(last, i);
        }
        avg_all_accuracy = all_sum / eval_stages;
        avg_old_accuracy = eval_stages > 1 ? old_sum / (eval_stages - 1) : all_sum;

        const double base = accuracy(last, 0);
        double new_sum = 0.0;
        for (int i = 1; i < eval_stages; ++i) new_sum += accuracy(last, i);
        base_new_avg = eval_stages > 1 ? 0.5 * (base + new_sum / (eval_stages - 1)) : base;

        forgetting.clear();
        if (model_stages == eval_stages) {
            double plast = 0.0;
            for (int i = 0; i < eval_stages; ++i) {
                plast += accuracy(i, i);
                forgetting.push_back(accuracy(i, i) - accuracy(last, i));
            }
            plasticity = plast / eval_stages;
        } else {
            plasticity = avg_all_accuracy;
        }
    }

    bool validate() const {
        if (model_stages < 1 || eval_stages < 1) return false;
        if (cells.size() != static_cast<std::size_t>(model_stages) *
                                static_cast<std::size_t>(eval_stages))
            return false;
        for (const StageEval& c : cells) {
            if (!(c.accuracy >= 0.0 && c.accuracy <= 1.0)) return false;
            if (!std::isfinite(c.mse) || c.mse < 0.0) return false;
        }
        return true;
    }
};

namespace detail {

inline std::string format_metric(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

inline std::string to_csv(const MetricsRecord& record) {
    std::ostringstream out;
    out << "model_stage,eval_stage,accuracy,mse\n";
    for (const StageEval& c : record.cells)
        out << c.model_stage << "," << c.eval_stage << ","
            << detail::format_metric(c.accuracy) << "," << detail::format_metric(c.mse) << "\n";
    return out.str();
}

inline nlohmann::json to_json(const MetricsRecord& record) {
    nlohmann::json cells = nlohmann::json::array();
    for (const StageEval& c : record.cells)
        cells.push_back({{"model_stage", c.model_stage},
                         {"eval_stage", c.eval_stage},
                         {"accuracy", c.accuracy},
                         {"mse", c.mse}});
    return nlohmann::json{{"method", record.method},
                          {"model_stages", record.model_stages},
                          {"eval_stages", record.eval_stages},
                          {"cells", cells},
                          {"derived",
                           {{"avg_old_accuracy", record.avg_old_accuracy},
                            {"avg_all_accuracy", record.avg_all_accuracy},
                            {"base_new_avg", record.base_new_avg},
                            {"plasticity", record.plasticity},
                            {"forgetting", record.forgetting}}}};
}

inline MetricsRecord metrics_from_json(const nlohmann::json& j) {
    MetricsRecord r;
    r.method = j.at("method").get<std::string>();
    r.model_stages = j.at("model_stages").get<int>();
    r.eval_stages = j.at("eval_stages").get<int>();
    for (const auto& c : j.at("cells")) {
        StageEval e;
        e.model_stage = c.at("model_stage").get<int>();
        e.eval_stage = c.at("eval_stage").get<int>();
        e.accuracy = c.at("accuracy").get<double>();
        e.mse = c.at("mse").get<double>();
        r.cells.push_back(e);
    }
    r.finalize();
    return r;
}

enum class EmitFormat { csv, json };

/// Writes the record atomically in the requested format.
inline void emit(const MetricsRecord& record, EmitFormat format,
                 const std::filesystem::path& path) {
    if (format == EmitFormat::csv) {
        binio::write_file(path, to_csv(record));
    } else {
        binio::write_file(path, to_json(record).dump(2) + "\n");
    }
}

}  // namespace nsreplay
