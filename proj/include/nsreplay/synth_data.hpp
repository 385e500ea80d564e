#pragma once

#include "nsreplay/binio.hpp"
#include "nsreplay/common.hpp"
#include "nsreplay/rng.hpp"

#include <charconv>
#include <cstdio>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace nsreplay {

struct Sample {
    Vector input;
    int label = 0;
    Vector target;
};

struct StageDataset {
    int stage = 0;
    std::vector<Sample> train;
    std::vector<Sample> test;

    std::set<int> class_ids() const {
        std::set<int> ids;
        for (const Sample& s : train) ids.insert(s.label);
        for (const Sample& s : test) ids.insert(s.label);
        return ids;
    }
};

/// Recipe for a deterministic multi-stage dataset: per-class Gaussian blobs
/// with disjoint class sets per stage, plus regression targets from a global
/// (or per-class) affine map with additive noise.
struct TaskSpec {
    Index input_dim = 16;
    std::vector<int> classes_per_stage = {5, 5, 5, 5};
    int train_per_class = 200;
    int test_per_class = 50;
    double cluster_spread = 0.6;
    Index regression_dim = 4;
    double regression_noise = 0.25;
    bool class_agnostic_regression = true;
    std::uint64_t seed = 1;

    int total_classes() const {
        int n = 0;
        for (int c : classes_per_stage) n += c;
        return n;
    }
};

namespace detail {

/// Class centers: uniform draws from a hypercube sized for ~15 sigma expected
/// separation, redrawn until at least 9 sigma from every earlier center so
/// forgetting rather than class overlap is the failure mode.
inline std::vector<Vector> draw_centers(const TaskSpec& spec, Rng rng) {
    const double sigma = spec.cluster_spread;
    const double min_dist = 9.0 * sigma;
    double half_width =
        15.0 * sigma * std::sqrt(3.0 / (2.0 * static_cast<double>(spec.input_dim)));
    std::vector<Vector> centers;
    centers.reserve(static_cast<std::size_t>(spec.total_classes()));
    int attempts = 0;
    while (static_cast<int>(centers.size()) < spec.total_classes()) {
        Vector c(spec.input_dim);
        for (Index i = 0; i < spec.input_dim; ++i) c[i] = rng.uniform(-half_width, half_width);
        bool ok = true;
        for (const Vector& prev : centers)
            if ((c - prev).norm() < min_dist) {
                ok = false;
                break;
            }
        if (ok) {
            centers.push_back(std::move(c));
            attempts = 0;
        } else if (++attempts > 10000) {
            half_width *= 1.5;
            attempts = 0;
        }
    }
    return centers;
}

/// y = A x + b (+ noise added by the caller), written out with plain loops
/// so the result is identical across SIMD targets.
inline Vector affine_apply(const Matrix& a, const Vector& b, const Vector& x) {
    Vector y(a.rows());
    for (Index r = 0; r < a.rows(); ++r) {
        double acc = b[r];
        for (Index c = 0; c < a.cols(); ++c) acc += a(r, c) * x[c];
        y[r] = acc;
    }
    return y;
}

inline std::vector<Sample> draw_samples(const TaskSpec& spec, const Vector& center, int label,
                                        const Matrix& a, const Vector& b, int count,
                                        Rng point_rng, Rng noise_rng) {
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        Sample s;
        s.label = label;
        s.input = Vector(spec.input_dim);
        for (Index d = 0; d < spec.input_dim; ++d)
            s.input[d] = center[d] + spec.cluster_spread * point_rng.normal();
        s.target = affine_apply(a, b, s.input);
        for (Index d = 0; d < spec.regression_dim; ++d)
            s.target[d] += spec.regression_noise * noise_rng.normal();
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace detail

/// Builds the full stage sequence. Fully determined by spec.seed; per-class
/// sampling uses derived child streams so stages could be generated in
/// parallel without changing the result.
inline std::vector<StageDataset> generate(const TaskSpec& spec) {
    if (spec.input_dim < 1 || spec.regression_dim < 1)
        throw invalid_input("generate: dimensions must be >= 1");
    if (spec.classes_per_stage.empty()) throw invalid_input("generate: no stages");
    for (int c : spec.classes_per_stage)
        if (c < 1) throw invalid_input("generate: each stage needs >= 1 class");
    if (spec.train_per_class < 1 || spec.test_per_class < 1)
        throw invalid_input("generate: sample counts must be >= 1");
    if (!(spec.cluster_spread > 0.0)) throw invalid_input("generate: cluster_spread must be > 0");

    const Rng root(spec.seed);
    const std::vector<Vector> centers = detail::draw_centers(spec, root.derive(1));

    // Global regression map; per-class maps replace it when the
    // class-agnostic flag is off.
    Rng map_rng = root.derive(2);
    Matrix global_a(spec.regression_dim, spec.input_dim);
    const double a_scale = 1.0 / std::sqrt(static_cast<double>(spec.input_dim));
    for (Index r = 0; r < spec.regression_dim; ++r)
        for (Index c = 0; c < spec.input_dim; ++c) global_a(r, c) = a_scale * map_rng.normal();
    Vector global_b(spec.regression_dim);
    for (Index r = 0; r < spec.regression_dim; ++r) global_b[r] = map_rng.normal();

    std::vector<StageDataset> stages;
    int class_id = 0;
    for (std::size_t t = 0; t < spec.classes_per_stage.size(); ++t) {
        StageDataset stage;
        stage.stage = static_cast<int>(t);
        for (int k = 0; k < spec.classes_per_stage[t]; ++k, ++class_id) {
            Matrix a = global_a;
            Vector b = global_b;
            if (!spec.class_agnostic_regression) {
                Rng cls_rng = root.derive(100 + static_cast<std::uint64_t>(class_id));
                for (Index r = 0; r < spec.regression_dim; ++r)
                    for (Index c = 0; c < spec.input_dim; ++c) a(r, c) = a_scale * cls_rng.normal();
                for (Index r = 0; r < spec.regression_dim; ++r) b[r] = cls_rng.normal();
            }
            const auto base = 1000 + 4 * static_cast<std::uint64_t>(class_id);
            const Vector& center = centers[static_cast<std::size_t>(class_id)];
            auto train = detail::draw_samples(spec, center, class_id, a, b, spec.train_per_class,
                                              root.derive(base), root.derive(base + 2));
            auto test = detail::draw_samples(spec, center, class_id, a, b, spec.test_per_class,
                                             root.derive(base + 1), root.derive(base + 3));
            stage.train.insert(stage.train.end(), train.begin(), train.end());
            stage.test.insert(stage.test.end(), test.begin(), test.end());
        }
        stages.push_back(std::move(stage));
    }
    return stages;
}

// --- binary form -------------------------------------------------------------

inline std::vector<char> serialize(const std::vector<StageDataset>& stages, Index input_dim,
                                   Index regression_dim) {
    binio::Writer w;
    binio::write_header(w, binio::PayloadKind::dataset);
    w.u64(static_cast<std::uint64_t>(input_dim));
    w.u64(static_cast<std::uint64_t>(regression_dim));
    w.u64(stages.size());
    auto put_split = [&](const std::vector<Sample>& split) {
        w.u64(split.size());
        for (const Sample& s : split) {
            for (Index i = 0; i < input_dim; ++i) w.f64(s.input[i]);
            w.i64(s.label);
            for (Index i = 0; i < regression_dim; ++i) w.f64(s.target[i]);
        }
    };
    for (const StageDataset& stage : stages) {
        w.u64(static_cast<std::uint64_t>(stage.stage));
        put_split(stage.train);
        put_split(stage.test);
    }
    return w.bytes();
}

inline std::vector<StageDataset> deserialize_dataset(std::vector<char> bytes) {
    binio::Reader r(std::move(bytes));
    binio::read_header(r, binio::PayloadKind::dataset);
    const auto input_dim = static_cast<Index>(r.u64());
    const auto regression_dim = static_cast<Index>(r.u64());
    const std::uint64_t stage_count = r.u64();
    auto get_split = [&](std::vector<Sample>& split) {
        const std::uint64_t n = r.u64();
        split.reserve(n);
        for (std::uint64_t i = 0; i < n; ++i) {
            Sample s;
            s.input = Vector(input_dim);
            for (Index d = 0; d < input_dim; ++d) s.input[d] = r.f64();
            s.label = static_cast<int>(r.i64());
            s.target = Vector(regression_dim);
            for (Index d = 0; d < regression_dim; ++d) s.target[d] = r.f64();
            split.push_back(std::move(s));
        }
    };
    std::vector<StageDataset> stages;
    stages.reserve(stage_count);
    for (std::uint64_t t = 0; t < stage_count; ++t) {
        StageDataset stage;
        stage.stage = static_cast<int>(r.u64());
        get_split(stage.train);
        get_split(stage.test);
        stages.push_back(std::move(stage));
    }
    r.expect_end();
    return stages;
}

inline void save(const std::vector<StageDataset>& stages, Index input_dim, Index regression_dim,
                 const std::filesystem::path& path) {
    binio::write_file(path, serialize(stages, input_dim, regression_dim));
}

inline std::vector<StageDataset> load_dataset(const std::filesystem::path& path) {
    return deserialize_dataset(binio::read_file(path));
}

// --- CSV form ----------------------------------------------------------------

namespace detail {

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

inline std::string to_csv(const std::vector<StageDataset>& stages, Index input_dim,
                          Index regression_dim) {
    std::ostringstream out;
    out << "stage,split,label";
    for (Index i = 0; i < input_dim; ++i) out << ",x_" << i;
    for (Index i = 0; i < regression_dim; ++i) out << ",y_" << i;
    out << "\n";
    auto put_split = [&](const StageDataset& stage, const std::vector<Sample>& split,
                         const char* name) {
        for (const Sample& s : split) {
            out << stage.stage << "," << name << "," << s.label;
            for (Index i = 0; i < input_dim; ++i) out << "," << detail::format_double(s.input[i]);
            for (Index i = 0; i < regression_dim; ++i)
                out << "," << detail::format_double(s.target[i]);
            out << "\n";
        }
    };
    for (const StageDataset& stage : stages) {
        put_split(stage, stage.train, "train");
        put_split(stage, stage.test, "test");
    }
    return out.str();
}

inline std::vector<StageDataset> from_csv(const std::string& text) {
    std::vector<StageDataset> stages;
    std::size_t offset = 0;
    std::size_t line_no = 0;
    Index input_dim = -1;
    Index regression_dim = -1;

    auto fail = [&](const std::string& what) -> void {
        throw parse_error("csv: " + what + " at line " + std::to_string(line_no) +
                          ", byte offset " + std::to_string(offset));
    };

    while (offset < text.size()) {
        std::size_t eol = text.find('\n', offset);
        if (eol == std::string::npos) eol = text.size();
        const std::string_view line(text.data() + offset, eol - offset);
        ++line_no;

        std::vector<std::string_view> cells;
        std::size_t start = 0;
        while (start <= line.size()) {
            std::size_t comma = line.find(',', start);
            if (comma == std::string_view::npos) comma = line.size();
            cells.push_back(line.substr(start, comma - start));
            start = comma + 1;
        }

        if (line_no == 1) {
            if (cells.size() < 4 || cells[0] != "stage" || cells[1] != "split" ||
                cells[2] != "label")
                fail("bad header");
            Index x_count = 0;
            Index y_count = 0;
            for (std::size_t i = 3; i < cells.size(); ++i) {
                if (cells[i].substr(0, 2) == "x_")
                    ++x_count;
                else if (cells[i].substr(0, 2) == "y_")
                    ++y_count;
                else
                    fail("unknown column '" + std::string(cells[i]) + "'");
            }
            if (x_count < 1 || y_count < 1) fail("missing feature/target columns");
            input_dim = x_count;
            regression_dim = y_count;
            offset = eol + 1;
            continue;
        }
        if (line.empty()) {
            offset = eol + 1;
            continue;
        }
        if (cells.size() != static_cast<std::size_t>(3 + input_dim + regression_dim))
            fail("expected " + std::to_string(3 + input_dim + regression_dim) + " cells, got " +
                 std::to_string(cells.size()));

        auto parse_int = [&](std::string_view sv) {
            int v = 0;
            const auto [ptr, ec] = std::from_chars(sv.data(), sv.data() + sv.size(), v);
            if (ec != std::errc() || ptr != sv.data() + sv.size()) fail("bad integer '" + std::string(sv) + "'");
            return v;
        };
        auto parse_double = [&](std::string_view sv) {
            double v = 0;
            const auto [ptr, ec] = std::from_chars(sv.data(), sv.data() + sv.size(), v);
            if (ec != std::errc() || ptr != sv.data() + sv.size()) fail("bad number '" + std::string(sv) + "'");
            return v;
        };

        const int stage_idx = parse_int(cells[0]);
        const bool is_train = cells[1] == "train";
        if (!is_train && cells[1] != "test") fail("bad split '" + std::string(cells[1]) + "'");

        Sample s;
        s.label = parse_int(cells[2]);
        s.input = Vector(input_dim);
        for (Index i = 0; i < input_dim; ++i)
            s.input[i] = parse_double(cells[static_cast<std::size_t>(3 + i)]);
        s.target = Vector(regression_dim);
        for (Index i = 0; i < regression_dim; ++i)
            s.target[i] = parse_double(cells[static_cast<std::size_t>(3 + input_dim + i)]);

        while (static_cast<int>(stages.size()) <= stage_idx) {
            StageDataset st;
            st.stage = static_cast<int>(stages.size());
            stages.push_back(std::move(st));
        }
        auto& stage = stages[static_cast<std::size_t>(stage_idx)];
        (is_train ? stage.train : stage.test).push_back(std::move(s));
        offset = eol + 1;
    }
    if (input_dim < 0) {
        line_no = 0;
        fail("empty file");
    }
    return stages;
}

/// FNV-1a over the binary serialization; stable fingerprint for a dataset.
inline std::uint64_t dataset_checksum(const std::vector<StageDataset>& stages, Index input_dim,
                                      Index regression_dim) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : serialize(stages, input_dim, regression_dim)) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace nsreplay
