#pragma once

#include "nsreplay/binio.hpp"
#include "nsreplay/common.hpp"
#include "nsreplay/rng.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace nsreplay {

/// A set of d-dimensional feature vectors for one class, one row per feature.
struct FeatureMatrix {
    int class_id = 0;
    Matrix values;  // n x d

    Index rows() const { return values.rows(); }
    Index dim() const { return values.cols(); }
};

enum class ProtoKind : std::uint8_t { coarse = 0, fine = 1 };

struct Prototype {
    int class_id = 0;
    ProtoKind kind = ProtoKind::coarse;
    Vector vector;
    std::int64_t member_count = 0;

    friend bool operator==(const Prototype& a, const Prototype& b) {
        return a.class_id == b.class_id && a.kind == b.kind &&
               a.member_count == b.member_count && a.vector == b.vector;
    }
};

/// Replayable prototype memory: one coarse prototype per class plus an
/// ordered list of fine-grained prototypes, within a per-class budget of
/// `budget` prototypes total (coarse included).
struct PrototypeStore {
    std::map<int, Prototype> coarse;
    std::map<int, std::vector<Prototype>> fine;
    int budget = 10;
    double radius = 0.6;

    bool empty() const { return coarse.empty() && fine.empty(); }

    std::size_t size() const {
        std::size_t n = coarse.size();
        for (const auto& [cls, list] : fine) n += list.size();
        return n;
    }

    bool has_class(int class_id) const { return coarse.count(class_id) != 0; }

    int max_class_id() const {
        int m = -1;
        for (const auto& [cls, p] : coarse) m = std::max(m, cls);
        for (const auto& [cls, list] : fine) m = std::max(m, cls);
        return m;
    }

    friend bool operator==(const PrototypeStore& a, const PrototypeStore& b) {
        return a.coarse == b.coarse && a.fine == b.fine && a.budget == b.budget &&
               a.radius == b.radius;
    }
};

/// Mean of all feature rows of a class.
inline Prototype compute_coarse_prototype(const FeatureMatrix& features) {
    if (features.rows() < 1) throw invalid_input("compute_coarse_prototype: empty feature matrix");
    if (!all_finite(features.values))
        throw numerical_error("compute_coarse_prototype: non-finite feature values");
    Prototype p;
    p.class_id = features.class_id;
    p.kind = ProtoKind::coarse;
    p.vector = features.values.colwise().mean();
    p.member_count = features.rows();
    return p;
}

/// Pairwise cosine similarities between feature rows. Symmetric, unit
/// diagonal, entries clamped to [-1, 1]. Rejects zero-norm rows.
inline Matrix cosine_similarity_matrix(const FeatureMatrix& features) {
    const Index n = features.rows();
    if (n < 1) throw invalid_input("cosine_similarity_matrix: empty feature matrix");
    if (!all_finite(features.values))
        throw numerical_error("cosine_similarity_matrix: non-finite feature values");

    Vector norms(n);
    for (Index i = 0; i < n; ++i) {
        norms[i] = features.values.row(i).norm();
        if (norms[i] <= 0.0)
            throw degenerate_feature("cosine_similarity_matrix: zero-norm feature row " +
                                     std::to_string(i));
    }

    Matrix s(n, n);
    for (Index i = 0; i < n; ++i) {
        s(i, i) = 1.0;
        for (Index j = i + 1; j < n; ++j) {
            const double v = features.values.row(i).dot(features.values.row(j)) /
                             (norms[i] * norms[j]);
            const double clamped = std::clamp(v, -1.0, 1.0);
            s(i, j) = clamped;
            s(j, i) = clamped;
        }
    }
    return s;
}

/// Density-selected fine-grained prototypes. Every row defines a hypersphere
/// of cosine radius `r`; spheres are ranked by cardinality (ties by lowest
/// row index) and greedily taken, skipping any candidate whose center lies
/// within radius r of an already selected center. Each selected sphere
/// contributes the mean of its members. Returns at most `budget` prototypes,
/// fewer when exclusion leaves fewer surviving centers.
inline std::vector<Prototype> select_fine_prototypes(const FeatureMatrix& features, double r,
                                                     int budget) {
    if (!(r > 0.0 && r < 1.0)) throw invalid_input("select_fine_prototypes: radius must be in (0,1)");
    if (budget < 1) throw invalid_input("select_fine_prototypes: budget must be >= 1");

    const Matrix s = cosine_similarity_matrix(features);
    const Index n = features.rows();

    std::vector<std::int64_t> cardinality(static_cast<std::size_t>(n), 0);
    for (Index j = 0; j < n; ++j)
        for (Index i = 0; i < n; ++i)
            if (s(i, j) > r) ++cardinality[static_cast<std::size_t>(j)];

    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
        return cardinality[static_cast<std::size_t>(a)] > cardinality[static_cast<std::size_t>(b)];
    });

    std::vector<Prototype> out;
    std::vector<Index> selected;
    for (const Index j : order) {
        if (static_cast<int>(out.size()) == budget) break;
        const bool excluded = std::any_of(selected.begin(), selected.end(),
                                          [&](Index k) { return s(j, k) > r; });
        if (excluded) continue;
        selected.push_back(j);

        Prototype p;
        p.class_id = features.class_id;
        p.kind = ProtoKind::fine;
        p.vector = Vector::Zero(features.dim());
        p.member_count = 0;
        for (Index i = 0; i < n; ++i) {
            if (s(i, j) > r) {
                p.vector += features.values.row(i).transpose();
                ++p.member_count;
            }
        }
        p.vector /= static_cast<double>(p.member_count);
        out.push_back(std::move(p));
    }
    return out;
}

/// Lloyd's k-means with seeded initialization (k distinct rows chosen by
/// partial Fisher-Yates over row indices). Comparison baseline for the
/// density selection above. Empty clusters keep their previous centroid;
/// assignment ties go to the lowest centroid index.
inline std::vector<Prototype> kmeans_prototypes(const FeatureMatrix& features, int k,
                                                std::uint64_t seed, int max_iters = 100) {
    const Index n = features.rows();
    if (n < 1) throw invalid_input("kmeans_prototypes: empty feature matrix");
    if (k < 1 || static_cast<Index>(k) > n)
        throw invalid_input("kmeans_prototypes: k must be in [1, rows]");
    if (!all_finite(features.values))
        throw numerical_error("kmeans_prototypes: non-finite feature values");

    Rng rng(seed);
    std::vector<Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), Index{0});
    for (int i = 0; i < k; ++i) {
        const auto j = static_cast<std::size_t>(i) +
                       static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(n - i)));
        std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
    }

    Matrix centroids(k, features.dim());
    for (int c = 0; c < k; ++c) centroids.row(c) = features.values.row(idx[static_cast<std::size_t>(c)]);

    std::vector<int> assign(static_cast<std::size_t>(n), -1);
    std::vector<std::int64_t> counts(static_cast<std::size_t>(k), 0);
    for (int iter = 0; iter < max_iters; ++iter) {
        bool changed = false;
        for (Index i = 0; i < n; ++i) {
            int best = 0;
            double best_d = (features.values.row(i) - centroids.row(0)).squaredNorm();
            for (int c = 1; c < k; ++c) {
                const double d = (features.values.row(i) - centroids.row(c)).squaredNorm();
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            if (assign[static_cast<std::size_t>(i)] != best) {
                assign[static_cast<std::size_t>(i)] = best;
                changed = true;
            }
        }
        if (!changed) break;

        Matrix sums = Matrix::Zero(k, features.dim());
        std::fill(counts.begin(), counts.end(), 0);
        for (Index i = 0; i < n; ++i) {
            sums.row(assign[static_cast<std::size_t>(i)]) += features.values.row(i);
            ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
        }
        for (int c = 0; c < k; ++c)
            if (counts[static_cast<std::size_t>(c)] > 0)
                centroids.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
    }

    std::fill(counts.begin(), counts.end(), 0);
    for (Index i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];

    std::vector<Prototype> out;
    out.reserve(static_cast<std::size_t>(k));
    for (int c = 0; c < k; ++c) {
        Prototype p;
        p.class_id = features.class_id;
        p.kind = ProtoKind::fine;
        p.vector = centroids.row(c).transpose();
        p.member_count = counts[static_cast<std::size_t>(c)];
        out.push_back(std::move(p));
    }
    return out;
}

/// Loss and exact gradients of replaying every stored prototype through a
/// linear classifier (weights: d x C, bias: C). Each prototype contributes
/// one cross-entropy term against its class id; terms are summed, not
/// averaged. The store is never mutated.
struct ReplayGrad {
    double loss = 0.0;
    Matrix d_weights;  // d x C
    Vector d_bias;     // C
};

namespace detail {

inline void replay_one(const Prototype& p, const Matrix& weights, const Vector& bias,
                       ReplayGrad& g) {
    const Index classes = bias.size();
    if (p.class_id < 0 || p.class_id >= classes)
        throw dimension_mismatch("replay_loss: class id " + std::to_string(p.class_id) +
                                 " outside classifier range of " + std::to_string(classes));
    if (p.vector.size() != weights.rows())
        throw dimension_mismatch("replay_loss: prototype dim " + std::to_string(p.vector.size()) +
                                 " vs classifier input dim " + std::to_string(weights.rows()));

    Vector logits = weights.transpose() * p.vector + bias;
    const double max_logit = logits.maxCoeff();
    Vector ex = (logits.array() - max_logit).exp();
    const double z = ex.sum();
    Vector prob = ex / z;

    g.loss += -(logits[p.class_id] - max_logit - std::log(z));
    Vector dlogits = prob;
    dlogits[p.class_id] -= 1.0;
    g.d_weights += p.vector * dlogits.transpose();
    g.d_bias += dlogits;
}

}  // namespace detail

inline ReplayGrad replay_loss(const PrototypeStore& store, const Matrix& weights,
                              const Vector& bias) {
    if (weights.cols() != bias.size())
        throw dimension_mismatch("replay_loss: weights/bias class count mismatch");
    ReplayGrad g;
    g.d_weights = Matrix::Zero(weights.rows(), weights.cols());
    g.d_bias = Vector::Zero(bias.size());
    for (const auto& [cls, p] : store.coarse) detail::replay_one(p, weights, bias, g);
    for (const auto& [cls, list] : store.fine)
        for (const Prototype& p : list) detail::replay_one(p, weights, bias, g);
    return g;
}

/// Extends `prior` with prototypes for a new stage: one coarse prototype per
/// class plus up to budget-1 fine prototypes (the coarse one counts toward
/// the per-class budget). Prior entries are carried over untouched.
inline PrototypeStore build_store_for_stage(const std::map<int, FeatureMatrix>& per_class_features,
                                            double r, int budget, const PrototypeStore& prior) {
    if (budget < 1) throw invalid_input("build_store_for_stage: budget must be >= 1");
    for (const auto& [cls, feats] : per_class_features) {
        if (prior.has_class(cls))
            throw invalid_input("build_store_for_stage: class " + std::to_string(cls) +
                                " already present in prior store");
        if (feats.class_id != cls)
            throw invalid_input("build_store_for_stage: class key " + std::to_string(cls) +
                                " does not match feature matrix class id");
    }

    PrototypeStore store = prior;
    store.budget = budget;
    store.radius = r;
    for (const auto& [cls, feats] : per_class_features) {
        store.coarse[cls] = compute_coarse_prototype(feats);
        if (budget > 1) store.fine[cls] = select_fine_prototypes(feats, r, budget - 1);
    }
    return store;
}

/// Binary form: container header, then {d, budget, radius}, then one record
/// per prototype. Round-trips bit-exactly.
inline std::vector<char> serialize(const PrototypeStore& store) {
    binio::Writer w;
    binio::write_header(w, binio::PayloadKind::prototype_store);

    Index dim = 0;
    if (!store.coarse.empty()) dim = store.coarse.begin()->second.vector.size();

    w.u64(static_cast<std::uint64_t>(dim));
    w.u64(static_cast<std::uint64_t>(store.budget));
    w.f64(store.radius);

    std::uint64_t records = store.coarse.size();
    for (const auto& [cls, list] : store.fine) records += list.size();
    w.u64(records);

    auto put = [&](const Prototype& p) {
        w.i64(p.class_id);
        w.u8(static_cast<std::uint8_t>(p.kind));
        w.u64(static_cast<std::uint64_t>(p.member_count));
        w.vec(p.vector);
    };
    for (const auto& [cls, p] : store.coarse) put(p);
    for (const auto& [cls, list] : store.fine)
        for (const Prototype& p : list) put(p);
    return w.bytes();
}

inline PrototypeStore deserialize_store(std::vector<char> bytes) {
    binio::Reader r(std::move(bytes));
    binio::read_header(r, binio::PayloadKind::prototype_store);

    PrototypeStore store;
    const std::uint64_t dim = r.u64();
    store.budget = static_cast<int>(r.u64());
    store.radius = r.f64();

    const std::uint64_t records = r.u64();
    for (std::uint64_t i = 0; i < records; ++i) {
        Prototype p;
        p.class_id = static_cast<int>(r.i64());
        const std::uint8_t kind = r.u8();
        if (kind > 1) r.fail("bad prototype kind");
        p.kind = static_cast<ProtoKind>(kind);
        p.member_count = static_cast<std::int64_t>(r.u64());
        p.vector = r.vec();
        if (static_cast<std::uint64_t>(p.vector.size()) != dim) r.fail("prototype dim mismatch");
        if (p.kind == ProtoKind::coarse) {
            if (store.coarse.count(p.class_id)) r.fail("duplicate coarse prototype");
            store.coarse[p.class_id] = std::move(p);
        } else {
            store.fine[p.class_id].push_back(std::move(p));
        }
    }
    r.expect_end();
    return store;
}

inline void save(const PrototypeStore& store, const std::filesystem::path& path) {
    binio::write_file(path, serialize(store));
}

inline PrototypeStore load_store(const std::filesystem::path& path) {
    return deserialize_store(binio::read_file(path));
}

}  // namespace nsreplay
