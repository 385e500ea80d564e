// Test-only reference implementations, written with plain index loops and
// kept independent of the library code paths they are used to check.
#pragma once

#include "nsreplay/common.hpp"
#include "nsreplay/prototypes.hpp"
#include "nsreplay/rng.hpp"
#include "nsreplay/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace oracle {

using nsreplay::Index;
using nsreplay::Matrix;
using nsreplay::Vector;

inline double rel_error(double a, double b, double floor = 1e-9) {
    const double denom = std::max({std::abs(a), std::abs(b), floor});
    return std::abs(a - b) / denom;
}

/// Plain straight-summation column mean.
inline Vector straight_sum_mean(const Matrix& rows) {
    Vector sum = Vector::Zero(rows.cols());
    for (Index i = 0; i < rows.rows(); ++i)
        for (Index j = 0; j < rows.cols(); ++j) sum[j] += rows(i, j);
    return sum / static_cast<double>(rows.rows());
}

/// Exhaustive greedy hypersphere selection: enumerate every sphere, sort by
/// cardinality with the lowest-center-index tie-break, exclude any candidate
/// whose center is within radius r of an already selected center.
inline std::vector<Vector> greedy_selection(const Matrix& rows, double r, int budget) {
    const Index n = rows.rows();
    std::vector<double> norms(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        double sq = 0.0;
        for (Index j = 0; j < rows.cols(); ++j) sq += rows(i, j) * rows(i, j);
        norms[static_cast<std::size_t>(i)] = std::sqrt(sq);
    }
    auto cos_sim = [&](Index a, Index b) {
        if (a == b) return 1.0;
        double dot = 0.0;
        for (Index j = 0; j < rows.cols(); ++j) dot += rows(a, j) * rows(b, j);
        const double v = dot / (norms[static_cast<std::size_t>(a)] *
                                norms[static_cast<std::size_t>(b)]);
        return std::clamp(v, -1.0, 1.0);
    };

    std::vector<std::vector<Index>> spheres(static_cast<std::size_t>(n));
    for (Index c = 0; c < n; ++c)
        for (Index i = 0; i < n; ++i)
            if (cos_sim(i, c) > r) spheres[static_cast<std::size_t>(c)].push_back(i);

    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    std::sort(order.begin(), order.end(), [&](Index a, Index b) {
        const auto ca = spheres[static_cast<std::size_t>(a)].size();
        const auto cb = spheres[static_cast<std::size_t>(b)].size();
        if (ca != cb) return ca > cb;
        return a < b;
    });

    std::vector<Index> chosen;
    std::vector<Vector> prototypes;
    for (Index c : order) {
        if (static_cast<int>(prototypes.size()) == budget) break;
        bool excluded = false;
        for (Index k : chosen)
            if (cos_sim(c, k) > r) {
                excluded = true;
                break;
            }
        if (excluded) continue;
        chosen.push_back(c);
        Vector mean = Vector::Zero(rows.cols());
        for (Index i : spheres[static_cast<std::size_t>(c)])
            for (Index j = 0; j < rows.cols(); ++j) mean[j] += rows(i, j);
        mean /= static_cast<double>(spheres[static_cast<std::size_t>(c)].size());
        prototypes.push_back(std::move(mean));
    }
    return prototypes;
}

/// The documented k-means initialization: k distinct row indices via partial
/// Fisher-Yates over the seeded stream.
inline std::vector<Index> kmeans_init_indices(Index n, int k, std::uint64_t seed) {
    nsreplay::Rng rng(seed);
    std::vector<Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), Index{0});
    for (int i = 0; i < k; ++i) {
        const auto j = static_cast<std::size_t>(i) +
                       static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(n - i)));
        std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
    }
    idx.resize(static_cast<std::size_t>(k));
    return idx;
}

/// Independent Lloyd iteration from the given initial centroids. Ties to the
/// lowest centroid index; empty clusters keep their previous centroid.
inline Matrix lloyd(const Matrix& rows, Matrix centroids, int max_iters = 100) {
    const Index n = rows.rows();
    const auto k = static_cast<int>(centroids.rows());
    std::vector<int> assign(static_cast<std::size_t>(n), -1);
    for (int iter = 0; iter < max_iters; ++iter) {
        bool changed = false;
        for (Index i = 0; i < n; ++i) {
            int best = 0;
            double best_d = 0.0;
            for (int c = 0; c < k; ++c) {
                double d = 0.0;
                for (Index j = 0; j < rows.cols(); ++j) {
                    const double diff = rows(i, j) - centroids(c, j);
                    d += diff * diff;
                }
                if (c == 0 || d < best_d) {
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
        for (int c = 0; c < k; ++c) {
            Vector sum = Vector::Zero(rows.cols());
            std::int64_t count = 0;
            for (Index i = 0; i < n; ++i)
                if (assign[static_cast<std::size_t>(i)] == c) {
                    for (Index j = 0; j < rows.cols(); ++j) sum[j] += rows(i, j);
                    ++count;
                }
            if (count > 0) centroids.row(c) = (sum / static_cast<double>(count)).transpose();
        }
    }
    return centroids;
}

/// Pooled uncentered second moment over a list of batches, computed in one
/// shot with plain loops.
inline Matrix pooled_second_moment(const std::vector<Matrix>& batches) {
    const Index d = batches.front().cols();
    Matrix sum = Matrix::Zero(d, d);
    std::int64_t count = 0;
    for (const Matrix& b : batches) {
        for (Index i = 0; i < b.rows(); ++i)
            for (Index r = 0; r < d; ++r)
                for (Index c = 0; c < d; ++c) sum(r, c) += b(i, r) * b(i, c);
        count += b.rows();
    }
    return sum / static_cast<double>(count);
}

/// Total stage loss recomputed for finite differencing (values only).
inline double total_loss(const nsreplay::ToyModel& model, const Matrix& inputs,
                         const std::vector<int>& labels, const Matrix& targets,
                         const nsreplay::PrototypeStore& store) {
    const nsreplay::ForwardTrace trace = nsreplay::forward(model, inputs);
    double loss = 0.0;
    for (Index i = 0; i < inputs.rows(); ++i) {
        const double mx = trace.logits.row(i).maxCoeff();
        double z = 0.0;
        for (Index c = 0; c < trace.logits.cols(); ++c) z += std::exp(trace.logits(i, c) - mx);
        loss += -(trace.logits(i, labels[static_cast<std::size_t>(i)]) - mx - std::log(z));
    }
    loss /= static_cast<double>(inputs.rows());
    loss += (trace.regression - targets).squaredNorm() /
            static_cast<double>(trace.regression.size());
    if (!store.empty())
        loss += nsreplay::replay_loss(store, model.cls_weights, model.cls_bias).loss;
    return loss;
}

/// Mutable views of every parameter in the model, in a fixed order.
inline std::vector<double*> parameter_cells(nsreplay::ToyModel& model) {
    std::vector<double*> cells;
    for (auto& layer : model.trunk) {
        for (Index r = 0; r < layer.weights.rows(); ++r)
            for (Index c = 0; c < layer.weights.cols(); ++c) cells.push_back(&layer.weights(r, c));
        for (Index i = 0; i < layer.bias.size(); ++i) cells.push_back(&layer.bias[i]);
    }
    for (Index r = 0; r < model.cls_weights.rows(); ++r)
        for (Index c = 0; c < model.cls_weights.cols(); ++c) cells.push_back(&model.cls_weights(r, c));
    for (Index i = 0; i < model.cls_bias.size(); ++i) cells.push_back(&model.cls_bias[i]);
    for (Index r = 0; r < model.reg_weights.rows(); ++r)
        for (Index c = 0; c < model.reg_weights.cols(); ++c) cells.push_back(&model.reg_weights(r, c));
    for (Index i = 0; i < model.reg_bias.size(); ++i) cells.push_back(&model.reg_bias[i]);
    return cells;
}

/// The analytic gradients flattened in the same order as parameter_cells.
inline std::vector<double> gradient_cells(const nsreplay::Gradients& g) {
    std::vector<double> cells;
    for (std::size_t l = 0; l < g.trunk_weights.size(); ++l) {
        for (Index r = 0; r < g.trunk_weights[l].rows(); ++r)
            for (Index c = 0; c < g.trunk_weights[l].cols(); ++c)
                cells.push_back(g.trunk_weights[l](r, c));
        for (Index i = 0; i < g.trunk_bias[l].size(); ++i) cells.push_back(g.trunk_bias[l][i]);
    }
    for (Index r = 0; r < g.cls_weights.rows(); ++r)
        for (Index c = 0; c < g.cls_weights.cols(); ++c) cells.push_back(g.cls_weights(r, c));
    for (Index i = 0; i < g.cls_bias.size(); ++i) cells.push_back(g.cls_bias[i]);
    for (Index r = 0; r < g.reg_weights.rows(); ++r)
        for (Index c = 0; c < g.reg_weights.cols(); ++c) cells.push_back(g.reg_weights(r, c));
    for (Index i = 0; i < g.reg_bias.size(); ++i) cells.push_back(g.reg_bias[i]);
    return cells;
}

/// Random feature matrix with entries sampled from the given stream.
inline Matrix random_matrix(Index rows, Index cols, nsreplay::Rng& rng, double scale = 1.0) {
    Matrix m(rows, cols);
    for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) m(r, c) = scale * rng.normal();
    return m;
}

}  // namespace oracle
