#pragma once

#include "nsreplay/binio.hpp"
#include "nsreplay/common.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace nsreplay {

/// Streaming uncentered second moment of layer inputs. Internally keeps raw
/// sums (stage scratch and committed total) so that multi-stage merging is
/// plain addition; the normalized matrices T_t = sum/M_t and
/// T_bar = total/M_bar are derived views. The committed merge
/// T_bar <- (M_bar/M')·T_bar + (M_t/M')·T_t is algebraically identical.
struct CovarianceAccumulator {
    std::string label;
    Index dim = 0;
    Matrix total_sum;   // sum of x^T x over committed stages
    std::int64_t count = 0;
    Matrix stage_sum;   // sum of x^T x over the current stage
    std::int64_t stage_count = 0;

    explicit CovarianceAccumulator(Index d = 0, std::string name = {})
        : label(std::move(name)),
          dim(d),
          total_sum(Matrix::Zero(d, d)),
          stage_sum(Matrix::Zero(d, d)) {}

    bool scratch_empty() const { return stage_count == 0; }

    /// Normalized committed second moment (zeros when nothing committed).
    Matrix second_moment() const {
        return count > 0 ? Matrix(total_sum / static_cast<double>(count))
                         : Matrix(Matrix::Zero(dim, dim));
    }

    /// Normalized in-progress stage second moment.
    Matrix stage_second_moment() const {
        return stage_count > 0 ? Matrix(stage_sum / static_cast<double>(stage_count))
                               : Matrix(Matrix::Zero(dim, dim));
    }
};

/// Adds a batch of row vectors to the current stage scratch.
inline void accumulate_covariance(CovarianceAccumulator& acc, const Matrix& inputs) {
    if (inputs.cols() != acc.dim)
        throw dimension_mismatch("accumulate_covariance: input width " +
                                 std::to_string(inputs.cols()) + " vs accumulator dim " +
                                 std::to_string(acc.dim));
    if (!all_finite(inputs)) throw numerical_error("accumulate_covariance: non-finite inputs");
    acc.stage_sum.noalias() += inputs.transpose() * inputs;
    acc.stage_count += inputs.rows();
}

inline void accumulate_covariance(CovarianceAccumulator& acc, const Vector& input) {
    if (input.size() != acc.dim)
        throw dimension_mismatch("accumulate_covariance: input width " +
                                 std::to_string(input.size()) + " vs accumulator dim " +
                                 std::to_string(acc.dim));
    if (!all_finite(input)) throw numerical_error("accumulate_covariance: non-finite input");
    acc.stage_sum.noalias() += input * input.transpose();
    acc.stage_count += 1;
}

/// Folds the stage scratch into the committed total with sample-count
/// weights and resets the scratch. An empty stage is a no-op.
/// Returns false when there was nothing to commit.
inline bool commit_stage(CovarianceAccumulator& acc) {
    if (acc.stage_count == 0) return false;
    acc.total_sum += acc.stage_sum;
    acc.count += acc.stage_count;
    acc.stage_sum.setZero();
    acc.stage_count = 0;
    return true;
}

struct NullityPolicy {
    enum class Mode { exact_zero, energy };
    Mode mode = Mode::energy;
    double zero_tol = 1e-10;    // relative to the largest singular value
    double energy_keep = 0.99;  // fraction of spectral energy to protect
    int min_nullity = 0;

    static NullityPolicy exact_zero(double tol = 1e-10, int min_r = 0) {
        return NullityPolicy{Mode::exact_zero, tol, 0.99, min_r};
    }
    static NullityPolicy energy(double keep = 0.99, int min_r = 0) {
        return NullityPolicy{Mode::energy, 1e-10, keep, min_r};
    }
};

/// Number of trailing singular directions to keep as the null space.
/// `singular_values` must be non-negative and sorted descending.
inline int nullity_select(const std::vector<double>& singular_values, const NullityPolicy& policy) {
    const int dim = static_cast<int>(singular_values.size());
    if (!(policy.energy_keep > 0.0 && policy.energy_keep < 1.0))
        throw invalid_input("nullity_select: energy_keep must be in (0,1)");
    if (policy.zero_tol <= 0.0) throw invalid_input("nullity_select: zero_tol must be > 0");

    int r = 0;
    if (policy.mode == NullityPolicy::Mode::exact_zero) {
        const double lambda_max = dim > 0 ? singular_values.front() : 0.0;
        if (lambda_max <= 0.0) {
            r = dim;
        } else {
            const double threshold = policy.zero_tol * lambda_max;
            for (int i = dim - 1; i >= 0 && singular_values[static_cast<std::size_t>(i)] <= threshold; --i)
                ++r;
        }
    } else {
        double total = 0.0;
        for (double v : singular_values) total += v;
        const double allowance = (1.0 - policy.energy_keep) * total;
        double tail = 0.0;
        for (int i = dim - 1; i >= 0; --i) {
            tail += singular_values[static_cast<std::size_t>(i)];
            if (tail <= allowance)
                ++r;
            else
                break;
        }
    }
    return std::clamp(std::max(r, policy.min_nullity), 0, dim);
}

/// Symmetric idempotent projector onto the null space of accumulated inputs.
struct LayerProjection {
    std::string label;
    Matrix basis_product;                // B (or B/||B||_F when normalized)
    int nullity = 0;                     // R
    std::vector<double> singular_values; // descending
    bool normalized = false;
    double frobenius_norm = 0.0;         // ||B||_F of the unnormalized form

    static LayerProjection identity(Index dim, std::string name = {}) {
        LayerProjection p;
        p.label = std::move(name);
        p.basis_product = Matrix::Identity(dim, dim);
        p.nullity = static_cast<int>(dim);
        p.singular_values.assign(static_cast<std::size_t>(dim), 0.0);
        p.frobenius_norm = std::sqrt(static_cast<double>(dim));
        return p;
    }

    Index dim() const { return basis_product.rows(); }
};

/// Eigendecomposes the committed second moment, selects the R smallest
/// directions per policy, and forms B = U'U'^T (optionally scaled to unit
/// Frobenius norm). An accumulator that never saw data yields the identity.
inline LayerProjection compute_projection(const CovarianceAccumulator& acc,
                                          const NullityPolicy& policy, bool normalized) {
    if (!acc.scratch_empty())
        throw contract_violation("compute_projection: accumulator '" + acc.label +
                                 "' has uncommitted stage data");
    if (acc.count == 0) {
        LayerProjection p = LayerProjection::identity(acc.dim, acc.label);
        if (normalized && acc.dim > 0) {
            p.normalized = true;
            p.basis_product /= p.frobenius_norm;
        }
        return p;
    }

    const Matrix second = acc.second_moment();
    Eigen::SelfAdjointEigenSolver<Matrix> solver{second};
    if (solver.info() != Eigen::Success)
        throw numerical_error("compute_projection: eigendecomposition failed for layer '" +
                              acc.label + "'");

    // Eigen returns eigenvalues ascending; record them descending and clamp
    // tiny/negative values (the matrix is PSD up to roundoff) to zero.
    const Index d = acc.dim;
    std::vector<double> lambdas(static_cast<std::size_t>(d));
    double lambda_max = 0.0;
    for (Index i = 0; i < d; ++i) lambda_max = std::max(lambda_max, solver.eigenvalues()[i]);
    const double clamp_below = 1e-14 * lambda_max;
    for (Index i = 0; i < d; ++i) {
        const double v = solver.eigenvalues()[d - 1 - i];
        lambdas[static_cast<std::size_t>(i)] = v > clamp_below ? v : 0.0;
    }

    LayerProjection proj;
    proj.label = acc.label;
    proj.singular_values = lambdas;
    proj.nullity = nullity_select(lambdas, policy);

    // R smallest eigenvalues are the leading columns in ascending order.
    const Matrix null_basis = solver.eigenvectors().leftCols(proj.nullity);
    proj.basis_product = null_basis * null_basis.transpose();
    proj.frobenius_norm = proj.basis_product.norm();
    if (normalized) {
        proj.normalized = true;
        if (proj.frobenius_norm > 0.0) proj.basis_product /= proj.frobenius_norm;
    }
    return proj;
}

/// Projects a gradient onto the null space: the projector acts on the
/// layer-input axis, which is the row axis under the x·W weight layout.
inline Matrix project_gradient(const Matrix& gradient, const LayerProjection& proj) {
    if (gradient.rows() != proj.dim())
        throw dimension_mismatch("project_gradient: gradient input axis " +
                                 std::to_string(gradient.rows()) + " vs projector dim " +
                                 std::to_string(proj.dim()));
    return proj.basis_product * gradient;
}

/// Plain SGD step W' = W - alpha * delta.
inline Matrix apply_update(const Matrix& weights, const Matrix& delta, double alpha) {
    if (weights.rows() != delta.rows() || weights.cols() != delta.cols())
        throw dimension_mismatch("apply_update: shape mismatch");
    if (!(alpha > 0.0)) throw invalid_input("apply_update: alpha must be > 0");
    Matrix next = weights - alpha * delta;
    if (!all_finite(next)) throw numerical_error("apply_update: non-finite update");
    return next;
}

// --- serialization ---------------------------------------------------------

inline std::vector<char> serialize(const std::vector<CovarianceAccumulator>& accs) {
    binio::Writer w;
    binio::write_header(w, binio::PayloadKind::covariance);
    w.u64(accs.size());
    for (const auto& acc : accs) {
        w.str(acc.label);
        w.u64(static_cast<std::uint64_t>(acc.dim));
        w.u64(static_cast<std::uint64_t>(acc.count));
        w.mat(acc.second_moment());
    }
    return w.bytes();
}

inline std::vector<CovarianceAccumulator> deserialize_covariance(std::vector<char> bytes) {
    binio::Reader r(std::move(bytes));
    binio::read_header(r, binio::PayloadKind::covariance);
    const std::uint64_t n = r.u64();
    std::vector<CovarianceAccumulator> accs;
    accs.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        std::string label = r.str();
        const auto dim = static_cast<Index>(r.u64());
        const auto count = static_cast<std::int64_t>(r.u64());
        Matrix second = r.mat();
        if (second.rows() != dim || second.cols() != dim) r.fail("covariance shape mismatch");
        CovarianceAccumulator acc(dim, std::move(label));
        acc.count = count;
        acc.total_sum = second * static_cast<double>(count);
        accs.push_back(std::move(acc));
    }
    r.expect_end();
    return accs;
}

inline std::vector<char> serialize(const std::vector<LayerProjection>& projs) {
    binio::Writer w;
    binio::write_header(w, binio::PayloadKind::projection);
    w.u64(projs.size());
    for (const auto& p : projs) {
        w.str(p.label);
        w.u64(static_cast<std::uint64_t>(p.nullity));
        w.u8(p.normalized ? 1 : 0);
        w.f64(p.frobenius_norm);
        w.u64(p.singular_values.size());
        for (double v : p.singular_values) w.f64(v);
        w.mat(p.basis_product);
    }
    return w.bytes();
}

inline std::vector<LayerProjection> deserialize_projections(std::vector<char> bytes) {
    binio::Reader r(std::move(bytes));
    binio::read_header(r, binio::PayloadKind::projection);
    const std::uint64_t n = r.u64();
    std::vector<LayerProjection> projs;
    projs.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        LayerProjection p;
        p.label = r.str();
        p.nullity = static_cast<int>(r.u64());
        p.normalized = r.u8() != 0;
        p.frobenius_norm = r.f64();
        const std::uint64_t m = r.u64();
        p.singular_values.resize(m);
        for (std::uint64_t j = 0; j < m; ++j) p.singular_values[j] = r.f64();
        p.basis_product = r.mat();
        if (p.basis_product.rows() != p.basis_product.cols()) r.fail("projector not square");
        projs.push_back(std::move(p));
    }
    r.expect_end();
    return projs;
}

}  // namespace nsreplay
