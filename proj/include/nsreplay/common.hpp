#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace nsreplay {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Bad argument values (empty inputs, overlapping class ids, K out of range).
struct invalid_input : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Incompatible shapes between operands.
struct dimension_mismatch : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// A feature row that cannot enter cosine space (zero norm).
struct degenerate_feature : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Non-finite values or a failed numerical routine.
struct numerical_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Malformed serialized data; message carries the byte offset.
struct parse_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// An API precondition tying two calls together was broken (e.g. stale trace).
struct contract_violation : std::logic_error {
    using std::logic_error::logic_error;
};

inline bool all_finite(const Matrix& m) { return m.allFinite(); }
inline bool all_finite(const Vector& v) { return v.allFinite(); }

}  // namespace nsreplay
