// SPDX-License-Identifier: Apache-2.0
//
// Dense numerics and a small reverse-mode tape over Eigen matrices.
//
// Values on the tape are always 2-D (scalars are 1x1). Every primitive checks
// that its result is finite, so a NaN surfaces at the operation that made it.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "starft/error.hpp"

namespace starft {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
/// Boolean selection mask; `true` keeps an entry.
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Norms at or below this are treated as degenerate.
inline constexpr double kNormEpsilon = 1e-12;

template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> l2_normalize(
    const Eigen::MatrixBase<Derived>& v) {
  const auto norm = v.norm();
  if (!(norm > kNormEpsilon)) {
    throw DegenerateNormError("l2_normalize: norm " + std::to_string(norm) +
                              " is at or below epsilon");
  }
  return v / norm;
}

template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> softmax(
    const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  if (logits.size() == 0) throw DimensionError("softmax: empty input");
  const Scalar peak = logits.maxCoeff();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> e = (logits.array() - peak).exp().matrix();
  return e / e.sum();
}

template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> log_softmax(
    const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  if (logits.size() == 0) throw DimensionError("log_softmax: empty input");
  const Scalar peak = logits.maxCoeff();
  const Scalar lse = peak + std::log((logits.array() - peak).exp().sum());
  return (logits.array() - lse).matrix();
}

template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& m, const char* what) {
  if (!m.allFinite()) throw NumericError(std::string(what) + ": non-finite value");
}

std::string shape_string(const Matrix& m);

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  double scalar() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Adjoints produced by Tape::backward.
class Gradients {
 public:
  /// Gradient of the output with respect to `v`; all zeros when `v` does not
  /// reach the output.
  Matrix wrt(const Var& v) const;

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::vector<Matrix> adjoints_;
};

/// Ordered record of primitive operations. Owned by one thread of control.
class Tape {
 public:
  using Backprop = std::function<void(const Matrix& upstream, std::vector<Matrix>& adjoints)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable leaf.
  Var variable(Matrix value);
  /// Leaf that never receives gradient.
  Var constant(Matrix value);
  Var scalar_constant(double value);

  /// Replays the tape from a 1x1 output.
  Gradients backward(const Var& output) const;

  std::size_t size() const { return nodes_.size(); }
  const Matrix& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Records a new node. `backprop` runs only when some input requires grad.
  Var record(Matrix value, std::vector<Var> inputs, Backprop backprop, const char* op);

  void check_owned(const Var& v, const char* op) const;

 private:
  struct Node {
    Matrix value;
    std::vector<std::size_t> inputs;
    Backprop backprop;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

// Adds `delta` into an adjoint slot, allocating on first touch.
void accumulate(std::vector<Matrix>& adjoints, std::size_t id, const Matrix& delta);

// ---- primitives -----------------------------------------------------------

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var subtract(const Var& a, const Var& b);
/// Adds a 1xC row to every row of an RxC matrix.
Var add_row_broadcast(const Var& a, const Var& row);
Var scale(const Var& a, double c);
/// Multiplies every entry of `a` by the 1x1 node `s`.
Var scale(const Var& a, const Var& s);
Var hadamard(const Var& a, const Var& b);
Var tanh(const Var& a);
Var exp(const Var& a);
Var negate(const Var& a);
Var sum(const Var& a);
Var trace(const Var& a);
/// Row-wise l2 normalization; throws DegenerateNormError on a near-zero row.
Var l2_normalize_rows(const Var& a);
Var log_softmax_rows(const Var& a);
/// Row-wise log-softmax over the entries selected by `keep`. Unselected
/// entries hold 0 and pass no gradient. Every row must keep at least one entry.
Var masked_log_softmax_rows(const Var& a, const Mask& keep);
/// Sum over rows of KL(p || q) restricted to `keep`, where `reference_log_probs`
/// holds log p (a constant) and `log_probs` holds log q.
Var kl_rows(const Matrix& reference_log_probs, const Var& log_probs, const Mask& keep);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return subtract(a, b); }
inline Var operator-(const Var& a) { return negate(a); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }

}  // namespace starft
