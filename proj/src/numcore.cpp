// SPDX-License-Identifier: Apache-2.0
#include "starft/numcore.hpp"

#include <algorithm>
#include <limits>
#include <sstream>
#include <utility>

namespace starft {

std::string shape_string(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

const Matrix& Var::value() const {
  if (tape_ == nullptr) throw Error("Var: uninitialized handle");
  return tape_->value(id_);
}

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) {
    throw DimensionError("Var::scalar: node is " + shape_string(v) + ", not 1x1");
  }
  return v(0, 0);
}

Matrix Gradients::wrt(const Var& v) const {
  if (v.tape() != tape_) throw Error("Gradients::wrt: variable belongs to another tape");
  const Matrix& adj = adjoints_.at(v.id());
  if (adj.size() == 0) return Matrix::Zero(v.rows(), v.cols());
  return adj;
}

Var Tape::variable(Matrix value) {
  require_finite(value, "Tape::variable");
  nodes_.push_back(Node{std::move(value), {}, {}, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) {
  require_finite(value, "Tape::constant");
  nodes_.push_back(Node{std::move(value), {}, {}, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::scalar_constant(double value) {
  Matrix m(1, 1);
  m(0, 0) = value;
  return constant(std::move(m));
}

void Tape::check_owned(const Var& v, const char* op) const {
  if (v.tape() != this) throw Error(std::string(op) + ": operand recorded on another tape");
}

Var Tape::record(Matrix value, std::vector<Var> inputs, Backprop backprop, const char* op) {
  require_finite(value, op);
  Node node;
  node.value = std::move(value);
  for (const Var& in : inputs) {
    check_owned(in, op);
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (node.requires_grad) node.backprop = std::move(backprop);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(const Var& output) const {
  if (output.tape() != this || output.id() >= nodes_.size()) {
    throw Error("Tape::backward: output is not recorded on this tape");
  }
  const Matrix& out = nodes_[output.id()].value;
  if (out.rows() != 1 || out.cols() != 1) {
    throw DimensionError("Tape::backward: output must be 1x1, got " + shape_string(out));
  }
  Gradients g;
  g.tape_ = this;
  g.adjoints_.resize(nodes_.size());
  g.adjoints_[output.id()] = Matrix::Ones(1, 1);
  for (std::size_t i = output.id() + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (!node.backprop || g.adjoints_[i].size() == 0) continue;
    // Inputs always precede their node, so the callback never writes slot i.
    node.backprop(g.adjoints_[i], g.adjoints_);
  }
  return g;
}

void accumulate(std::vector<Matrix>& adjoints, std::size_t id, const Matrix& delta) {
  Matrix& slot = adjoints[id];
  if (slot.size() == 0) {
    slot = delta;
  } else {
    slot += delta;
  }
}

namespace {

Tape& tape_of(const Var& a, const char* op) {
  if (!a.valid()) throw Error(std::string(op) + ": uninitialized operand");
  return *a.tape();
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_string(a.value()) + " and " +
                         shape_string(b.value()) + " differ");
  }
}

void require_scalar(const Var& s, const char* op) {
  if (s.rows() != 1 || s.cols() != 1) {
    throw DimensionError(std::string(op) + ": expected 1x1, got " + shape_string(s.value()));
  }
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ (" + shape_string(a.value()) + " * " +
                         shape_string(b.value()) + ")");
  }
  const std::size_t ia = a.id(), ib = b.id();
  const Tape* tp = &t;
  return t.record(a.value() * b.value(), {a, b},
                  [tp, ia, ib](const Matrix& g, std::vector<Matrix>& adj) {
                    if (tp->requires_grad(ia)) accumulate(adj, ia, g * tp->value(ib).transpose());
                    if (tp->requires_grad(ib)) accumulate(adj, ib, tp->value(ia).transpose() * g);
                  },
                  "matmul");
}

Var transpose(const Var& a) {
  Tape& t = tape_of(a, "transpose");
  const std::size_t ia = a.id();
  return t.record(a.value().transpose(), {a},
                  [ia](const Matrix& g, std::vector<Matrix>& adj) {
                    accumulate(adj, ia, g.transpose());
                  },
                  "transpose");
}

Var add(const Var& a, const Var& b) {
  Tape& t = tape_of(a, "add");
  require_same_shape(a, b, "add");
  const std::size_t ia = a.id(), ib = b.id();
  const Tape* tp = &t;
  return t.record(a.value() + b.value(), {a, b},
                  [tp, ia, ib](const Matrix& g, std::vector<Matrix>& adj) {
                    if (tp->requires_grad(ia)) accumulate(adj, ia, g);
                    if (tp->requires_grad(ib)) accumulate(adj, ib, g);
                  },
                  "add");
}

Var subtract(const Var& a, const Var& b) {
  Tape& t = tape_of(a, "subtract");
  require_same_shape(a, b, "subtract");
  const std::size_t ia = a.id(), ib = b.id();
  const Tape* tp = &t;
  return t.record(a.value() - b.value(), {a, b},
                  [tp, ia, ib](const Matrix& g, std::vector<Matrix>& adj) {
                    if (tp->requires_grad(ia)) accumulate(adj, ia, g);
                    if (tp->requires_grad(ib)) accumulate(adj, ib, -g);
                  },
                  "subtract");
}

Var add_row_broadcast(const Var& a, const Var& row) {
  Tape& t = tape_of(a, "add_row_broadcast");
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("add_row_broadcast: row is " + shape_string(row.value()) +
                         ", matrix is " + shape_string(a.value()));
  }
  const std::size_t ia = a.id(), ir = row.id();
  const Tape* tp = &t;
  Matrix out = a.value().rowwise() + row.value().row(0);
  return t.record(std::move(out), {a, row},
                  [tp, ia, ir](const Matrix& g, std::vector<Matrix>& adj) {
                    if (tp->requires_grad(ia)) accumulate(adj, ia, g);
                    if (tp->requires_grad(ir)) accumulate(adj, ir, g.colwise().sum());
                  },
                  "add_row_broadcast");
}

Var scale(const Var& a, double c) {
  Tape& t = tape_of(a, "scale");
  const std::size_t ia = a.id();
  return t.record(a.value() * c, {a},
                  [ia, c](const Matrix& g, std::vector<Matrix>& adj) { accumulate(adj, ia, g * c); },
                  "scale");
}

Var scale(const Var& a, const Var& s) {
  Tape& t = tape_of(a, "scale");
  require_scalar(s, "scale");
  const std::size_t ia = a.id(), is = s.id();
  const Tape* tp = &t;
  return t.record(a.value() * s.scalar(), {a, s},
                  [tp, ia, is](const Matrix& g, std::vector<Matrix>& adj) {
                    const double sv = tp->value(is)(0, 0);
                    if (tp->requires_grad(ia)) accumulate(adj, ia, g * sv);
                    if (tp->requires_grad(is)) {
                      Matrix ds(1, 1);
                      ds(0, 0) = g.cwiseProduct(tp->value(ia)).sum();
                      accumulate(adj, is, ds);
                    }
                  },
                  "scale");
}

Var hadamard(const Var& a, const Var& b) {
  Tape& t = tape_of(a, "hadamard");
  require_same_shape(a, b, "hadamard");
  const std::size_t ia = a.id(), ib = b.id();
  const Tape* tp = &t;
  return t.record(a.value().cwiseProduct(b.value()), {a, b},
                  [tp, ia, ib](const Matrix& g, std::vector<Matrix>& adj) {
                    if (tp->requires_grad(ia)) accumulate(adj, ia, g.cwiseProduct(tp->value(ib)));
                    if (tp->requires_grad(ib)) accumulate(adj, ib, g.cwiseProduct(tp->value(ia)));
                  },
                  "hadamard");
}

Var tanh(const Var& a) {
  Tape& t = tape_of(a, "tanh");
  const std::size_t ia = a.id();
  Matrix out = a.value().array().tanh().matrix();
  const Tape* tp = &t;
  const std::size_t io = t.size();
  return t.record(std::move(out), {a},
                  [tp, ia, io](const Matrix& g, std::vector<Matrix>& adj) {
                    const Matrix& y = tp->value(io);
                    accumulate(adj, ia, (g.array() * (1.0 - y.array().square())).matrix());
                  },
                  "tanh");
}

Var exp(const Var& a) {
  Tape& t = tape_of(a, "exp");
  const std::size_t ia = a.id();
  Matrix out = a.value().array().exp().matrix();
  const Tape* tp = &t;
  const std::size_t io = t.size();
  return t.record(std::move(out), {a},
                  [tp, ia, io](const Matrix& g, std::vector<Matrix>& adj) {
                    accumulate(adj, ia, g.cwiseProduct(tp->value(io)));
                  },
                  "exp");
}

Var negate(const Var& a) { return scale(a, -1.0); }

Var sum(const Var& a) {
  Tape& t = tape_of(a, "sum");
  const std::size_t ia = a.id();
  const Eigen::Index r = a.rows(), c = a.cols();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return t.record(std::move(out), {a},
                  [ia, r, c](const Matrix& g, std::vector<Matrix>& adj) {
                    accumulate(adj, ia, Matrix::Constant(r, c, g(0, 0)));
                  },
                  "sum");
}

Var trace(const Var& a) {
  Tape& t = tape_of(a, "trace");
  if (a.rows() != a.cols()) throw DimensionError("trace: matrix is " + shape_string(a.value()));
  const std::size_t ia = a.id();
  const Eigen::Index n = a.rows();
  Matrix out(1, 1);
  out(0, 0) = a.value().trace();
  return t.record(std::move(out), {a},
                  [ia, n](const Matrix& g, std::vector<Matrix>& adj) {
                    Matrix d = Matrix::Zero(n, n);
                    d.diagonal().setConstant(g(0, 0));
                    accumulate(adj, ia, d);
                  },
                  "trace");
}

Var l2_normalize_rows(const Var& a) {
  Tape& t = tape_of(a, "l2_normalize_rows");
  const Matrix& x = a.value();
  Vector norms = x.rowwise().norm();
  for (Eigen::Index i = 0; i < norms.size(); ++i) {
    if (!(norms(i) > kNormEpsilon)) {
      throw DegenerateNormError("l2_normalize_rows: row " + std::to_string(i) + " has norm " +
                                std::to_string(norms(i)));
    }
  }
  Matrix out = norms.cwiseInverse().asDiagonal() * x;
  const std::size_t ia = a.id();
  const Tape* tp = &t;
  const std::size_t io = t.size();
  return t.record(std::move(out), {a},
                  [tp, ia, io, norms](const Matrix& g, std::vector<Matrix>& adj) {
                    const Matrix& y = tp->value(io);
                    const Vector dots = (g.cwiseProduct(y)).rowwise().sum();
                    Matrix d = g - dots.asDiagonal() * y;
                    accumulate(adj, ia, norms.cwiseInverse().asDiagonal() * d);
                  },
                  "l2_normalize_rows");
}

Var log_softmax_rows(const Var& a) {
  Tape& t = tape_of(a, "log_softmax_rows");
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) out.row(i) = log_softmax(x.row(i).transpose()).transpose();
  const std::size_t ia = a.id();
  const Tape* tp = &t;
  const std::size_t io = t.size();
  return t.record(std::move(out), {a},
                  [tp, ia, io](const Matrix& g, std::vector<Matrix>& adj) {
                    const Matrix p = tp->value(io).array().exp().matrix();
                    const Vector gsum = g.rowwise().sum();
                    accumulate(adj, ia, g - gsum.asDiagonal() * p);
                  },
                  "log_softmax_rows");
}

Var masked_log_softmax_rows(const Var& a, const Mask& keep) {
  Tape& t = tape_of(a, "masked_log_softmax_rows");
  const Matrix& x = a.value();
  if (keep.rows() != x.rows() || keep.cols() != x.cols()) {
    throw DimensionError("masked_log_softmax_rows: mask shape does not match logits");
  }
  Matrix out = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double peak = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (keep(i, j)) peak = std::max(peak, x(i, j));
    }
    if (!std::isfinite(peak)) {
      throw DimensionError("masked_log_softmax_rows: row " + std::to_string(i) +
                           " keeps no entries");
    }
    double acc = 0.0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (keep(i, j)) acc += std::exp(x(i, j) - peak);
    }
    const double lse = peak + std::log(acc);
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (keep(i, j)) out(i, j) = x(i, j) - lse;
    }
  }
  const std::size_t ia = a.id();
  const Tape* tp = &t;
  const std::size_t io = t.size();
  return t.record(std::move(out), {a},
                  [tp, ia, io, keep](const Matrix& g, std::vector<Matrix>& adj) {
                    const Matrix& y = tp->value(io);
                    Matrix d = Matrix::Zero(y.rows(), y.cols());
                    for (Eigen::Index i = 0; i < y.rows(); ++i) {
                      double gsum = 0.0;
                      for (Eigen::Index j = 0; j < y.cols(); ++j) {
                        if (keep(i, j)) gsum += g(i, j);
                      }
                      for (Eigen::Index j = 0; j < y.cols(); ++j) {
                        if (keep(i, j)) d(i, j) = g(i, j) - std::exp(y(i, j)) * gsum;
                      }
                    }
                    accumulate(adj, ia, d);
                  },
                  "masked_log_softmax_rows");
}

Var kl_rows(const Matrix& reference_log_probs, const Var& log_probs, const Mask& keep) {
  Tape& t = tape_of(log_probs, "kl_rows");
  const Matrix& lq = log_probs.value();
  if (reference_log_probs.rows() != lq.rows() || reference_log_probs.cols() != lq.cols() ||
      keep.rows() != lq.rows() || keep.cols() != lq.cols()) {
    throw DimensionError("kl_rows: reference, log-probabilities and mask must share a shape");
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < lq.rows(); ++i) {
    for (Eigen::Index j = 0; j < lq.cols(); ++j) {
      if (!keep(i, j)) continue;
      const double lp = reference_log_probs(i, j);
      total += std::exp(lp) * (lp - lq(i, j));
    }
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  const std::size_t iq = log_probs.id();
  return t.record(std::move(out), {log_probs},
                  [iq, reference_log_probs, keep](const Matrix& g, std::vector<Matrix>& adj) {
                    Matrix d = Matrix::Zero(reference_log_probs.rows(), reference_log_probs.cols());
                    for (Eigen::Index i = 0; i < d.rows(); ++i) {
                      for (Eigen::Index j = 0; j < d.cols(); ++j) {
                        if (keep(i, j)) d(i, j) = -g(0, 0) * std::exp(reference_log_probs(i, j));
                      }
                    }
                    accumulate(adj, iq, d);
                  },
                  "kl_rows");
}

}  // namespace starft
