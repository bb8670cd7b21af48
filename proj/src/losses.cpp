// SPDX-License-Identifier: Apache-2.0
#include "starft/losses.hpp"

#include <cmath>

namespace starft {

void StarConfig::validate() const {
  if (!(lambda0 >= 0.0) || !std::isfinite(lambda0)) {
    throw ValidationError("star config: lambda0 must be a finite nonnegative number");
  }
  if (concept_name.empty()) throw ValidationError("star config: concept must be a name or \"all\"");
  if (suffix_length < 1) throw ValidationError("star config: suffix_length must be at least 1");
}

Mask negative_mask(const std::vector<int>& labels, bool mask_positive) {
  const auto n = static_cast<Eigen::Index>(labels.size());
  Mask keep = Mask::Constant(n, n, true);
  if (!mask_positive) return keep;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) keep(i, j) = labels[i] != labels[j];
  }
  return keep;
}

bool has_empty_row(const Mask& keep) { return (keep.rowwise().count().array() == 0).any(); }

Var contrastive_loss(const Var& logits) {
  if (logits.rows() != logits.cols()) {
    throw DimensionError("contrastive_loss: logits must be square, got " + shape_string(logits.value()));
  }
  const double n = static_cast<double>(logits.rows());
  const Var rows = trace(log_softmax_rows(logits));
  const Var cols = trace(log_softmax_rows(transpose(logits)));
  return scale(rows + cols, -1.0 / (2.0 * n));
}

double contrastive_loss(const Matrix& logits) {
  Tape t;
  return contrastive_loss(t.constant(logits)).scalar();
}

NegativeDistribution masked_negative_softmax(const RowVector& logit_row, const std::vector<int>& column_classes,
                                             int anchor_class, bool mask_positive, std::size_t anchor) {
  if (static_cast<std::size_t>(logit_row.size()) != column_classes.size()) {
    throw DimensionError("masked_negative_softmax: " + std::to_string(logit_row.size()) + " logits but " +
                         std::to_string(column_classes.size()) + " column classes");
  }
  NegativeDistribution out;
  out.anchor = anchor;
  for (std::size_t j = 0; j < column_classes.size(); ++j) {
    if (!mask_positive || column_classes[j] != anchor_class) out.columns.push_back(j);
  }
  if (out.columns.empty()) {
    throw ValidationError("masked_negative_softmax: no negative columns for anchor class " +
                          std::to_string(anchor_class));
  }
  Vector kept(static_cast<Eigen::Index>(out.columns.size()));
  for (std::size_t k = 0; k < out.columns.size(); ++k) {
    kept(static_cast<Eigen::Index>(k)) = logit_row(static_cast<Eigen::Index>(out.columns[k]));
  }
  const Vector p = softmax(kept);
  out.probabilities.assign(p.data(), p.data() + p.size());
  return out;
}

namespace {

void check_star_inputs(const Matrix& student, const Matrix& teacher, const std::vector<int>& labels) {
  if (student.rows() != teacher.rows() || student.cols() != teacher.cols()) {
    throw DimensionError("star_loss: student " + shape_string(student) + " and teacher " +
                         shape_string(teacher) + " logits differ in shape");
  }
  if (student.rows() != student.cols() || static_cast<std::size_t>(student.rows()) != labels.size()) {
    throw DimensionError("star_loss: expected N x N logits with N labels, got " + shape_string(student) +
                         " and " + std::to_string(labels.size()) + " labels");
  }
}

}  // namespace

Var star_loss(const Var& student_logits, const Matrix& teacher_logits, const std::vector<int>& labels,
              bool mask_positive) {
  check_star_inputs(student_logits.value(), teacher_logits, labels);
  const Mask keep = negative_mask(labels, mask_positive);
  if (has_empty_row(keep)) throw ValidationError("star_loss: some anchor has no negative columns");
  // The teacher goes through the same primitive as the student so that equal
  // logits give bitwise equal log-probabilities.
  Tape reference;
  const Matrix teacher_log_probs = masked_log_softmax_rows(reference.constant(teacher_logits), keep).value();
  const Var student_log_probs = masked_log_softmax_rows(student_logits, keep);
  const double n = static_cast<double>(labels.size());
  return scale(kl_rows(teacher_log_probs, student_log_probs, keep), 1.0 / n);
}

double star_loss(const Matrix& student_logits, const Matrix& teacher_logits, const std::vector<int>& labels,
                 bool mask_positive) {
  Tape t;
  return star_loss(t.constant(student_logits), teacher_logits, labels, mask_positive).scalar();
}

Var combined_loss(const Var& contrastive, const Var& star, double lambda_effective) {
  if (!(lambda_effective >= 0.0)) throw ValidationError("combined_loss: lambda must be nonnegative");
  if (lambda_effective == 0.0) return contrastive;
  return contrastive + scale(star, lambda_effective);
}

double combined_loss(double contrastive, double star, double lambda_effective) {
  if (!(lambda_effective >= 0.0)) throw ValidationError("combined_loss: lambda must be nonnegative");
  if (lambda_effective == 0.0) return contrastive;
  return contrastive + lambda_effective * star;
}

double lambda_schedule(double lambda0, long step, long total_steps, bool decay) {
  if (total_steps < 1) throw ValidationError("lambda_schedule: total_steps must be at least 1");
  if (step < 0 || step > total_steps) {
    throw ValidationError("lambda_schedule: step " + std::to_string(step) + " outside [0, " +
                          std::to_string(total_steps) + "]");
  }
  if (!decay) return lambda0;
  return lambda0 * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
}

GradientCheckResult gradient_check(const LossBuilder& build, const std::vector<Matrix>& params, double eps) {
  if (!(eps > 0.0)) throw ValidationError("gradient_check: eps must be positive");
  std::vector<Matrix> analytic;
  {
    Tape t;
    std::vector<Var> leaves;
    for (const auto& p : params) leaves.push_back(t.variable(p));
    const Var loss = build(t, leaves);
    const Gradients g = t.backward(loss);
    for (const auto& v : leaves) analytic.push_back(g.wrt(v));
  }
  const auto evaluate = [&](const std::vector<Matrix>& values) {
    Tape t;
    std::vector<Var> leaves;
    for (const auto& p : values) leaves.push_back(t.constant(p));
    const double v = build(t, leaves).scalar();
    if (!std::isfinite(v)) throw NumericError("gradient_check: non-finite loss at a perturbed point");
    return v;
  };
  GradientCheckResult result;
  std::vector<Matrix> probe = params;
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (Eigen::Index j = 0; j < params[k].cols(); ++j) {
      for (Eigen::Index i = 0; i < params[k].rows(); ++i) {
        const double base = params[k](i, j);
        probe[k](i, j) = base + eps;
        const double up = evaluate(probe);
        probe[k](i, j) = base - eps;
        const double down = evaluate(probe);
        probe[k](i, j) = base;
        const double numeric = (up - down) / (2.0 * eps);
        const double a = analytic[k](i, j);
        const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
        if (err > result.max_relative_error) {
          result.max_relative_error = err;
          result.worst_param = k;
          result.worst_row = i;
          result.worst_col = j;
        }
      }
    }
  }
  return result;
}

}  // namespace starft
