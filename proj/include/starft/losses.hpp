// SPDX-License-Identifier: Apache-2.0
//
// Contrastive loss, the masked negative softmax, the Star KL term and the
// weight schedule that combines them.
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "starft/numcore.hpp"

namespace starft {

struct StarConfig {
  double lambda0 = 0.5;
  bool decay = true;
  bool mask_positive = true;
  /// Concept to draw descriptors from, or "all".
  std::string concept_name = "all";
  /// Ablation: replace descriptors with random vocabulary words.
  bool random_suffix_mode = false;
  int suffix_length = 3;
  /// Compute teacher logits with the student's live temperature instead of
  /// the teacher's own.
  bool shared_temperature = false;

  void validate() const;
};

struct LossBreakdown {
  double contrastive = 0.0;
  double star = 0.0;
  double combined = 0.0;
  double lambda_effective = 0.0;
  bool star_skipped = false;
};

struct NegativeDistribution {
  std::vector<double> probabilities;
  std::size_t anchor = 0;
  /// Column index of each probability.
  std::vector<std::size_t> columns;
};

/// keep(i, j) is true when column j is a negative for row i: c(j) != c(i)
/// with masking on, every column with masking off.
Mask negative_mask(const std::vector<int>& labels, bool mask_positive);
/// True when some row would have no columns left.
bool has_empty_row(const Mask& keep);

/// -(1/2N) sum_i [log softmax_row(L)_ii + log softmax_col(L)_ii].
Var contrastive_loss(const Var& logits);
double contrastive_loss(const Matrix& logits);

NegativeDistribution masked_negative_softmax(const RowVector& logit_row, const std::vector<int>& column_classes,
                                             int anchor_class, bool mask_positive, std::size_t anchor = 0);

/// (1/N) sum_i KL(q~_i || q_i) over the negative columns of each row. The
/// teacher logits are a constant, so gradient reaches only the student.
Var star_loss(const Var& student_logits, const Matrix& teacher_logits, const std::vector<int>& labels,
              bool mask_positive);
double star_loss(const Matrix& student_logits, const Matrix& teacher_logits, const std::vector<int>& labels,
                 bool mask_positive);

/// Returns `contrastive` itself when lambda is 0, so the tape is untouched.
Var combined_loss(const Var& contrastive, const Var& star, double lambda_effective);
double combined_loss(double contrastive, double star, double lambda_effective);

/// lambda0 * (1 - step / total_steps) with decay, lambda0 without.
double lambda_schedule(double lambda0, long step, long total_steps, bool decay);

/// Builds a scalar loss on `tape` from leaves holding the given values.
using LossBuilder = std::function<Var(Tape& tape, const std::vector<Var>& params)>;

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_param = 0;
  Eigen::Index worst_row = 0;
  Eigen::Index worst_col = 0;
};

/// Compares tape gradients against central differences at every entry of
/// every parameter. Relative error is |a - n| / max(1, |a|).
GradientCheckResult gradient_check(const LossBuilder& build, const std::vector<Matrix>& params, double eps = 1e-6);

}  // namespace starft
