// SPDX-License-Identifier: Apache-2.0
//
// Loop-by-loop reference versions of the losses. They share no code with the
// library beyond the Matrix type.
#pragma once

#include <cmath>
#include <vector>

#include "starft/numcore.hpp"

namespace starft::oracle {

inline double log_sum_exp(const std::vector<double>& v) {
  double peak = v.front();
  for (double x : v) peak = std::max(peak, x);
  double s = 0.0;
  for (double x : v) s += std::exp(x - peak);
  return peak + std::log(s);
}

/// -(1/2N) sum_i [log p(text i | image i) + log p(image i | text i)].
inline double contrastive(const Matrix& logits) {
  const auto n = logits.rows();
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<double> row, col;
    for (Eigen::Index j = 0; j < n; ++j) {
      row.push_back(logits(i, j));
      col.push_back(logits(j, i));
    }
    total += logits(i, i) - log_sum_exp(row);
    total += logits(i, i) - log_sum_exp(col);
  }
  return -total / (2.0 * static_cast<double>(n));
}

/// (1/N) sum_i KL(teacher_i || student_i), each a softmax over the columns j
/// with labels[j] != labels[i] (all columns when `mask_positive` is off).
inline double star(const Matrix& student, const Matrix& teacher, const std::vector<int>& labels, bool mask_positive) {
  const auto n = student.rows();
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<double> s, t;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (mask_positive && labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)]) continue;
      s.push_back(student(i, j));
      t.push_back(teacher(i, j));
    }
    const double zs = log_sum_exp(s);
    const double zt = log_sum_exp(t);
    for (std::size_t k = 0; k < s.size(); ++k) {
      const double log_p = t[k] - zt;
      const double log_q = s[k] - zs;
      total += std::exp(log_p) * (log_p - log_q);
    }
  }
  return total / static_cast<double>(n);
}

}  // namespace starft::oracle
