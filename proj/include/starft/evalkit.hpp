// SPDX-License-Identifier: Apache-2.0
//
// Zero-shot classification, group metrics and weight-space ensembling.
#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "starft/encoders.hpp"
#include "starft/prompts.hpp"
#include "starft/synthdata.hpp"

namespace starft {

struct ZeroShotClassifier {
  Matrix weights;  // n_classes x embed_dim
  std::vector<std::string> class_names;
  std::vector<std::string> templates;
};

/// For each class, encodes every rendered template, averages the unit
/// embeddings and renormalizes. Unknown words map to "<unk>".
ZeroShotClassifier build_zero_shot_classifier(const DualEncoderParams& params, const Tokenizer& tok,
                                              const std::vector<std::string>& class_names,
                                              const std::vector<PromptTemplate>& templates);

/// Argmax of x . w_c over class rows; ties go to the lowest index.
int classify(const DualEncoderParams& params, const ZeroShotClassifier& clf, const Vector& features);
std::vector<int> classify(const DualEncoderParams& params, const ZeroShotClassifier& clf, const Matrix& features);
/// Row-wise argmax with lowest-index tie breaking.
std::vector<int> argmax_rows(const Matrix& scores);

struct GroupReport {
  std::map<int, double> per_group;
  std::map<int, std::size_t> counts;
  double worst_group = 0.0;
  double average = 0.0;
  std::size_t n = 0;

  /// {per_group: {name: acc}, worst_group, average, n}; names default to ids.
  nlohmann::ordered_json to_json(const std::vector<std::string>& group_names = {}) const;
};

/// `expected_groups`, when positive, requires groups 0..expected_groups-1 to
/// all be present.
GroupReport group_report(const std::vector<int>& predictions, const std::vector<int>& labels,
                         const std::vector<int>& groups, int expected_groups = 0);

/// Predicts with the model's head when it has one, else with a zero-shot
/// classifier built from the templates.
struct Evaluator {
  Tokenizer tokenizer;
  std::vector<std::string> class_names;
  std::vector<PromptTemplate> templates;

  static Evaluator for_model(const DualEncoderParams& params, const std::vector<std::string>& class_names,
                             const std::vector<PromptTemplate>& templates);

  std::vector<int> predict(const DualEncoderParams& params, const Matrix& features) const;
  double accuracy(const DualEncoderParams& params, const SplitData& data) const;
  GroupReport report(const DualEncoderParams& params, const SplitData& data, int expected_groups = 0) const;
};

/// (1 - alpha) * teacher + alpha * student for every tensor, log-temperature
/// included.
DualEncoderParams wise_interpolate(const DualEncoderParams& teacher, const DualEncoderParams& student, double alpha);

/// 0.0, 0.1, ..., 1.0.
std::vector<double> default_alpha_grid();

struct EvalSet {
  std::string name;
  SplitData data;
};

struct SweepRow {
  double alpha = 0.0;
  double id_val_accuracy = 0.0;
  std::vector<double> eval_accuracies;
};

struct SweepTable {
  std::vector<std::string> eval_names;
  std::vector<SweepRow> rows;
  std::size_t selected = 0;

  double selected_alpha() const { return rows.at(selected).alpha; }
  /// Columns alpha, id_val_acc, then one per eval set.
  std::string to_csv() const;
};

/// Evaluates every alpha and selects the best ID-validation accuracy, ties
/// going to the smaller alpha.
SweepTable ensemble_sweep(const DualEncoderParams& teacher, const DualEncoderParams& student,
                          const std::vector<double>& alphas, const Evaluator& evaluator, const SplitData& id_val,
                          const std::vector<EvalSet>& eval_sets);

}  // namespace starft
