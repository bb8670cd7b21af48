// SPDX-License-Identifier: Apache-2.0
#include "starft/evalkit.hpp"

#include <algorithm>
#include <cstdio>
#include <limits>
#include <sstream>

namespace starft {

ZeroShotClassifier build_zero_shot_classifier(const DualEncoderParams& params, const Tokenizer& tok,
                                              const std::vector<std::string>& class_names,
                                              const std::vector<PromptTemplate>& templates) {
  if (class_names.empty()) throw ValidationError("zero-shot classifier: empty class list");
  if (templates.empty()) throw ValidationError("zero-shot classifier: no templates");
  ZeroShotClassifier clf;
  clf.class_names = class_names;
  for (const auto& t : templates) clf.templates.push_back(t.text());

  std::vector<TokenSequence> seqs;
  for (const auto& name : class_names) {
    for (const auto& t : templates) {
      seqs.push_back(tok.tokenize(render_label_caption(t, name), UnknownPolicy::kMapToUnknown));
    }
  }
  const Matrix emb = encode_texts(params, seqs);
  const auto per_class = static_cast<Eigen::Index>(templates.size());
  clf.weights.resize(static_cast<Eigen::Index>(class_names.size()), emb.cols());
  for (Eigen::Index c = 0; c < clf.weights.rows(); ++c) {
    const RowVector mean = emb.middleRows(c * per_class, per_class).colwise().mean();
    clf.weights.row(c) = l2_normalize(mean.transpose()).transpose();
  }
  return clf;
}

std::vector<int> argmax_rows(const Matrix& scores) {
  std::vector<int> out(static_cast<std::size_t>(scores.rows()));
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < scores.cols(); ++j) {
      if (scores(i, j) > scores(i, best)) best = j;
    }
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

std::vector<int> classify(const DualEncoderParams& params, const ZeroShotClassifier& clf, const Matrix& features) {
  if (clf.weights.cols() != params.dims.embed_dim) {
    throw DimensionError("classify: classifier width " + std::to_string(clf.weights.cols()) +
                         " does not match embed_dim " + std::to_string(params.dims.embed_dim));
  }
  return argmax_rows(encode_images(params, features) * clf.weights.transpose());
}

int classify(const DualEncoderParams& params, const ZeroShotClassifier& clf, const Vector& features) {
  return classify(params, clf, Matrix(features.transpose())).front();
}

GroupReport group_report(const std::vector<int>& predictions, const std::vector<int>& labels,
                         const std::vector<int>& groups, int expected_groups) {
  if (predictions.size() != labels.size() || labels.size() != groups.size()) {
    throw DimensionError("group_report: predictions, labels and groups differ in length");
  }
  if (labels.empty()) throw ValidationError("group_report: no samples");
  std::map<int, std::size_t> correct;
  GroupReport r;
  std::size_t total_correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ++r.counts[groups[i]];
    const bool ok = predictions[i] == labels[i];
    correct[groups[i]] += ok ? 1 : 0;
    total_correct += ok ? 1 : 0;
  }
  for (int g = 0; g < expected_groups; ++g) {
    if (r.counts.find(g) == r.counts.end()) {
      throw ValidationError("group_report: group " + std::to_string(g) + " has no samples");
    }
  }
  r.worst_group = std::numeric_limits<double>::infinity();
  for (const auto& [g, n] : r.counts) {
    const double acc = static_cast<double>(correct[g]) / static_cast<double>(n);
    r.per_group[g] = acc;
    r.worst_group = std::min(r.worst_group, acc);
  }
  r.n = labels.size();
  r.average = static_cast<double>(total_correct) / static_cast<double>(r.n);
  return r;
}

nlohmann::ordered_json GroupReport::to_json(const std::vector<std::string>& group_names) const {
  nlohmann::ordered_json groups = nlohmann::ordered_json::object();
  for (const auto& [g, acc] : per_group) {
    const std::string name = static_cast<std::size_t>(g) < group_names.size() ? group_names[static_cast<std::size_t>(g)]
                                                                               : std::to_string(g);
    groups[name] = {{"accuracy", acc}, {"n", counts.at(g)}};
  }
  nlohmann::ordered_json j;
  j["per_group"] = std::move(groups);
  j["worst_group"] = worst_group;
  j["average"] = average;
  j["n"] = n;
  return j;
}

Evaluator Evaluator::for_model(const DualEncoderParams& params, const std::vector<std::string>& class_names,
                               const std::vector<PromptTemplate>& templates) {
  if (params.vocabulary.empty()) throw ValidationError("evaluator: model carries no vocabulary");
  return Evaluator{Tokenizer::from_vocabulary(params.vocabulary), class_names, templates};
}

std::vector<int> Evaluator::predict(const DualEncoderParams& params, const Matrix& features) const {
  if (features.cols() != params.dims.input_dim) {
    throw DimensionError("evaluate: data has " + std::to_string(features.cols()) +
                         " features per sample but the model expects input_dim=" +
                         std::to_string(params.dims.input_dim));
  }
  if (params.head.size() > 0) {
    if (params.head.rows() != static_cast<Eigen::Index>(class_names.size())) {
      throw DimensionError("evaluate: head has " + std::to_string(params.head.rows()) + " rows for " +
                           std::to_string(class_names.size()) + " classes");
    }
    return argmax_rows(encode_images(params, features) * params.head.transpose());
  }
  return classify(params, build_zero_shot_classifier(params, tokenizer, class_names, templates), features);
}

double Evaluator::accuracy(const DualEncoderParams& params, const SplitData& data) const {
  if (data.size() == 0) throw ValidationError("evaluate: empty split");
  const auto pred = predict(params, data.features);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == data.labels[i] ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

GroupReport Evaluator::report(const DualEncoderParams& params, const SplitData& data, int expected_groups) const {
  return group_report(predict(params, data.features), data.labels, data.groups, expected_groups);
}

DualEncoderParams wise_interpolate(const DualEncoderParams& teacher, const DualEncoderParams& student, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ValidationError("wise_interpolate: alpha " + std::to_string(alpha) + " outside [0, 1]");
  }
  if (!(teacher.dims == student.dims) || teacher.head.rows() != student.head.rows() ||
      teacher.head.cols() != student.head.cols()) {
    throw DimensionError("wise_interpolate: teacher and student shapes differ");
  }
  if (teacher.vocabulary != student.vocabulary) {
    throw ValidationError("wise_interpolate: teacher and student use different vocabularies");
  }
  DualEncoderParams out = student;
  std::vector<Eigen::Ref<const Matrix>> t;
  teacher.visit([&](std::string_view, const Eigen::Ref<const Matrix>& m, bool) { t.emplace_back(m); });
  std::size_t k = 0;
  out.visit([&](std::string_view, Eigen::Ref<Matrix> m, bool) {
    // Endpoints copy exactly rather than relying on 0 * x + 1 * y.
    if (alpha == 0.0) {
      m = t[k];
    } else if (alpha != 1.0) {
      m = (1.0 - alpha) * t[k] + alpha * m;
    }
    ++k;
  });
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", alpha);
  out.lineage.push_back(std::string("wise:alpha=") + buf);
  return out;
}

std::vector<double> default_alpha_grid() {
  std::vector<double> grid;
  for (int i = 0; i <= 10; ++i) grid.push_back(static_cast<double>(i) / 10.0);
  return grid;
}

std::string SweepTable::to_csv() const {
  std::ostringstream os;
  os << "alpha,id_val_acc";
  for (const auto& n : eval_names) os << "," << n;
  os << "\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.6g", r.alpha);
    os << buf;
    std::snprintf(buf, sizeof buf, ",%.17g", r.id_val_accuracy);
    os << buf;
    for (double a : r.eval_accuracies) {
      std::snprintf(buf, sizeof buf, ",%.17g", a);
      os << buf;
    }
    os << "\n";
  }
  return os.str();
}

SweepTable ensemble_sweep(const DualEncoderParams& teacher, const DualEncoderParams& student,
                          const std::vector<double>& alphas, const Evaluator& evaluator, const SplitData& id_val,
                          const std::vector<EvalSet>& eval_sets) {
  if (alphas.empty()) throw ValidationError("ensemble_sweep: no alphas");
  SweepTable table;
  for (const auto& e : eval_sets) table.eval_names.push_back(e.name);
  for (double a : alphas) {
    const DualEncoderParams model = wise_interpolate(teacher, student, a);
    SweepRow row;
    row.alpha = a;
    row.id_val_accuracy = evaluator.accuracy(model, id_val);
    for (const auto& e : eval_sets) row.eval_accuracies.push_back(evaluator.accuracy(model, e.data));
    table.rows.push_back(std::move(row));
  }
  for (std::size_t i = 1; i < table.rows.size(); ++i) {
    const auto& best = table.rows[table.selected];
    const auto& cand = table.rows[i];
    if (cand.id_val_accuracy > best.id_val_accuracy ||
        (cand.id_val_accuracy == best.id_val_accuracy && cand.alpha < best.alpha)) {
      table.selected = i;
    }
  }
  return table;
}

}  // namespace starft
