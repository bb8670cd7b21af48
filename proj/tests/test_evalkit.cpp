// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "starft/evalkit.hpp"

using namespace starft;

namespace {

DualEncoderParams small_model(std::uint64_t seed, const SynthSpec& spec) {
  const Tokenizer tok = benchmark_tokenizer(spec.class_names, spec.attribute_names);
  EncoderDims d;
  d.input_dim = spec.input_dim();
  d.hidden = 8;
  d.embed_dim = 4;
  d.token_dim = 4;
  d.vocab_size = tok.size();
  DualEncoderParams p = init_params(d, seed);
  p.vocabulary = tok.words();
  return p;
}

std::vector<PromptTemplate> label_templates() { return {PromptTemplate(std::string(kLabelTemplate))}; }

}  // namespace

TEST_CASE("group report by hand") {
  // Groups 0..3; group 1 gets 1 of 3 right, the rest are perfect.
  const std::vector<int> labels{0, 0, 0, 0, 1, 1, 1, 1};
  const std::vector<int> groups{0, 1, 1, 1, 2, 2, 3, 3};
  const std::vector<int> preds{0, 0, 1, 1, 1, 1, 1, 1};
  const GroupReport r = group_report(preds, labels, groups, 4);
  CHECK(r.per_group.at(1) == doctest::Approx(1.0 / 3.0));
  CHECK(r.counts.at(1) == 3);
  CHECK(r.worst_group == doctest::Approx(1.0 / 3.0));
  CHECK(r.average == doctest::Approx(6.0 / 8.0));
  CHECK(r.n == 8);
  const auto j = r.to_json({"a", "b", "c", "d"});
  CHECK(j["per_group"]["b"]["accuracy"].get<double>() == doctest::Approx(1.0 / 3.0));
  CHECK(j["n"] == 8);
  CHECK(r.to_json()["per_group"].contains("0"));

  CHECK_THROWS_AS(group_report(preds, labels, groups, 5), ValidationError);
  CHECK_THROWS_AS(group_report({0}, labels, groups), DimensionError);
  CHECK_THROWS_AS(group_report({}, {}, {}), ValidationError);
}

TEST_CASE("argmax ties go to the lowest index") {
  Matrix s(3, 3);
  s << 1, 1, 0,  //
      0, 2, 2,   //
      5, 5, 5;
  CHECK(argmax_rows(s) == std::vector<int>{0, 1, 0});
}

TEST_CASE("zero-shot classifier rows are unit averages of template embeddings") {
  const SynthSpec spec;
  const DualEncoderParams p = small_model(1, spec);
  const Tokenizer tok = Tokenizer::from_vocabulary(p.vocabulary);
  const auto clf = build_zero_shot_classifier(p, tok, spec.class_names,
                                              {PromptTemplate("a photo of a {class}"), PromptTemplate("{class}")});
  REQUIRE(clf.weights.rows() == 4);
  for (Eigen::Index c = 0; c < 4; ++c) CHECK(clf.weights.row(c).norm() == doctest::Approx(1.0));
  const Vector a = encode_text(p, tok.tokenize("a photo of a duck"));
  const Vector b = encode_text(p, tok.tokenize("duck"));
  const Vector expect = (a + b).normalized();
  CHECK((clf.weights.row(1).transpose() - expect).norm() < 1e-12);

  const Matrix x = generate(spec, 0).split(Split::kTest).features.topRows(5);
  const Matrix scores = encode_images(p, x) * clf.weights.transpose();
  CHECK(classify(p, clf, x) == argmax_rows(scores));
  CHECK(classify(p, clf, Vector(x.row(2).transpose())) == argmax_rows(scores)[2]);
  CHECK_THROWS_AS(build_zero_shot_classifier(p, tok, {}, label_templates()), ValidationError);
  CHECK_THROWS_AS(build_zero_shot_classifier(p, tok, spec.class_names, {}), ValidationError);
}

TEST_CASE("evaluator uses the head when present") {
  const SynthSpec spec;
  DualEncoderParams p = small_model(2, spec);
  const SplitData test = generate(spec, 3).split(Split::kTest);
  const Evaluator ev = Evaluator::for_model(p, spec.class_names, label_templates());
  p.head = Matrix::Zero(4, p.dims.embed_dim);
  p.head.row(2).setConstant(1.0);
  const Matrix emb = encode_images(p, test.features);
  const auto pred = ev.predict(p, test.features);
  CHECK(pred == argmax_rows(emb * p.head.transpose()));
  p.head = Matrix::Zero(3, p.dims.embed_dim);
  CHECK_THROWS_AS(ev.predict(p, test.features), DimensionError);
  CHECK_THROWS_AS(ev.predict(small_model(2, spec), Matrix::Zero(2, 5)), DimensionError);
  DualEncoderParams bare = small_model(2, spec);
  bare.vocabulary.clear();
  CHECK_THROWS_AS(Evaluator::for_model(bare, spec.class_names, label_templates()), ValidationError);
}

TEST_CASE("weight-space interpolation") {
  const SynthSpec spec;
  const DualEncoderParams t = small_model(4, spec);
  const DualEncoderParams s = small_model(5, spec);
  DualEncoderParams at0 = wise_interpolate(t, s, 0.0);
  DualEncoderParams at1 = wise_interpolate(t, s, 1.0);
  CHECK(at0.image_w1 == t.image_w1);
  CHECK(at0.log_temperature == t.log_temperature);
  CHECK(at1.image_w1 == s.image_w1);
  CHECK(at1.lineage.back() == "wise:alpha=1");
  const DualEncoderParams mid = wise_interpolate(t, s, 0.3);
  CHECK(mid.token_embedding.isApprox(0.7 * t.token_embedding + 0.3 * s.token_embedding, 1e-15));
  CHECK(std::abs(mid.log_temperature - (0.7 * t.log_temperature + 0.3 * s.log_temperature)) < 1e-15);
  CHECK(mid.lineage.back() == "wise:alpha=0.3");

  CHECK_THROWS_AS(wise_interpolate(t, s, 1.1), ValidationError);
  DualEncoderParams other = s;
  other.vocabulary.back() = "zzz";
  CHECK_THROWS_AS(wise_interpolate(t, other, 0.5), ValidationError);
  DualEncoderParams headed = s;
  headed.head = Matrix::Zero(4, s.dims.embed_dim);
  CHECK_THROWS_AS(wise_interpolate(t, headed, 0.5), DimensionError);
}

TEST_CASE("ensemble sweep covers the grid and breaks ties toward the teacher") {
  const SynthSpec spec;
  const GroupedDataset data = generate(spec, 6);
  const DualEncoderParams t = small_model(7, spec);
  const Evaluator ev = Evaluator::for_model(t, spec.class_names, label_templates());
  CHECK(default_alpha_grid().size() == 11);
  CHECK(default_alpha_grid()[3] == 0.3);

  // Identical endpoints make every row tie.
  const SweepTable same = ensemble_sweep(t, t, default_alpha_grid(), ev, data.split(Split::kVal),
                                         {{"test", data.split(Split::kTest)}});
  REQUIRE(same.rows.size() == 11);
  CHECK(same.selected_alpha() == 0.0);

  const DualEncoderParams s = small_model(8, spec);
  const SweepTable two = ensemble_sweep(t, s, {0.0, 1.0}, ev, data.split(Split::kVal), {{"ood", data.split(Split::kTest)}});
  const double acc_t = ev.accuracy(t, data.split(Split::kVal));
  const double acc_s = ev.accuracy(s, data.split(Split::kVal));
  CHECK(two.rows[0].id_val_accuracy == acc_t);
  CHECK(two.rows[1].id_val_accuracy == acc_s);
  CHECK(two.selected_alpha() == (acc_s > acc_t ? 1.0 : 0.0));
  const std::string csv = two.to_csv();
  CHECK(csv.rfind("alpha,id_val_acc,ood\n0,", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  CHECK_THROWS_AS(ensemble_sweep(t, s, {}, ev, data.split(Split::kVal), {}), ValidationError);
}
