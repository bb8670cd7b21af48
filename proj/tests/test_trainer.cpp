// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstring>
#include <set>

#include "starft/trainer.hpp"

using namespace starft;

namespace {

struct Fixture {
  SynthSpec spec;
  GroupedDataset data;
  DualEncoderParams teacher;

  Fixture() {
    spec.n_train = 256;
    spec.n_val = 96;
    spec.n_test = 80;
    data = generate(spec, 12);
    const Tokenizer tok = benchmark_tokenizer(spec.class_names, spec.attribute_names);
    EncoderDims d;
    d.input_dim = spec.input_dim();
    d.hidden = 16;
    d.embed_dim = 8;
    d.token_dim = 8;
    d.vocab_size = tok.size();
    teacher = init_params(d, 21);
    teacher.vocabulary = tok.words();
  }
};

TrainConfig small_config(Method m) {
  TrainConfig c;
  c.method = m;
  c.batch_size = 64;
  c.epochs = 2;
  c.seed = 5;
  return c;
}

bool bitwise_equal(const DualEncoderParams& a, const DualEncoderParams& b) {
  std::vector<Matrix> ta, tb;
  a.visit([&](std::string_view, const Eigen::Ref<const Matrix>& m, bool) { ta.emplace_back(m); });
  b.visit([&](std::string_view, const Eigen::Ref<const Matrix>& m, bool) { tb.emplace_back(m); });
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (ta[i].rows() != tb[i].rows() || ta[i].cols() != tb[i].cols()) return false;
    if (std::memcmp(ta[i].data(), tb[i].data(), sizeof(double) * ta[i].size()) != 0) return false;
  }
  return a.lineage == b.lineage;
}

std::vector<nlohmann::json> steps_of(const FinetuneResult& r) {
  std::vector<nlohmann::json> out;
  for (const auto& h : r.history) {
    if (h["type"] == "step") out.push_back(h);
  }
  return out;
}

}  // namespace

TEST_CASE("batches cover the split once per epoch") {
  Fixture f;
  const SplitData train = f.data.split(Split::kTrain);
  Rng rng(1);
  const auto batches = assemble_batches(train, 100, rng);
  CHECK(batches.size() == 2);
  Rng rng2(1);
  const auto all = assemble_batches(train, 100, rng2, false);
  REQUIRE(all.size() == 3);
  CHECK(all[2].labels.size() == 56);
  std::set<std::size_t> seen;
  for (const auto& b : all) seen.insert(b.indices.begin(), b.indices.end());
  CHECK(seen.size() == 256);
  CHECK_THROWS_AS(assemble_batches(train, 257, rng), ValidationError);
}

TEST_CASE("spurious captions use the bank or random suffixes") {
  Fixture f;
  const SplitData train = f.data.split(Split::kTrain);
  Rng rng(3);
  const TrainBatch b = assemble_batches(train, 8, rng).front();
  const Tokenizer tok = Tokenizer::from_vocabulary(f.teacher.vocabulary);
  StarConfig star;
  const ConceptBank bank = synthetic_bank(f.spec);
  const SpuriousBatch sb = make_spurious_batch(b, f.spec.class_names, bank, star, tok,
                                               PromptTemplate(std::string(kLabelTemplate)), rng);
  REQUIRE(sb.captions.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) {
    const std::string name = f.spec.class_names[static_cast<std::size_t>(b.labels[i])];
    const bool forest = sb.captions[i] == "a photo of a " + name + " in the forest";
    const bool wetland = sb.captions[i] == "a photo of a " + name + " in the wetland";
    CHECK((forest || wetland));
  }
  star.random_suffix_mode = true;
  const SpuriousBatch rs = make_spurious_batch(b, f.spec.class_names, bank, star, tok,
                                               PromptTemplate(std::string(kLabelTemplate)), rng);
  CHECK(Tokenizer::split_words(rs.captions[0]).size() == 5 + 3);
  star = StarConfig{};
  star.concept_name = "lighting";
  CHECK_THROWS_AS(make_spurious_batch(b, f.spec.class_names, bank, star, tok,
                                      PromptTemplate(std::string(kLabelTemplate)), rng),
                  ValidationError);
}

TEST_CASE("StarFT with lambda zero reproduces FLYP bit for bit") {
  Fixture f;
  const ConceptBank bank = synthetic_bank(f.spec);
  const FinetuneResult flyp = finetune(small_config(Method::kFlyp), f.data, f.teacher, nullptr);
  TrainConfig sc = small_config(Method::kStarft);
  sc.star.lambda0 = 0.0;
  const FinetuneResult star0 = finetune(sc, f.data, f.teacher, &bank);
  CHECK(bitwise_equal(flyp.params, star0.params));
  CHECK(flyp.best_step == star0.best_step);
  CHECK(params_to_json(flyp.params).dump() == params_to_json(star0.params).dump());
}

TEST_CASE("StarFT history: lambda decays to zero and the first Star term is zero") {
  Fixture f;
  const ConceptBank bank = synthetic_bank(f.spec);
  TrainConfig c = small_config(Method::kStarft);
  c.star.lambda0 = 0.5;
  c.early_stopping = false;
  std::vector<nlohmann::json> streamed;
  const DualEncoderParams before = f.teacher;
  const FinetuneResult r = finetune(c, f.data, f.teacher, &bank, [&](const nlohmann::json& j) { streamed.push_back(j); });
  CHECK(streamed == r.history);
  const auto steps = steps_of(r);
  REQUIRE(steps.size() == 8);
  CHECK(r.total_steps == 8);
  for (std::size_t k = 0; k < steps.size(); ++k) {
    const double expect = 0.5 * (1.0 - static_cast<double>(k + 1) / 8.0);
    CHECK(steps[k]["lambda_effective"].get<double>() == doctest::Approx(expect).epsilon(1e-15));
    CHECK(steps[k]["step"] == static_cast<long>(k + 1));
  }
  CHECK(steps.back()["lambda_effective"].get<double>() == 0.0);
  CHECK(steps.front()["star"].get<double>() == 0.0);
  CHECK(steps[1]["star"].get<double>() > 0.0);
  CHECK(steps.front()["lr"].get<double>() == 1e-3);
  CHECK(bitwise_equal(f.teacher, before));
  CHECK(r.params.lineage.back() == "finetune:seed=5");
}

TEST_CASE("early stopping keeps the best validation snapshot, the start included") {
  Fixture f;
  TrainConfig c = small_config(Method::kFlyp);
  c.epochs = 3;
  const FinetuneResult r = finetune(c, f.data, f.teacher, nullptr);
  double best = -1.0;
  long best_step = -1;
  int evals = 0;
  for (const auto& h : r.history) {
    if (h["type"] != "eval") continue;
    ++evals;
    if (h["id_val_acc"].get<double>() > best) {
      best = h["id_val_acc"].get<double>();
      best_step = h["step"].get<long>();
    }
  }
  CHECK(evals == 4);
  CHECK(r.history.front()["step"] == 0);
  CHECK(r.best_step == best_step);
  CHECK(r.best_val_accuracy == best);
  const Evaluator ev{Tokenizer::from_vocabulary(f.teacher.vocabulary), f.spec.class_names,
                     to_templates(c.eval_templates)};
  CHECK(ev.accuracy(r.params, f.data.split(Split::kVal)) == best);

  // With a zero learning rate nothing improves after step 0.
  c.learning_rate = 0.0;
  const FinetuneResult still = finetune(c, f.data, f.teacher, nullptr);
  CHECK(still.best_step == 0);
}

TEST_CASE("contrastive loss falls during fine-tuning") {
  Fixture f;
  TrainConfig c = small_config(Method::kFlyp);
  c.epochs = 6;
  c.learning_rate = 3e-3;
  c.early_stopping = false;
  const auto steps = steps_of(finetune(c, f.data, f.teacher, nullptr));
  const auto mean = [&](std::size_t from, std::size_t to) {
    double s = 0.0;
    for (std::size_t k = from; k < to; ++k) s += steps[k]["contrastive"].get<double>();
    return s / static_cast<double>(to - from);
  };
  CHECK(mean(20, 24) < mean(0, 4));
}

TEST_CASE("the FT baseline trains a head and leaves the text tower alone") {
  Fixture f;
  TrainConfig c = small_config(Method::kFt);
  c.early_stopping = false;
  const FinetuneResult r = finetune_ft_baseline(c, f.data, f.teacher);
  REQUIRE(r.params.head.rows() == 4);
  CHECK(r.params.token_embedding == f.teacher.token_embedding);
  CHECK(r.params.text_projection == f.teacher.text_projection);
  CHECK(r.params.log_temperature == f.teacher.log_temperature);
  CHECK(r.params.image_w1 != f.teacher.image_w1);
  CHECK(r.params.lineage.back() == "ft:seed=5");
  const auto steps = steps_of(r);
  CHECK(steps.front().contains("cross_entropy"));
  const DualEncoderParams start =
      with_zero_shot_head(f.teacher, f.spec.class_names, to_templates(c.eval_templates));
  const Evaluator ev = Evaluator::for_model(f.teacher, f.spec.class_names, to_templates(c.eval_templates));
  const Matrix x = f.data.split(Split::kTest).features;
  CHECK(ev.predict(start, x) == ev.predict(f.teacher, x));
}

TEST_CASE("trainer rejects bad inputs") {
  Fixture f;
  TrainConfig c = small_config(Method::kStarft);
  CHECK_THROWS_AS(finetune(c, f.data, f.teacher, nullptr), UsageError);
  CHECK_THROWS_AS(finetune(small_config(Method::kFt), f.data, f.teacher, nullptr), UsageError);
  c = small_config(Method::kFlyp);
  c.batch_size = 512;
  CHECK_THROWS_AS(finetune(c, f.data, f.teacher, nullptr), ValidationError);
  DualEncoderParams narrow = f.teacher;
  narrow.dims.input_dim = 3;
  CHECK_THROWS_AS(finetune(small_config(Method::kFlyp), f.data, narrow, nullptr), DimensionError);
  CHECK_THROWS_AS(method_from_name("sgd"), UsageError);
  CHECK(method_from_name("starft") == Method::kStarft);

  TrainConfig j = TrainConfig::from_json({{"method", "flyp"}, {"star", {{"lambda0", 0.25}, {"concept", "texture"}}}});
  CHECK(j.method == Method::kFlyp);
  CHECK(j.star.lambda0 == 0.25);
  CHECK(j.star.concept_name == "texture");
  CHECK(j.batch_size == 256);
  CHECK(TrainConfig::from_json(j.to_json()).to_json() == j.to_json());
}
