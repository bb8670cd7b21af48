// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "starft/io.hpp"
#include "starft/recipe.hpp"
#include "test_util.hpp"

using namespace starft;

namespace {

RecipeConfig tiny_recipe() {
  RecipeConfig c;
  c.spec.n_train = 256;
  c.spec.n_val = 64;
  c.spec.n_test = 64;
  c.pretrain.epochs = 2;
  c.train.batch_size = 64;
  c.train.epochs = 2;
  c.lambdas = {0.5};
  c.seed = 3;
  return c;
}

}  // namespace

TEST_CASE("minority accuracy averages the off-diagonal groups") {
  GroupReport r;
  // Classes 0..3 align with attribute c % 2, so groups 1, 2, 5, 6 are minority.
  for (int g = 0; g < 8; ++g) r.per_group[g] = 0.1 * g;
  CHECK(minority_group_accuracy(r, SynthSpec{}) == doctest::Approx((0.1 + 0.2 + 0.5 + 0.6) / 4));
  GroupReport majority_only;
  majority_only.per_group[0] = 1.0;
  CHECK_THROWS_AS(minority_group_accuracy(majority_only, SynthSpec{}), ValidationError);
}

TEST_CASE("recipe config defaults and JSON") {
  const RecipeConfig c;
  CHECK(c.train.batch_size == 256);
  CHECK(c.train.early_stopping);
  CHECK(c.lambdas == std::vector<double>{0.1, 0.5});
  CHECK(c.spec.rho == 0.95);
  const RecipeConfig back = RecipeConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  const RecipeConfig patched = RecipeConfig::from_json({{"train", {{"epochs", 3}}}, {"seed", 9}});
  CHECK(patched.train.epochs == 3);
  CHECK(patched.train.batch_size == 256);
  CHECK(patched.seed == 9);
  RecipeConfig bad;
  bad.lambdas.clear();
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("a small recipe run writes every artifact and is repeatable") {
  const auto dir = testing::scratch_dir("recipe");
  const RecipeConfig cfg = tiny_recipe();
  const RecipeResult a = run_groupshift(cfg, dir);
  for (const char* f : {"data/dataset.json", "bank.json", "config.json", "comparison.json", "teacher/checkpoint.json",
                        "flyp/checkpoint.json", "flyp/history.jsonl", "starft-lambda0.5/checkpoint.json",
                        "starft-lambda0.5/history.jsonl"}) {
    CHECK_MESSAGE(std::filesystem::exists(dir / f), f);
  }
  CHECK(a.teacher_digest == a.teacher_digest_after);
  CHECK(a.teacher.checkpoint_digest == a.teacher_digest);
  CHECK(file_sha256(dir / "flyp" / "checkpoint.json") == a.flyp.checkpoint_digest);
  CHECK(sha256_hex(read_text_file(dir / "data" / "dataset.json")) == a.dataset_digest);
  const auto cmp = read_json_file(dir / "comparison.json");
  CHECK(cmp["teacher"]["unchanged"] == true);
  REQUIRE(cmp["starft"].size() == 1);
  CHECK(cmp["starft"][0]["delta_worst_group"].get<double>() ==
        doctest::Approx(a.starft[0].report.worst_group - a.flyp.report.worst_group));

  const RecipeResult b = run_groupshift(cfg);
  CHECK(b.flyp.metrics_jsonl == a.flyp.metrics_jsonl);
  CHECK(b.starft[0].checkpoint_digest == a.starft[0].checkpoint_digest);
}
