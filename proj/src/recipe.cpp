// SPDX-License-Identifier: Apache-2.0
#include "starft/recipe.hpp"

#include <cstdio>

#include "starft/io.hpp"

namespace starft {

namespace {

// Teacher data must not share a noise stream with the biased split.
constexpr std::uint64_t kTeacherDataOffset = 1'000'000;

std::string lambda_label(double lambda) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", lambda);
  return buf;
}

std::string history_jsonl(const std::vector<nlohmann::json>& history) {
  std::string out;
  for (const auto& rec : history) out += rec.dump() + "\n";
  return out;
}

}  // namespace

RecipeConfig::RecipeConfig() {
  train.batch_size = 256;
  train.epochs = 10;
  train.early_stopping = true;
}

void RecipeConfig::validate() const {
  spec.validate();
  train.validate();
  if (lambdas.empty()) throw ValidationError("recipe: no StarFT lambda values");
  for (double l : lambdas) {
    if (!(l >= 0.0)) throw ValidationError("recipe: lambda values must be nonnegative");
  }
}

nlohmann::json RecipeConfig::to_json() const {
  return {{"spec", spec.to_json()},
          {"pretrain", pretrain.to_json()},
          {"train", train.to_json()},
          {"lambdas", lambdas},
          {"seed", seed}};
}

RecipeConfig RecipeConfig::from_json(const nlohmann::json& j) {
  RecipeConfig c;
  if (j.contains("spec")) c.spec = SynthSpec::from_json(j.at("spec"));
  if (j.contains("pretrain")) c.pretrain = PretrainConfig::from_json(j.at("pretrain"));
  if (j.contains("train")) {
    // Start from the recipe defaults rather than the generic trainer ones.
    nlohmann::json merged = c.train.to_json();
    merged.merge_patch(j.at("train"));
    c.train = TrainConfig::from_json(merged);
  }
  c.lambdas = j.value("lambdas", c.lambdas);
  c.seed = j.value("seed", c.seed);
  return c;
}

double minority_group_accuracy(const GroupReport& report, const SynthSpec& spec) {
  double sum = 0.0;
  int n = 0;
  for (const auto& [g, acc] : report.per_group) {
    const int c = g / spec.n_attributes;
    const int a = g % spec.n_attributes;
    if (a == spec.aligned_attribute(c)) continue;
    sum += acc;
    ++n;
  }
  if (n == 0) throw ValidationError("minority_group_accuracy: report has no minority groups");
  return sum / n;
}

nlohmann::ordered_json RecipeResult::comparison(const std::vector<std::string>& group_names) const {
  auto run_json = [&](const RecipeRun& r) {
    nlohmann::ordered_json j;
    j["name"] = r.name;
    if (r.name.rfind("starft", 0) == 0) j["lambda0"] = r.lambda0;
    j["worst_group"] = r.report.worst_group;
    j["average"] = r.report.average;
    j["minority"] = r.minority_accuracy;
    j["checkpoint_sha256"] = r.checkpoint_digest;
    if (r.best_step >= 0) j["best_step"] = r.best_step;
    j["report"] = r.report.to_json(group_names);
    return j;
  };
  nlohmann::ordered_json out;
  out["dataset_sha256"] = dataset_digest;
  out["teacher"] = run_json(teacher);
  out["teacher"]["unchanged"] = teacher_digest == teacher_digest_after;
  out["flyp"] = run_json(flyp);
  nlohmann::ordered_json runs = nlohmann::ordered_json::array();
  for (const auto& s : starft) {
    nlohmann::ordered_json j = run_json(s);
    j["delta_worst_group"] = s.report.worst_group - flyp.report.worst_group;
    j["delta_average"] = s.report.average - flyp.report.average;
    j["delta_minority"] = s.minority_accuracy - flyp.minority_accuracy;
    j["beats_flyp_worst_group"] = s.report.worst_group > flyp.report.worst_group;
    runs.push_back(std::move(j));
  }
  out["starft"] = std::move(runs);
  out["flyp_minority_minus_teacher"] = flyp.minority_accuracy - teacher.minority_accuracy;
  return out;
}

RecipeResult run_groupshift(const RecipeConfig& cfg, const std::optional<std::filesystem::path>& out_dir) {
  cfg.validate();
  RecipeResult result;

  const GroupedDataset data = generate(cfg.spec, cfg.seed);
  SynthSpec balanced_spec = cfg.spec;
  balanced_spec.rho = 1.0 / cfg.spec.n_attributes;
  const GroupedDataset balanced = generate(balanced_spec, cfg.seed + kTeacherDataOffset);
  result.dataset_digest = sha256_hex(dataset_text(data));

  PretrainConfig pc = cfg.pretrain;
  pc.seed = cfg.seed;
  const DualEncoderParams teacher = pretrain_teacher(balanced, pc);
  result.teacher_digest = sha256_hex(checkpoint_text(teacher));

  const Evaluator evaluator = Evaluator::for_model(teacher, cfg.spec.class_names, to_templates(cfg.train.eval_templates));
  const SplitData test = data.split(Split::kTest);
  auto finish = [&](RecipeRun& run, const DualEncoderParams& params) {
    run.report = evaluator.report(params, test, cfg.spec.n_groups());
    run.minority_accuracy = minority_group_accuracy(run.report, cfg.spec);
    run.checkpoint_digest = sha256_hex(checkpoint_text(params));
    if (out_dir) {
      save_checkpoint(*out_dir / run.name / "checkpoint.json", params);
      if (!run.metrics_jsonl.empty()) write_text_file(*out_dir / run.name / "history.jsonl", run.metrics_jsonl);
    }
  };

  result.teacher.name = "teacher";
  finish(result.teacher, teacher);

  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  tc.method = Method::kFlyp;
  {
    FinetuneResult r = finetune(tc, data, teacher, nullptr);
    result.flyp.name = "flyp";
    result.flyp.metrics_jsonl = history_jsonl(r.history);
    result.flyp.best_step = r.best_step;
    finish(result.flyp, r.params);
  }

  const ConceptBank bank = synthetic_bank(cfg.spec);
  tc.method = Method::kStarft;
  for (double lambda : cfg.lambdas) {
    tc.star.lambda0 = lambda;
    FinetuneResult r = finetune(tc, data, teacher, &bank);
    RecipeRun run;
    run.name = "starft-lambda" + lambda_label(lambda);
    run.lambda0 = lambda;
    run.metrics_jsonl = history_jsonl(r.history);
    run.best_step = r.best_step;
    finish(run, r.params);
    result.starft.push_back(std::move(run));
  }
  result.teacher_digest_after = sha256_hex(checkpoint_text(teacher));

  if (out_dir) {
    save_dataset(*out_dir / "data" / "dataset.json", data);
    write_text_file(*out_dir / "bank.json", bank_to_string(bank));
    write_text_file(*out_dir / "config.json", cfg.to_json().dump(2) + "\n");
    std::vector<std::string> names;
    for (int g = 0; g < data.n_groups(); ++g) names.push_back(data.group_name(g));
    write_text_file(*out_dir / "comparison.json", result.comparison(names).dump(2) + "\n");
  }
  return result;
}

}  // namespace starft
