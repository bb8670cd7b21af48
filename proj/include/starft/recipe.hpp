// SPDX-License-Identifier: Apache-2.0
//
// End-to-end group-shift recipe: data, teacher pre-training, FLYP and StarFT
// fine-tuning, evaluation and the directional comparison.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "starft/evalkit.hpp"
#include "starft/synthdata.hpp"
#include "starft/trainer.hpp"

namespace starft {

struct RecipeConfig {
  SynthSpec spec;
  PretrainConfig pretrain;
  /// Shared by the FLYP and StarFT runs; `method` and `star.lambda0` are set per run.
  TrainConfig train;
  std::vector<double> lambdas{0.1, 0.5};
  std::uint64_t seed = 0;

  RecipeConfig();
  void validate() const;
  nlohmann::json to_json() const;
  static RecipeConfig from_json(const nlohmann::json& j);
};

/// Mean accuracy over groups whose attribute is not the class-aligned one.
double minority_group_accuracy(const GroupReport& report, const SynthSpec& spec);

struct RecipeRun {
  std::string name;
  double lambda0 = 0.0;
  GroupReport report;
  double minority_accuracy = 0.0;
  std::string checkpoint_digest;
  /// History records, one JSON document per line.
  std::string metrics_jsonl;
  long best_step = -1;
};

struct RecipeResult {
  std::string dataset_digest;
  std::string teacher_digest;
  /// Teacher digest re-taken after all fine-tuning runs.
  std::string teacher_digest_after;
  RecipeRun teacher;
  RecipeRun flyp;
  std::vector<RecipeRun> starft;

  nlohmann::ordered_json comparison(const std::vector<std::string>& group_names) const;
};

/// Runs the recipe for `cfg.seed`. With `out_dir`, every artifact is written
/// below it: dataset, checkpoints, metric streams and comparison.json.
RecipeResult run_groupshift(const RecipeConfig& cfg, const std::optional<std::filesystem::path>& out_dir = {});

}  // namespace starft
