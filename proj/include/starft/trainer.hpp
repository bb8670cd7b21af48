// SPDX-License-Identifier: Apache-2.0
//
// Fine-tuning loops: contrastive (FLYP), contrastive plus Star (StarFT), and
// cross-entropy on a linear head (FT).
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "starft/encoders.hpp"
#include "starft/evalkit.hpp"
#include "starft/losses.hpp"
#include "starft/optim.hpp"
#include "starft/prompts.hpp"
#include "starft/synthdata.hpp"

namespace starft {

enum class Method { kFt, kFlyp, kStarft };
const char* method_name(Method m);
Method method_from_name(const std::string& name);

struct TrainConfig {
  Method method = Method::kStarft;
  int batch_size = 256;
  int epochs = 10;
  double learning_rate = 1e-3;
  double weight_decay = 0.1;
  std::uint64_t seed = 0;
  StarConfig star;
  bool early_stopping = true;
  /// Steps between ID-validation evaluations; 0 means once per epoch.
  long eval_every = 0;
  std::string label_template = std::string(kLabelTemplate);
  std::vector<std::string> eval_templates{std::string(kLabelTemplate)};
  /// Captions name class and attribute; used for teacher pre-training.
  bool attribute_captions = false;

  void validate() const;
  nlohmann::json to_json() const;
  /// Missing fields keep their defaults.
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainBatch {
  std::vector<std::size_t> indices;
  Matrix features;
  std::vector<int> labels;
  std::vector<int> attributes;
};

struct SpuriousBatch {
  Matrix features;
  std::vector<std::string> captions;
  std::vector<int> labels;
};

struct TrainState {
  DualEncoderParams student;
  AdamWState optimizer;
  long step = 0;
  std::optional<DualEncoderParams> best;
  double best_val_accuracy = -1.0;
  long best_step = -1;

  static TrainState start(const DualEncoderParams& params);
};

/// Deep copy kept fixed for the whole run.
DualEncoderParams snapshot_teacher(const DualEncoderParams& params);

/// One epoch of shuffled fixed-size batches; the partial tail is dropped
/// when `drop_last`.
std::vector<TrainBatch> assemble_batches(const SplitData& data, int batch_size, Rng& rng, bool drop_last = true);

/// Same images with captions "a photo of a <descriptor>", or with random
/// vocabulary words appended in random-suffix mode.
SpuriousBatch make_spurious_batch(const TrainBatch& batch, const std::vector<std::string>& class_names,
                                  const ConceptBank& bank, const StarConfig& star, const Tokenizer& tok,
                                  const PromptTemplate& label_template, Rng& rng);

/// What a training step needs besides the state and batches.
struct StepContext {
  const Tokenizer* tokenizer = nullptr;
  const std::vector<std::string>* class_names = nullptr;
  const std::vector<std::string>* attribute_names = nullptr;
  const DualEncoderParams* teacher = nullptr;
  long total_steps = 1;
};

/// Applies one optimizer step; `state.step` is incremented first and the
/// schedules are read at the new value (so the last step runs with lambda 0).
LossBreakdown train_step(TrainState& state, const TrainBatch& batch, const SpuriousBatch* spurious,
                         const TrainConfig& config, const StepContext& ctx);

/// Cross-entropy step on the head; text tower and log-temperature stay fixed.
double train_step_ft(TrainState& state, const TrainBatch& batch, const TrainConfig& config, const StepContext& ctx);

struct FinetuneResult {
  DualEncoderParams params;
  std::vector<nlohmann::json> history;
  double best_val_accuracy = -1.0;
  long best_step = -1;
  long total_steps = 0;
};

/// Called with every history record as it is produced.
using HistorySink = std::function<void(const nlohmann::json&)>;

/// FLYP or StarFT on the train split. With early stopping, returns the
/// snapshot with the best ID-validation accuracy, the starting point included.
FinetuneResult finetune(const TrainConfig& config, const GroupedDataset& data, const DualEncoderParams& teacher,
                        const ConceptBank* bank, const HistorySink& sink = {});

/// Attaches the teacher's zero-shot classifier as a head and trains image
/// tower plus head with cross-entropy.
FinetuneResult finetune_ft_baseline(const TrainConfig& config, const GroupedDataset& data,
                                    const DualEncoderParams& teacher, const HistorySink& sink = {});

/// Teacher with its zero-shot classifier installed as the head.
DualEncoderParams with_zero_shot_head(const DualEncoderParams& params, const std::vector<std::string>& class_names,
                                      const std::vector<PromptTemplate>& templates);

std::vector<PromptTemplate> to_templates(const std::vector<std::string>& texts);

}  // namespace starft
