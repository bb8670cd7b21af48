// SPDX-License-Identifier: Apache-2.0
//
// Synthetic group-shift benchmark: features whose class signal and attribute
// signal live in separate blocks, with a tunable train-time correlation
// between the two.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "starft/encoders.hpp"
#include "starft/prompts.hpp"

namespace starft {

struct SynthSpec {
  int n_classes = 4;
  int n_attributes = 2;
  int class_dim = 8;
  int attribute_dim = 8;
  int noise_dim = 16;
  /// Probability that a train/val sample carries its class-aligned attribute.
  double rho = 0.95;
  double sigma = 0.5;
  int n_train = 4000;
  int n_val = 1000;
  int n_test = 800;
  std::vector<std::string> class_names{"sparrow", "duck", "finch", "gull"};
  std::vector<std::string> attribute_names{"forest", "wetland"};

  int input_dim() const { return class_dim + attribute_dim + noise_dim; }
  int n_groups() const { return n_classes * n_attributes; }
  /// Attribute that co-occurs with class `c` in the majority of training data.
  int aligned_attribute(int c) const { return c % n_attributes; }
  void validate() const;

  nlohmann::json to_json() const;
  static SynthSpec from_json(const nlohmann::json& j);
  bool operator==(const SynthSpec&) const = default;
};

enum class Split { kTrain, kVal, kTest };
const char* split_name(Split s);
Split split_from_name(const std::string& name);

/// Rows of one split, copied out of a dataset.
struct SplitData {
  Matrix features;
  std::vector<int> labels;
  std::vector<int> attributes;
  std::vector<int> groups;

  std::size_t size() const { return labels.size(); }
};

struct GroupedDataset {
  std::vector<std::string> class_names;
  std::vector<std::string> attribute_names;
  Matrix features;  // one row per sample
  std::vector<int> labels;
  std::vector<int> attributes;
  std::vector<int> groups;  // label * n_attributes + attribute
  std::vector<Split> splits;
  /// Generator settings when the data is synthetic; null for external dumps.
  nlohmann::json spec;
  std::uint64_t seed = 0;

  int n_classes() const { return static_cast<int>(class_names.size()); }
  int n_attributes() const { return static_cast<int>(attribute_names.size()); }
  int input_dim() const { return static_cast<int>(features.cols()); }
  int n_groups() const { return n_classes() * n_attributes(); }
  std::size_t size() const { return labels.size(); }
  std::string group_name(int group) const;

  SplitData split(Split s) const;
  /// Throws ValidationError naming the first broken invariant.
  void validate() const;

  nlohmann::json to_json() const;
  static GroupedDataset from_json(const nlohmann::json& j);
  bool operator==(const GroupedDataset& other) const;
};

/// Train and val draw the aligned attribute with probability rho, otherwise
/// one of the rest uniformly; test is group-balanced. Classes cycle so every
/// split has a uniform class marginal.
GroupedDataset generate(const SynthSpec& spec, std::uint64_t seed);

/// Fraction of a split's samples whose attribute is the class-aligned one.
double majority_fraction(const GroupedDataset& data, Split s);

/// Label caption template used throughout the benchmark.
inline constexpr std::string_view kLabelTemplate = "a photo of a {class}";
/// Captions for teacher pre-training name both the class and the attribute.
std::string pretraining_caption(const std::string& class_name, const std::string& attribute_name);

/// Descriptors that name the benchmark's attributes, one concept "background".
ConceptBank synthetic_bank(const SynthSpec& spec);

/// Vocabulary covering the benchmark captions, the synthetic bank and the
/// bundled bank.
Tokenizer benchmark_tokenizer(const std::vector<std::string>& class_names,
                              const std::vector<std::string>& attribute_names);

struct PretrainConfig {
  int epochs = 10;
  int batch_size = 64;
  double learning_rate = 1e-3;
  double weight_decay = 0.1;
  double initial_temperature = kInitialTemperature;
  int hidden = 64;
  int embed_dim = 16;
  int token_dim = 16;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static PretrainConfig from_json(const nlohmann::json& j);
};

/// Contrastive training of a fresh dual encoder on the train split of an
/// approximately group-balanced dataset, with captions naming class and
/// attribute.
DualEncoderParams pretrain_teacher(const GroupedDataset& balanced, const PretrainConfig& cfg);

}  // namespace starft
