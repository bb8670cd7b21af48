// SPDX-License-Identifier: Apache-2.0
//
// Tokenizer, caption templates and spurious-descriptor banks.
#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "starft/encoders.hpp"

namespace starft {

using Rng = std::mt19937_64;

inline constexpr std::string_view kClassPlaceholder = "{class}";
inline constexpr std::string_view kSpuriousPrefix = "a photo of a ";

std::string to_lower(std::string_view s);
std::string trim(std::string_view s);

/// Caption template with exactly one `{class}` placeholder.
class PromptTemplate {
 public:
  explicit PromptTemplate(std::string text);
  const std::string& text() const { return text_; }
  bool operator==(const PromptTemplate&) const = default;

 private:
  std::string text_;
};

/// Descriptor fragment such as "{class} on the beach" or "blurred {class}".
/// Besides the placeholder it must carry at least one word of its own.
class DescriptorTemplate {
 public:
  DescriptorTemplate(std::string text, std::string concept_name);
  const std::string& text() const { return text_; }
  const std::string& concept_name() const { return concept_; }
  bool operator==(const DescriptorTemplate&) const = default;

 private:
  std::string text_;
  std::string concept_;
};

/// Ordered map from concept name to descriptor templates.
class ConceptBank {
 public:
  using Entry = std::pair<std::string, std::vector<DescriptorTemplate>>;

  ConceptBank() = default;
  /// Validates every descriptor, rejects empty concepts and duplicates.
  explicit ConceptBank(const std::vector<std::pair<std::string, std::vector<std::string>>>& concepts);

  const std::vector<Entry>& concepts() const { return concepts_; }
  std::vector<std::string> concept_names() const;
  bool contains(std::string_view concept_name) const;
  const std::vector<DescriptorTemplate>& descriptors(std::string_view concept_name) const;
  std::size_t size() const { return concepts_.size(); }
  bool operator==(const ConceptBank&) const = default;

 private:
  std::vector<Entry> concepts_;
};

/// The reference bank: background (30), texture (15), resolution (15).
const ConceptBank& bundled_bank();

nlohmann::ordered_json bank_to_json(const ConceptBank& bank);
/// Canonical text form: two-space indented JSON with a trailing newline.
std::string bank_to_string(const ConceptBank& bank);
/// Parses and validates; errors name the offending line of `text`.
ConceptBank bank_from_string(const std::string& text);

enum class UnknownPolicy { kStrict, kMapToUnknown };

/// Lowercase word tokenizer. Id 0 is reserved for "<unk>".
class Tokenizer {
 public:
  static constexpr std::string_view kUnknown = "<unk>";

  /// Vocabulary from the words of `texts` (placeholders ignored), sorted.
  static Tokenizer from_texts(const std::vector<std::string>& texts);
  /// Rebuilds from an id-ordered word list whose first entry is "<unk>".
  static Tokenizer from_vocabulary(std::vector<std::string> words);

  /// Lowercases, turns punctuation into spaces and splits on whitespace.
  static std::vector<std::string> split_words(std::string_view caption);

  TokenSequence tokenize(std::string_view caption, UnknownPolicy policy = UnknownPolicy::kStrict) const;
  std::string detokenize(const TokenSequence& tokens) const;

  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }
  bool contains(std::string_view word) const;
  int id(std::string_view word) const;

 private:
  std::vector<std::string> words_;
  std::map<std::string, int, std::less<>> ids_;
};

std::string render_label_caption(const PromptTemplate& tpl, std::string_view class_name);
/// "a photo of a " + descriptor with the class substituted, lowercased.
std::string inject_spuriosity(std::string_view class_name, const DescriptorTemplate& desc);
const DescriptorTemplate& sample_descriptor(const ConceptBank& bank, std::string_view concept_name, Rng& rng);
/// With concept "all", picks a concept uniformly, then a descriptor.
const DescriptorTemplate& sample_descriptor_any(const ConceptBank& bank, std::string_view concept_name, Rng& rng);
/// Label caption followed by `k` words drawn uniformly from the vocabulary
/// (excluding "<unk>").
std::string random_suffix_caption(const Tokenizer& tok, const PromptTemplate& tpl,
                                  std::string_view class_name, Rng& rng, int k = 3);

}  // namespace starft
