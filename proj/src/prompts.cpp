// SPDX-License-Identifier: Apache-2.0
#include "starft/prompts.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <sstream>

namespace starft {

std::string to_lower(std::string_view s) {
  std::string out(s);
  for (char& ch : out) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return out;
}

std::string trim(std::string_view s) {
  const auto space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  while (!s.empty() && space(s.front())) s.remove_prefix(1);
  while (!s.empty() && space(s.back())) s.remove_suffix(1);
  return std::string(s);
}

namespace {

std::size_t count_placeholders(std::string_view text) {
  std::size_t n = 0;
  for (auto pos = text.find(kClassPlaceholder); pos != std::string_view::npos;
       pos = text.find(kClassPlaceholder, pos + kClassPlaceholder.size())) {
    ++n;
  }
  return n;
}

std::string substitute(std::string_view text, std::string_view class_name) {
  std::string out(text);
  const auto pos = out.find(kClassPlaceholder);
  out.replace(pos, kClassPlaceholder.size(), class_name);
  return out;
}

std::string without_placeholder(std::string_view text) {
  std::string out(text);
  for (auto pos = out.find(kClassPlaceholder); pos != std::string::npos; pos = out.find(kClassPlaceholder)) {
    out.replace(pos, kClassPlaceholder.size(), " ");
  }
  return out;
}

}  // namespace

PromptTemplate::PromptTemplate(std::string text) : text_(std::move(text)) {
  if (count_placeholders(text_) != 1) {
    throw ValidationError("prompt template '" + text_ + "' must contain {class} exactly once");
  }
}

DescriptorTemplate::DescriptorTemplate(std::string text, std::string concept_name)
    : text_(std::move(text)), concept_(std::move(concept_name)) {
  if (concept_.empty()) throw ValidationError("descriptor '" + text_ + "' has an empty concept name");
  if (count_placeholders(text_) != 1) {
    throw ValidationError("descriptor '" + text_ + "' must contain {class} exactly once");
  }
  if (Tokenizer::split_words(without_placeholder(text_)).empty()) {
    throw ValidationError("descriptor '" + text_ + "' has no words besides {class}");
  }
}

ConceptBank::ConceptBank(
    const std::vector<std::pair<std::string, std::vector<std::string>>>& concepts) {
  std::set<std::string> names;
  for (const auto& [name, texts] : concepts) {
    if (name.empty()) throw ValidationError("concept bank: empty concept name");
    if (!names.insert(name).second) throw ValidationError("concept bank: duplicate concept '" + name + "'");
    if (texts.empty()) throw ValidationError("concept bank: concept '" + name + "' has no descriptors");
    std::set<std::string> seen;
    std::vector<DescriptorTemplate> list;
    for (const auto& t : texts) {
      if (!seen.insert(t).second) {
        throw ValidationError("concept bank: duplicate descriptor '" + t + "' in concept '" + name + "'");
      }
      list.emplace_back(t, name);
    }
    concepts_.emplace_back(name, std::move(list));
  }
}

std::vector<std::string> ConceptBank::concept_names() const {
  std::vector<std::string> out;
  for (const auto& e : concepts_) out.push_back(e.first);
  return out;
}

bool ConceptBank::contains(std::string_view concept_name) const {
  return std::any_of(concepts_.begin(), concepts_.end(),
                     [&](const Entry& e) { return e.first == concept_name; });
}

const std::vector<DescriptorTemplate>& ConceptBank::descriptors(std::string_view concept_name) const {
  for (const auto& e : concepts_) {
    if (e.first == concept_name) return e.second;
  }
  std::string known;
  for (const auto& e : concepts_) known += (known.empty() ? "" : ", ") + e.first;
  throw ValidationError("unknown concept '" + std::string(concept_name) + "' (bank has: " + known + ")");
}

nlohmann::ordered_json bank_to_json(const ConceptBank& bank) {
  nlohmann::ordered_json concepts = nlohmann::ordered_json::object();
  for (const auto& [name, list] : bank.concepts()) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& d : list) arr.push_back(d.text());
    concepts[name] = std::move(arr);
  }
  nlohmann::ordered_json j;
  j["concepts"] = std::move(concepts);
  return j;
}

std::string bank_to_string(const ConceptBank& bank) { return bank_to_json(bank).dump(2) + "\n"; }

namespace {

std::size_t line_of_offset(const std::string& text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
}

// Line of the first occurrence of `needle` as a JSON string literal.
std::string locate(const std::string& text, const std::string& needle) {
  const std::string quoted = nlohmann::json(needle).dump();
  const auto pos = text.find(quoted);
  if (pos == std::string::npos) return "";
  return "line " + std::to_string(line_of_offset(text, pos)) + ": ";
}

}  // namespace

ConceptBank bank_from_string(const std::string& text) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("concept bank: line " + std::to_string(line_of_offset(text, e.byte > 0 ? e.byte - 1 : 0)) +
                     ": malformed JSON (" + e.what() + ")");
  }
  if (!j.is_object() || !j.contains("concepts") || !j["concepts"].is_object()) {
    throw ValidationError("concept bank: expected an object with a \"concepts\" object");
  }
  std::vector<std::pair<std::string, std::vector<std::string>>> concepts;
  for (const auto& [name, list] : j["concepts"].items()) {
    if (!list.is_array()) {
      throw ValidationError(locate(text, name) + "concept bank: concept '" + name + "' is not a list");
    }
    std::vector<std::string> texts;
    for (const auto& item : list) {
      if (!item.is_string()) {
        throw ValidationError(locate(text, name) + "concept bank: concept '" + name +
                              "' holds a non-string entry");
      }
      texts.push_back(item.get<std::string>());
    }
    concepts.emplace_back(name, std::move(texts));
  }
  // Validate entry by entry first so the diagnostic can point at a line.
  for (const auto& [name, texts] : concepts) {
    if (texts.empty()) {
      throw ValidationError(locate(text, name) + "concept bank: concept '" + name + "' has no descriptors");
    }
    std::set<std::string> seen;
    for (const auto& t : texts) {
      try {
        DescriptorTemplate check(t, name);
      } catch (const ValidationError& e) {
        throw ValidationError(locate(text, t) + "concept bank: " + e.what());
      }
      if (!seen.insert(t).second) {
        const auto first = text.find(nlohmann::json(t).dump());
        const auto second = text.find(nlohmann::json(t).dump(), first + 1);
        throw ValidationError("line " + std::to_string(line_of_offset(text, second)) +
                              ": concept bank: duplicate descriptor '" + t + "' in concept '" + name + "'");
      }
    }
  }
  return ConceptBank(concepts);
}

// ---- tokenizer --------------------------------------------------------------

std::vector<std::string> Tokenizer::split_words(std::string_view caption) {
  std::string cleaned;
  cleaned.reserve(caption.size());
  for (char ch : caption) {
    const auto u = static_cast<unsigned char>(ch);
    cleaned.push_back(std::ispunct(u) ? ' ' : static_cast<char>(std::tolower(u)));
  }
  std::istringstream is(cleaned);
  std::vector<std::string> words;
  for (std::string w; is >> w;) words.push_back(w);
  return words;
}

Tokenizer Tokenizer::from_texts(const std::vector<std::string>& texts) {
  std::set<std::string> unique;
  for (const auto& t : texts) {
    for (auto& w : split_words(without_placeholder(t))) unique.insert(std::move(w));
  }
  std::vector<std::string> words{std::string(kUnknown)};
  words.insert(words.end(), unique.begin(), unique.end());
  return from_vocabulary(std::move(words));
}

Tokenizer Tokenizer::from_vocabulary(std::vector<std::string> words) {
  if (words.empty() || words.front() != kUnknown) {
    throw ValidationError("tokenizer: vocabulary must start with <unk>");
  }
  Tokenizer tok;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i > 0 && (words[i].empty() || split_words(words[i]) != std::vector<std::string>{words[i]})) {
      throw ValidationError("tokenizer: '" + words[i] + "' is not a normalized word");
    }
    if (!tok.ids_.emplace(words[i], static_cast<int>(i)).second) {
      throw ValidationError("tokenizer: duplicate word '" + words[i] + "'");
    }
  }
  tok.words_ = std::move(words);
  return tok;
}

bool Tokenizer::contains(std::string_view word) const { return ids_.find(word) != ids_.end(); }

int Tokenizer::id(std::string_view word) const {
  const auto it = ids_.find(word);
  if (it == ids_.end()) throw ValidationError("tokenizer: unknown word '" + std::string(word) + "'");
  return it->second;
}

TokenSequence Tokenizer::tokenize(std::string_view caption, UnknownPolicy policy) const {
  const auto words = split_words(caption);
  if (words.empty()) throw ValidationError("tokenize: empty caption");
  TokenSequence out;
  out.reserve(words.size());
  for (const auto& w : words) {
    const auto it = ids_.find(w);
    if (it != ids_.end()) {
      out.push_back(it->second);
    } else if (policy == UnknownPolicy::kMapToUnknown) {
      out.push_back(0);
    } else {
      throw ValidationError("tokenize: unknown word '" + w + "' in caption '" + std::string(caption) + "'");
    }
  }
  return out;
}

std::string Tokenizer::detokenize(const TokenSequence& tokens) const {
  std::string out;
  for (int id : tokens) {
    if (id < 0 || id >= size()) throw ValidationError("detokenize: id " + std::to_string(id) + " out of range");
    if (!out.empty()) out.push_back(' ');
    out += words_[static_cast<std::size_t>(id)];
  }
  return out;
}

// ---- captions ---------------------------------------------------------------

std::string render_label_caption(const PromptTemplate& tpl, std::string_view class_name) {
  if (trim(class_name).empty()) throw ValidationError("render_label_caption: empty class name");
  return to_lower(substitute(tpl.text(), class_name));
}

std::string inject_spuriosity(std::string_view class_name, const DescriptorTemplate& desc) {
  if (trim(class_name).empty()) throw ValidationError("inject_spuriosity: empty class name");
  return to_lower(std::string(kSpuriousPrefix) + substitute(desc.text(), class_name));
}

const DescriptorTemplate& sample_descriptor(const ConceptBank& bank, std::string_view concept_name, Rng& rng) {
  const auto& list = bank.descriptors(concept_name);
  std::uniform_int_distribution<std::size_t> pick(0, list.size() - 1);
  return list[pick(rng)];
}

const DescriptorTemplate& sample_descriptor_any(const ConceptBank& bank, std::string_view concept_name, Rng& rng) {
  if (concept_name != "all") return sample_descriptor(bank, concept_name, rng);
  if (bank.size() == 0) throw ValidationError("sample_descriptor: bank is empty");
  std::uniform_int_distribution<std::size_t> pick(0, bank.size() - 1);
  return sample_descriptor(bank, bank.concepts()[pick(rng)].first, rng);
}

std::string random_suffix_caption(const Tokenizer& tok, const PromptTemplate& tpl,
                                  std::string_view class_name, Rng& rng, int k) {
  if (k < 1) throw ValidationError("random_suffix_caption: k must be at least 1, got " + std::to_string(k));
  if (tok.size() < 2) throw ValidationError("random_suffix_caption: vocabulary has no words");
  std::string caption = render_label_caption(tpl, class_name);
  std::uniform_int_distribution<int> pick(1, tok.size() - 1);
  for (int i = 0; i < k; ++i) caption += " " + tok.words()[static_cast<std::size_t>(pick(rng))];
  return caption;
}

}  // namespace starft
