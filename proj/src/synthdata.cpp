// SPDX-License-Identifier: Apache-2.0
#include "starft/synthdata.hpp"

#include <cmath>
#include <cstring>
#include <set>

#include "starft/trainer.hpp"

namespace starft {

void SynthSpec::validate() const {
  const auto fail = [](const std::string& msg) { throw ValidationError("synth spec: " + msg); };
  if (n_classes < 2) fail("n_classes must be at least 2");
  if (n_attributes < 2) fail("n_attributes must be at least 2");
  if (class_dim < n_classes) fail("class_dim must be at least n_classes");
  if (attribute_dim < n_attributes) fail("attribute_dim must be at least n_attributes");
  if (noise_dim < 0) fail("noise_dim must be nonnegative");
  if (!(rho >= 0.0 && rho <= 1.0)) fail("rho must lie in [0, 1]");
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) fail("sigma must be a finite nonnegative number");
  if (n_train < 0 || n_val < 0 || n_test < 0) fail("sample counts must be nonnegative");
  if (static_cast<int>(class_names.size()) != n_classes) fail("need one class name per class");
  if (static_cast<int>(attribute_names.size()) != n_attributes) fail("need one attribute name per attribute");
  std::set<std::string> names;
  for (const auto& n : class_names) {
    if (Tokenizer::split_words(n) != std::vector<std::string>{n}) fail("class name '" + n + "' is not a single lowercase word");
    if (!names.insert(n).second) fail("duplicate name '" + n + "'");
  }
  for (const auto& n : attribute_names) {
    if (Tokenizer::split_words(n) != std::vector<std::string>{n}) {
      fail("attribute name '" + n + "' is not a single lowercase word");
    }
    if (!names.insert(n).second) fail("duplicate name '" + n + "'");
  }
}

nlohmann::json SynthSpec::to_json() const {
  return {{"n_classes", n_classes},   {"n_attributes", n_attributes}, {"class_dim", class_dim},
          {"attribute_dim", attribute_dim}, {"noise_dim", noise_dim},   {"rho", rho},
          {"sigma", sigma},           {"n_train", n_train},           {"n_val", n_val},
          {"n_test", n_test},         {"class_names", class_names},   {"attribute_names", attribute_names}};
}

SynthSpec SynthSpec::from_json(const nlohmann::json& j) {
  SynthSpec s;
  s.n_classes = j.value("n_classes", s.n_classes);
  s.n_attributes = j.value("n_attributes", s.n_attributes);
  s.class_dim = j.value("class_dim", s.class_dim);
  s.attribute_dim = j.value("attribute_dim", s.attribute_dim);
  s.noise_dim = j.value("noise_dim", s.noise_dim);
  s.rho = j.value("rho", s.rho);
  s.sigma = j.value("sigma", s.sigma);
  s.n_train = j.value("n_train", s.n_train);
  s.n_val = j.value("n_val", s.n_val);
  s.n_test = j.value("n_test", s.n_test);
  s.class_names = j.value("class_names", s.class_names);
  s.attribute_names = j.value("attribute_names", s.attribute_names);
  return s;
}

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw ValidationError("unknown split '" + name + "'");
}

std::string GroupedDataset::group_name(int group) const {
  const int na = n_attributes();
  return class_names.at(static_cast<std::size_t>(group / na)) + "/" +
         attribute_names.at(static_cast<std::size_t>(group % na));
}

SplitData GroupedDataset::split(Split s) const {
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    if (splits[i] == s) rows.push_back(static_cast<Eigen::Index>(i));
  }
  SplitData out;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto i = static_cast<std::size_t>(rows[k]);
    out.features.row(static_cast<Eigen::Index>(k)) = features.row(rows[k]);
    out.labels.push_back(labels[i]);
    out.attributes.push_back(attributes[i]);
    out.groups.push_back(groups[i]);
  }
  return out;
}

void GroupedDataset::validate() const {
  const auto fail = [](const std::string& msg) { throw ValidationError("dataset: " + msg); };
  const std::size_t n = labels.size();
  if (class_names.empty() || attribute_names.empty()) fail("class and attribute names are required");
  if (attributes.size() != n || groups.size() != n || splits.size() != n ||
      static_cast<std::size_t>(features.rows()) != n) {
    fail("features, labels, attributes, groups and splits must have one entry per sample");
  }
  if (!features.allFinite()) fail("features contain non-finite values");
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= n_classes()) fail("sample " + std::to_string(i) + ": label out of range");
    if (attributes[i] < 0 || attributes[i] >= n_attributes()) {
      fail("sample " + std::to_string(i) + ": attribute out of range");
    }
    if (groups[i] != labels[i] * n_attributes() + attributes[i]) {
      fail("sample " + std::to_string(i) + ": group id inconsistent with class and attribute");
    }
  }
}

nlohmann::json GroupedDataset::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    nlohmann::json r = nlohmann::json::array();
    for (Eigen::Index j = 0; j < features.cols(); ++j) r.push_back(features(i, j));
    rows.push_back(std::move(r));
  }
  std::vector<std::string> split_names;
  for (Split s : splits) split_names.emplace_back(split_name(s));
  return {{"format", "starft.grouped_dataset"},
          {"version", 1},
          {"spec", spec},
          {"seed", seed},
          {"input_dim", features.cols()},
          {"class_names", class_names},
          {"attribute_names", attribute_names},
          {"labels", labels},
          {"attributes", attributes},
          {"groups", groups},
          {"splits", split_names},
          {"features", std::move(rows)}};
}

GroupedDataset GroupedDataset::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "starft.grouped_dataset") {
    throw ValidationError("dataset: missing or wrong 'format' (expected starft.grouped_dataset)");
  }
  GroupedDataset d;
  d.spec = j.value("spec", nlohmann::json());
  d.seed = j.value("seed", std::uint64_t{0});
  d.class_names = j.at("class_names").get<std::vector<std::string>>();
  d.attribute_names = j.at("attribute_names").get<std::vector<std::string>>();
  d.labels = j.at("labels").get<std::vector<int>>();
  d.attributes = j.at("attributes").get<std::vector<int>>();
  d.groups = j.at("groups").get<std::vector<int>>();
  for (const auto& s : j.at("splits")) d.splits.push_back(split_from_name(s.get<std::string>()));
  const auto dim = j.at("input_dim").get<Eigen::Index>();
  const auto& rows = j.at("features");
  d.features.resize(static_cast<Eigen::Index>(rows.size()), dim);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (static_cast<Eigen::Index>(rows[i].size()) != dim) {
      throw ValidationError("dataset: feature row " + std::to_string(i) + " has " +
                            std::to_string(rows[i].size()) + " entries, expected " + std::to_string(dim));
    }
    for (Eigen::Index k = 0; k < dim; ++k) {
      d.features(static_cast<Eigen::Index>(i), k) = rows[i][static_cast<std::size_t>(k)].get<double>();
    }
  }
  d.validate();
  return d;
}

bool GroupedDataset::operator==(const GroupedDataset& o) const {
  return class_names == o.class_names && attribute_names == o.attribute_names && labels == o.labels &&
         attributes == o.attributes && groups == o.groups && splits == o.splits && spec == o.spec &&
         seed == o.seed && features.rows() == o.features.rows() && features.cols() == o.features.cols() &&
         std::memcmp(features.data(), o.features.data(), sizeof(double) * features.size()) == 0;
}

GroupedDataset generate(const SynthSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  GroupedDataset d;
  d.class_names = spec.class_names;
  d.attribute_names = spec.attribute_names;
  d.spec = spec.to_json();
  d.seed = seed;
  const int na = spec.n_attributes;
  const std::size_t total = static_cast<std::size_t>(spec.n_train + spec.n_val + spec.n_test);
  d.features.resize(static_cast<Eigen::Index>(total), spec.input_dim());

  const auto emit = [&](int c, int a, Split s) {
    const auto row = static_cast<Eigen::Index>(d.labels.size());
    for (Eigen::Index j = 0; j < d.features.cols(); ++j) d.features(row, j) = spec.sigma * noise(rng);
    d.features(row, c) += 1.0;
    d.features(row, spec.class_dim + a) += 1.0;
    d.labels.push_back(c);
    d.attributes.push_back(a);
    d.groups.push_back(c * na + a);
    d.splits.push_back(s);
  };
  const auto biased = [&](int n, Split s) {
    std::uniform_int_distribution<int> other(0, na - 2);
    for (int i = 0; i < n; ++i) {
      const int c = i % spec.n_classes;
      const int aligned = spec.aligned_attribute(c);
      const bool keep = unit(rng) < spec.rho;
      const int a = keep ? aligned : (aligned + 1 + other(rng)) % na;
      emit(c, a, s);
    }
  };
  biased(spec.n_train, Split::kTrain);
  biased(spec.n_val, Split::kVal);
  for (int i = 0; i < spec.n_test; ++i) {
    const int g = i % spec.n_groups();
    emit(g / na, g % na, Split::kTest);
  }
  d.validate();
  return d;
}

double majority_fraction(const GroupedDataset& data, Split s) {
  std::size_t n = 0, aligned = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.splits[i] != s) continue;
    ++n;
    aligned += data.attributes[i] == data.labels[i] % data.n_attributes() ? 1 : 0;
  }
  if (n == 0) throw ValidationError(std::string("majority_fraction: split '") + split_name(s) + "' is empty");
  return static_cast<double>(aligned) / static_cast<double>(n);
}

std::string pretraining_caption(const std::string& class_name, const std::string& attribute_name) {
  return "a photo of a " + class_name + " in the " + attribute_name;
}

ConceptBank synthetic_bank(const SynthSpec& spec) {
  std::vector<std::string> texts;
  for (const auto& a : spec.attribute_names) texts.push_back("{class} in the " + a);
  return ConceptBank({{"background", texts}});
}

Tokenizer benchmark_tokenizer(const std::vector<std::string>& class_names,
                              const std::vector<std::string>& attribute_names) {
  std::vector<std::string> texts{std::string(kLabelTemplate), pretraining_caption("", "")};
  texts.insert(texts.end(), class_names.begin(), class_names.end());
  texts.insert(texts.end(), attribute_names.begin(), attribute_names.end());
  for (const auto& [name, list] : bundled_bank().concepts()) {
    for (const auto& d : list) texts.push_back(inject_spuriosity("x", d));
  }
  return Tokenizer::from_texts(texts);
}

nlohmann::json PretrainConfig::to_json() const {
  return {{"epochs", epochs},       {"batch_size", batch_size},
          {"learning_rate", learning_rate}, {"weight_decay", weight_decay},
          {"initial_temperature", initial_temperature}, {"hidden", hidden},
          {"embed_dim", embed_dim}, {"token_dim", token_dim}, {"seed", seed}};
}

PretrainConfig PretrainConfig::from_json(const nlohmann::json& j) {
  PretrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.initial_temperature = j.value("initial_temperature", c.initial_temperature);
  c.hidden = j.value("hidden", c.hidden);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.token_dim = j.value("token_dim", c.token_dim);
  c.seed = j.value("seed", c.seed);
  return c;
}

DualEncoderParams pretrain_teacher(const GroupedDataset& balanced, const PretrainConfig& cfg) {
  balanced.validate();
  const double frac = majority_fraction(balanced, Split::kTrain);
  const double limit = 1.0 / balanced.n_attributes() + 0.05;
  if (frac > limit) {
    throw ValidationError("pretrain_teacher: training split is not group-balanced (aligned fraction " +
                          std::to_string(frac) + " exceeds " + std::to_string(limit) + ")");
  }
  const Tokenizer tok = benchmark_tokenizer(balanced.class_names, balanced.attribute_names);
  EncoderDims dims;
  dims.input_dim = balanced.input_dim();
  dims.hidden = cfg.hidden;
  dims.embed_dim = cfg.embed_dim;
  dims.token_dim = cfg.token_dim;
  dims.vocab_size = tok.size();
  DualEncoderParams init = init_params(dims, cfg.seed, cfg.initial_temperature);
  init.vocabulary = tok.words();

  TrainConfig tc;
  tc.method = Method::kFlyp;
  tc.batch_size = cfg.batch_size;
  tc.epochs = cfg.epochs;
  tc.learning_rate = cfg.learning_rate;
  tc.weight_decay = cfg.weight_decay;
  tc.seed = cfg.seed;
  tc.early_stopping = false;
  tc.attribute_captions = true;
  FinetuneResult r = finetune(tc, balanced, init, nullptr);
  r.params.lineage.push_back("pretrain:seed=" + std::to_string(cfg.seed));
  return r.params;
}

}  // namespace starft
