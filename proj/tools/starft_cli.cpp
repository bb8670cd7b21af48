// SPDX-License-Identifier: Apache-2.0
//
// starft: command-line front end for bank generation, synthetic data,
// training, evaluation, ensembling and the group-shift recipe.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "starft/error.hpp"
#include "starft/evalkit.hpp"
#include "starft/io.hpp"
#include "starft/prompts.hpp"
#include "starft/recipe.hpp"
#include "starft/spurgen.hpp"
#include "starft/synthdata.hpp"
#include "starft/trainer.hpp"

namespace fs = std::filesystem;
using namespace starft;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kUsage = 2, kInvalid = 3, kTransport = 4 };

/// A config section: `doc[key]` when present, otherwise the whole document.
nlohmann::json section(const std::optional<fs::path>& config, const char* key) {
  if (!config) return nlohmann::json::object();
  nlohmann::json doc = read_json_file(*config);
  if (!doc.is_object()) throw ValidationError("config '" + config->string() + "' must hold a JSON object");
  if (doc.contains(key)) return doc.at(key);
  return doc;
}

std::string group_histogram(const GroupedDataset& d) {
  std::ostringstream os;
  os << "group";
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) os << "\t" << split_name(s);
  os << "\n";
  for (int g = 0; g < d.n_groups(); ++g) {
    os << d.group_name(g);
    for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
      std::size_t n = 0;
      for (std::size_t i = 0; i < d.groups.size(); ++i) n += d.groups[i] == g && d.splits[i] == s ? 1 : 0;
      os << "\t" << n;
    }
    os << "\n";
  }
  return os.str();
}

void print_bank_summary(const ConceptBank& bank) {
  for (const auto& [name, list] : bank.concepts()) std::cout << name << "\t" << list.size() << "\n";
}

// ---- bank ------------------------------------------------------------------

struct BankOptions {
  std::string action;
  std::optional<fs::path> file;
  std::optional<fs::path> out;
  std::optional<fs::path> replay;
  std::optional<fs::path> config;
  bool bundled = false;
  std::string model;
  int runs = -1;
  int max_in_flight = -1;
};

int cmd_bank(const BankOptions& o) {
  if (o.action == "validate") {
    if (!o.file) throw UsageError("bank validate: missing bank file");
    const ConceptBank bank = bank_from_string(read_text_file(*o.file));
    std::cout << "OK " << o.file->string() << "\n";
    print_bank_summary(bank);
    return kOk;
  }
  if (o.action == "show") {
    if (o.bundled == o.file.has_value()) throw UsageError("bank show: give either a bank file or --bundled");
    const ConceptBank bank = o.bundled ? bundled_bank() : bank_from_string(read_text_file(*o.file));
    print_bank_summary(bank);
    std::cout << bank_to_string(bank);
    return kOk;
  }
  // generate
  if (!o.out) throw UsageError("bank generate: --out is required");
  if (o.bundled) {
    write_text_file(*o.out / "bank.json", bank_to_string(bundled_bank()));
    print_bank_summary(bundled_bank());
    return kOk;
  }
  const nlohmann::json sc = section(o.config, "spurgen");
  SpurgenConfig cfg;
  cfg.model = sc.value("model", cfg.model);
  cfg.temperature = sc.value("temperature", cfg.temperature);
  cfg.max_tokens = sc.value("max_tokens", cfg.max_tokens);
  cfg.keyword_runs = sc.value("keyword_runs", cfg.keyword_runs);
  cfg.max_in_flight = sc.value("max_in_flight", cfg.max_in_flight);
  cfg.keywords_per_prompt = sc.value("keywords_per_prompt", cfg.keywords_per_prompt);
  if (!o.model.empty()) cfg.model = o.model;
  if (o.runs >= 0) cfg.keyword_runs = o.runs;
  if (o.max_in_flight >= 0) cfg.max_in_flight = o.max_in_flight;

  std::unique_ptr<ChatClient> client;
  if (o.replay) {
    client = std::make_unique<ScriptedChatClient>(ScriptedChatClient::from_audit_jsonl(read_text_file(*o.replay)));
  } else {
    auto http = HttpClientConfig::from_env();
    if (!http) {
      throw UsageError("bank generate: set LM_BASE_URL (and LM_API_KEY, LM_MODEL) or pass --bundled or --replay");
    }
    if (cfg.model.empty()) cfg.model = http->model;
    client = std::make_unique<HttpChatClient>(*http);
  }
  AuditLog audit;
  std::optional<ConceptBank> bank;
  try {
    bank = build_bank(client.get(), cfg, &audit);
  } catch (...) {
    // Keep the audit trail of a failed run for diagnosis.
    write_text_file(*o.out / "audit.jsonl", audit.to_jsonl());
    throw;
  }
  write_text_file(*o.out / "audit.jsonl", audit.to_jsonl());
  write_text_file(*o.out / "bank.json", bank_to_string(*bank));
  print_bank_summary(*bank);
  return kOk;
}

// ---- data ------------------------------------------------------------------

struct DataOptions {
  fs::path out;
  std::optional<fs::path> config;
  std::optional<double> rho;
  std::optional<std::uint64_t> seed;
};

int cmd_data(const DataOptions& o) {
  const nlohmann::json sc = section(o.config, "spec");
  SynthSpec spec = sc.empty() ? SynthSpec{} : SynthSpec::from_json(sc);
  if (o.rho) spec.rho = *o.rho;
  const std::uint64_t seed = o.seed.value_or(0);
  const GroupedDataset d = generate(spec, seed);
  const fs::path path = o.out / "dataset.json";
  save_dataset(path, d);
  std::cout << group_histogram(d);
  std::cout << "wrote " << path.string() << " sha256=" << file_sha256(path) << "\n";
  return kOk;
}

// ---- train -----------------------------------------------------------------

struct TrainOptions {
  std::string method;
  fs::path data;
  fs::path out;
  std::optional<fs::path> teacher;
  std::optional<fs::path> bank;
  std::optional<fs::path> config;
  bool bundled_bank = false;
  std::optional<std::uint64_t> seed;
  std::optional<double> lambda0;
  std::optional<int> epochs;
  std::optional<int> batch_size;
  std::optional<double> lr;
  std::optional<double> wd;
  std::optional<std::string> concept_name;
  bool no_early_stopping = false;
  bool no_mask = false;
  bool no_decay = false;
  bool random_suffix = false;
};

int cmd_train(const TrainOptions& o) {
  const GroupedDataset data = load_dataset(o.data);
  DualEncoderParams result;
  nlohmann::json used_config;
  std::string history;
  auto sink = [&](const nlohmann::json& rec) { history += rec.dump() + "\n"; };

  if (o.method == "pretrain-teacher") {
    const nlohmann::json pcj = section(o.config, "pretrain");
    PretrainConfig pc = pcj.empty() ? PretrainConfig{} : PretrainConfig::from_json(pcj);
    if (o.seed) pc.seed = *o.seed;
    if (o.epochs) pc.epochs = *o.epochs;
    if (o.batch_size) pc.batch_size = *o.batch_size;
    if (o.lr) pc.learning_rate = *o.lr;
    if (o.wd) pc.weight_decay = *o.wd;
    result = pretrain_teacher(data, pc);
    used_config = pc.to_json();
  } else {
    const Method method = method_from_name(o.method);
    if (!o.teacher) throw UsageError("train " + o.method + ": --teacher is required");
    const bool wants_bank = method == Method::kStarft && !o.random_suffix;
    if (wants_bank && !o.bank && !o.bundled_bank) {
      throw UsageError("train starft: --bank <file> (or --bundled-bank) is required");
    }
    const nlohmann::json tj = section(o.config, "train");
    TrainConfig tc = TrainConfig::from_json(tj);
    tc.method = method;
    if (o.seed) tc.seed = *o.seed;
    if (o.epochs) tc.epochs = *o.epochs;
    if (o.batch_size) tc.batch_size = *o.batch_size;
    if (o.lr) tc.learning_rate = *o.lr;
    if (o.wd) tc.weight_decay = *o.wd;
    if (o.lambda0) tc.star.lambda0 = *o.lambda0;
    if (o.concept_name) tc.star.concept_name = *o.concept_name;
    if (o.no_early_stopping) tc.early_stopping = false;
    if (o.no_mask) tc.star.mask_positive = false;
    if (o.no_decay) tc.star.decay = false;
    if (o.random_suffix) tc.star.random_suffix_mode = true;
    tc.validate();

    const DualEncoderParams teacher = load_checkpoint(*o.teacher);
    const std::string teacher_digest = file_sha256(*o.teacher);
    std::optional<ConceptBank> bank;
    if (o.bank) bank = bank_from_string(read_text_file(*o.bank));
    if (o.bundled_bank) bank = bundled_bank();

    FinetuneResult r = method == Method::kFt
                           ? finetune_ft_baseline(tc, data, teacher, sink)
                           : finetune(tc, data, teacher, bank ? &*bank : nullptr, sink);
    if (file_sha256(*o.teacher) != teacher_digest) throw Error("train: teacher checkpoint changed during the run");
    result = std::move(r.params);
    used_config = tc.to_json();
  }

  save_checkpoint(o.out / "checkpoint.json", result);
  write_text_file(o.out / "history.jsonl", history);
  write_text_file(o.out / "config.json", used_config.dump(2) + "\n");
  std::cout << "wrote " << (o.out / "checkpoint.json").string()
            << " sha256=" << sha256_hex(checkpoint_text(result)) << "\n";
  return kOk;
}

// ---- eval / ensemble -------------------------------------------------------

std::vector<PromptTemplate> templates_or_default(const std::vector<std::string>& t) {
  return to_templates(t.empty() ? std::vector<std::string>{std::string(kLabelTemplate)} : t);
}

std::vector<std::string> group_names(const GroupedDataset& d) {
  std::vector<std::string> out;
  for (int g = 0; g < d.n_groups(); ++g) out.push_back(d.group_name(g));
  return out;
}

struct EvalOptions {
  fs::path model;
  fs::path data;
  std::string split = "test";
  std::vector<std::string> templates;
  std::optional<fs::path> out;
};

int cmd_eval(const EvalOptions& o) {
  const DualEncoderParams params = load_checkpoint(o.model);
  const GroupedDataset data = load_dataset(o.data);
  const Evaluator ev = Evaluator::for_model(params, data.class_names, templates_or_default(o.templates));
  const GroupReport r = ev.report(params, data.split(split_from_name(o.split)), data.n_groups());
  const std::string text = r.to_json(group_names(data)).dump(2) + "\n";
  if (o.out) write_text_file(*o.out / "report.json", text);
  std::cout << text;
  return kOk;
}

struct EnsembleOptions {
  fs::path teacher;
  fs::path student;
  fs::path data;
  std::vector<double> grid;
  std::vector<std::string> templates;
  std::optional<fs::path> out;
};

int cmd_ensemble(const EnsembleOptions& o) {
  const DualEncoderParams teacher = load_checkpoint(o.teacher);
  const DualEncoderParams student = load_checkpoint(o.student);
  const GroupedDataset data = load_dataset(o.data);
  const Evaluator ev = Evaluator::for_model(teacher, data.class_names, templates_or_default(o.templates));
  const std::vector<double> grid = o.grid.empty() ? default_alpha_grid() : o.grid;
  const SweepTable t = ensemble_sweep(teacher, student, grid, ev, data.split(Split::kVal),
                                      {EvalSet{"test", data.split(Split::kTest)}});
  const std::string csv = t.to_csv();
  if (o.out) write_text_file(*o.out / "sweep.csv", csv);
  std::cout << csv;
  std::cerr << "selected alpha " << t.rows[t.selected].alpha << " by ID validation accuracy\n";
  return kOk;
}

// ---- reproduce-groupshift --------------------------------------------------

struct RecipeOptions {
  fs::path out;
  std::optional<fs::path> config;
  std::optional<std::uint64_t> seed;
  std::vector<double> lambdas;
};

int cmd_reproduce(const RecipeOptions& o) {
  RecipeConfig cfg = o.config ? RecipeConfig::from_json(read_json_file(*o.config)) : RecipeConfig{};
  if (o.seed) cfg.seed = *o.seed;
  if (!o.lambdas.empty()) cfg.lambdas = o.lambdas;
  const RecipeResult r = run_groupshift(cfg, o.out);
  std::printf("%-20s %8s %8s %8s\n", "run", "worst", "average", "minority");
  auto line = [](const RecipeRun& run) {
    std::printf("%-20s %8.4f %8.4f %8.4f\n", run.name.c_str(), run.report.worst_group, run.report.average,
                run.minority_accuracy);
  };
  line(r.teacher);
  line(r.flyp);
  for (const auto& s : r.starft) line(s);
  for (const auto& s : r.starft) {
    std::printf("%s vs flyp: worst-group %+.4f, average %+.4f\n", s.name.c_str(),
                s.report.worst_group - r.flyp.report.worst_group, s.report.average - r.flyp.report.average);
  }
  std::printf("wrote %s\n", (o.out / "comparison.json").string().c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"starft: robust fine-tuning of dual encoders with spurious textual alignment"};
  app.require_subcommand(1);

  BankOptions bank;
  auto* bank_cmd = app.add_subcommand("bank", "Generate, validate or show a concept bank");
  bank_cmd->add_option("action", bank.action, "generate | validate | show")
      ->required()
      ->check(CLI::IsMember({"generate", "validate", "show"}));
  bank_cmd->add_option("file", bank.file, "Bank file for validate/show");
  bank_cmd->add_option("--out", bank.out, "Output directory for generate");
  bank_cmd->add_flag("--bundled", bank.bundled, "Use the bundled bank instead of a language model");
  bank_cmd->add_option("--replay", bank.replay, "Replay completions from an audit JSONL file");
  bank_cmd->add_option("--config", bank.config, "JSON config (section 'spurgen')");
  bank_cmd->add_option("--model", bank.model, "Model name sent to the endpoint");
  bank_cmd->add_option("--runs", bank.runs, "Stage-2 keyword runs per concept");
  bank_cmd->add_option("--max-in-flight", bank.max_in_flight, "Concurrent requests");

  auto* data_cmd = app.add_subcommand("data", "Synthetic grouped datasets");
  DataOptions data;
  auto* data_gen = data_cmd->add_subcommand("generate", "Write a synthetic dataset");
  data_cmd->require_subcommand(1);
  data_gen->add_option("--out", data.out, "Output directory")->required();
  data_gen->add_option("--config", data.config, "JSON config (section 'spec')");
  data_gen->add_option("--rho", data.rho, "Train/val correlation between class and attribute");
  data_gen->add_option("--seed", data.seed, "Generator seed");

  TrainOptions train;
  auto* train_cmd = app.add_subcommand("train", "Pre-train a teacher or fine-tune a model");
  train_cmd->add_option("--method", train.method, "pretrain-teacher | ft | flyp | starft")
      ->required()
      ->check(CLI::IsMember({"pretrain-teacher", "ft", "flyp", "starft"}));
  train_cmd->add_option("--data", train.data, "Dataset file")->required();
  train_cmd->add_option("--out", train.out, "Output directory")->required();
  train_cmd->add_option("--teacher", train.teacher, "Zero-shot teacher checkpoint");
  train_cmd->add_option("--bank", train.bank, "Concept bank file");
  train_cmd->add_flag("--bundled-bank", train.bundled_bank, "Use the bundled concept bank");
  train_cmd->add_option("--config", train.config, "JSON config (section 'train' or 'pretrain')");
  train_cmd->add_option("--seed", train.seed, "Seed");
  train_cmd->add_option("--lambda", train.lambda0, "Initial Star weight");
  train_cmd->add_option("--epochs", train.epochs, "Epochs");
  train_cmd->add_option("--batch-size", train.batch_size, "Batch size");
  train_cmd->add_option("--lr", train.lr, "Peak learning rate");
  train_cmd->add_option("--wd", train.wd, "Weight decay");
  train_cmd->add_option("--concept", train.concept_name, "Concept to sample descriptors from, or 'all'");
  train_cmd->add_flag("--no-early-stopping", train.no_early_stopping, "Keep the final model");
  train_cmd->add_flag("--no-mask", train.no_mask, "Keep same-class columns in the Star term");
  train_cmd->add_flag("--no-decay", train.no_decay, "Hold the Star weight constant");
  train_cmd->add_flag("--random-suffix", train.random_suffix, "Random vocabulary suffixes instead of descriptors");

  EvalOptions ev;
  auto* eval_cmd = app.add_subcommand("eval", "Per-group accuracy report");
  eval_cmd->add_option("--model", ev.model, "Checkpoint")->required();
  eval_cmd->add_option("--data", ev.data, "Dataset file")->required();
  eval_cmd->add_option("--split", ev.split, "train | val | test")->check(CLI::IsMember({"train", "val", "test"}));
  eval_cmd->add_option("--template", ev.templates, "Zero-shot template(s) containing [class]");
  eval_cmd->add_option("--out", ev.out, "Output directory for report.json");

  EnsembleOptions ens;
  auto* ens_cmd = app.add_subcommand("ensemble", "Weight-space ensemble sweep between teacher and student");
  ens_cmd->add_option("--teacher", ens.teacher, "Teacher checkpoint")->required();
  ens_cmd->add_option("--student", ens.student, "Fine-tuned checkpoint")->required();
  ens_cmd->add_option("--data", ens.data, "Dataset file")->required();
  ens_cmd->add_option("--grid", ens.grid, "Mixing coefficients in [0, 1]")->delimiter(',');
  ens_cmd->add_option("--template", ens.templates, "Zero-shot template(s) containing [class]");
  ens_cmd->add_option("--out", ens.out, "Output directory for sweep.csv");

  RecipeOptions rec;
  auto* rec_cmd = app.add_subcommand("reproduce-groupshift", "Data, teacher, FLYP, StarFT, eval and comparison");
  rec_cmd->add_option("--out", rec.out, "Output directory")->required();
  rec_cmd->add_option("--config", rec.config, "Recipe JSON config");
  rec_cmd->add_option("--seed", rec.seed, "Seed");
  rec_cmd->add_option("--lambda", rec.lambdas, "StarFT initial weight(s)")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (bank_cmd->parsed()) return cmd_bank(bank);
    if (data_gen->parsed()) return cmd_data(data);
    if (train_cmd->parsed()) return cmd_train(train);
    if (eval_cmd->parsed()) return cmd_eval(ev);
    if (ens_cmd->parsed()) return cmd_ensemble(ens);
    if (rec_cmd->parsed()) return cmd_reproduce(rec);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const TransportError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kTransport;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
