// SPDX-License-Identifier: Apache-2.0
#include "starft/trainer.hpp"

#include <algorithm>
#include <numeric>

namespace starft {

const char* method_name(Method m) {
  switch (m) {
    case Method::kFt: return "ft";
    case Method::kFlyp: return "flyp";
    case Method::kStarft: return "starft";
  }
  return "?";
}

Method method_from_name(const std::string& name) {
  if (name == "ft") return Method::kFt;
  if (name == "flyp") return Method::kFlyp;
  if (name == "starft") return Method::kStarft;
  throw UsageError("unknown method '" + name + "' (expected ft, flyp or starft)");
}

void TrainConfig::validate() const {
  const long min_batch = method == Method::kFt ? 1 : 2;
  if (batch_size < min_batch) {
    throw ValidationError("train config: batch_size must be at least " + std::to_string(min_batch));
  }
  if (epochs < 0) throw ValidationError("train config: epochs must be nonnegative");
  if (!(learning_rate >= 0.0)) throw ValidationError("train config: learning_rate must be nonnegative");
  if (!(weight_decay >= 0.0)) throw ValidationError("train config: weight_decay must be nonnegative");
  if (eval_every < 0) throw ValidationError("train config: eval_every must be nonnegative");
  if (eval_templates.empty()) throw ValidationError("train config: eval_templates is empty");
  PromptTemplate check(label_template);
  for (const auto& t : eval_templates) PromptTemplate check_eval(t);
  star.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"method", method_name(method)},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"learning_rate", learning_rate},
          {"weight_decay", weight_decay},
          {"seed", seed},
          {"early_stopping", early_stopping},
          {"eval_every", eval_every},
          {"label_template", label_template},
          {"eval_templates", eval_templates},
          {"attribute_captions", attribute_captions},
          {"star",
           {{"lambda0", star.lambda0},
            {"decay", star.decay},
            {"mask_positive", star.mask_positive},
            {"concept", star.concept_name},
            {"random_suffix_mode", star.random_suffix_mode},
            {"suffix_length", star.suffix_length},
            {"shared_temperature", star.shared_temperature}}}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("method")) c.method = method_from_name(j.at("method").get<std::string>());
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.seed = j.value("seed", c.seed);
  c.early_stopping = j.value("early_stopping", c.early_stopping);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.label_template = j.value("label_template", c.label_template);
  c.eval_templates = j.value("eval_templates", c.eval_templates);
  c.attribute_captions = j.value("attribute_captions", c.attribute_captions);
  if (j.contains("star")) {
    const auto& s = j.at("star");
    c.star.lambda0 = s.value("lambda0", c.star.lambda0);
    c.star.decay = s.value("decay", c.star.decay);
    c.star.mask_positive = s.value("mask_positive", c.star.mask_positive);
    c.star.concept_name = s.value("concept", c.star.concept_name);
    c.star.random_suffix_mode = s.value("random_suffix_mode", c.star.random_suffix_mode);
    c.star.suffix_length = s.value("suffix_length", c.star.suffix_length);
    c.star.shared_temperature = s.value("shared_temperature", c.star.shared_temperature);
  }
  return c;
}

TrainState TrainState::start(const DualEncoderParams& params) {
  TrainState s;
  s.student = params;
  s.optimizer = AdamWState::zeros_like(params);
  return s;
}

DualEncoderParams snapshot_teacher(const DualEncoderParams& params) { return params; }

std::vector<PromptTemplate> to_templates(const std::vector<std::string>& texts) {
  std::vector<PromptTemplate> out;
  for (const auto& t : texts) out.emplace_back(t);
  return out;
}

std::vector<TrainBatch> assemble_batches(const SplitData& data, int batch_size, Rng& rng, bool drop_last) {
  if (data.size() == 0) throw ValidationError("assemble_batches: empty dataset");
  if (batch_size < 1 || static_cast<std::size_t>(batch_size) > data.size()) {
    throw ValidationError("assemble_batches: batch size " + std::to_string(batch_size) + " does not fit " +
                          std::to_string(data.size()) + " samples");
  }
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  const auto bs = static_cast<std::size_t>(batch_size);
  std::vector<TrainBatch> out;
  for (std::size_t start = 0; start < order.size(); start += bs) {
    const std::size_t end = std::min(order.size(), start + bs);
    if (end - start < bs && drop_last) break;
    TrainBatch b;
    b.indices.assign(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
    b.features.resize(static_cast<Eigen::Index>(b.indices.size()), data.features.cols());
    for (std::size_t k = 0; k < b.indices.size(); ++k) {
      const std::size_t i = b.indices[k];
      b.features.row(static_cast<Eigen::Index>(k)) = data.features.row(static_cast<Eigen::Index>(i));
      b.labels.push_back(data.labels[i]);
      b.attributes.push_back(data.attributes.empty() ? 0 : data.attributes[i]);
    }
    out.push_back(std::move(b));
  }
  return out;
}

SpuriousBatch make_spurious_batch(const TrainBatch& batch, const std::vector<std::string>& class_names,
                                  const ConceptBank& bank, const StarConfig& star, const Tokenizer& tok,
                                  const PromptTemplate& label_template, Rng& rng) {
  if (!star.random_suffix_mode && star.concept_name != "all" && !bank.contains(star.concept_name)) {
    bank.descriptors(star.concept_name);  // throws with the list of known concepts
  }
  SpuriousBatch sb;
  sb.features = batch.features;
  sb.labels = batch.labels;
  for (int c : batch.labels) {
    const std::string& name = class_names.at(static_cast<std::size_t>(c));
    if (star.random_suffix_mode) {
      sb.captions.push_back(random_suffix_caption(tok, label_template, name, rng, star.suffix_length));
    } else {
      sb.captions.push_back(inject_spuriosity(name, sample_descriptor_any(bank, star.concept_name, rng)));
    }
  }
  return sb;
}

namespace {

Rng stream_rng(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
  return Rng(seq);
}

constexpr std::uint32_t kBatchStream = 1;
constexpr std::uint32_t kDescriptorStream = 2;

std::vector<TokenSequence> tokenize_all(const Tokenizer& tok, const std::vector<std::string>& captions) {
  std::vector<TokenSequence> out;
  out.reserve(captions.size());
  for (const auto& c : captions) out.push_back(tok.tokenize(c, UnknownPolicy::kStrict));
  return out;
}

Matrix scalar_matrix(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return m;
}

}  // namespace

LossBreakdown train_step(TrainState& state, const TrainBatch& batch, const SpuriousBatch* spurious,
                         const TrainConfig& config, const StepContext& ctx) {
  if (config.method == Method::kFt) throw UsageError("train_step: the FT baseline uses train_step_ft");
  if (ctx.tokenizer == nullptr || ctx.class_names == nullptr) throw UsageError("train_step: incomplete context");
  const long step = ++state.step;
  const double lr = cosine_learning_rate(config.learning_rate, step - 1, ctx.total_steps);

  LossBreakdown out;
  out.lambda_effective = config.method == Method::kFlyp
                             ? 0.0
                             : lambda_schedule(config.star.lambda0, step, ctx.total_steps, config.star.decay);

  std::vector<std::string> captions;
  const PromptTemplate label_template(config.label_template);
  for (std::size_t k = 0; k < batch.labels.size(); ++k) {
    const std::string& name = ctx.class_names->at(static_cast<std::size_t>(batch.labels[k]));
    if (config.attribute_captions) {
      captions.push_back(pretraining_caption(
          name, ctx.attribute_names->at(static_cast<std::size_t>(batch.attributes.at(k)))));
    } else {
      captions.push_back(render_label_caption(label_template, name));
    }
  }

  Tape tape;
  const BoundParams b = bind(tape, state.student, true);
  const Var x = encode_images(b, batch.features);
  const Var y = encode_texts(b, tokenize_all(*ctx.tokenizer, captions));
  const Var lc = contrastive_loss(similarity_logits(x, y, b.log_temperature));
  Var total = lc;
  out.contrastive = lc.scalar();

  if (out.lambda_effective > 0.0 && spurious != nullptr) {
    if (ctx.teacher == nullptr) throw UsageError("train_step: StarFT needs a teacher");
    const Mask keep = negative_mask(batch.labels, config.star.mask_positive);
    if (has_empty_row(keep)) {
      out.star_skipped = true;
    } else {
      const auto stoks = tokenize_all(*ctx.tokenizer, spurious->captions);
      Tape frozen;
      const BoundParams t = bind(frozen, *ctx.teacher, false);
      const Var t_tau = config.star.shared_temperature
                            ? frozen.constant(scalar_matrix(state.student.log_temperature))
                            : t.log_temperature;
      const Matrix teacher_logits =
          similarity_logits(encode_images(t, spurious->features), encode_texts(t, stoks), t_tau).value();
      const Var s = encode_texts(b, stoks);
      const Var ls = star_loss(similarity_logits(x, s, b.log_temperature), teacher_logits, batch.labels,
                               config.star.mask_positive);
      out.star = ls.scalar();
      total = combined_loss(lc, ls, out.lambda_effective);
    }
  }
  out.combined = total.scalar();

  const Gradients grads = tape.backward(total);
  AdamWConfig adam;
  adam.weight_decay = config.weight_decay;
  adamw_step(state.student, collect_gradients(grads, b), state.optimizer, adam, lr);
  return out;
}

double train_step_ft(TrainState& state, const TrainBatch& batch, const TrainConfig& config, const StepContext& ctx) {
  if (state.student.head.size() == 0) throw UsageError("train_step_ft: model has no head");
  const long step = ++state.step;
  const double lr = cosine_learning_rate(config.learning_rate, step - 1, ctx.total_steps);

  Tape tape;
  const BoundParams b = bind(tape, state.student, true);
  const Var x = encode_images(b, batch.features);
  const Var logits = scale(matmul(x, transpose(b.head)), exp(negate(b.log_temperature)));
  Matrix onehot = Matrix::Zero(static_cast<Eigen::Index>(batch.labels.size()), state.student.head.rows());
  for (std::size_t i = 0; i < batch.labels.size(); ++i) {
    onehot(static_cast<Eigen::Index>(i), batch.labels[i]) = 1.0;
  }
  const Var ce = scale(sum(hadamard(log_softmax_rows(logits), tape.constant(onehot))),
                       -1.0 / static_cast<double>(batch.labels.size()));
  const Gradients grads = tape.backward(ce);
  AdamWConfig adam;
  adam.weight_decay = config.weight_decay;
  static const std::vector<std::string> frozen{"token_embedding", "text_projection", "log_temperature"};
  adamw_step(state.student, collect_gradients(grads, b), state.optimizer, adam, lr, frozen);
  return ce.scalar();
}

DualEncoderParams with_zero_shot_head(const DualEncoderParams& params, const std::vector<std::string>& class_names,
                                      const std::vector<PromptTemplate>& templates) {
  DualEncoderParams out = params;
  out.head.resize(0, 0);
  const Evaluator ev = Evaluator::for_model(out, class_names, templates);
  out.head = build_zero_shot_classifier(out, ev.tokenizer, class_names, templates).weights;
  return out;
}

namespace {

// Shared epoch/eval/early-stopping loop. `step_fn` runs one optimizer step
// and returns its history record.
template <typename StepFn>
FinetuneResult run_loop(const TrainConfig& config, const GroupedDataset& data, const DualEncoderParams& start,
                        const Evaluator& evaluator, const HistorySink& sink, StepFn&& step_fn) {
  const SplitData train = data.split(Split::kTrain);
  const SplitData val = data.split(Split::kVal);
  FinetuneResult result;
  result.params = start;
  if (config.epochs == 0) return result;
  if (train.size() < static_cast<std::size_t>(config.batch_size)) {
    throw ValidationError("finetune: batch size " + std::to_string(config.batch_size) + " exceeds the " +
                          std::to_string(train.size()) + " training samples");
  }
  const long per_epoch = static_cast<long>(train.size() / static_cast<std::size_t>(config.batch_size));
  result.total_steps = per_epoch * config.epochs;
  const long eval_every = config.eval_every > 0 ? config.eval_every : per_epoch;
  const bool evaluate = config.early_stopping && val.size() > 0;

  TrainState state = TrainState::start(start);
  Rng batch_rng = stream_rng(config.seed, kBatchStream);
  Rng desc_rng = stream_rng(config.seed, kDescriptorStream);

  const auto emit = [&](nlohmann::json rec) {
    if (sink) sink(rec);
    result.history.push_back(std::move(rec));
  };
  const auto run_eval = [&](int epoch) {
    const double acc = evaluator.accuracy(state.student, val);
    const bool improved = acc > state.best_val_accuracy;
    if (improved) {
      state.best_val_accuracy = acc;
      state.best = state.student;
      state.best_step = state.step;
    }
    emit({{"type", "eval"}, {"step", state.step}, {"epoch", epoch}, {"id_val_acc", acc}, {"best", improved}});
  };

  if (evaluate) run_eval(0);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (const auto& batch : assemble_batches(train, config.batch_size, batch_rng)) {
      nlohmann::json rec;
      try {
        rec = step_fn(state, batch, result.total_steps, desc_rng);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at step " + std::to_string(state.step) + " (epoch " +
                           std::to_string(epoch) + "): " + e.what());
      }
      rec["epoch"] = epoch;
      emit(std::move(rec));
      if (evaluate && state.step % eval_every == 0) run_eval(epoch);
    }
  }
  if (evaluate && state.best) {
    result.params = *state.best;
    result.best_val_accuracy = state.best_val_accuracy;
    result.best_step = state.best_step;
  } else {
    result.params = state.student;
  }
  return result;
}

}  // namespace

FinetuneResult finetune(const TrainConfig& config, const GroupedDataset& data, const DualEncoderParams& teacher,
                        const ConceptBank* bank, const HistorySink& sink) {
  config.validate();
  if (config.method == Method::kFt) throw UsageError("finetune: use finetune_ft_baseline for the FT method");
  const bool needs_bank = config.method == Method::kStarft && !config.star.random_suffix_mode;
  if (needs_bank && bank == nullptr) throw UsageError("finetune: StarFT needs a concept bank");
  if (teacher.vocabulary.empty()) throw ValidationError("finetune: model carries no vocabulary");
  if (teacher.dims.input_dim != data.input_dim()) {
    throw DimensionError("finetune: model input_dim " + std::to_string(teacher.dims.input_dim) +
                         " does not match dataset width " + std::to_string(data.input_dim()));
  }
  const DualEncoderParams frozen_teacher = snapshot_teacher(teacher);
  const Tokenizer tok = Tokenizer::from_vocabulary(frozen_teacher.vocabulary);
  const Evaluator evaluator{tok, data.class_names, to_templates(config.eval_templates)};
  const PromptTemplate label_template(config.label_template);

  StepContext ctx;
  ctx.tokenizer = &tok;
  ctx.class_names = &data.class_names;
  ctx.attribute_names = &data.attribute_names;
  ctx.teacher = &frozen_teacher;

  FinetuneResult result = run_loop(config, data, frozen_teacher, evaluator, sink,
                  [&](TrainState& state, const TrainBatch& batch, long total, Rng& desc_rng) {
                    ctx.total_steps = total;
                    std::optional<SpuriousBatch> sb;
                    if (config.method == Method::kStarft) {
                      sb = make_spurious_batch(batch, data.class_names, bank ? *bank : bundled_bank(), config.star,
                                               tok, label_template, desc_rng);
                    }
                    const LossBreakdown lb = train_step(state, batch, sb ? &*sb : nullptr, config, ctx);
                    nlohmann::json rec = {{"type", "step"},
                                          {"step", state.step},
                                          {"lr", cosine_learning_rate(config.learning_rate, state.step - 1, total)},
                                          {"lambda_effective", lb.lambda_effective},
                                          {"contrastive", lb.contrastive},
                                          {"star", lb.star},
                                          {"combined", lb.combined}};
                    if (lb.star_skipped) {
                      rec["star_skipped"] = true;
                      rec["warning"] = "batch holds a single class; Star term skipped";
                    }
                    return rec;
                  });
  // The method is deliberately not recorded: FLYP and StarFT with lambda 0
  // must produce identical checkpoints.
  if (!config.attribute_captions) result.params.lineage.push_back("finetune:seed=" + std::to_string(config.seed));
  return result;
}

FinetuneResult finetune_ft_baseline(const TrainConfig& config, const GroupedDataset& data,
                                    const DualEncoderParams& teacher, const HistorySink& sink) {
  config.validate();
  if (teacher.vocabulary.empty()) throw ValidationError("finetune: model carries no vocabulary");
  if (teacher.dims.input_dim != data.input_dim()) {
    throw DimensionError("finetune: model input_dim " + std::to_string(teacher.dims.input_dim) +
                         " does not match dataset width " + std::to_string(data.input_dim()));
  }
  const auto templates = to_templates(config.eval_templates);
  const DualEncoderParams start = with_zero_shot_head(snapshot_teacher(teacher), data.class_names, templates);
  const Evaluator evaluator = Evaluator::for_model(start, data.class_names, templates);
  StepContext ctx;
  ctx.class_names = &data.class_names;
  FinetuneResult result = run_loop(config, data, start, evaluator, sink,
                  [&](TrainState& state, const TrainBatch& batch, long total, Rng&) {
                    ctx.total_steps = total;
                    const double ce = train_step_ft(state, batch, config, ctx);
                    return nlohmann::json{{"type", "step"},
                                          {"step", state.step},
                                          {"lr", cosine_learning_rate(config.learning_rate, state.step - 1, total)},
                                          {"cross_entropy", ce}};
                  });
  result.params.lineage.push_back("ft:seed=" + std::to_string(config.seed));
  return result;
}

}  // namespace starft
