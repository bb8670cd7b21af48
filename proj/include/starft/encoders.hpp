// SPDX-License-Identifier: Apache-2.0
//
// Toy dual encoder: a one-hidden-layer tanh image tower and a bag-of-tokens
// text tower, both ending in l2-normalized embeddings of the same width, plus
// a learned log-temperature.
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "starft/numcore.hpp"

namespace starft {

using TokenSequence = std::vector<int>;

struct EncoderDims {
  int input_dim = 32;
  int hidden = 64;
  int embed_dim = 16;
  int vocab_size = 0;
  int token_dim = 16;

  void validate() const;
  bool operator==(const EncoderDims&) const = default;
};

inline constexpr double kInitialTemperature = 0.07;

struct DualEncoderParams {
  EncoderDims dims;
  Matrix image_w1;         // input_dim x hidden
  Matrix image_b1;         // 1 x hidden
  Matrix image_w2;         // hidden x embed_dim
  Matrix image_b2;         // 1 x embed_dim
  Matrix token_embedding;  // vocab_size x token_dim
  Matrix text_projection;  // token_dim x embed_dim
  double log_temperature = 0.0;
  /// Optional classification head (n_classes x embed_dim); empty unless the
  /// model came out of cross-entropy fine-tuning.
  Matrix head;
  /// Token strings indexed by id, so a checkpoint carries its own tokenizer.
  std::vector<std::string> vocabulary;
  /// Free-form provenance, e.g. {"init:seed=7", "pretrain:seed=7", "starft:seed=3"}.
  std::vector<std::string> lineage;

  double temperature() const { return std::exp(log_temperature); }
  std::size_t parameter_count() const;

  /// Calls `f(name, tensor, decays)` for each parameter tensor in a fixed
  /// order. The log-temperature is exposed as a 1x1 view; the head is visited
  /// last and only when present. `decays` marks the tensors that take weight
  /// decay.
  template <typename F>
  void visit(F&& f);
  template <typename F>
  void visit(F&& f) const;

  bool operator==(const DualEncoderParams& other) const;
};

std::size_t parameter_count(const EncoderDims& dims);

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights from `seed`; log-temperature
/// starts at log(initial_temperature).
DualEncoderParams init_params(const EncoderDims& dims, std::uint64_t seed,
                              double initial_temperature = kInitialTemperature);

/// Parameter nodes of one model on one tape.
struct BoundParams {
  Var image_w1, image_b1, image_w2, image_b2, token_embedding, text_projection, log_temperature;
  Var head;  // invalid when the model has no head
  const DualEncoderParams* source = nullptr;
};

/// Records the parameters as leaves: variables when `trainable`, else constants.
BoundParams bind(Tape& tape, const DualEncoderParams& params, bool trainable);

/// Gathers gradients for every bound tensor into a params-shaped struct.
DualEncoderParams collect_gradients(const Gradients& grads, const BoundParams& bound);

/// N x input_dim features -> N x embed_dim unit rows.
Var encode_images(const BoundParams& p, const Matrix& features);
/// One unit row per sequence: mean token embedding, projected, normalized.
Var encode_texts(const BoundParams& p, const std::vector<TokenSequence>& sequences);
/// Entry (i, j) = x_i . y_j * exp(-log_temperature).
Var similarity_logits(const Var& images, const Var& texts, const Var& log_temperature);

// Value-only entry points. They run the same tape code with constant leaves.
Vector encode_image(const DualEncoderParams& p, const Vector& features);
Vector encode_text(const DualEncoderParams& p, const TokenSequence& tokens);
Matrix encode_images(const DualEncoderParams& p, const Matrix& features);
Matrix encode_texts(const DualEncoderParams& p, const std::vector<TokenSequence>& sequences);
Matrix similarity_logits(const Matrix& images, const Matrix& texts, double temperature);

// Checkpoint JSON. Doubles round-trip exactly.
nlohmann::json params_to_json(const DualEncoderParams& p);
DualEncoderParams params_from_json(const nlohmann::json& j);

// ---- template definitions -------------------------------------------------

template <typename F>
void DualEncoderParams::visit(F&& f) {
  Eigen::Map<Matrix> tau(&log_temperature, 1, 1);
  f(std::string_view("image_w1"), Eigen::Ref<Matrix>(image_w1), true);
  f(std::string_view("image_b1"), Eigen::Ref<Matrix>(image_b1), false);
  f(std::string_view("image_w2"), Eigen::Ref<Matrix>(image_w2), true);
  f(std::string_view("image_b2"), Eigen::Ref<Matrix>(image_b2), false);
  f(std::string_view("token_embedding"), Eigen::Ref<Matrix>(token_embedding), true);
  f(std::string_view("text_projection"), Eigen::Ref<Matrix>(text_projection), true);
  f(std::string_view("log_temperature"), Eigen::Ref<Matrix>(tau), false);
  if (head.size() > 0) f(std::string_view("head"), Eigen::Ref<Matrix>(head), true);
}

template <typename F>
void DualEncoderParams::visit(F&& f) const {
  Eigen::Map<const Matrix> tau(&log_temperature, 1, 1);
  f(std::string_view("image_w1"), Eigen::Ref<const Matrix>(image_w1), true);
  f(std::string_view("image_b1"), Eigen::Ref<const Matrix>(image_b1), false);
  f(std::string_view("image_w2"), Eigen::Ref<const Matrix>(image_w2), true);
  f(std::string_view("image_b2"), Eigen::Ref<const Matrix>(image_b2), false);
  f(std::string_view("token_embedding"), Eigen::Ref<const Matrix>(token_embedding), true);
  f(std::string_view("text_projection"), Eigen::Ref<const Matrix>(text_projection), true);
  f(std::string_view("log_temperature"), Eigen::Ref<const Matrix>(tau), false);
  if (head.size() > 0) f(std::string_view("head"), Eigen::Ref<const Matrix>(head), true);
}

}  // namespace starft
