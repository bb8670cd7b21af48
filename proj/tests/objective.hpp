// SPDX-License-Identifier: Apache-2.0
//
// The full fine-tuning objective L_C + lambda * L_Star over both towers,
// packaged for gradient_check.
#pragma once

#include <algorithm>
#include <random>
#include <vector>

#include "starft/encoders.hpp"
#include "starft/losses.hpp"

namespace starft::testing {

struct ObjectiveCase {
  EncoderDims dims;
  Matrix features;
  std::vector<int> labels;
  std::vector<TokenSequence> captions;
  std::vector<TokenSequence> spurious;
  Matrix teacher_logits;
  double lambda = 0.5;
  bool mask_positive = true;
  std::vector<Matrix> params;  // image_w1, image_b1, image_w2, image_b2, token_embedding, text_projection, log_tau
};

inline LossBuilder objective_builder(const ObjectiveCase& c) {
  return [c](Tape& tape, const std::vector<Var>& v) {
    BoundParams b;
    b.image_w1 = v[0];
    b.image_b1 = v[1];
    b.image_w2 = v[2];
    b.image_b2 = v[3];
    b.token_embedding = v[4];
    b.text_projection = v[5];
    b.log_temperature = v[6];
    (void)tape;
    const Var img = encode_images(b, c.features);
    const Var lc = contrastive_loss(similarity_logits(img, encode_texts(b, c.captions), b.log_temperature));
    const Var ls = star_loss(similarity_logits(img, encode_texts(b, c.spurious), b.log_temperature),
                             c.teacher_logits, c.labels, c.mask_positive);
    return combined_loss(lc, ls, c.lambda);
  };
}

/// Random instance with `n` samples over `classes` classes; every class that
/// appears leaves each row at least one negative.
inline ObjectiveCase random_objective_case(std::mt19937_64& rng, int n, int classes) {
  ObjectiveCase c;
  c.dims.input_dim = 5;
  c.dims.hidden = 4;
  c.dims.embed_dim = 3;
  c.dims.vocab_size = 6;
  c.dims.token_dim = 3;
  std::uniform_int_distribution<int> tok(0, c.dims.vocab_size - 1);
  std::uniform_int_distribution<int> len(1, 3);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> lam(0.0, 1.0);

  for (int i = 0; i < n; ++i) c.labels.push_back(i % classes);
  std::shuffle(c.labels.begin(), c.labels.end(), rng);
  c.features = Matrix(n, c.dims.input_dim);
  for (Eigen::Index k = 0; k < c.features.size(); ++k) c.features(k) = g(rng);
  auto seq = [&]() {
    TokenSequence s(static_cast<std::size_t>(len(rng)));
    for (auto& t : s) t = tok(rng);
    return s;
  };
  for (int i = 0; i < n; ++i) {
    c.captions.push_back(seq());
    c.spurious.push_back(seq());
  }
  c.teacher_logits = Matrix(n, n);
  for (Eigen::Index k = 0; k < c.teacher_logits.size(); ++k) c.teacher_logits(k) = 3.0 * g(rng);
  c.lambda = lam(rng);
  c.mask_positive = lam(rng) < 0.75;

  const DualEncoderParams p = init_params(c.dims, rng());
  p.visit([&](std::string_view, const Eigen::Ref<const Matrix>& m, bool) { c.params.emplace_back(m); });
  // Moderate temperature keeps logits in a range where differences are accurate.
  c.params[6](0, 0) = std::log(0.5 + lam(rng));
  return c;
}

}  // namespace starft::testing
