// SPDX-License-Identifier: Apache-2.0
//
// Adaptive-moment optimizer with decoupled weight decay, and a cosine
// learning-rate schedule.
#pragma once

#include "starft/encoders.hpp"

namespace starft {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.1;
};

/// First and second moments, shaped like the parameters they track.
struct AdamWState {
  DualEncoderParams first;
  DualEncoderParams second;
  long step = 0;

  static AdamWState zeros_like(const DualEncoderParams& params);
};

/// One update. Weight decay touches only tensors the params visitor marks as
/// decaying (weights, not biases or the log-temperature). Tensors listed in
/// `frozen` by name are left untouched and their moments stay zero.
void adamw_step(DualEncoderParams& params, const DualEncoderParams& grads, AdamWState& state,
                const AdamWConfig& cfg, double learning_rate, const std::vector<std::string>& frozen = {});

/// base_lr * (1 + cos(pi * step / total_steps)) / 2, no warmup.
double cosine_learning_rate(double base_lr, long step, long total_steps);

}  // namespace starft
