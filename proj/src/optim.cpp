// SPDX-License-Identifier: Apache-2.0
#include "starft/optim.hpp"

#include <algorithm>
#include <numbers>

namespace starft {

AdamWState AdamWState::zeros_like(const DualEncoderParams& params) {
  AdamWState s;
  s.first = params;
  s.first.lineage.clear();
  s.first.vocabulary.clear();
  s.first.visit([](std::string_view, Eigen::Ref<Matrix> m, bool) { m.setZero(); });
  s.second = s.first;
  return s;
}

void adamw_step(DualEncoderParams& params, const DualEncoderParams& grads, AdamWState& state,
                const AdamWConfig& cfg, double learning_rate, const std::vector<std::string>& frozen) {
  if (!(learning_rate >= 0.0)) throw ValidationError("adamw_step: learning rate must be nonnegative");
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

  // Walk all four structures in lockstep; visit order is fixed.
  std::vector<Eigen::Ref<const Matrix>> g;
  grads.visit([&](std::string_view, const Eigen::Ref<const Matrix>& m, bool) { g.emplace_back(m); });
  std::vector<Eigen::Ref<Matrix>> m1, m2;
  state.first.visit([&](std::string_view, Eigen::Ref<Matrix> m, bool) { m1.emplace_back(m); });
  state.second.visit([&](std::string_view, Eigen::Ref<Matrix> m, bool) { m2.emplace_back(m); });
  std::size_t k = 0;
  params.visit([&](std::string_view name, Eigen::Ref<Matrix> p, bool decays) {
    if (k >= g.size() || k >= m1.size()) throw DimensionError("adamw_step: gradient structure mismatch");
    const auto& gk = g[k];
    auto& a = m1[k];
    auto& b = m2[k];
    ++k;
    if (gk.rows() != p.rows() || gk.cols() != p.cols()) {
      throw DimensionError("adamw_step: gradient for '" + std::string(name) + "' has the wrong shape");
    }
    if (std::find(frozen.begin(), frozen.end(), name) != frozen.end()) return;
    if (decays && cfg.weight_decay != 0.0) p *= (1.0 - learning_rate * cfg.weight_decay);
    a = cfg.beta1 * a + (1.0 - cfg.beta1) * gk;
    b = cfg.beta2 * b + (1.0 - cfg.beta2) * gk.cwiseAbs2();
    p.array() -= learning_rate * (a.array() / c1) / ((b.array() / c2).sqrt() + cfg.epsilon);
  });
  if (k != g.size()) throw DimensionError("adamw_step: gradient structure mismatch");
  require_finite(params.image_w1, "adamw_step");
  if (!std::isfinite(params.log_temperature)) throw NumericError("adamw_step: log-temperature is non-finite");
}

double cosine_learning_rate(double base_lr, long step, long total_steps) {
  if (total_steps < 1) throw ValidationError("cosine_learning_rate: total_steps must be at least 1");
  if (step < 0 || step > total_steps) throw ValidationError("cosine_learning_rate: step out of range");
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

}  // namespace starft
