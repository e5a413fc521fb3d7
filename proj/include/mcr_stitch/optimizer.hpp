#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mcr_stitch/error.hpp"
#include "mcr_stitch/projector.hpp"

namespace mcr {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
};

struct OptimizerState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::size_t step = 0;
};

inline OptimizerState init_optimizer_state(const ProjectorParams& pp) {
  OptimizerState s;
  visit_parameters(pp, [&](const std::string&, std::span<const double> p, bool) {
    s.first_moment.emplace_back(p.size(), 0.0);
    s.second_moment.emplace_back(p.size(), 0.0);
  });
  return s;
}

// One AdamW step with bias-corrected moments and decoupled decay:
// theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta).
inline void adamw_step(ProjectorParams& params, const ProjectorParams& grads, OptimizerState& state, double lr,
                       const AdamWConfig& cfg) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  std::size_t tensor = 0;
  visit_parameter_pairs(params, grads,
                        [&](const std::string& name, std::span<double> p, std::span<const double> g, bool decays) {
                          if (tensor >= state.first_moment.size() || state.first_moment[tensor].size() != p.size()) {
                            throw ShapeError("optimizer state does not match parameter " + name);
                          }
                          auto& m = state.first_moment[tensor];
                          auto& v = state.second_moment[tensor];
                          const double wd = decays ? cfg.weight_decay : 0.0;
                          for (std::size_t i = 0; i < p.size(); ++i) {
                            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                            const double m_hat = m[i] / c1;
                            const double v_hat = v[i] / c2;
                            p[i] -= lr * (m_hat / (std::sqrt(v_hat) + cfg.epsilon) + wd * p[i]);
                          }
                          ++tensor;
                        });
}

// lr0 * (1 + cos(pi * step / total_steps)) / 2
inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
  if (step > total_steps) {
    throw Error("step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
  }
  if (total_steps == 0) return lr0;
  const double phase = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * phase));
}

}  // namespace mcr
