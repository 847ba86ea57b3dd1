#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "phg/tensor.hpp"

namespace phg {

// Triangular cyclic schedule: rises linearly from lr_min to lr_max over the
// first half of each period and falls back over the second half.
struct CyclicLr {
  double lr_min = 5e-4;
  double lr_max = 5e-3;
  std::size_t period = 400;

  double at(std::size_t step) const;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  CyclicLr schedule;
};

struct OptimizerState {
  AdamWConfig config;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::size_t step = 0;

  OptimizerState() = default;
  OptimizerState(AdamWConfig cfg, std::span<const Tensor> params);
  double current_lr() const { return config.schedule.at(step); }
};

// One decoupled-weight-decay Adam update using the learning rate the cyclic
// schedule gives for the current step.
void adamw_step(std::span<Tensor> params, std::span<const Tensor> grads, OptimizerState& state);

}  // namespace phg
