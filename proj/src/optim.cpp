#include "phg/optim.hpp"

#include <algorithm>
#include <cmath>

#include "phg/error.hpp"

namespace phg {

double CyclicLr::at(std::size_t step) const {
  if (period < 2) return lr_min;
  const double half = static_cast<double>(period) / 2.0;
  const double pos = static_cast<double>(step % period) / half;
  const double frac = pos <= 1.0 ? pos : 2.0 - pos;
  return std::clamp(lr_min + (lr_max - lr_min) * frac, std::min(lr_min, lr_max), std::max(lr_min, lr_max));
}

OptimizerState::OptimizerState(AdamWConfig cfg, std::span<const Tensor> params) : config(cfg) {
  for (const Tensor& p : params) {
    first_moment.emplace_back(p.shape());
    second_moment.emplace_back(p.shape());
  }
}

void adamw_step(std::span<Tensor> params, std::span<const Tensor> grads, OptimizerState& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw DataError("adamw_step: parameter, gradient and state counts differ");
  }
  const AdamWConfig& c = state.config;
  const double lr = state.current_lr();
  const double t = static_cast<double>(state.step + 1);
  const double bias1 = 1.0 - std::pow(c.beta1, t);
  const double bias2 = 1.0 - std::pow(c.beta2, t);
  const double decay = 1.0 - lr * c.weight_decay;

  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    const Tensor& g = grads[i];
    Tensor& m = state.first_moment[i];
    Tensor& v = state.second_moment[i];
    if (p.shape() != g.shape() || p.shape() != m.shape()) {
      throw DataError("adamw_step: shape mismatch for parameter " + std::to_string(i));
    }
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
      const double vj = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double update = (mj / bias1) / (std::sqrt(vj / bias2) + c.eps);
      p[j] = static_cast<float>(p[j] * decay - lr * update);
    }
  }
  ++state.step;
}

}  // namespace phg
