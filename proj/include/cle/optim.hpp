#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cle/tensor.hpp"

namespace cle {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment accumulators for one group of parameter tensors.
struct OptimizerState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::vector<double> learning_rate;  // one per parameter tensor
  int64_t step = 0;
};

class Adam {
 public:
  Adam() = default;
  /// One learning rate per parameter tensor.
  Adam(const std::vector<Tensor>& params, std::vector<double> learning_rates, AdamConfig config = {});
  /// Same learning rate for every tensor.
  Adam(const std::vector<Tensor>& params, double learning_rate, AdamConfig config = {});

  /// Bias-corrected update of `params` in place; increments the step counter.
  void step(std::span<Tensor> params, std::span<const Tensor> grads);

  const OptimizerState& state() const { return state_; }
  OptimizerState& state() { return state_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  OptimizerState state_;
};

}  // namespace cle
