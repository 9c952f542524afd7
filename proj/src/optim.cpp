#include "cle/optim.hpp"

#include <cmath>
#include <string>

namespace cle {

Adam::Adam(const std::vector<Tensor>& params, std::vector<double> learning_rates, AdamConfig config)
    : config_(config) {
  if (learning_rates.size() != params.size()) {
    throw ConfigError("one learning rate per parameter tensor required");
  }
  for (const auto& p : params) {
    state_.first_moment.emplace_back(p.shape());
    state_.second_moment.emplace_back(p.shape());
  }
  state_.learning_rate = std::move(learning_rates);
}

Adam::Adam(const std::vector<Tensor>& params, double learning_rate, AdamConfig config)
    : Adam(params, std::vector<double>(params.size(), learning_rate), config) {}

void Adam::step(std::span<Tensor> params, std::span<const Tensor> grads) {
  if (params.size() != state_.first_moment.size() || grads.size() != params.size()) {
    throw ConfigError("adam: parameter/gradient count mismatch");
  }
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape() || params[i].shape() != state_.first_moment[i].shape()) {
      throw ConfigError("adam: shape mismatch for parameter " + std::to_string(i));
    }
  }
  ++state_.step;
  const auto t = static_cast<double>(state_.step);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (size_t i = 0; i < params.size(); ++i) {
    const double lr = state_.learning_rate[i];
    auto& m = state_.first_moment[i];
    auto& v = state_.second_moment[i];
    auto& p = params[i];
    const auto& g = grads[i];
    for (size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      const double mj = config_.beta1 * m[j] + (1.0 - config_.beta1) * gj;
      const double vj = config_.beta2 * v[j] + (1.0 - config_.beta2) * gj * gj;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double update = lr * (mj / c1) / (std::sqrt(vj / c2) + config_.epsilon);
      p[j] = static_cast<float>(p[j] - update);
    }
  }
}

}  // namespace cle
