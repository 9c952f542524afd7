#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cle/nn.hpp"

namespace cle {

struct ParamCheck {
  std::string name;
  double max_relative_error = 0.0;
  size_t checked = 0;
  size_t skipped = 0;  // components whose perturbation crossed a ReLU/maxpool switch
};

struct GradientCheckReport {
  std::vector<ParamCheck> params;
  double tolerance = 0.0;
  bool passed = false;

  double max_relative_error() const;
};

struct GradientCheckOptions {
  /// Components checked per parameter tensor (evenly strided); 0 = all.
  size_t max_per_tensor = 0;
  /// Gradients smaller than this are compared on an absolute scale.
  double absolute_floor = 1e-6;
};

/// Evaluates the loss at the current parameter values and returns it together
/// with a fingerprint of the piecewise-linear regime (ReLU signs, maxpool
/// winners). Perturbations that change the fingerprint are skipped.
using LossProbe = std::function<double(uint64_t& regime)>;

/// Compares analytic gradients against central differences of `probe`.
/// `params` are perturbed in place and restored.
GradientCheckReport finite_difference_check(std::vector<BasicTensor<double>*> params,
                                            const std::vector<std::string>& names,
                                            const std::vector<BasicTensor<double>>& analytic,
                                            const LossProbe& probe, double h, double tolerance,
                                            const GradientCheckOptions& options = {});

/// Fingerprint of activation regimes recorded in a forward cache.
uint64_t regime_fingerprint(const BasicNetwork<double>& net, const BasicForwardCache<double>& cache);

/// Cross-entropy gradient check of a network ending in softmax, evaluated in
/// double precision on a copy of the float parameters.
GradientCheckReport gradient_check(const Network& net, const Tensor& input, const std::vector<int>& labels,
                                   double h = 1e-4, double tolerance = 1e-3,
                                   const GradientCheckOptions& options = {});

}  // namespace cle
