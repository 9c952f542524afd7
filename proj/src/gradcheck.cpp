#include "cle/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "cle/loss.hpp"

namespace cle {

double GradientCheckReport::max_relative_error() const {
  double m = 0.0;
  for (const auto& p : params) m = std::max(m, p.max_relative_error);
  return m;
}

GradientCheckReport finite_difference_check(std::vector<BasicTensor<double>*> params,
                                            const std::vector<std::string>& names,
                                            const std::vector<BasicTensor<double>>& analytic,
                                            const LossProbe& probe, double h, double tolerance,
                                            const GradientCheckOptions& options) {
  if (params.size() != analytic.size() || names.size() != params.size()) {
    throw ConfigError("gradient check: parameter, name and gradient counts differ");
  }
  GradientCheckReport report;
  report.tolerance = tolerance;
  uint64_t base_regime = 0;
  probe(base_regime);
  for (size_t t = 0; t < params.size(); ++t) {
    auto& p = *params[t];
    const auto& g = analytic[t];
    if (g.shape() != p.shape()) throw ConfigError("gradient check: shape mismatch for " + names[t]);
    ParamCheck check;
    check.name = names[t];
    const size_t n = p.size();
    const size_t step = options.max_per_tensor == 0 || n <= options.max_per_tensor
                            ? 1
                            : (n + options.max_per_tensor - 1) / options.max_per_tensor;
    for (size_t i = 0; i < n; i += step) {
      const double original = p[i];
      uint64_t regime_plus = 0, regime_minus = 0;
      p[i] = original + h;
      const double plus = probe(regime_plus);
      p[i] = original - h;
      const double minus = probe(regime_minus);
      p[i] = original;
      if (regime_plus != base_regime || regime_minus != base_regime) {
        ++check.skipped;
        continue;
      }
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = g[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.absolute_floor});
      check.max_relative_error = std::max(check.max_relative_error, std::abs(a - numeric) / denom);
      ++check.checked;
    }
    report.params.push_back(check);
  }
  report.passed = report.max_relative_error() <= tolerance;
  return report;
}

uint64_t regime_fingerprint(const BasicNetwork<double>& net, const BasicForwardCache<double>& cache) {
  uint64_t hash = 1469598103934665603ULL;
  auto mix = [&hash](uint64_t v) {
    hash ^= v;
    hash *= 1099511628211ULL;
  };
  for (size_t i = 0; i < net.layers().size(); ++i) {
    if (net.layers()[i].kind == LayerKind::relu) {
      for (double v : cache.inputs[i].values()) mix(v > 0.0 ? 1 : 0);
    } else if (net.layers()[i].kind == LayerKind::maxpool) {
      for (int32_t idx : cache.argmax[i]) mix(static_cast<uint64_t>(idx));
    }
  }
  return hash;
}

GradientCheckReport gradient_check(const Network& net, const Tensor& input, const std::vector<int>& labels,
                                   double h, double tolerance, const GradientCheckOptions& options) {
  if (net.layers().empty() || net.layers().back().kind != LayerKind::softmax) {
    throw ConfigError("gradient_check needs a network ending in softmax");
  }
  if (net.parameter_count() > 100000) {
    throw ConfigError("gradient_check is limited to networks with at most 1e5 parameters");
  }
  BasicNetwork<double> shadow = net.cast<double>();
  const BasicTensor<double> x = input.cast<double>();

  BasicForwardCache<double> cache;
  const auto probs = shadow.forward(x, &cache);
  const auto loss = cross_entropy_loss(probs, labels);
  const auto grads = shadow.backward(cache, loss.grad_logits, true);

  std::vector<BasicTensor<double>*> params;
  for (auto& p : shadow.params()) params.push_back(&p);
  const LossProbe probe = [&](uint64_t& regime) {
    BasicForwardCache<double> c;
    const auto p = shadow.forward(x, &c);
    regime = regime_fingerprint(shadow, c);
    return cross_entropy_loss(p, labels).loss;
  };
  return finite_difference_check(params, shadow.param_names(), grads, probe, h, tolerance, options);
}

}  // namespace cle
