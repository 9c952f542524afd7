#include "cle/loss.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace cle {

template <typename T>
BasicLossResult<T> cross_entropy_loss(const BasicTensor<T>& probabilities, std::span<const int> labels) {
  if (probabilities.rank() != 2) {
    throw ConfigError("cross_entropy_loss expects [N, K] probabilities, got " +
                      shape_to_string(probabilities.shape()));
  }
  const int n = probabilities.dim(0), k = probabilities.dim(1);
  if (static_cast<int>(labels.size()) != n) {
    throw ConfigError("label count " + std::to_string(labels.size()) + " does not match batch " +
                      std::to_string(n));
  }
  BasicLossResult<T> out;
  out.grad_logits = BasicTensor<T>(probabilities.shape());
  double total = 0.0;
  for (int r = 0; r < n; ++r) {
    const int label = labels[static_cast<size_t>(r)];
    if (label < 0 || label >= k) throw ConfigError("label " + std::to_string(label) + " out of range");
    double sum = 0.0;
    for (int c = 0; c < k; ++c) sum += probabilities[static_cast<size_t>(r) * k + c];
    if (std::abs(sum - 1.0) > 1e-5) {
      throw ConfigError("probabilities of row " + std::to_string(r) + " sum to " + std::to_string(sum));
    }
    const double p = probabilities[static_cast<size_t>(r) * k + label];
    total += -std::log(std::max(p, kLogClamp));
    for (int c = 0; c < k; ++c) {
      const double onehot = c == label ? 1.0 : 0.0;
      out.grad_logits[static_cast<size_t>(r) * k + c] =
          static_cast<T>((probabilities[static_cast<size_t>(r) * k + c] - onehot) / n);
    }
  }
  out.loss = total / n;
  return out;
}

template BasicLossResult<float> cross_entropy_loss(const BasicTensor<float>&, std::span<const int>);
template BasicLossResult<double> cross_entropy_loss(const BasicTensor<double>&, std::span<const int>);

}  // namespace cle
