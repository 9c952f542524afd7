#pragma once

#include <span>

#include "cle/tensor.hpp"

namespace cle {

inline constexpr double kLogClamp = 1e-12;

template <typename T>
struct BasicLossResult {
  double loss = 0.0;              // mean over the batch
  BasicTensor<T> grad_logits;     // (p - onehot) / batch
};
using LossResult = BasicLossResult<float>;

/// Cross-entropy of softmax probabilities [N, K] against class indices.
/// The returned gradient is taken with respect to the pre-softmax logits.
template <typename T>
BasicLossResult<T> cross_entropy_loss(const BasicTensor<T>& probabilities, std::span<const int> labels);

}  // namespace cle
