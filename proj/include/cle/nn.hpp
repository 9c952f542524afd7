#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cle/tensor.hpp"

namespace cle {

enum class LayerKind { conv2d, maxpool, avgpool, fullyconnected, relu, softmax };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& s);

/// One layer of a sequential network. Channel counts are only meaningful for
/// conv2d (in/out channels) and fullyconnected (in/out features).
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  int kernel = 0;
  int stride = 1;
  int padding = 0;
  int in_channels = 0;
  int out_channels = 0;

  static LayerSpec conv(int in, int out, int kernel, int stride = 1, int padding = 0) {
    return {LayerKind::conv2d, kernel, stride, padding, in, out};
  }
  static LayerSpec max_pool(int kernel, int stride) { return {LayerKind::maxpool, kernel, stride, 0, 0, 0}; }
  static LayerSpec avg_pool(int kernel, int stride) { return {LayerKind::avgpool, kernel, stride, 0, 0, 0}; }
  static LayerSpec fc(int in, int out) { return {LayerKind::fullyconnected, 0, 1, 0, in, out}; }
  static LayerSpec relu() { return {LayerKind::relu, 0, 1, 0, 0, 0}; }
  static LayerSpec softmax() { return {LayerKind::softmax, 0, 1, 0, 0, 0}; }

  bool has_parameters() const {
    return kind == LayerKind::conv2d || kind == LayerKind::fullyconnected;
  }

  bool operator==(const LayerSpec&) const = default;
};

/// Output size of a sliding window; throws ConfigError if it is not positive.
int window_output_size(int input, int kernel, int stride, int padding);

template <typename T>
struct BasicForwardCache {
  std::vector<BasicTensor<T>> inputs;       // input of each layer
  std::vector<std::vector<int32_t>> argmax;  // maxpool source indices, per layer
  BasicTensor<T> output;
  bool valid = false;
};

/// Sequential network over NHWC batches. Parameters are stored as
/// (weight, bias) pairs for every conv2d/fullyconnected layer; conv weights
/// have shape [k, k, in, out] and FC weights [in, out].
template <typename T>
class BasicNetwork {
 public:
  using TensorT = BasicTensor<T>;
  using Cache = BasicForwardCache<T>;

  BasicNetwork() = default;
  explicit BasicNetwork(std::vector<LayerSpec> layers);

  const std::vector<LayerSpec>& layers() const { return layers_; }
  std::vector<TensorT>& params() { return params_; }
  const std::vector<TensorT>& params() const { return params_; }
  std::vector<std::string> param_names() const;
  size_t parameter_count() const;

  /// He-normal weights, zero biases.
  void init_he(uint64_t seed);

  /// Runs the layers in order. Fills `cache` for a later backward pass.
  TensorT forward(const TensorT& input, Cache* cache = nullptr) const;

  /// Gradients of all parameters given dL/d(output). If `skip_final_softmax`
  /// is set, `grad_output` is taken as dL/d(logits) feeding the trailing
  /// softmax layer. The input gradient is written to `grad_input` if given.
  std::vector<TensorT> backward(const Cache& cache, const TensorT& grad_output,
                                bool skip_final_softmax = false,
                                TensorT* grad_input = nullptr) const;

  /// Output shape for a given input shape, validating every layer.
  std::vector<int> output_shape(const std::vector<int>& input_shape) const;

  template <typename U>
  BasicNetwork<U> cast() const {
    BasicNetwork<U> out(layers_);
    for (size_t i = 0; i < params_.size(); ++i) out.params()[i] = params_[i].template cast<U>();
    return out;
  }

 private:
  std::vector<LayerSpec> layers_;
  std::vector<TensorT> params_;
  std::vector<int> param_offset_;  // first param index of each layer, or -1
};

using Network = BasicNetwork<float>;
using ForwardCache = BasicForwardCache<float>;

namespace kernels {

// Building blocks shared with the whole-image head. All operate on NHWC.

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b,
                              const LayerSpec& spec);
template <typename T>
void conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& dy,
                     const LayerSpec& spec, BasicTensor<T>& dw, BasicTensor<T>& db, BasicTensor<T>* dx);

/// Softmax over the last axis.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits);

/// Average pooling; accumulates in double.
template <typename T>
BasicTensor<T> avgpool_forward(const BasicTensor<T>& x, const LayerSpec& spec);

}  // namespace kernels

}  // namespace cle
