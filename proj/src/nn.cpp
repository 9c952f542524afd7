#include "cle/nn.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "cle/rng.hpp"

namespace cle {

namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

void require_rank4(const std::vector<int>& shape, const char* layer) {
  if (shape.size() != 4) {
    throw ConfigError(std::string(layer) + " expects an NHWC input, got " + shape_to_string(shape));
  }
}

template <typename T>
RowMatrix<T> im2col(const BasicTensor<T>& x, const LayerSpec& spec, int out_h, int out_w) {
  const int n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const int k = spec.kernel;
  const size_t kc = static_cast<size_t>(k) * c;
  RowMatrix<T> cols(static_cast<Eigen::Index>(n) * out_h * out_w, static_cast<Eigen::Index>(k * kc));
  const T* src = x.raw();
  T* row = cols.data();
  for (int b = 0; b < n; ++b) {
    for (int oy = 0; oy < out_h; ++oy) {
      for (int ox = 0; ox < out_w; ++ox, row += k * kc) {
        const int ix0 = ox * spec.stride - spec.padding;
        if (c == 1) {
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * spec.stride - spec.padding + ky;
            const T* line = src + (static_cast<size_t>(b) * h + iy) * w;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ix0 + kx;
              row[ky * k + kx] = (iy < 0 || iy >= h || ix < 0 || ix >= w) ? T(0) : line[ix];
            }
          }
          continue;
        }
        const bool inner = ix0 >= 0 && ix0 + k <= w;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * spec.stride - spec.padding + ky;
          T* dst = row + ky * kc;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + kc, T(0));
            continue;
          }
          const T* line = src + (static_cast<size_t>(b) * h + iy) * w * c;
          if (inner) {
            std::copy(line + static_cast<size_t>(ix0) * c, line + static_cast<size_t>(ix0) * c + kc, dst);
            continue;
          }
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ix0 + kx;
            T* cell = dst + static_cast<size_t>(kx) * c;
            if (ix < 0 || ix >= w) {
              std::fill(cell, cell + c, T(0));
            } else {
              std::copy(line + static_cast<size_t>(ix) * c, line + static_cast<size_t>(ix + 1) * c, cell);
            }
          }
        }
      }
    }
  }
  return cols;
}

template <typename T>
void col2im(const RowMatrix<T>& cols, const LayerSpec& spec, int out_h, int out_w, BasicTensor<T>& dx) {
  const int n = dx.dim(0), h = dx.dim(1), w = dx.dim(2), c = dx.dim(3);
  const int k = spec.kernel;
  const size_t kc = static_cast<size_t>(k) * c;
  T* dst = dx.raw();
  const T* row = cols.data();
  for (int b = 0; b < n; ++b) {
    for (int oy = 0; oy < out_h; ++oy) {
      for (int ox = 0; ox < out_w; ++ox, row += k * kc) {
        const int ix0 = ox * spec.stride - spec.padding;
        const int kx_lo = std::max(0, -ix0), kx_hi = std::min(k, w - ix0);
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * spec.stride - spec.padding + ky;
          if (iy < 0 || iy >= h) continue;
          T* line = dst + (static_cast<size_t>(b) * h + iy) * w * c;
          const T* from = row + ky * kc + static_cast<size_t>(kx_lo) * c;
          T* out = line + static_cast<size_t>(ix0 + kx_lo) * c;
          const size_t len = static_cast<size_t>(std::max(0, kx_hi - kx_lo)) * c;
          for (size_t i = 0; i < len; ++i) out[i] += from[i];
        }
      }
    }
  }
}

template <typename T>
BasicTensor<T> maxpool_forward(const BasicTensor<T>& x, const LayerSpec& spec, std::vector<int32_t>* argmax) {
  require_rank4(x.shape(), "maxpool");
  const int n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const int oh = window_output_size(h, spec.kernel, spec.stride, 0);
  const int ow = window_output_size(w, spec.kernel, spec.stride, 0);
  BasicTensor<T> y({n, oh, ow, c});
  if (argmax) argmax->assign(y.size(), 0);
  // First maximum in window order wins, per channel.
  const T* src = x.raw();
  T* dst = y.raw();
  int32_t* am = argmax ? argmax->data() : nullptr;
  for (int b = 0; b < n; ++b) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const size_t o = ((static_cast<size_t>(b) * oh + oy) * ow + ox) * c;
        for (int ky = 0; ky < spec.kernel; ++ky) {
          for (int kx = 0; kx < spec.kernel; ++kx) {
            const int iy = oy * spec.stride + ky, ix = ox * spec.stride + kx;
            const auto base = static_cast<int32_t>(((static_cast<size_t>(b) * h + iy) * w + ix) * c);
            const bool first = ky == 0 && kx == 0;
            for (int ch = 0; ch < c; ++ch) {
              const T v = src[base + ch];
              if (first || v > dst[o + ch]) {
                dst[o + ch] = v;
                if (am) am[o + ch] = base + ch;
              }
            }
          }
        }
      }
    }
  }
  return y;
}

template <typename T>
BasicTensor<T> relu_forward(const BasicTensor<T>& x) {
  BasicTensor<T> y = x;
  for (auto& v : y.values()) v = v > T(0) ? v : T(0);
  return y;
}

template <typename T>
BasicTensor<T> fc_forward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b,
                          const LayerSpec& spec) {
  const int n = x.dim(0);
  const auto features = static_cast<int>(x.size() / static_cast<size_t>(n));
  if (features != spec.in_channels) {
    throw ConfigError("fullyconnected expects " + std::to_string(spec.in_channels) + " features, got " +
                      std::to_string(features) + " from " + shape_to_string(x.shape()));
  }
  BasicTensor<T> y({n, spec.out_channels});
  ConstMatMap<T> xm(x.raw(), n, features);
  ConstMatMap<T> wm(w.raw(), spec.in_channels, spec.out_channels);
  MatMap<T> ym(y.raw(), n, spec.out_channels);
  ym.noalias() = xm * wm;
  for (int r = 0; r < n; ++r) {
    for (int o = 0; o < spec.out_channels; ++o) ym(r, o) += b[static_cast<size_t>(o)];
  }
  return y;
}

template <typename T>
void check_finite(const BasicTensor<T>& t, const std::string& where) {
  if (!t.all_finite()) throw NumericError("non-finite values after " + where);
}

}  // namespace

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::fullyconnected: return "fullyconnected";
    case LayerKind::relu: return "relu";
    case LayerKind::softmax: return "softmax";
  }
  return "unknown";
}

LayerKind layer_kind_from_string(const std::string& s) {
  for (auto k : {LayerKind::conv2d, LayerKind::maxpool, LayerKind::avgpool, LayerKind::fullyconnected,
                 LayerKind::relu, LayerKind::softmax}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown layer kind '" + s + "'");
}

int window_output_size(int input, int kernel, int stride, int padding) {
  if (kernel < 1 || stride < 1 || padding < 0) {
    throw ConfigError("invalid window: kernel " + std::to_string(kernel) + ", stride " +
                      std::to_string(stride) + ", padding " + std::to_string(padding));
  }
  const int span = input + 2 * padding - kernel;
  if (span < 0) {
    throw ConfigError("window of size " + std::to_string(kernel) + " does not fit input of size " +
                      std::to_string(input) + " with padding " + std::to_string(padding));
  }
  return span / stride + 1;
}

namespace kernels {

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b,
                              const LayerSpec& spec) {
  require_rank4(x.shape(), "conv2d");
  if (x.dim(3) != spec.in_channels) {
    throw ConfigError("conv2d expects " + std::to_string(spec.in_channels) + " input channels, got " +
                      shape_to_string(x.shape()));
  }
  const int oh = window_output_size(x.dim(1), spec.kernel, spec.stride, spec.padding);
  const int ow = window_output_size(x.dim(2), spec.kernel, spec.stride, spec.padding);
  BasicTensor<T> y({x.dim(0), oh, ow, spec.out_channels});
  const RowMatrix<T> cols = im2col(x, spec, oh, ow);
  ConstMatMap<T> wm(w.raw(), cols.cols(), spec.out_channels);
  MatMap<T> ym(y.raw(), cols.rows(), spec.out_channels);
  ym.noalias() = cols * wm;
  ym.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.raw(), spec.out_channels);
  return y;
}

template <typename T>
void conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& dy,
                     const LayerSpec& spec, BasicTensor<T>& dw, BasicTensor<T>& db, BasicTensor<T>* dx) {
  const int oh = dy.dim(1), ow = dy.dim(2);
  const RowMatrix<T> cols = im2col(x, spec, oh, ow);
  ConstMatMap<T> dym(dy.raw(), cols.rows(), spec.out_channels);
  ConstMatMap<T> wm(w.raw(), cols.cols(), spec.out_channels);
  dw = BasicTensor<T>(w.shape());
  MatMap<T> dwm(dw.raw(), cols.cols(), spec.out_channels);
  dwm.noalias() = cols.transpose() * dym;
  db = BasicTensor<T>(std::vector<int>{spec.out_channels});
  Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(db.raw(), spec.out_channels) = dym.colwise().sum();
  if (dx) {
    RowMatrix<T> dcols = dym * wm.transpose();
    *dx = BasicTensor<T>(x.shape());
    col2im(dcols, spec, oh, ow, *dx);
  }
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits) {
  BasicTensor<T> y(logits.shape());
  const int k = logits.shape().back();
  const size_t rows = logits.size() / static_cast<size_t>(k);
  for (size_t r = 0; r < rows; ++r) {
    const T* in = logits.raw() + r * k;
    T* out = y.raw() + r * k;
    double mx = in[0];
    for (int i = 1; i < k; ++i) mx = std::max(mx, static_cast<double>(in[i]));
    double sum = 0.0;
    for (int i = 0; i < k; ++i) sum += std::exp(static_cast<double>(in[i]) - mx);
    for (int i = 0; i < k; ++i) out[i] = static_cast<T>(std::exp(static_cast<double>(in[i]) - mx) / sum);
  }
  return y;
}

template <typename T>
BasicTensor<T> avgpool_forward(const BasicTensor<T>& x, const LayerSpec& spec) {
  require_rank4(x.shape(), "avgpool");
  const int n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const int oh = window_output_size(h, spec.kernel, spec.stride, 0);
  const int ow = window_output_size(w, spec.kernel, spec.stride, 0);
  BasicTensor<T> y({n, oh, ow, c});
  std::vector<double> acc(static_cast<size_t>(c));
  const double count = static_cast<double>(spec.kernel) * spec.kernel;
  for (int b = 0; b < n; ++b) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int ky = 0; ky < spec.kernel; ++ky) {
          for (int kx = 0; kx < spec.kernel; ++kx) {
            const T* px = &x.at(b, oy * spec.stride + ky, ox * spec.stride + kx, 0);
            for (int ch = 0; ch < c; ++ch) acc[static_cast<size_t>(ch)] += static_cast<double>(px[ch]);
          }
        }
        for (int ch = 0; ch < c; ++ch) y.at(b, oy, ox, ch) = static_cast<T>(acc[static_cast<size_t>(ch)] / count);
      }
    }
  }
  return y;
}

template BasicTensor<float> conv2d_forward(const BasicTensor<float>&, const BasicTensor<float>&,
                                           const BasicTensor<float>&, const LayerSpec&);
template BasicTensor<double> conv2d_forward(const BasicTensor<double>&, const BasicTensor<double>&,
                                            const BasicTensor<double>&, const LayerSpec&);
template void conv2d_backward(const BasicTensor<float>&, const BasicTensor<float>&, const BasicTensor<float>&,
                              const LayerSpec&, BasicTensor<float>&, BasicTensor<float>&, BasicTensor<float>*);
template void conv2d_backward(const BasicTensor<double>&, const BasicTensor<double>&,
                              const BasicTensor<double>&, const LayerSpec&, BasicTensor<double>&,
                              BasicTensor<double>&, BasicTensor<double>*);
template BasicTensor<float> softmax(const BasicTensor<float>&);
template BasicTensor<double> softmax(const BasicTensor<double>&);
template BasicTensor<float> avgpool_forward(const BasicTensor<float>&, const LayerSpec&);
template BasicTensor<double> avgpool_forward(const BasicTensor<double>&, const LayerSpec&);

}  // namespace kernels

template <typename T>
BasicNetwork<T>::BasicNetwork(std::vector<LayerSpec> layers) : layers_(std::move(layers)) {
  for (const auto& spec : layers_) {
    if (!spec.has_parameters()) {
      param_offset_.push_back(-1);
      continue;
    }
    if (spec.in_channels < 1 || spec.out_channels < 1) {
      throw ConfigError(to_string(spec.kind) + " layer needs positive channel counts");
    }
    param_offset_.push_back(static_cast<int>(params_.size()));
    if (spec.kind == LayerKind::conv2d) {
      if (spec.kernel < 1) throw ConfigError("conv2d kernel must be positive");
      params_.emplace_back(std::vector<int>{spec.kernel, spec.kernel, spec.in_channels, spec.out_channels});
    } else {
      params_.emplace_back(std::vector<int>{spec.in_channels, spec.out_channels});
    }
    params_.emplace_back(std::vector<int>{spec.out_channels});
  }
}

template <typename T>
std::vector<std::string> BasicNetwork<T>::param_names() const {
  std::vector<std::string> names;
  for (size_t i = 0; i < layers_.size(); ++i) {
    if (param_offset_[i] < 0) continue;
    const std::string base = "layer" + std::to_string(i) + "." + to_string(layers_[i].kind);
    names.push_back(base + ".weight");
    names.push_back(base + ".bias");
  }
  return names;
}

template <typename T>
size_t BasicNetwork<T>::parameter_count() const {
  size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

template <typename T>
void BasicNetwork<T>::init_he(uint64_t seed) {
  Rng rng(seed);
  for (size_t i = 0; i < layers_.size(); ++i) {
    if (param_offset_[i] < 0) continue;
    const auto& spec = layers_[i];
    const double fan_in = spec.kind == LayerKind::conv2d
                              ? static_cast<double>(spec.kernel) * spec.kernel * spec.in_channels
                              : static_cast<double>(spec.in_channels);
    const double stddev = std::sqrt(2.0 / fan_in);
    auto& w = params_[static_cast<size_t>(param_offset_[i])];
    for (auto& v : w.values()) v = static_cast<T>(rng.normal() * stddev);
    params_[static_cast<size_t>(param_offset_[i]) + 1].fill(T(0));
  }
}

template <typename T>
std::vector<int> BasicNetwork<T>::output_shape(const std::vector<int>& input_shape) const {
  std::vector<int> s = input_shape;
  for (const auto& spec : layers_) {
    switch (spec.kind) {
      case LayerKind::conv2d:
        require_rank4(s, "conv2d");
        if (s[3] != spec.in_channels) {
          throw ConfigError("conv2d expects " + std::to_string(spec.in_channels) + " channels, got " +
                            shape_to_string(s));
        }
        s = {s[0], window_output_size(s[1], spec.kernel, spec.stride, spec.padding),
             window_output_size(s[2], spec.kernel, spec.stride, spec.padding), spec.out_channels};
        break;
      case LayerKind::maxpool:
      case LayerKind::avgpool:
        require_rank4(s, "pool");
        s = {s[0], window_output_size(s[1], spec.kernel, spec.stride, 0),
             window_output_size(s[2], spec.kernel, spec.stride, 0), s[3]};
        break;
      case LayerKind::fullyconnected: {
        size_t features = 1;
        for (size_t i = 1; i < s.size(); ++i) features *= static_cast<size_t>(s[i]);
        if (static_cast<int>(features) != spec.in_channels) {
          throw ConfigError("fullyconnected expects " + std::to_string(spec.in_channels) + " features, got " +
                            shape_to_string(s));
        }
        s = {s[0], spec.out_channels};
        break;
      }
      case LayerKind::relu:
      case LayerKind::softmax:
        break;
    }
  }
  return s;
}

template <typename T>
BasicTensor<T> BasicNetwork<T>::forward(const TensorT& input, Cache* cache) const {
  output_shape(input.shape());
  if (cache) {
    cache->inputs.clear();
    cache->inputs.reserve(layers_.size());
    cache->argmax.assign(layers_.size(), {});
    cache->valid = false;
  }
  if (layers_.empty()) {
    if (cache) {
      cache->output = input;
      cache->valid = true;
    }
    return input;
  }
  TensorT x;
  const TensorT* in = &input;
  for (size_t i = 0; i < layers_.size(); ++i) {
    const auto& spec = layers_[i];
    if (cache) {
      cache->inputs.push_back(i == 0 ? input : std::move(x));
      in = &cache->inputs.back();
    } else if (i > 0) {
      in = &x;
    }
    switch (spec.kind) {
      case LayerKind::conv2d: {
        const auto p = static_cast<size_t>(param_offset_[i]);
        x = kernels::conv2d_forward(*in, params_[p], params_[p + 1], spec);
        break;
      }
      case LayerKind::maxpool:
        x = maxpool_forward(*in, spec, cache ? &cache->argmax[i] : nullptr);
        break;
      case LayerKind::avgpool:
        x = kernels::avgpool_forward(*in, spec);
        break;
      case LayerKind::fullyconnected: {
        const auto p = static_cast<size_t>(param_offset_[i]);
        x = fc_forward(*in, params_[p], params_[p + 1], spec);
        break;
      }
      case LayerKind::relu:
        x = relu_forward(*in);
        break;
      case LayerKind::softmax:
        x = kernels::softmax(*in);
        break;
    }
  }
  check_finite(x, "forward pass");
  if (cache) {
    cache->output = x;
    cache->valid = true;
  }
  return x;
}

template <typename T>
std::vector<BasicTensor<T>> BasicNetwork<T>::backward(const Cache& cache, const TensorT& grad_output,
                                                      bool skip_final_softmax, TensorT* grad_input) const {
  if (!cache.valid || cache.inputs.size() != layers_.size()) {
    throw UsageError("backward called without a forward cache for this network");
  }
  if (grad_output.shape() != cache.output.shape()) {
    throw ConfigError("loss gradient shape " + shape_to_string(grad_output.shape()) +
                      " does not match network output " + shape_to_string(cache.output.shape()));
  }
  if (skip_final_softmax && (layers_.empty() || layers_.back().kind != LayerKind::softmax)) {
    throw UsageError("skip_final_softmax requires a trailing softmax layer");
  }
  std::vector<TensorT> grads;
  grads.reserve(params_.size());
  for (const auto& p : params_) grads.emplace_back(p.shape());

  TensorT dy = grad_output;
  for (size_t li = layers_.size(); li-- > 0;) {
    const auto& spec = layers_[li];
    const TensorT& x = cache.inputs[li];
    const bool need_dx = li > 0 || grad_input != nullptr;
    TensorT dx;
    switch (spec.kind) {
      case LayerKind::conv2d: {
        const auto p = static_cast<size_t>(param_offset_[li]);
        kernels::conv2d_backward(x, params_[p], dy, spec, grads[p], grads[p + 1], need_dx ? &dx : nullptr);
        break;
      }
      case LayerKind::fullyconnected: {
        const auto p = static_cast<size_t>(param_offset_[li]);
        const int n = x.dim(0);
        ConstMatMap<T> xm(x.raw(), n, spec.in_channels);
        ConstMatMap<T> dym(dy.raw(), n, spec.out_channels);
        MatMap<T> dwm(grads[p].raw(), spec.in_channels, spec.out_channels);
        dwm.noalias() = xm.transpose() * dym;
        for (int r = 0; r < n; ++r) {
          for (int o = 0; o < spec.out_channels; ++o) grads[p + 1][static_cast<size_t>(o)] += dym(r, o);
        }
        if (need_dx) {
          dx = TensorT(x.shape());
          ConstMatMap<T> wm(params_[p].raw(), spec.in_channels, spec.out_channels);
          MatMap<T> dxm(dx.raw(), n, spec.in_channels);
          dxm.noalias() = dym * wm.transpose();
        }
        break;
      }
      case LayerKind::maxpool: {
        dx = TensorT(x.shape());
        const auto& am = cache.argmax[li];
        for (size_t o = 0; o < dy.size(); ++o) dx[static_cast<size_t>(am[o])] += dy[o];
        break;
      }
      case LayerKind::avgpool: {
        dx = TensorT(x.shape());
        const int oh = dy.dim(1), ow = dy.dim(2), c = dy.dim(3);
        const T scale = T(1) / static_cast<T>(spec.kernel * spec.kernel);
        for (int b = 0; b < dy.dim(0); ++b) {
          for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
              for (int ky = 0; ky < spec.kernel; ++ky) {
                for (int kx = 0; kx < spec.kernel; ++kx) {
                  for (int ch = 0; ch < c; ++ch) {
                    dx.at(b, oy * spec.stride + ky, ox * spec.stride + kx, ch) += dy.at(b, oy, ox, ch) * scale;
                  }
                }
              }
            }
          }
        }
        break;
      }
      case LayerKind::relu: {
        dx = dy;
        for (size_t i = 0; i < dx.size(); ++i) {
          if (!(x[i] > T(0))) dx[i] = T(0);
        }
        break;
      }
      case LayerKind::softmax: {
        if (skip_final_softmax && li + 1 == layers_.size()) {
          dx = dy;
          break;
        }
        const TensorT y = li + 1 == layers_.size() ? cache.output : cache.inputs[li + 1];
        dx = TensorT(x.shape());
        const int k = x.shape().back();
        const size_t rows = x.size() / static_cast<size_t>(k);
        for (size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (int i = 0; i < k; ++i) dot += static_cast<double>(dy[r * k + i]) * y[r * k + i];
          for (int i = 0; i < k; ++i) {
            dx[r * k + i] = static_cast<T>(y[r * k + i] * (static_cast<double>(dy[r * k + i]) - dot));
          }
        }
        break;
      }
    }
    if (need_dx) dy = std::move(dx);
  }
  for (const auto& g : grads) check_finite(g, "backward pass");
  if (grad_input) *grad_input = std::move(dy);
  return grads;
}

template class BasicNetwork<float>;
template class BasicNetwork<double>;

}  // namespace cle
