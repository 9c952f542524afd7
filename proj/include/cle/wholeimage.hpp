#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cle/checkpoint.hpp"
#include "cle/dataset.hpp"
#include "cle/fov.hpp"
#include "cle/gradcheck.hpp"
#include "cle/nn.hpp"

namespace cle {

struct ImageModelConfig {
  int input_size = 272;
  std::vector<int> stem_widths{8, 16, 32, 64};  // one stride-2 conv block per entry
  double head_learning_rate = 1e-4;
  double stem_lr_multiplier = 1e-2;
  int batch_size = 8;
  int initial_epochs = 2;
  int max_epochs = 10;
  int validation_patients = 0;  // 0: two, or one when fewer than six training patients
  bool rotation_augmentation = true;

  double stem_learning_rate() const { return head_learning_rate * stem_lr_multiplier; }
  nlohmann::json to_json() const;
  static ImageModelConfig from_json(const nlohmann::json& j);
};

/// Stride-2 3x3 conv + ReLU blocks on a single-channel input.
std::vector<LayerSpec> desk_stem_layers(const std::vector<int>& widths);

/// Stem, appended conv, masked GAP and the shared affine classifier.
template <typename T>
struct BasicImageModel {
  int input_size = 0;
  BasicNetwork<T> stem;        // [N, in, in, 1] -> [N, S, S, C]
  BasicNetwork<T> head;        // 3x3 C->C conv + ReLU
  BasicNetwork<T> classifier;  // fullyconnected C -> 2, no softmax

  int feature_size() const;
  int channels() const;

  template <typename U>
  BasicImageModel<U> cast() const {
    return {input_size, stem.template cast<U>(), head.template cast<U>(), classifier.template cast<U>()};
  }
};
using ImageModel = BasicImageModel<float>;

ImageModel make_image_model(const ImageModelConfig& config, uint64_t seed);
/// Wraps an externally supplied stem; the head is sized from its output.
ImageModel make_image_model(Network stem, int input_size, uint64_t seed);

/// Reads a stem from a checkpoint file (tensors under `prefix`) and checks
/// that it maps input_size^2 x 1 to a square feature grid.
Network load_stem(const std::filesystem::path& path, const std::string& prefix, int input_size);

Checkpoint image_checkpoint(const ImageModel& model, const ImageModelConfig& config, uint64_t seed, int64_t step);
ImageModel image_model_from_checkpoint(const Checkpoint& ckpt);

/// Validity mask on the feature grid; the radius scales with S / input size.
FovMask feature_mask(int feature_size, double input_radius, int input_size);

/// v'_c = sum(mask * u_c) / sum(mask), accumulated in double in row-major
/// order. `masks` holds one mask for the whole batch or one per sample.
/// Output shape [N, 1, 1, C].
template <typename T>
BasicTensor<T> masked_gap(const BasicTensor<T>& features, std::span<const FovMask> masks);
template <typename T>
BasicTensor<T> masked_gap(const BasicTensor<T>& features, const FovMask& mask) {
  return masked_gap(features, std::span<const FovMask>(&mask, 1));
}

/// Gradient w.r.t. the features; exactly zero at masked-out locations.
template <typename T>
BasicTensor<T> masked_gap_backward(const BasicTensor<T>& grad_pooled, std::span<const FovMask> masks, int height,
                                   int width);

template <typename T>
struct BasicImagePass {
  BasicForwardCache<T> stem, head, classifier;
  BasicTensor<T> features;  // U after the appended conv, [N, S, S, C]
  BasicTensor<T> pooled;    // [N, 1, 1, C]
  BasicTensor<T> logits;    // [N, 2]
  BasicTensor<T> probabilities;
};

template <typename T>
BasicImagePass<T> image_forward(const BasicImageModel<T>& model, const BasicTensor<T>& input,
                                std::span<const FovMask> masks);

/// Parameter gradients (stem, head, classifier order) for dL/d(logits).
template <typename T>
std::vector<BasicTensor<T>> image_backward(const BasicImageModel<T>& model, const BasicImagePass<T>& pass,
                                           std::span<const FovMask> masks, const BasicTensor<T>& grad_logits);

/// Per-location class scores of one sample, row-major S x S x K.
struct ClassActivationMap {
  int size = 0;
  int classes = 2;
  std::vector<double> scores;         // pre-softmax
  std::vector<double> probabilities;  // per-location softmax

  double score(int y, int x, int k) const { return scores[(static_cast<size_t>(y) * size + x) * classes + k]; }
  double probability(int y, int x, int k) const {
    return probabilities[(static_cast<size_t>(y) * size + x) * classes + k];
  }
};

/// Shared classifier applied at every feature location of sample `n`.
ClassActivationMap cam_from_features(const ImageModel& model, const Tensor& features, int n = 0);

/// Frame after standardization, resize, optional rotation and circular
/// extrapolation, ready for the stem.
struct ModelInput {
  ImageF image;
  double radius = 0.0;  // FOV radius in input pixels
};

/// Standardized in-FOV content resized to the stem input (not extrapolated).
ModelInput resize_for_model(const Frame& frame, int input_size);
/// Rotation about the grid centre followed by circular extrapolation.
ModelInput finish_preprocessing(const ModelInput& resized, double angle);
ModelInput preprocess_for_model(const Frame& frame, int input_size, double angle = 0.0);

/// Warns when the exterior variance does not resemble the interior, i.e. the
/// input was most likely not circular-extrapolated.
std::vector<std::string> input_warnings(const ModelInput& input);

struct ImageClassification {
  double p_carcinoma = 0.0;
  std::array<double, 2> logits{};
  ClassActivationMap cam;
  std::vector<std::string> warnings;
};

/// One stem pass feeding both the classification and the CAM branch.
ImageClassification classify_image(const ImageModel& model, const ModelInput& input);
std::vector<ImageClassification> classify_images(const ImageModel& model, std::span<const ModelInput* const> inputs,
                                                 int batch_size = 16);
ClassActivationMap class_activation_map(const ImageModel& model, const ModelInput& input);

/// Per-dataset preprocessing shared by all folds of an experiment.
class ImageInputCache {
 public:
  ImageInputCache(const Dataset& dataset, int input_size, int threads = 1);
  int input_size() const { return input_size_; }
  const ModelInput& resized(size_t frame) const { return resized_.at(frame); }
  const ModelInput& plain(size_t frame) const { return plain_.at(frame); }

 private:
  int input_size_;
  std::vector<ModelInput> resized_;
  std::vector<ModelInput> plain_;  // extrapolated, no rotation
};

struct EarlyStopHooks {
  std::function<void(int epoch)> train_epoch;
  std::function<double(int epoch)> evaluate;
  std::function<void()> snapshot;
  std::function<void()> restore;
};

struct EarlyStopOutcome {
  int epochs_run = 0;
  int kept_epoch = 0;  // epoch whose weights are final
  bool restored = false;
  std::vector<std::pair<int, double>> scores;  // (epoch, validation score)
};

/// Trains `initial_epochs`, then one epoch at a time up to `max_epochs`. A
/// score below the previous one restores the previous weights and stops;
/// equal scores continue.
EarlyStopOutcome run_early_stopping(int initial_epochs, int max_epochs, const EarlyStopHooks& hooks);

/// The `count` training patients with most frames (ties by id) whose
/// selection leaves both classes on both sides.
std::vector<std::string> choose_validation_patients(const Dataset& dataset,
                                                    const std::vector<std::string>& train_patients, int count);
int default_validation_count(size_t train_patients);

struct ImageTrainLog {
  std::vector<std::string> validation_patients;
  std::vector<double> train_loss;  // per epoch
  EarlyStopOutcome early_stop;
  double head_learning_rate = 0.0;
  double stem_learning_rate = 0.0;

  nlohmann::json to_json() const;
};

struct ImageTrainResult {
  ImageModel model;
  ImageTrainLog log;
};

/// Trains from scratch on `train_frames`; validation frames are all frames of
/// `validation_patients`, which must not occur among the training frames.
ImageTrainResult train_image(const Dataset& dataset, const std::vector<size_t>& train_frames,
                             const std::vector<std::string>& validation_patients, const ImageModelConfig& config,
                             uint64_t seed, const ImageInputCache* cache = nullptr);
/// Same, starting from a given model (e.g. one carrying a loaded stem).
ImageTrainResult train_image(ImageModel initial, const Dataset& dataset, const std::vector<size_t>& train_frames,
                             const std::vector<std::string>& validation_patients, const ImageModelConfig& config,
                             uint64_t seed, const ImageInputCache* cache = nullptr);

/// Cross-entropy gradient check of the full model (stem, appended conv,
/// masked GAP, classifier) in double precision.
GradientCheckReport image_gradient_check(const ImageModel& model, const Tensor& input, const FovMask& mask,
                                         const std::vector<int>& labels, double h = 1e-4, double tolerance = 1e-3,
                                         const GradientCheckOptions& options = {});

}  // namespace cle
