#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cle/checkpoint.hpp"
#include "cle/dataset.hpp"
#include "cle/fov.hpp"
#include "cle/method.hpp"
#include "cle/nn.hpp"
#include "cle/rng.hpp"

namespace cle {

struct PatchNetConfig {
  int patch_size = 80;
  int grid_stride = 40;
  int conv1_stride = 1;
  int conv1_width = 16;
  int conv2_width = 32;
  int fc_width = 128;
  int epochs = 60;
  double learning_rate = 1e-2;
  int batch_size = 32;
  int patches_per_frame = 2;  // grid patches sampled per training frame

  nlohmann::json to_json() const;
  static PatchNetConfig from_json(const nlohmann::json& j);
};

/// conv -> relu -> maxpool -> conv -> relu -> maxpool -> fc -> relu -> fc -> softmax
std::vector<LayerSpec> patch_net_layers(const PatchNetConfig& config);
Network make_patch_net(const PatchNetConfig& config, uint64_t seed);

/// Standardized patch with its top-left corner at `origin`.
ImageF extract_patch(const Frame& frame, const FovStats& stats, PatchOrigin origin, int size);

/// The original followed by its three quarter-turn rotations in random order.
struct AugmentedPatch {
  ImageF pixels;
  int quarter_turns = 0;
};
std::vector<AugmentedPatch> three_fold_augment(const ImageF& patch, Rng& rng);

struct ProbabilityMap {
  int patch_size = 0;
  std::vector<PatchOrigin> origins;
  std::vector<double> p_carcinoma;  // aligned with origins

  size_t size() const { return origins.size(); }
  bool empty() const { return origins.empty(); }
};

/// One probability per grid origin, in grid order.
ProbabilityMap classify_patches(const Network& model, const Frame& frame, const PatchGrid& grid,
                                const FovStats& stats, int batch_size = 64);
ProbabilityMap classify_patches(const Network& model, const Frame& frame, const PatchGrid& grid);

/// Mean of the patch probabilities; an empty map is non-diagnostic.
ImageProbability fuse(const ProbabilityMap& map);

/// Fixed training set: `patches_per_frame` grid patches of every training
/// frame, each with its three rotations. Labels come from the source frame.
struct PatchSet {
  std::vector<ImageF> patches;
  std::vector<int> labels;
  std::vector<size_t> source_frames;
  std::vector<int> quarter_turns;
};
PatchSet build_patch_set(const Dataset& dataset, const std::vector<size_t>& train_frames,
                         const PatchNetConfig& config, Rng& rng, const std::vector<FovStats>* stats = nullptr);

struct PatchTrainLog {
  std::vector<double> epoch_loss;
  size_t augmented_patches = 0;
  size_t patches_per_epoch = 0;
  std::array<size_t, 2> patches_per_class{};

  nlohmann::json to_json() const;
};

struct PatchTrainResult {
  Network model;
  PatchTrainLog log;
};

/// Fixed-length training on the 3-fold augmented patch set with per-epoch
/// undersampling of the majority class. `stats` may hold precomputed FOV
/// statistics for every dataset frame.
PatchTrainResult train_ppf(const Dataset& dataset, const std::vector<size_t>& train_frames,
                           const PatchNetConfig& config, uint64_t seed,
                           const std::vector<FovStats>* stats = nullptr);

Checkpoint ppf_checkpoint(const Network& model, const PatchNetConfig& config, uint64_t seed, int64_t step);
Network ppf_model_from_checkpoint(const Checkpoint& ckpt);
PatchNetConfig ppf_config_from_checkpoint(const Checkpoint& ckpt);

/// Rows "x<TAB>y<TAB>p" after a header line.
void write_probability_map(const std::filesystem::path& path, const ProbabilityMap& map);

/// Per-pixel mean probability of the covering patches (0 where uncovered)
/// blended at alpha 0.5 over the 8-bit compressed frame.
Image8 probability_overlay(const Frame& frame, const ProbabilityMap& map);

}  // namespace cle
