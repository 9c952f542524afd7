#include "cle/patch.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <tuple>

#include "cle/loss.hpp"
#include "cle/optim.hpp"

namespace cle {

nlohmann::json PatchNetConfig::to_json() const {
  return {{"patch_size", patch_size},         {"grid_stride", grid_stride},
          {"conv1_stride", conv1_stride},     {"conv1_width", conv1_width},
          {"conv2_width", conv2_width},       {"fc_width", fc_width},
          {"epochs", epochs},                 {"learning_rate", learning_rate},
          {"batch_size", batch_size},         {"patches_per_frame", patches_per_frame}};
}

PatchNetConfig PatchNetConfig::from_json(const nlohmann::json& j) {
  PatchNetConfig c;
  c.patch_size = j.value("patch_size", c.patch_size);
  c.grid_stride = j.value("grid_stride", c.grid_stride);
  c.conv1_stride = j.value("conv1_stride", c.conv1_stride);
  c.conv1_width = j.value("conv1_width", c.conv1_width);
  c.conv2_width = j.value("conv2_width", c.conv2_width);
  c.fc_width = j.value("fc_width", c.fc_width);
  c.epochs = j.value("epochs", c.epochs);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.patches_per_frame = j.value("patches_per_frame", c.patches_per_frame);
  if (c.patch_size < 4 || c.grid_stride < 1 || c.conv1_stride < 1 || c.epochs < 1 || c.batch_size < 1 ||
      c.patches_per_frame < 1) {
    throw ConfigError("invalid patch network config");
  }
  return c;
}

std::vector<LayerSpec> patch_net_layers(const PatchNetConfig& c) {
  const int s1 = window_output_size(c.patch_size, 3, c.conv1_stride, 1);
  const int p1 = window_output_size(s1, 2, 2, 0);
  const int p2 = window_output_size(p1, 2, 2, 0);
  return {LayerSpec::conv(1, c.conv1_width, 3, c.conv1_stride, 1),
          LayerSpec::relu(),
          LayerSpec::max_pool(2, 2),
          LayerSpec::conv(c.conv1_width, c.conv2_width, 3, 1, 1),
          LayerSpec::relu(),
          LayerSpec::max_pool(2, 2),
          LayerSpec::fc(p2 * p2 * c.conv2_width, c.fc_width),
          LayerSpec::relu(),
          LayerSpec::fc(c.fc_width, 2),
          LayerSpec::softmax()};
}

Network make_patch_net(const PatchNetConfig& config, uint64_t seed) {
  Network net(patch_net_layers(config));
  net.init_he(seed);
  return net;
}

ImageF extract_patch(const Frame& frame, const FovStats& stats, PatchOrigin origin, int size) {
  if (origin.x < 0 || origin.y < 0 || origin.x + size > frame.width() || origin.y + size > frame.height()) {
    throw ConfigError("patch at (" + std::to_string(origin.x) + ", " + std::to_string(origin.y) +
                      ") leaves the frame");
  }
  ImageF out(size, size);
  const double inv = 1.0 / stats.stddev;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      out.at(x, y) = static_cast<float>((frame.raw.at(origin.x + x, origin.y + y) - stats.mean) * inv);
    }
  }
  return out;
}

std::vector<AugmentedPatch> three_fold_augment(const ImageF& patch, Rng& rng) {
  int turns[3] = {1, 2, 3};
  rng.shuffle(turns, turns + 3);
  std::vector<AugmentedPatch> out{{patch, 0}};
  for (int t : turns) out.push_back({rotate_quarter(patch, t), t});
  return out;
}

namespace {

void copy_into(const ImageF& img, Tensor& batch, int n) {
  std::copy(img.pixels.begin(), img.pixels.end(), &batch.at(n, 0, 0, 0));
}

void require_patch_model(const Network& model) {
  if (model.layers().empty() || model.layers().front().kind != LayerKind::conv2d) {
    throw ConfigError("patch model must start with a convolution");
  }
}

}  // namespace

ProbabilityMap classify_patches(const Network& model, const Frame& frame, const PatchGrid& grid,
                                const FovStats& stats, int batch_size) {
  require_patch_model(model);
  ProbabilityMap map;
  map.patch_size = grid.patch_size;
  map.origins = grid.origins;
  map.p_carcinoma.resize(grid.origins.size());
  const int p = grid.patch_size;
  for (size_t start = 0; start < grid.origins.size(); start += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(grid.origins.size(), start + static_cast<size_t>(batch_size));
    Tensor x({static_cast<int>(end - start), p, p, 1});
    for (size_t i = start; i < end; ++i) {
      copy_into(extract_patch(frame, stats, grid.origins[i], p), x, static_cast<int>(i - start));
    }
    const Tensor probs = model.forward(x);
    if (probs.rank() != 2 || probs.dim(1) != 2) throw ConfigError("patch model must output two class probabilities");
    for (size_t i = start; i < end; ++i) map.p_carcinoma[i] = probs.raw()[(i - start) * 2 + 1];
  }
  return map;
}

ProbabilityMap classify_patches(const Network& model, const Frame& frame, const PatchGrid& grid) {
  return classify_patches(model, frame, grid, fov_statistics(frame));
}

ImageProbability fuse(const ProbabilityMap& map) {
  ImageProbability out;
  out.method = Method::ppf;
  if (map.empty()) return out;
  double sum = 0.0;
  for (double p : map.p_carcinoma) sum += p;
  out.p_carcinoma = sum / static_cast<double>(map.size());
  return out;
}

nlohmann::json PatchTrainLog::to_json() const {
  return {{"epoch_loss", epoch_loss},
          {"epochs", epoch_loss.size()},
          {"augmented_patches", augmented_patches},
          {"patches_per_epoch", patches_per_epoch},
          {"patches_per_class", patches_per_class}};
}

PatchSet build_patch_set(const Dataset& dataset, const std::vector<size_t>& train_frames,
                         const PatchNetConfig& config, Rng& rng, const std::vector<FovStats>* stats) {
  const int p = config.patch_size;
  PatchSet set;
  std::map<std::tuple<int, int, double>, PatchGrid> grids;
  for (size_t fi : train_frames) {
    const Frame& frame = dataset.frames.at(fi);
    const auto key = std::make_tuple(frame.width(), frame.height(), frame.fov_radius);
    auto it = grids.find(key);
    if (it == grids.end()) {
      it = grids.emplace(key, extract_patch_grid(compute_fov_mask(frame.width(), frame.height(), frame.fov_radius), p,
                                                 config.grid_stride))
               .first;
    }
    std::vector<PatchOrigin> origins = it->second.origins;
    if (origins.empty()) continue;
    rng.shuffle(origins.begin(), origins.end());
    origins.resize(std::min(origins.size(), static_cast<size_t>(config.patches_per_frame)));
    const FovStats st = stats ? stats->at(fi) : fov_statistics(frame);
    const int label = class_index(dataset.manifest.records.at(fi).label);
    for (const auto& o : origins) {
      for (auto& a : three_fold_augment(extract_patch(frame, st, o, p), rng)) {
        set.patches.push_back(std::move(a.pixels));
        set.labels.push_back(label);
        set.source_frames.push_back(fi);
        set.quarter_turns.push_back(a.quarter_turns);
      }
    }
  }
  return set;
}

PatchTrainResult train_ppf(const Dataset& dataset, const std::vector<size_t>& train_frames,
                           const PatchNetConfig& config, uint64_t seed, const std::vector<FovStats>* stats) {
  Rng rng(mix_seed(seed, 0x9a7c));
  const int p = config.patch_size;
  PatchSet set = build_patch_set(dataset, train_frames, config, rng, stats);
  const std::vector<ImageF>& patches = set.patches;
  const std::vector<int>& labels = set.labels;

  std::vector<size_t> by_class[2];
  for (size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  if (by_class[0].empty() || by_class[1].empty()) throw ConfigError("patch training needs both classes");

  PatchTrainResult result;
  result.model = make_patch_net(config, mix_seed(seed, 0x1417));
  result.log.augmented_patches = patches.size();
  result.log.patches_per_class = {by_class[0].size(), by_class[1].size()};
  Network& net = result.model;
  Adam adam(net.params(), config.learning_rate);

  const size_t minority = std::min(by_class[0].size(), by_class[1].size());
  result.log.patches_per_epoch = 2 * minority;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<size_t> order;
    for (auto& cls : by_class) {
      rng.shuffle(cls.begin(), cls.end());
      order.insert(order.end(), cls.begin(), cls.begin() + static_cast<std::ptrdiff_t>(minority));
    }
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(config.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(config.batch_size));
      const int n = static_cast<int>(end - start);
      Tensor x({n, p, p, 1});
      std::vector<int> y;
      for (size_t j = start; j < end; ++j) {
        copy_into(patches[order[j]], x, static_cast<int>(j - start));
        y.push_back(labels[order[j]]);
      }
      ForwardCache cache;
      const Tensor probs = net.forward(x, &cache);
      const auto loss = cross_entropy_loss(probs, y);
      loss_sum += loss.loss * n;
      const auto grads = net.backward(cache, loss.grad_logits, true);
      adam.step(net.params(), grads);
    }
    result.log.epoch_loss.push_back(loss_sum / static_cast<double>(order.size()));
  }
  return result;
}

Checkpoint ppf_checkpoint(const Network& model, const PatchNetConfig& config, uint64_t seed, int64_t step) {
  Checkpoint ck;
  ck.kind = "ppf";
  ck.seed = seed;
  ck.step = step;
  ck.config["model"] = config.to_json();
  add_network(ck, "patchnet", model);
  return ck;
}

Network ppf_model_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "ppf") throw ConfigError("checkpoint kind '" + ckpt.kind + "' is not a patch model");
  return read_network(ckpt, "patchnet");
}

PatchNetConfig ppf_config_from_checkpoint(const Checkpoint& ckpt) {
  return PatchNetConfig::from_json(ckpt.config.at("model"));
}

void write_probability_map(const std::filesystem::path& path, const ProbabilityMap& map) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "x\ty\tp_carcinoma\n";
  char buf[64];
  for (size_t i = 0; i < map.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.9g", map.p_carcinoma[i]);
    out << map.origins[i].x << '\t' << map.origins[i].y << '\t' << buf << '\n';
  }
}

Image8 probability_overlay(const Frame& frame, const ProbabilityMap& map) {
  const int w = frame.width(), h = frame.height();
  const FovMask mask = compute_fov_mask(w, h, frame.fov_radius);
  const Image8 gray = compress_to_8bit(to_float(frame.raw), mask.grid);
  std::vector<double> sum(static_cast<size_t>(w) * h, 0.0);
  std::vector<int> hits(sum.size(), 0);
  for (size_t i = 0; i < map.size(); ++i) {
    const auto o = map.origins[i];
    for (int y = o.y; y < std::min(h, o.y + map.patch_size); ++y) {
      for (int x = o.x; x < std::min(w, o.x + map.patch_size); ++x) {
        sum[static_cast<size_t>(y) * w + x] += map.p_carcinoma[i];
        ++hits[static_cast<size_t>(y) * w + x];
      }
    }
  }
  Image8 out(w, h);
  for (size_t i = 0; i < out.pixels.size(); ++i) {
    const double heat = hits[i] ? 255.0 * sum[i] / hits[i] : 0.0;
    out.pixels[i] = static_cast<uint8_t>(std::lround(0.5 * gray.pixels[i] + 0.5 * heat));
  }
  return out;
}

}  // namespace cle
