#include "cle/wholeimage.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <map>
#include <set>

#include "cle/loss.hpp"
#include "cle/optim.hpp"
#include "cle/parallel.hpp"
#include "cle/rng.hpp"

namespace cle {

nlohmann::json ImageModelConfig::to_json() const {
  return {{"input_size", input_size},
          {"stem_widths", stem_widths},
          {"head_learning_rate", head_learning_rate},
          {"stem_lr_multiplier", stem_lr_multiplier},
          {"stem_learning_rate", stem_learning_rate()},
          {"batch_size", batch_size},
          {"initial_epochs", initial_epochs},
          {"max_epochs", max_epochs},
          {"validation_patients", validation_patients},
          {"rotation_augmentation", rotation_augmentation}};
}

ImageModelConfig ImageModelConfig::from_json(const nlohmann::json& j) {
  ImageModelConfig c;
  c.input_size = j.value("input_size", c.input_size);
  c.stem_widths = j.value("stem_widths", c.stem_widths);
  c.head_learning_rate = j.value("head_learning_rate", c.head_learning_rate);
  c.stem_lr_multiplier = j.value("stem_lr_multiplier", c.stem_lr_multiplier);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.initial_epochs = j.value("initial_epochs", c.initial_epochs);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.validation_patients = j.value("validation_patients", c.validation_patients);
  c.rotation_augmentation = j.value("rotation_augmentation", c.rotation_augmentation);
  if (c.input_size < 1 || c.batch_size < 1 || c.stem_widths.empty()) throw ConfigError("invalid image model config");
  if (c.initial_epochs < 1 || c.max_epochs < c.initial_epochs) {
    throw ConfigError("image training needs 1 <= initial_epochs <= max_epochs");
  }
  return c;
}

std::vector<LayerSpec> desk_stem_layers(const std::vector<int>& widths) {
  std::vector<LayerSpec> layers;
  int in = 1;
  for (int w : widths) {
    layers.push_back(LayerSpec::conv(in, w, 3, 2, 1));
    layers.push_back(LayerSpec::relu());
    in = w;
  }
  return layers;
}

template <typename T>
int BasicImageModel<T>::feature_size() const {
  return stem.output_shape({1, input_size, input_size, 1})[1];
}

template <typename T>
int BasicImageModel<T>::channels() const {
  return stem.output_shape({1, input_size, input_size, 1})[3];
}

template struct BasicImageModel<float>;
template struct BasicImageModel<double>;

ImageModel make_image_model(Network stem, int input_size, uint64_t seed) {
  const auto shape = stem.output_shape({1, input_size, input_size, 1});
  if (shape.size() != 4 || shape[1] != shape[2]) {
    throw ConfigError("stem must map a square input to a square feature grid, got " + shape_to_string(shape));
  }
  const int c = shape[3];
  ImageModel m;
  m.input_size = input_size;
  m.stem = std::move(stem);
  m.head = Network({LayerSpec::conv(c, c, 3, 1, 1), LayerSpec::relu()});
  m.head.init_he(mix_seed(seed, 2));
  m.classifier = Network({LayerSpec::fc(c, 2)});
  m.classifier.init_he(mix_seed(seed, 3));
  return m;
}

ImageModel make_image_model(const ImageModelConfig& config, uint64_t seed) {
  Network stem(desk_stem_layers(config.stem_widths));
  stem.init_he(mix_seed(seed, 1));
  return make_image_model(std::move(stem), config.input_size, seed);
}

Network load_stem(const std::filesystem::path& path, const std::string& prefix, int input_size) {
  Network stem = read_network(Checkpoint::load(path), prefix);
  const auto shape = stem.output_shape({1, input_size, input_size, 1});
  if (shape.size() != 4 || shape[1] != shape[2]) {
    throw ConfigError("stem in " + path.string() + " does not produce a square feature grid");
  }
  return stem;
}

Checkpoint image_checkpoint(const ImageModel& model, const ImageModelConfig& config, uint64_t seed, int64_t step) {
  Checkpoint ck;
  ck.kind = "wholeimage";
  ck.seed = seed;
  ck.step = step;
  ck.config["model"] = config.to_json();
  ck.config["input_size"] = model.input_size;
  add_network(ck, "stem", model.stem);
  add_network(ck, "head", model.head);
  add_network(ck, "classifier", model.classifier);
  return ck;
}

ImageModel image_model_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "wholeimage") throw ConfigError("checkpoint kind '" + ckpt.kind + "' is not a whole-image model");
  ImageModel m;
  m.input_size = ckpt.config.at("input_size").get<int>();
  m.stem = read_network(ckpt, "stem");
  m.head = read_network(ckpt, "head");
  m.classifier = read_network(ckpt, "classifier");
  return m;
}

FovMask feature_mask(int feature_size, double input_radius, int input_size) {
  return compute_fov_mask(feature_size, feature_size, input_radius * feature_size / input_size);
}

namespace {

void check_masks(std::span<const FovMask> masks, int n, int h, int w) {
  if (masks.size() != 1 && masks.size() != static_cast<size_t>(n)) {
    throw ConfigError("masked_gap needs one mask or one per sample");
  }
  for (const auto& m : masks) {
    if (m.width != w || m.height != h) {
      throw ConfigError("mask is " + std::to_string(m.width) + "x" + std::to_string(m.height) + ", features are " +
                        std::to_string(w) + "x" + std::to_string(h));
    }
    if (m.count() == 0) throw PoolingError("masked_gap with an empty mask");
  }
}

}  // namespace

template <typename T>
BasicTensor<T> masked_gap(const BasicTensor<T>& features, std::span<const FovMask> masks) {
  if (features.rank() != 4) throw ConfigError("masked_gap expects NHWC features");
  const int n = features.dim(0), h = features.dim(1), w = features.dim(2), c = features.dim(3);
  check_masks(masks, n, h, w);
  BasicTensor<T> out({n, 1, 1, c});
  std::vector<double> acc(static_cast<size_t>(c));
  for (int b = 0; b < n; ++b) {
    const FovMask& mask = masks.size() == 1 ? masks[0] : masks[static_cast<size_t>(b)];
    const double count = static_cast<double>(mask.count());
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (!mask.at(x, y)) continue;
        const T* px = &features.at(b, y, x, 0);
        for (int ch = 0; ch < c; ++ch) acc[static_cast<size_t>(ch)] += static_cast<double>(px[ch]);
      }
    }
    for (int ch = 0; ch < c; ++ch) out.at(b, 0, 0, ch) = static_cast<T>(acc[static_cast<size_t>(ch)] / count);
  }
  return out;
}

template <typename T>
BasicTensor<T> masked_gap_backward(const BasicTensor<T>& grad_pooled, std::span<const FovMask> masks, int height,
                                   int width) {
  const int n = grad_pooled.dim(0);
  const int c = static_cast<int>(grad_pooled.size() / static_cast<size_t>(n));
  check_masks(masks, n, height, width);
  BasicTensor<T> dx({n, height, width, c});
  for (int b = 0; b < n; ++b) {
    const FovMask& mask = masks.size() == 1 ? masks[0] : masks[static_cast<size_t>(b)];
    const double count = static_cast<double>(mask.count());
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        if (!mask.at(x, y)) continue;
        T* px = &dx.at(b, y, x, 0);
        for (int ch = 0; ch < c; ++ch) {
          px[ch] = static_cast<T>(static_cast<double>(grad_pooled[static_cast<size_t>(b) * c + ch]) / count);
        }
      }
    }
  }
  return dx;
}

template BasicTensor<float> masked_gap(const BasicTensor<float>&, std::span<const FovMask>);
template BasicTensor<double> masked_gap(const BasicTensor<double>&, std::span<const FovMask>);
template BasicTensor<float> masked_gap_backward(const BasicTensor<float>&, std::span<const FovMask>, int, int);
template BasicTensor<double> masked_gap_backward(const BasicTensor<double>&, std::span<const FovMask>, int, int);

template <typename T>
BasicImagePass<T> image_forward(const BasicImageModel<T>& model, const BasicTensor<T>& input,
                                std::span<const FovMask> masks) {
  BasicImagePass<T> pass;
  const auto stem_out = model.stem.forward(input, &pass.stem);
  pass.features = model.head.forward(stem_out, &pass.head);
  pass.pooled = masked_gap(pass.features, masks);
  pass.logits = model.classifier.forward(pass.pooled, &pass.classifier);
  pass.probabilities = kernels::softmax(pass.logits);
  return pass;
}

template <typename T>
std::vector<BasicTensor<T>> image_backward(const BasicImageModel<T>& model, const BasicImagePass<T>& pass,
                                           std::span<const FovMask> masks, const BasicTensor<T>& grad_logits) {
  BasicTensor<T> grad_pooled, grad_stem_out;
  auto cls = model.classifier.backward(pass.classifier, grad_logits, false, &grad_pooled);
  const auto grad_features =
      masked_gap_backward(grad_pooled, masks, pass.features.dim(1), pass.features.dim(2));
  auto head = model.head.backward(pass.head, grad_features, false, &grad_stem_out);
  auto grads = model.stem.backward(pass.stem, grad_stem_out);
  for (auto& g : head) grads.push_back(std::move(g));
  for (auto& g : cls) grads.push_back(std::move(g));
  return grads;
}

template BasicImagePass<float> image_forward(const BasicImageModel<float>&, const BasicTensor<float>&,
                                             std::span<const FovMask>);
template BasicImagePass<double> image_forward(const BasicImageModel<double>&, const BasicTensor<double>&,
                                              std::span<const FovMask>);
template std::vector<BasicTensor<float>> image_backward(const BasicImageModel<float>&, const BasicImagePass<float>&,
                                                        std::span<const FovMask>, const BasicTensor<float>&);
template std::vector<BasicTensor<double>> image_backward(const BasicImageModel<double>&,
                                                         const BasicImagePass<double>&, std::span<const FovMask>,
                                                         const BasicTensor<double>&);

ClassActivationMap cam_from_features(const ImageModel& model, const Tensor& features, int n) {
  const int s = features.dim(1), c = features.dim(3);
  if (features.dim(2) != s) throw ConfigError("CAM needs a square feature grid");
  Tensor slice({s * s, c});
  std::copy_n(&features.at(n, 0, 0, 0), slice.size(), slice.raw());
  const Tensor scores = model.classifier.forward(slice);
  ClassActivationMap cam;
  cam.size = s;
  cam.classes = scores.dim(1);
  cam.scores.assign(scores.values().begin(), scores.values().end());
  cam.probabilities.resize(cam.scores.size());
  const auto k = static_cast<size_t>(cam.classes);
  for (size_t loc = 0; loc < static_cast<size_t>(s) * s; ++loc) {
    const double* row = &cam.scores[loc * k];
    const double top = *std::max_element(row, row + k);
    double sum = 0.0;
    for (size_t j = 0; j < k; ++j) sum += std::exp(row[j] - top);
    for (size_t j = 0; j < k; ++j) cam.probabilities[loc * k + j] = std::exp(row[j] - top) / sum;
  }
  return cam;
}

ModelInput resize_for_model(const Frame& frame, int input_size) {
  if (frame.width() != frame.height()) throw ConfigError("whole-image preprocessing needs square frames");
  const ImageF standardized = standardize_fov(frame, fov_statistics(frame));
  ModelInput in;
  in.image = resize_area(standardized, input_size, input_size);
  // One pixel is dropped to exclude the rim blended with the zero exterior.
  in.radius = std::max(0.5, frame.fov_radius * input_size / frame.width() - 1.0);
  return in;
}

ModelInput finish_preprocessing(const ModelInput& resized, double angle) {
  ModelInput out;
  out.radius = resized.radius;
  const ImageF& src = resized.image;
  out.image = angle != 0.0 ? rotate(src, angle, src.width / 2.0, src.height / 2.0) : src;
  out.image = circular_extrapolate(out.image, resized.radius);
  return out;
}

ModelInput preprocess_for_model(const Frame& frame, int input_size, double angle) {
  return finish_preprocessing(resize_for_model(frame, input_size), angle);
}

std::vector<std::string> input_warnings(const ModelInput& in) {
  const ImageF& img = in.image;
  double si = 0, sqi = 0, se = 0, sqe = 0;
  size_t ni = 0, ne = 0;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double v = img.at(x, y);
      if (inside_fov(x, y, img.width, img.height, in.radius)) {
        si += v, sqi += v * v, ++ni;
      } else if (!inside_fov(x, y, img.width, img.height, in.radius + 2.0)) {  // skip the resampled rim
        se += v, sqe += v * v, ++ne;
      }
    }
  }
  if (ni == 0 || ne == 0) return {};
  const double vi = sqi / ni - (si / ni) * (si / ni), ve = sqe / ne - (se / ne) * (se / ne);
  if (ve < 0.01 * vi || ve > 100.0 * vi) {
    return {"input exterior variance " + std::to_string(ve) + " vs interior " + std::to_string(vi) +
            "; frame may not be preprocessed"};
  }
  return {};
}

std::vector<ImageClassification> classify_images(const ImageModel& model, std::span<const ModelInput* const> inputs,
                                                 int batch_size) {
  const int s_in = model.input_size;
  const int s = model.feature_size();
  std::vector<ImageClassification> out(inputs.size());
  for (size_t start = 0; start < inputs.size(); start += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(inputs.size(), start + static_cast<size_t>(batch_size));
    const int n = static_cast<int>(end - start);
    Tensor x({n, s_in, s_in, 1});
    std::vector<FovMask> masks;
    for (size_t i = start; i < end; ++i) {
      const ModelInput& in = *inputs[i];
      if (in.image.width != s_in || in.image.height != s_in) {
        throw ConfigError("model expects " + std::to_string(s_in) + "x" + std::to_string(s_in) + " inputs");
      }
      std::copy(in.image.pixels.begin(), in.image.pixels.end(), &x.at(static_cast<int>(i - start), 0, 0, 0));
      masks.push_back(feature_mask(s, in.radius, s_in));
    }
    const auto pass = image_forward(model, x, std::span<const FovMask>(masks));
    for (int b = 0; b < n; ++b) {
      auto& r = out[start + static_cast<size_t>(b)];
      r.logits = {pass.logits.raw()[b * 2], pass.logits.raw()[b * 2 + 1]};
      r.p_carcinoma = pass.probabilities.raw()[b * 2 + 1];
      r.cam = cam_from_features(model, pass.features, b);
      r.warnings = input_warnings(*inputs[start + static_cast<size_t>(b)]);
    }
  }
  return out;
}

ImageClassification classify_image(const ImageModel& model, const ModelInput& input) {
  const ModelInput* p = &input;
  return classify_images(model, std::span<const ModelInput* const>(&p, 1), 1)[0];
}

ClassActivationMap class_activation_map(const ImageModel& model, const ModelInput& input) {
  return classify_image(model, input).cam;
}

ImageInputCache::ImageInputCache(const Dataset& dataset, int input_size, int threads) : input_size_(input_size) {
  resized_.resize(dataset.frames.size());
  plain_.resize(dataset.frames.size());
  parallel_for(dataset.frames.size(), threads, [&](size_t i) {
    resized_[i] = resize_for_model(dataset.frames[i], input_size);
    plain_[i] = finish_preprocessing(resized_[i], 0.0);
  });
}

EarlyStopOutcome run_early_stopping(int initial_epochs, int max_epochs, const EarlyStopHooks& hooks) {
  if (initial_epochs < 1 || max_epochs < initial_epochs) {
    throw ConfigError("early stopping needs 1 <= initial_epochs <= max_epochs");
  }
  EarlyStopOutcome out;
  for (int e = 1; e <= initial_epochs; ++e) hooks.train_epoch(e);
  double previous = hooks.evaluate(initial_epochs);
  out.scores.emplace_back(initial_epochs, previous);
  out.epochs_run = out.kept_epoch = initial_epochs;
  hooks.snapshot();
  for (int e = initial_epochs + 1; e <= max_epochs; ++e) {
    hooks.train_epoch(e);
    out.epochs_run = e;
    const double score = hooks.evaluate(e);
    out.scores.emplace_back(e, score);
    if (score < previous) {
      hooks.restore();
      out.restored = true;
      break;
    }
    previous = score;
    out.kept_epoch = e;
    hooks.snapshot();
  }
  return out;
}

int default_validation_count(size_t train_patients) { return train_patients >= 6 ? 2 : 1; }

std::vector<std::string> choose_validation_patients(const Dataset& dataset,
                                                    const std::vector<std::string>& train_patients, int count) {
  if (count < 1 || static_cast<size_t>(count) >= train_patients.size()) {
    throw ConfigError("cannot hold out " + std::to_string(count) + " of " + std::to_string(train_patients.size()) +
                      " training patients for validation");
  }
  struct Info {
    std::string id;
    size_t frames = 0;
    bool normal = false, carcinoma = false;
  };
  std::vector<Info> ranked;
  for (const auto& p : train_patients) {
    Info info{p};
    for (size_t i : dataset.frames_of_patient(p)) {
      ++info.frames;
      (dataset.manifest.records[i].label == Label::carcinoma ? info.carcinoma : info.normal) = true;
    }
    ranked.push_back(info);
  }
  std::sort(ranked.begin(), ranked.end(), [](const Info& a, const Info& b) {
    return a.frames != b.frames ? a.frames > b.frames : a.id < b.id;
  });

  // Lexicographic combinations over the ranking; the first admissible wins.
  const size_t n = ranked.size(), k = static_cast<size_t>(count);
  std::vector<size_t> pick(k);
  for (size_t i = 0; i < k; ++i) pick[i] = i;
  while (true) {
    bool vn = false, vc = false, tn = false, tc = false;
    std::vector<bool> chosen(n, false);
    for (size_t i : pick) chosen[i] = true;
    for (size_t i = 0; i < n; ++i) {
      (chosen[i] ? vn : tn) |= ranked[i].normal;
      (chosen[i] ? vc : tc) |= ranked[i].carcinoma;
    }
    if (vn && vc && tn && tc) {
      std::vector<std::string> out;
      for (size_t i : pick) out.push_back(ranked[i].id);
      std::sort(out.begin(), out.end());
      return out;
    }
    size_t i = k;
    while (i > 0 && pick[i - 1] == n - k + i - 1) --i;
    if (i == 0) break;
    ++pick[i - 1];
    for (size_t j = i; j < k; ++j) pick[j] = pick[j - 1] + 1;
  }
  throw ConfigError("no choice of validation patients leaves both classes in training and validation");
}

nlohmann::json ImageTrainLog::to_json() const {
  nlohmann::json scores = nlohmann::json::array();
  for (const auto& [epoch, score] : early_stop.scores) scores.push_back({{"epoch", epoch}, {"accuracy", score}});
  return {{"validation_patients", validation_patients},
          {"train_loss", train_loss},
          {"validation", scores},
          {"epochs_run", early_stop.epochs_run},
          {"kept_epoch", early_stop.kept_epoch},
          {"restored", early_stop.restored},
          {"head_learning_rate", head_learning_rate},
          {"stem_learning_rate", stem_learning_rate}};
}

ImageTrainResult train_image(const Dataset& dataset, const std::vector<size_t>& train_frames,
                             const std::vector<std::string>& validation_patients, const ImageModelConfig& config,
                             uint64_t seed, const ImageInputCache* cache) {
  return train_image(make_image_model(config, seed), dataset, train_frames, validation_patients, config, seed, cache);
}

ImageTrainResult train_image(ImageModel initial, const Dataset& dataset, const std::vector<size_t>& train_frames,
                             const std::vector<std::string>& validation_patients, const ImageModelConfig& config,
                             uint64_t seed, const ImageInputCache* cache) {
  if (validation_patients.empty()) throw ConfigError("image training needs at least one validation patient");
  if (initial.input_size != config.input_size) throw ConfigError("model input size differs from the config");
  const std::set<std::string> val_set(validation_patients.begin(), validation_patients.end());
  bool train_normal = false, train_carcinoma = false;
  for (size_t i : train_frames) {
    const auto& r = dataset.manifest.records.at(i);
    if (val_set.count(r.patient_id)) {
      throw ConfigError("validation patient " + r.patient_id + " also appears in the training frames");
    }
    (r.label == Label::carcinoma ? train_carcinoma : train_normal) = true;
  }
  std::vector<size_t> val_frames;
  bool val_normal = false, val_carcinoma = false;
  for (const auto& p : validation_patients) {
    for (size_t i : dataset.frames_of_patient(p)) {
      val_frames.push_back(i);
      (dataset.manifest.records[i].label == Label::carcinoma ? val_carcinoma : val_normal) = true;
    }
  }
  if (!train_normal || !train_carcinoma) throw ConfigError("image training frames must contain both classes");
  if (!val_normal || !val_carcinoma) throw ConfigError("validation patients must cover both classes");

  // Preprocessed inputs, from the shared cache or computed here.
  std::map<size_t, ModelInput> local_resized, local_plain;
  if (!cache) {
    for (size_t i : train_frames) local_resized[i] = resize_for_model(dataset.frames[i], config.input_size);
    for (size_t i : val_frames) local_plain[i] = preprocess_for_model(dataset.frames[i], config.input_size);
  } else if (cache->input_size() != config.input_size) {
    throw ConfigError("preprocessing cache was built for another input size");
  }
  auto resized = [&](size_t i) -> const ModelInput& { return cache ? cache->resized(i) : local_resized.at(i); };
  auto plain = [&](size_t i) -> const ModelInput& { return cache ? cache->plain(i) : local_plain.at(i); };

  ImageTrainResult result;
  ImageModel& model = result.model;
  model = std::move(initial);
  ImageTrainLog& log = result.log;
  log.validation_patients = validation_patients;
  log.head_learning_rate = config.head_learning_rate;
  log.stem_learning_rate = config.stem_learning_rate();

  Adam stem_opt(model.stem.params(), config.stem_learning_rate());
  Adam head_opt(model.head.params(), config.head_learning_rate);
  Adam cls_opt(model.classifier.params(), config.head_learning_rate);
  const size_t n_stem = model.stem.params().size(), n_head = model.head.params().size();

  const int s_in = config.input_size, s = model.feature_size();
  Rng rng(mix_seed(seed, 0x1a6e));
  std::vector<size_t> order = train_frames;
  ImageModel saved;

  EarlyStopHooks hooks;
  hooks.train_epoch = [&](int) {
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(config.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(config.batch_size));
      const int n = static_cast<int>(end - start);
      Tensor x({n, s_in, s_in, 1});
      std::vector<FovMask> masks;
      std::vector<int> labels;
      for (size_t j = start; j < end; ++j) {
        const double angle = config.rotation_augmentation ? rng.uniform(0.0, 2.0 * std::numbers::pi) : 0.0;
        const ModelInput in = finish_preprocessing(resized(order[j]), angle);
        std::copy(in.image.pixels.begin(), in.image.pixels.end(), &x.at(static_cast<int>(j - start), 0, 0, 0));
        masks.push_back(feature_mask(s, in.radius, s_in));
        labels.push_back(class_index(dataset.manifest.records[order[j]].label));
      }
      const auto pass = image_forward(model, x, std::span<const FovMask>(masks));
      const auto loss = cross_entropy_loss(pass.probabilities, labels);
      loss_sum += loss.loss * n;
      const auto grads = image_backward(model, pass, std::span<const FovMask>(masks), loss.grad_logits);
      stem_opt.step(model.stem.params(), std::span<const Tensor>(grads.data(), n_stem));
      head_opt.step(model.head.params(), std::span<const Tensor>(grads.data() + n_stem, n_head));
      cls_opt.step(model.classifier.params(),
                   std::span<const Tensor>(grads.data() + n_stem + n_head, grads.size() - n_stem - n_head));
    }
    log.train_loss.push_back(loss_sum / static_cast<double>(order.size()));
  };
  hooks.evaluate = [&](int) {
    std::vector<const ModelInput*> inputs;
    for (size_t i : val_frames) inputs.push_back(&plain(i));
    const auto out = classify_images(model, inputs);
    size_t correct = 0;
    for (size_t j = 0; j < val_frames.size(); ++j) {
      const bool positive = out[j].p_carcinoma >= 0.5;
      correct += positive == (dataset.manifest.records[val_frames[j]].label == Label::carcinoma);
    }
    return static_cast<double>(correct) / static_cast<double>(val_frames.size());
  };
  hooks.snapshot = [&] { saved = model; };
  hooks.restore = [&] { model = saved; };
  log.early_stop = run_early_stopping(config.initial_epochs, config.max_epochs, hooks);
  return result;
}

GradientCheckReport image_gradient_check(const ImageModel& model, const Tensor& input, const FovMask& mask,
                                         const std::vector<int>& labels, double h, double tolerance,
                                         const GradientCheckOptions& options) {
  const size_t count =
      model.stem.parameter_count() + model.head.parameter_count() + model.classifier.parameter_count();
  if (count > 100000) throw ConfigError("gradient check is limited to models with at most 1e5 parameters");
  auto shadow = model.cast<double>();
  const auto x = input.cast<double>();
  const std::span<const FovMask> masks(&mask, 1);
  const auto pass = image_forward(shadow, x, masks);
  const auto loss = cross_entropy_loss(pass.probabilities, labels);
  const auto grads = image_backward(shadow, pass, masks, loss.grad_logits);

  std::vector<BasicTensor<double>*> params;
  std::vector<std::string> names;
  auto add = [&](BasicNetwork<double>& net, const std::string& prefix) {
    const auto n = net.param_names();
    for (size_t i = 0; i < n.size(); ++i) {
      params.push_back(&net.params()[i]);
      names.push_back(prefix + "." + n[i]);
    }
  };
  add(shadow.stem, "stem");
  add(shadow.head, "head");
  add(shadow.classifier, "classifier");
  const LossProbe probe = [&](uint64_t& regime) {
    const auto p = image_forward(shadow, x, masks);
    regime = regime_fingerprint(shadow.stem, p.stem) * 31 + regime_fingerprint(shadow.head, p.head);
    return cross_entropy_loss(p.probabilities, labels).loss;
  };
  return finite_difference_check(params, names, grads, probe, h, tolerance, options);
}

}  // namespace cle
