// Command-line front end: data generation, statistics, preprocessing,
// training, experiment runs and CAM export.

#include <fcntl.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>

#include "cle/harness.hpp"
#include "cle/parallel.hpp"
#include "cle/synth.hpp"

#ifndef CLE_VERSION
#define CLE_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cle;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitUsage = 2;

// Holds <dir>/.cletool.lock for the lifetime of the object.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) : path_(dir / ".cletool.lock") {
    fs::create_directories(dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) throw ConfigError("output directory " + dir.string() + " is locked by another run (" + path_.string() + ")");
    const std::string pid = std::to_string(::getpid()) + "\n";
    if (::write(fd_, pid.data(), pid.size()) < 0) { /* the lock itself is what matters */ }
  }
  ~DirectoryLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void emit(const json& summary) { std::cout << summary.dump(2) << std::endl; }

struct Options {
  std::string dataset;
  std::string experiment = "oc";
  std::string method = "image";
  uint64_t seed = 1;
  double threshold = 0.5;
  int patch_size = 0;
  int stride = 0;
  int input_size = 0;
  std::string preset = "desk";
  std::string config_file;
  std::string out;
};

HarnessConfig effective_config(const Options& o) {
  HarnessConfig c = o.preset == "desk" ? desk_harness_config() : HarnessConfig{};
  if (!o.config_file.empty()) {
    json merged = c.to_json();
    merged.merge_patch(read_json(o.config_file));
    c = HarnessConfig::from_json(merged);
  }
  if (o.patch_size > 0) c.ppf.patch_size = o.patch_size;
  if (o.stride > 0) c.ppf.grid_stride = o.stride;
  if (o.input_size > 0) c.image.input_size = o.input_size;
  c.threshold = o.threshold;
  c.threads = default_thread_count();
  if (c.ppf.grid_stride <= 0 || c.ppf.patch_size <= 0) throw ConfigError("patch size and stride must be positive");
  if (c.threshold < 0.0 || c.threshold > 1.0) throw ConfigError("threshold must lie in [0, 1]");
  return c;
}

json run_record(const Options& o, const std::string& command) {
  return {{"version", CLE_VERSION}, {"command", command},    {"dataset", o.dataset}, {"experiment", o.experiment},
          {"method", o.method},     {"seed", o.seed},        {"preset", o.preset}};
}

Dataset open_dataset(const std::string& path) {
  if (path.empty()) throw ConfigError("--dataset is required");
  fs::path p = path;
  if (fs::is_directory(p)) p /= "manifest.tsv";
  if (!fs::exists(p)) throw ConfigError("dataset manifest " + p.string() + " does not exist");
  return load_dataset(p);
}

size_t find_frame(const Dataset& ds, const std::string& id) {
  for (size_t i = 0; i < ds.frames.size(); ++i)
    if (frame_id(ds, i) == id) return i;
  throw ConfigError("frame " + id + " is not in the dataset");
}

void progress(const std::string& message) { std::cerr << message << std::endl; }

// ------------------------------------------------------------- commands

int cmd_gen(const Options& o, uint64_t synth_seed, int patients, int frames, int size, double radius) {
  if (o.out.empty()) throw ConfigError("--out is required");
  if (fs::exists(fs::path(o.out) / "manifest.tsv")) throw ConfigError(o.out + " already holds a dataset");
  DirectoryLock lock(o.out);
  SynthSpec spec = SynthSpec::defaults();
  spec.seed = synth_seed;
  if (patients > 0) spec.patients_per_domain = patients;
  if (frames > 0) spec.frames_per_patient = frames;
  if (size > 0) spec.size = size;
  if (radius > 0) spec.fov_radius = radius;
  const auto manifest = generate_synthetic(spec, o.out);
  emit({{"manifest", (fs::path(o.out) / "manifest.tsv").string()},
        {"frames", manifest.records.size()},
        {"patients", manifest.patients()},
        {"seed", synth_seed}});
  return 0;
}

int cmd_stats(const Options& o, bool by_site, int bins) {
  const Dataset ds = open_dataset(o.dataset);
  json summary = {{"frames", ds.frames.size()}, {"patients", ds.manifest.patients()}};
  json per_domain = json::object();
  for (Domain d : {Domain::oc, Domain::vc, Domain::synthetic_a, Domain::synthetic_b}) {
    size_t normal = 0, carcinoma = 0;
    for (const auto& r : ds.manifest.records) {
      if (r.domain != d) continue;
      (r.label == Label::carcinoma ? carcinoma : normal)++;
    }
    if (normal + carcinoma) per_domain[to_string(d)] = {{"clinically_normal", normal}, {"carcinoma", carcinoma}};
  }
  summary["domains"] = per_domain;
  if (by_site) {
    if (bins < 2) throw ConfigError("--bins must be at least 2");
    std::vector<const Frame*> frames;
    for (const auto& f : ds.frames) frames.push_back(&f);
    const auto report = median_histogram(frames, log_spaced_edges(16.0, 65536.0, bins + 1));
    json sites = json::array();
    for (const auto& s : report.sites) {
      double mass = 0.0;
      for (double m : s.mass) mass += m;
      sites.push_back({{"site", to_string(s.site)}, {"frames", s.frames}, {"mass", s.mass}, {"total_mass", mass}});
    }
    summary["median_histogram"] = {{"edges", report.edges}, {"sites", sites}, {"warnings", report.warnings}};
  }
  if (!o.out.empty()) {
    DirectoryLock lock(o.out);
    write_json(fs::path(o.out) / "stats.json", summary);
  }
  emit(summary);
  return 0;
}

int cmd_preprocess(const Options& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
  const HarnessConfig config = effective_config(o);
  const Dataset ds = open_dataset(o.dataset);
  DirectoryLock lock(o.out);
  const fs::path out = o.out;
  json frames = json::array();
  size_t warned = 0;
  for (size_t i = 0; i < ds.frames.size(); ++i) {
    const Frame& f = ds.frames[i];
    const ModelInput input = preprocess_for_model(f, config.image.input_size);
    const auto warnings = input_warnings(input);
    warned += !warnings.empty();
    fs::path png = out / "inputs" / frame_id(ds, i);
    png.replace_extension(".png");
    fs::create_directories(png.parent_path());
    write_png(png, compress_to_8bit(input.image, std::vector<uint8_t>(input.image.pixels.size(), 1)));
    const FovStats st = fov_statistics(f);
    const auto grid = extract_patch_grid(compute_fov_mask(f.width(), f.height(), f.fov_radius),
                                         config.ppf.patch_size, config.ppf.grid_stride);
    frames.push_back({{"frame", frame_id(ds, i)},
                      {"fov_mean", st.mean},
                      {"fov_stddev", st.stddev},
                      {"patches", grid.origins.size()},
                      {"warnings", warnings}});
  }
  json record = run_record(o, "preprocess");
  record["config"] = config.to_json();
  write_json(out / "run.json", record);
  write_json(out / "frames.json", frames);
  emit({{"frames", ds.frames.size()}, {"frames_with_warnings", warned}, {"out", out.string()}});
  return 0;
}

std::vector<std::string> training_patients(ExperimentId id, const DatasetManifest& manifest) {
  const auto [first, second] = experiment_domains(manifest);
  switch (id) {
    case ExperimentId::oc:
    case ExperimentId::oc2vc: return manifest.patients(first);
    case ExperimentId::vc:
    case ExperimentId::vc2oc: return manifest.patients(second);
    case ExperimentId::joint: return manifest.patients();
  }
  return {};
}

int cmd_train(const Options& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
  const HarnessConfig config = effective_config(o);
  const ExperimentId id = experiment_from_string(o.experiment);
  const Method method = method_from_string(o.method);
  const Dataset ds = open_dataset(o.dataset);
  const auto patients = training_patients(id, ds.manifest);
  if (patients.empty()) throw ConfigError("experiment " + o.experiment + " has no training patients in this dataset");
  DirectoryLock lock(o.out);
  const fs::path out = o.out;
  if (fs::exists(out / "model.ckpt")) throw ConfigError(out.string() + " already holds a trained model");

  Checkpoint ckpt;
  json log;
  std::vector<size_t> frames;
  if (method == Method::ppf) {
    for (const auto& p : patients)
      for (size_t i : ds.frames_of_patient(p)) frames.push_back(i);
    const auto trained = train_ppf(ds, frames, config.ppf, o.seed);
    ckpt = ppf_checkpoint(trained.model, config.ppf, o.seed, config.ppf.epochs);
    log = trained.log.to_json();
  } else {
    const int count = config.image.validation_patients > 0 ? config.image.validation_patients
                                                          : default_validation_count(patients.size());
    const auto validation = choose_validation_patients(ds, patients, count);
    for (const auto& p : patients) {
      if (std::find(validation.begin(), validation.end(), p) != validation.end()) continue;
      for (size_t i : ds.frames_of_patient(p)) frames.push_back(i);
    }
    const ImageInputCache cache(ds, config.image.input_size, config.threads);
    const auto trained = train_image(ds, frames, validation, config.image, o.seed, &cache);
    ckpt = image_checkpoint(trained.model, config.image, o.seed, trained.log.early_stop.kept_epoch);
    log = trained.log.to_json();
  }
  ckpt.save(out / "model.ckpt");
  json record = run_record(o, "train");
  record["config"] = config.to_json();
  record["training_patients"] = patients;
  write_json(out / "run.json", record);
  write_json(out / "train_log.json", log);
  emit({{"checkpoint", (out / "model.ckpt").string()}, {"training_frames", frames.size()}, {"log", log}});
  return 0;
}

void write_roc(const fs::path& path, const ResultVector& rv) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& r : rv.records) {
    if (!r.p_carcinoma) continue;
    scores.push_back(*r.p_carcinoma);
    labels.push_back(class_index(r.label));
  }
  if (std::count(labels.begin(), labels.end(), 1) == 0 || std::count(labels.begin(), labels.end(), 0) == 0) return;
  std::ofstream out(path);
  out << "threshold\tfpr\ttpr\n";
  char buf[96];
  for (const auto& p : roc_curve(scores, labels)) {
    std::snprintf(buf, sizeof buf, "%.17g\t%.17g\t%.17g", p.threshold, p.fpr, p.tpr);
    out << buf << '\n';
  }
}

int cmd_eval(const Options& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
  const HarnessConfig config = effective_config(o);
  const ExperimentId id = experiment_from_string(o.experiment);
  const Method method = method_from_string(o.method);
  const Dataset ds = open_dataset(o.dataset);
  const ExperimentPlan plan = make_plan(id, ds.manifest);
  DirectoryLock lock(o.out);
  const fs::path dir = create_run_directory(o.out, id, method, o.seed);
  const ExperimentRun run = run_experiment(plan, ds, method, o.seed, config, nullptr, progress);
  write_run(dir, run, config);
  write_roc(dir / "roc.tsv", run.results);
  write_json(dir / "run.json", run_record(o, "eval"));
  json summary = compute_metrics(run.results, config.threshold).to_json();
  summary["run_directory"] = dir.string();
  summary["folds"] = plan.folds.size();
  if (method == Method::image) {
    summary["restore_fired"] = run.restore_fired();
    summary["max_epochs_run"] = run.max_epochs_run();
  }
  emit(summary);
  return 0;
}

// Checkpoint of the fold whose test patients include `patient`.
fs::path fold_checkpoint(const fs::path& run_dir, const std::string& patient) {
  const json folds = read_json(run_dir / "folds.json");
  for (const auto& f : folds) {
    for (const auto& p : f.at("test_patients")) {
      if (p.get<std::string>() != patient) continue;
      char name[32];
      std::snprintf(name, sizeof name, "fold_%02d.ckpt", f.at("fold").get<int>());
      return run_dir / "checkpoints" / name;
    }
  }
  throw ConfigError("no fold of " + run_dir.string() + " tests patient " + patient);
}

Image8 upsample_nearest(const ClassActivationMap& cam, int width, int height) {
  Image8 out(width, height);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const int cy = std::min(cam.size - 1, y * cam.size / height);
      const int cx = std::min(cam.size - 1, x * cam.size / width);
      out.at(x, y) = static_cast<uint8_t>(std::lround(255.0 * cam.probability(cy, cx, 1)));
    }
  }
  return out;
}

int cmd_cam(const Options& o, const std::string& frame, const std::string& run_dir, const std::string& checkpoint) {
  if (o.out.empty()) throw ConfigError("--out is required");
  if (frame.empty()) throw ConfigError("--frame is required");
  if (run_dir.empty() == checkpoint.empty()) throw ConfigError("give exactly one of --run and --checkpoint");
  const Dataset ds = open_dataset(o.dataset);
  const size_t index = find_frame(ds, frame);
  const Frame& f = ds.frames[index];
  const fs::path ckpt_path = checkpoint.empty() ? fold_checkpoint(run_dir, f.patient_id) : fs::path(checkpoint);
  const Checkpoint ckpt = Checkpoint::load(ckpt_path);
  DirectoryLock lock(o.out);
  const fs::path out = o.out;
  json summary = {{"frame", frame}, {"checkpoint", ckpt_path.string()}, {"kind", ckpt.kind}};

  if (ckpt.kind == "ppf") {
    const PatchNetConfig config = ppf_config_from_checkpoint(ckpt);
    const Network model = ppf_model_from_checkpoint(ckpt);
    const auto grid = extract_patch_grid(compute_fov_mask(f.width(), f.height(), f.fov_radius), config.patch_size,
                                         config.grid_stride);
    const auto map = classify_patches(model, f, grid);
    write_probability_map(out / "patch_map.tsv", map);
    write_png(out / "overlay.png", probability_overlay(f, map));
    const auto fused = fuse(map);
    summary["patches"] = map.size();
    summary["p_carcinoma"] = fused.p_carcinoma ? json(*fused.p_carcinoma) : json(nullptr);
    emit(summary);
    return 0;
  }

  const ImageModel model = image_model_from_checkpoint(ckpt);
  const ModelInput input = preprocess_for_model(f, model.input_size);
  const ImageClassification result = classify_image(model, input);
  const ClassActivationMap& cam = result.cam;
  const FovMask mask = feature_mask(cam.size, input.radius, model.input_size);

  // Masked mean of the per-location scores; equals the classifier logit.
  std::array<double, 2> masked_mean{};
  size_t valid = 0;
  for (int y = 0; y < cam.size; ++y) {
    for (int x = 0; x < cam.size; ++x) {
      if (!mask.grid[static_cast<size_t>(y) * cam.size + x]) continue;
      ++valid;
      for (int k = 0; k < 2; ++k) masked_mean[k] += cam.score(y, x, k);
    }
  }
  for (auto& v : masked_mean) v /= static_cast<double>(valid);

  std::ofstream grid(out / "cam_grid.txt");
  char buf[128];
  for (int y = 0; y < cam.size; ++y) {
    for (int x = 0; x < cam.size; ++x) {
      std::snprintf(buf, sizeof buf, "%s%7.4f", x ? " " : "", cam.probability(y, x, 1));
      grid << buf;
    }
    grid << '\n';
  }
  std::ofstream raw(out / "cam.tsv");
  raw << "y\tx\tvalid\tscore_normal\tscore_carcinoma\tp_carcinoma\n";
  for (int y = 0; y < cam.size; ++y) {
    for (int x = 0; x < cam.size; ++x) {
      std::snprintf(buf, sizeof buf, "%d\t%d\t%d\t%.17g\t%.17g\t%.17g", y, x,
                    int(mask.grid[static_cast<size_t>(y) * cam.size + x]), cam.score(y, x, 0), cam.score(y, x, 1),
                    cam.probability(y, x, 1));
      raw << buf << '\n';
    }
  }
  const Image8 heat = upsample_nearest(cam, f.width(), f.height());
  write_png(out / "heatmap.png", heat);
  const FovStats st = fov_statistics(f);
  const FovMask fov = compute_fov_mask(f.width(), f.height(), f.fov_radius);
  const Image8 base = compress_to_8bit(standardize_fov(f, st), fov.grid);
  Image8 overlay(f.width(), f.height());
  for (size_t i = 0; i < overlay.pixels.size(); ++i) {
    overlay.pixels[i] = static_cast<uint8_t>(std::lround(0.5 * base.pixels[i] + 0.5 * heat.pixels[i]));
  }
  write_png(out / "overlay.png", overlay);

  summary["feature_size"] = cam.size;
  summary["logits"] = result.logits;
  summary["masked_mean_score"] = masked_mean;
  summary["max_abs_difference"] =
      std::max(std::abs(masked_mean[0] - result.logits[0]), std::abs(masked_mean[1] - result.logits[1]));
  summary["p_carcinoma"] = result.p_carcinoma;
  summary["warnings"] = result.warnings;
  emit(summary);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Confocal laser endomicroscopy classification toolkit"};
  app.set_version_flag("--version", std::string(CLE_VERSION));
  app.require_subcommand(1);
  Options o;

  const auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--dataset", o.dataset, "Manifest file or dataset directory");
    cmd->add_option("--out", o.out, "Output directory");
  };
  const auto add_model = [&](CLI::App* cmd) {
    cmd->add_option("--experiment", o.experiment, "Experiment")
        ->check(CLI::IsMember({"oc", "vc", "oc2vc", "vc2oc", "joint"}));
    cmd->add_option("--method", o.method, "Pipeline")->check(CLI::IsMember({"ppf", "image"}));
    cmd->add_option("--seed", o.seed, "Random seed");
    cmd->add_option("--threshold", o.threshold, "Decision threshold on p(carcinoma)");
    cmd->add_option("--patch-size", o.patch_size, "Patch edge length (patch pipeline)");
    cmd->add_option("--stride", o.stride, "Patch grid stride (patch pipeline)");
    cmd->add_option("--input-size", o.input_size, "Model input edge length (image pipeline)");
    cmd->add_option("--preset", o.preset, "Hyperparameter preset")->check(CLI::IsMember({"desk", "reference"}));
    cmd->add_option("--config", o.config_file, "JSON file merged over the preset");
  };

  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  uint64_t synth_seed = 1;
  int patients = 0, frames = 0, size = 0;
  double radius = 0.0;
  gen->add_option("--out", o.out, "Output directory")->required();
  gen->add_option("--seed", synth_seed, "Generator seed");
  gen->add_option("--patients", patients, "Patients per domain");
  gen->add_option("--frames", frames, "Frames per patient");
  gen->add_option("--size", size, "Frame edge length");
  gen->add_option("--radius", radius, "FOV radius in pixels");

  auto* stats = app.add_subcommand("stats", "Dataset statistics");
  bool by_site = false;
  int bins = 24;
  add_common(stats);
  stats->add_flag("--by-site", by_site, "Per-site histograms of per-frame median intensity");
  stats->add_option("--bins", bins, "Histogram bins between 16 and 65536");

  auto* pre = app.add_subcommand("preprocess", "Write model inputs and per-frame statistics");
  add_common(pre);
  add_model(pre);

  auto* train = app.add_subcommand("train", "Train one model on all training patients of an experiment");
  add_common(train);
  add_model(train);

  auto* eval = app.add_subcommand("eval", "Run an experiment and write its run directory");
  add_common(eval);
  add_model(eval);

  auto* cam = app.add_subcommand("cam", "Export the class activation map or patch map of one frame");
  std::string cam_frame, cam_run, cam_ckpt;
  add_common(cam);
  cam->add_option("--frame", cam_frame, "Frame id (manifest path)");
  cam->add_option("--run", cam_run, "Run directory written by eval");
  cam->add_option("--checkpoint", cam_ckpt, "Checkpoint file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen(o, synth_seed, patients, frames, size, radius);
    if (*stats) return cmd_stats(o, by_site, bins);
    if (*pre) return cmd_preprocess(o);
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*cam) return cmd_cam(o, cam_frame, cam_run, cam_ckpt);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << std::endl;
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitValidation;
  }
  return kExitUsage;
}
