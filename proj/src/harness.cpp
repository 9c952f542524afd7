#include "cle/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "cle/parallel.hpp"
#include "cle/rng.hpp"

namespace cle {

std::string to_string(ExperimentId id) {
  switch (id) {
    case ExperimentId::oc: return "oc";
    case ExperimentId::vc: return "vc";
    case ExperimentId::oc2vc: return "oc2vc";
    case ExperimentId::vc2oc: return "vc2oc";
    case ExperimentId::joint: return "joint";
  }
  return "?";
}

ExperimentId experiment_from_string(const std::string& s) {
  for (auto id : {ExperimentId::oc, ExperimentId::vc, ExperimentId::oc2vc, ExperimentId::vc2oc, ExperimentId::joint}) {
    if (to_string(id) == s) return id;
  }
  throw ConfigError("unknown experiment '" + s + "' (expected oc, vc, oc2vc, vc2oc or joint)");
}

std::vector<Fold> make_lopo_folds(std::vector<std::string> patients) {
  std::sort(patients.begin(), patients.end());
  patients.erase(std::unique(patients.begin(), patients.end()), patients.end());
  if (patients.size() < 3) {
    throw ConfigError("leave-one-patient-out needs at least 3 patients, got " + std::to_string(patients.size()));
  }
  std::vector<Fold> folds;
  for (size_t i = 0; i < patients.size(); ++i) {
    Fold f;
    f.index = static_cast<int>(i);
    f.test_patients = {patients[i]};
    for (size_t j = 0; j < patients.size(); ++j)
      if (j != i) f.train_patients.push_back(patients[j]);
    folds.push_back(std::move(f));
  }
  return folds;
}

std::vector<Fold> make_transfer_folds(std::vector<std::string> train, std::vector<std::string> test) {
  if (train.empty() || test.empty()) throw ConfigError("transfer plan needs training and test patients");
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  Fold f;
  f.train_patients = std::move(train);
  f.test_patients = std::move(test);
  return {f};
}

std::pair<Domain, Domain> experiment_domains(const DatasetManifest& manifest) {
  if (!manifest.patients(Domain::oc).empty() || !manifest.patients(Domain::vc).empty()) {
    return {Domain::oc, Domain::vc};
  }
  return {Domain::synthetic_a, Domain::synthetic_b};
}

ExperimentPlan make_plan(ExperimentId id, const DatasetManifest& manifest) {
  const auto [first, second] = experiment_domains(manifest);
  ExperimentPlan plan;
  plan.id = id;
  switch (id) {
    case ExperimentId::oc: plan.folds = make_lopo_folds(manifest.patients(first)); break;
    case ExperimentId::vc: plan.folds = make_lopo_folds(manifest.patients(second)); break;
    case ExperimentId::oc2vc:
      plan.folds = make_transfer_folds(manifest.patients(first), manifest.patients(second));
      break;
    case ExperimentId::vc2oc:
      plan.folds = make_transfer_folds(manifest.patients(second), manifest.patients(first));
      break;
    case ExperimentId::joint: plan.folds = make_lopo_folds(manifest.patients()); break;
  }
  for (const auto& f : plan.folds) assert_no_leakage(f);
  return plan;
}

void assert_no_leakage(const Fold& fold, const std::vector<std::string>& validation_patients) {
  const std::set<std::string> train(fold.train_patients.begin(), fold.train_patients.end());
  for (const auto& p : fold.test_patients) {
    if (train.count(p)) throw LeakageError("patient " + p + " is in both training and test of fold " + std::to_string(fold.index));
  }
  for (const auto& p : validation_patients) {
    if (!train.count(p)) {
      throw LeakageError("validation patient " + p + " is not a training patient of fold " + std::to_string(fold.index));
    }
  }
}

// ------------------------------------------------------------- results

void ResultVector::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "frame\tpatient\tlabel\tp_carcinoma\tfold\n";
  char buf[64];
  for (const auto& r : records) {
    if (r.p_carcinoma) {
      std::snprintf(buf, sizeof buf, "%.17g", *r.p_carcinoma);
    } else {
      std::snprintf(buf, sizeof buf, "NA");
    }
    out << r.frame_id << '\t' << r.patient_id << '\t' << to_string(r.label) << '\t' << buf << '\t' << r.fold << '\n';
  }
}

ResultVector ResultVector::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  ResultVector rv;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (n == 1) continue;
    if (line.empty()) continue;
    std::istringstream ss(line);
    ResultRecord r;
    std::string label, p, fold;
    if (!std::getline(ss, r.frame_id, '\t') || !std::getline(ss, r.patient_id, '\t') ||
        !std::getline(ss, label, '\t') || !std::getline(ss, p, '\t') || !std::getline(ss, fold, '\t')) {
      throw ParseError("expected 5 tab-separated fields", n);
    }
    try {
      r.label = label_from_string(label);
      if (p != "NA") r.p_carcinoma = std::stod(p);
      r.fold = std::stoi(fold);
    } catch (const ParseError&) {
      throw;
    } catch (const std::exception& e) {
      throw ParseError(std::string("bad field: ") + e.what(), n);
    }
    rv.records.push_back(std::move(r));
  }
  return rv;
}

ResultVector ResultVector::restricted_to(const std::vector<std::string>& patients) const {
  const std::set<std::string> keep(patients.begin(), patients.end());
  ResultVector out;
  for (const auto& r : records)
    if (keep.count(r.patient_id)) out.records.push_back(r);
  return out;
}

void assert_coverage(const ResultVector& rv, const ExperimentPlan& plan, const Dataset& dataset) {
  std::map<std::string, int> expected;
  for (const auto& f : plan.folds)
    for (const auto& p : f.test_patients)
      for (size_t i : dataset.frames_of_patient(p)) ++expected[frame_id(dataset, i)];
  std::map<std::string, int> seen;
  for (const auto& r : rv.records) ++seen[r.frame_id];
  for (const auto& [id, count] : seen) {
    if (count != 1) throw ConfigError("frame " + id + " appears " + std::to_string(count) + " times in the results");
    if (!expected.count(id)) throw ConfigError("frame " + id + " is not a test frame of the plan");
  }
  for (const auto& [id, count] : expected) {
    if (count != 1) throw ConfigError("frame " + id + " is a test frame of " + std::to_string(count) + " folds");
    if (!seen.count(id)) throw ConfigError("test frame " + id + " is missing from the results");
  }
}

// ------------------------------------------------------------- metrics

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
  tp += o.tp, fp += o.fp, fn += o.fn, tn += o.tn;
  return *this;
}

ConfusionCounts confusion_counts(const ResultVector& rv, double threshold) {
  ConfusionCounts c;
  for (const auto& r : rv.records) {
    if (!r.p_carcinoma) continue;
    const bool predicted = *r.p_carcinoma >= threshold;
    const bool actual = r.label == Label::carcinoma;
    if (predicted && actual) ++c.tp;
    else if (predicted) ++c.fp;
    else if (actual) ++c.fn;
    else ++c.tn;
  }
  return c;
}

MetricsReport metrics_from_counts(const ConfusionCounts& c, double threshold) {
  MetricsReport m;
  m.threshold = threshold;
  m.counts = c;
  const auto ratio = [](size_t a, size_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; };
  m.accuracy = ratio(c.tp + c.tn, c.total());
  m.precision = ratio(c.tp, c.tp + c.fp);
  m.recall = ratio(c.tp, c.tp + c.fn);
  return m;
}

MetricsReport compute_metrics(const ResultVector& rv, double threshold) {
  if (rv.records.empty()) throw MetricError("cannot compute metrics of an empty result vector");
  MetricsReport m = metrics_from_counts(confusion_counts(rv, threshold), threshold);
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& r : rv.records) {
    if (!r.p_carcinoma) {
      ++m.non_diagnostic;
      continue;
    }
    scores.push_back(*r.p_carcinoma);
    labels.push_back(class_index(r.label));
  }
  const bool both = std::count(labels.begin(), labels.end(), 1) > 0 && std::count(labels.begin(), labels.end(), 0) > 0;
  if (both) m.roc_auc = roc_auc(scores, labels);
  return m;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j = {{"threshold", threshold},
                      {"accuracy", accuracy},
                      {"precision", precision},
                      {"recall", recall},
                      {"tp", counts.tp},
                      {"fp", counts.fp},
                      {"fn", counts.fn},
                      {"tn", counts.tn},
                      {"frames", counts.total()},
                      {"non_diagnostic", non_diagnostic}};
  j["roc_auc"] = roc_auc ? nlohmann::json(*roc_auc) : nlohmann::json(nullptr);
  return j;
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ConfigError("scores and labels differ in length");
  std::vector<size_t> order(scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  double positive_rank_sum = 0.0;
  size_t positives = 0;
  for (size_t i = 0; i < order.size();) {
    size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) {
        positive_rank_sum += mid_rank;
        ++positives;
      }
    }
    i = j;
  }
  const size_t negatives = scores.size() - positives;
  if (positives == 0 || negatives == 0) throw MetricError("ROC AUC is undefined without both classes");
  const double n1 = static_cast<double>(positives);
  const double u = positive_rank_sum - n1 * (n1 + 1.0) / 2.0;
  return u / (n1 * static_cast<double>(negatives));
}

std::vector<RocPoint> roc_curve(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ConfigError("scores and labels differ in length");
  const auto positives = static_cast<size_t>(std::count(labels.begin(), labels.end(), 1));
  const size_t negatives = labels.size() - positives;
  if (positives == 0 || negatives == 0) throw MetricError("ROC curve is undefined without both classes");
  std::vector<size_t> order(scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  std::vector<RocPoint> curve{{std::numeric_limits<double>::infinity(), 0.0, 0.0}};
  size_t tp = 0, fp = 0;
  for (size_t i = 0; i < order.size();) {
    const double t = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == t; ++i) (labels[order[i]] == 1 ? tp : fp)++;
    curve.push_back({t, static_cast<double>(fp) / static_cast<double>(negatives),
                     static_cast<double>(tp) / static_cast<double>(positives)});
  }
  return curve;
}

double trapezoid_area(const std::vector<RocPoint>& curve) {
  double area = 0.0;
  for (size_t i = 1; i < curve.size(); ++i) {
    area += (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr) / 2.0;
  }
  return area;
}

int ProbabilityHistogram::bin_of(double p) {
  const int b = static_cast<int>(std::floor(p * kBins));
  return std::clamp(b, 0, kBins - 1);
}

PatientReport per_patient_report(const ResultVector& rv, double threshold) {
  if (rv.records.empty()) throw MetricError("cannot report on an empty result vector");
  std::map<std::string, PatientAccuracy> by_patient;
  PatientReport report;
  for (const auto& r : rv.records) {
    auto& pa = by_patient[r.patient_id];
    pa.patient_id = r.patient_id;
    if (!r.p_carcinoma) continue;
    ++pa.frames;
    pa.correct += (*r.p_carcinoma >= threshold) == (r.label == Label::carcinoma);
    auto& hist = r.label == Label::carcinoma ? report.histogram.carcinoma : report.histogram.normal;
    ++hist[static_cast<size_t>(ProbabilityHistogram::bin_of(*r.p_carcinoma))];
  }
  for (auto& [id, pa] : by_patient) report.patients.push_back(pa);
  return report;
}

nlohmann::json PatientReport::to_json() const {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : patients) {
    pts.push_back({{"patient", p.patient_id}, {"frames", p.frames}, {"correct", p.correct}, {"accuracy", p.accuracy()}});
  }
  return {{"patients", pts},
          {"histogram", {{"bins", ProbabilityHistogram::kBins},
                         {"clinically_normal", histogram.normal},
                         {"carcinoma", histogram.carcinoma}}}};
}

nlohmann::json DomainShift::to_json() const {
  return {{"test_domain", to_string(test_domain)},
          {"within_precision", within_precision},
          {"transfer_precision", transfer_precision},
          {"precision_drop", drop()}};
}

DomainShift domain_shift(Domain test_domain, const ResultVector& within, const ResultVector& transfer,
                         double threshold) {
  DomainShift d;
  d.test_domain = test_domain;
  d.within_precision = compute_metrics(within, threshold).precision;
  d.transfer_precision = compute_metrics(transfer, threshold).precision;
  return d;
}

// -------------------------------------------------------------- runner

nlohmann::json HarnessConfig::to_json() const {
  return {{"ppf", ppf.to_json()}, {"image", image.to_json()}, {"threshold", threshold}, {"threads", threads}};
}

HarnessConfig HarnessConfig::from_json(const nlohmann::json& j) {
  HarnessConfig c;
  if (j.contains("ppf")) c.ppf = PatchNetConfig::from_json(j.at("ppf"));
  if (j.contains("image")) c.image = ImageModelConfig::from_json(j.at("image"));
  c.threshold = j.value("threshold", c.threshold);
  c.threads = j.value("threads", c.threads);
  return c;
}

HarnessConfig desk_harness_config() {
  HarnessConfig c;
  c.ppf.patch_size = 48;
  c.ppf.grid_stride = 24;
  c.ppf.conv1_stride = 2;
  c.ppf.conv1_width = 4;
  c.ppf.conv2_width = 8;
  c.ppf.fc_width = 16;
  c.ppf.patches_per_frame = 1;
  c.image.input_size = 136;
  c.image.stem_widths = {4, 8, 16};
  c.image.head_learning_rate = 1e-3;
  c.image.stem_lr_multiplier = 1e-1;
  c.image.batch_size = 1;
  return c;
}

bool ExperimentRun::restore_fired() const {
  for (const auto& f : folds)
    if (f.log.value("restored", false)) return true;
  return false;
}

int ExperimentRun::max_epochs_run() const {
  int m = 0;
  for (const auto& f : folds) m = std::max(m, f.log.value("epochs_run", 0));
  return m;
}

namespace {

std::vector<size_t> frames_of(const Dataset& ds, const std::vector<std::string>& patients) {
  std::vector<size_t> out;
  for (const auto& p : patients)
    for (size_t i : ds.frames_of_patient(p)) out.push_back(i);
  return out;
}

std::tuple<int, int, double, int, int> grid_key(const Frame& f, const PatchNetConfig& c) {
  return {f.width(), f.height(), f.fov_radius, c.patch_size, c.grid_stride};
}

void check_both_classes(const Dataset& ds, const std::vector<size_t>& frames, int fold) {
  bool normal = false, carcinoma = false;
  for (size_t i : frames) (ds.manifest.records[i].label == Label::carcinoma ? carcinoma : normal) = true;
  if (!normal || !carcinoma) throw FoldError("training data has a single class", fold);
}

ResultRecord make_record(const Dataset& ds, size_t i, int fold, std::optional<double> p) {
  ResultRecord r;
  r.frame_id = frame_id(ds, i);
  r.patient_id = ds.manifest.records[i].patient_id;
  r.label = ds.manifest.records[i].label;
  r.p_carcinoma = p;
  r.fold = fold;
  return r;
}

FoldResult run_ppf_fold(const Fold& fold, const Dataset& ds, uint64_t seed, const HarnessConfig& config,
                        const ExperimentResources& res) {
  const auto train = frames_of(ds, fold.train_patients);
  check_both_classes(ds, train, fold.index);
  auto trained = train_ppf(ds, train, config.ppf, seed, &res.stats);
  FoldResult out;
  out.fold = fold.index;
  for (size_t i : frames_of(ds, fold.test_patients)) {
    const Frame& f = ds.frames[i];
    const auto map = classify_patches(trained.model, f, res.grids.at(grid_key(f, config.ppf)), res.stats[i]);
    out.records.push_back(make_record(ds, i, fold.index, fuse(map).p_carcinoma));
  }
  out.log = trained.log.to_json();
  out.checkpoint = ppf_checkpoint(trained.model, config.ppf, seed, config.ppf.epochs);
  return out;
}

FoldResult run_image_fold(const Fold& fold, const Dataset& ds, uint64_t seed, const HarnessConfig& config,
                          const ExperimentResources& res) {
  const int count = config.image.validation_patients > 0
                        ? config.image.validation_patients
                        : default_validation_count(fold.train_patients.size());
  std::vector<std::string> validation;
  try {
    validation = choose_validation_patients(ds, fold.train_patients, count);
  } catch (const ConfigError& e) {
    throw FoldError(e.what(), fold.index);
  }
  assert_no_leakage(fold, validation);
  std::vector<std::string> train_patients;
  for (const auto& p : fold.train_patients)
    if (std::find(validation.begin(), validation.end(), p) == validation.end()) train_patients.push_back(p);
  const auto train = frames_of(ds, train_patients);
  check_both_classes(ds, train, fold.index);
  auto trained = train_image(ds, train, validation, config.image, seed, res.image_cache.get());

  FoldResult out;
  out.fold = fold.index;
  const auto test = frames_of(ds, fold.test_patients);
  std::vector<const ModelInput*> inputs;
  for (size_t i : test) inputs.push_back(&res.image_cache->plain(i));
  const auto classified = classify_images(trained.model, inputs);
  for (size_t k = 0; k < test.size(); ++k) {
    out.records.push_back(make_record(ds, test[k], fold.index, classified[k].p_carcinoma));
    out.logits.push_back(classified[k].logits);
  }
  out.log = trained.log.to_json();
  const int64_t step = trained.log.early_stop.kept_epoch;
  out.checkpoint = image_checkpoint(trained.model, config.image, seed, step);
  return out;
}

}  // namespace

ExperimentRun run_experiment(const ExperimentPlan& plan, const Dataset& dataset, Method method, uint64_t seed,
                             const HarnessConfig& config, ExperimentResources* resources, const ProgressFn& progress) {
  ExperimentResources local;
  ExperimentResources& res = resources ? *resources : local;
  if (res.stats.size() != dataset.frames.size()) {
    res.stats.clear();
    for (const auto& f : dataset.frames) res.stats.push_back(fov_statistics(f));
  }
  if (method == Method::image && (!res.image_cache || res.image_cache->input_size() != config.image.input_size)) {
    res.image_cache = std::make_unique<ImageInputCache>(dataset, config.image.input_size, config.threads);
  }
  if (method == Method::ppf) {
    for (const auto& f : dataset.frames) {
      const auto key = grid_key(f, config.ppf);
      if (!res.grids.count(key)) {
        res.grids[key] = extract_patch_grid(compute_fov_mask(f.width(), f.height(), f.fov_radius),
                                            config.ppf.patch_size, config.ppf.grid_stride);
      }
    }
  }

  for (const auto& f : plan.folds) assert_no_leakage(f);
  ExperimentRun run;
  run.plan = plan;
  run.method = method;
  run.seed = seed;
  run.folds.resize(plan.folds.size());
  parallel_for(plan.folds.size(), config.threads, [&](size_t k) {
    const Fold& fold = plan.folds[k];
    const uint64_t fold_seed = mix_seed(seed, static_cast<uint64_t>(fold.index) + 1);
    run.folds[k] = method == Method::ppf ? run_ppf_fold(fold, dataset, fold_seed, config, res)
                                         : run_image_fold(fold, dataset, fold_seed, config, res);
    run.folds[k].log["train_patients"] = fold.train_patients;
    run.folds[k].log["test_patients"] = fold.test_patients;
    run.folds[k].log["fold"] = fold.index;
    if (progress) {
      progress(to_string(plan.id) + "/" + to_string(method) + " fold " + std::to_string(fold.index + 1) + "/" +
               std::to_string(plan.folds.size()) + " done");
    }
  });
  for (const auto& f : run.folds)
    for (const auto& r : f.records) run.results.records.push_back(r);
  assert_coverage(run.results, plan, dataset);
  return run;
}

std::filesystem::path create_run_directory(const std::filesystem::path& root, ExperimentId id, Method method,
                                           uint64_t seed) {
  const auto dir = root / (to_string(id) + "-" + to_string(method) + "-seed" + std::to_string(seed));
  if (std::filesystem::exists(dir)) throw ConfigError("run directory " + dir.string() + " already exists");
  std::filesystem::create_directories(dir / "checkpoints");
  return dir;
}

void write_run(const std::filesystem::path& dir, const ExperimentRun& run, const HarnessConfig& config) {
  run.results.save(dir / "results.tsv");
  const auto write_json = [&](const std::string& name, const nlohmann::json& j) {
    std::ofstream out(dir / name);
    if (!out) throw Error("cannot write " + (dir / name).string());
    out << j.dump(2) << "\n";
  };
  nlohmann::json metrics = compute_metrics(run.results, config.threshold).to_json();
  metrics["experiment"] = to_string(run.plan.id);
  metrics["method"] = to_string(run.method);
  metrics["seed"] = run.seed;
  write_json("metrics.json", metrics);
  write_json("patients.json", per_patient_report(run.results, config.threshold).to_json());
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : run.folds) folds.push_back(f.log);
  write_json("folds.json", folds);
  write_json("config.json", config.to_json());
  if (run.method == Method::image) {
    std::ofstream out(dir / "logits.tsv");
    out << "frame\tfold\tlogit_normal\tlogit_carcinoma\n";
    char buf[96];
    for (const auto& f : run.folds) {
      for (size_t k = 0; k < f.records.size(); ++k) {
        std::snprintf(buf, sizeof buf, "%.17g\t%.17g", f.logits[k][0], f.logits[k][1]);
        out << f.records[k].frame_id << '\t' << f.fold << '\t' << buf << '\n';
      }
    }
  }
  std::filesystem::create_directories(dir / "checkpoints");
  for (const auto& f : run.folds) {
    char name[32];
    std::snprintf(name, sizeof name, "fold_%02d.ckpt", f.fold);
    f.checkpoint.save(dir / "checkpoints" / name);
  }
}

}  // namespace cle
