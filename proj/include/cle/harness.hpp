#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cle/checkpoint.hpp"
#include "cle/dataset.hpp"
#include "cle/method.hpp"
#include "cle/patch.hpp"
#include "cle/wholeimage.hpp"

namespace cle {

// ---------------------------------------------------------------- plans

enum class ExperimentId { oc, vc, oc2vc, vc2oc, joint };

std::string to_string(ExperimentId id);
ExperimentId experiment_from_string(const std::string& s);

struct Fold {
  int index = 0;
  std::vector<std::string> train_patients;  // sorted
  std::vector<std::string> test_patients;   // sorted
};

struct ExperimentPlan {
  ExperimentId id = ExperimentId::oc;
  std::vector<Fold> folds;
};

/// One fold per patient, in sorted id order. Needs at least three patients.
std::vector<Fold> make_lopo_folds(std::vector<std::string> patients);
/// A single fold training on `train` and testing on `test`.
std::vector<Fold> make_transfer_folds(std::vector<std::string> train, std::vector<std::string> test);

/// The two domains an experiment refers to: the clinical pair when the
/// manifest has it, otherwise synthetic-A (oral-cavity role) and synthetic-B.
std::pair<Domain, Domain> experiment_domains(const DatasetManifest& manifest);
ExperimentPlan make_plan(ExperimentId id, const DatasetManifest& manifest);

/// Throws LeakageError if a patient sits on both sides of a split or a
/// validation patient is not a training patient.
void assert_no_leakage(const Fold& fold, const std::vector<std::string>& validation_patients = {});

// --------------------------------------------------------------- results

struct ResultRecord {
  std::string frame_id;
  std::string patient_id;
  Label label = Label::clinically_normal;
  std::optional<double> p_carcinoma;  // empty: non-diagnostic
  int fold = 0;

  bool operator==(const ResultRecord&) const = default;
};

struct ResultVector {
  std::vector<ResultRecord> records;

  /// Tab-separated, one record per line after a header; probabilities use
  /// 17 significant digits so reloading is exact.
  void save(const std::filesystem::path& path) const;
  static ResultVector load(const std::filesystem::path& path);
  ResultVector restricted_to(const std::vector<std::string>& patients) const;
};

/// Throws ConfigError unless every test frame of the plan appears exactly
/// once and nothing else does.
void assert_coverage(const ResultVector& rv, const ExperimentPlan& plan, const Dataset& dataset);

// --------------------------------------------------------------- metrics

struct ConfusionCounts {
  size_t tp = 0, fp = 0, fn = 0, tn = 0;

  size_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o);
  bool operator==(const ConfusionCounts&) const = default;
};

/// Carcinoma is positive; a score equal to the threshold counts as positive.
ConfusionCounts confusion_counts(const ResultVector& rv, double threshold = 0.5);

struct MetricsReport {
  double threshold = 0.5;
  ConfusionCounts counts;
  double accuracy = 0.0;
  double precision = 0.0;  // 0 when nothing is predicted positive
  double recall = 0.0;
  std::optional<double> roc_auc;  // empty for single-class vectors
  size_t non_diagnostic = 0;

  nlohmann::json to_json() const;
};

MetricsReport metrics_from_counts(const ConfusionCounts& counts, double threshold = 0.5);
/// Metrics over diagnostic records; AUC is left empty when one class is
/// missing. Throws MetricError on an empty vector.
MetricsReport compute_metrics(const ResultVector& rv, double threshold = 0.5);

/// Mann-Whitney AUC from mid-ranks. Throws MetricError unless both classes
/// (labels 0/1) are present.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct RocPoint {
  double threshold = 0.0;
  double fpr = 0.0;
  double tpr = 0.0;
};
/// Operating points for every distinct score (descending), framed by (0,0)
/// and (1,1).
std::vector<RocPoint> roc_curve(const std::vector<double>& scores, const std::vector<int>& labels);
double trapezoid_area(const std::vector<RocPoint>& curve);

struct PatientAccuracy {
  std::string patient_id;
  size_t frames = 0;
  size_t correct = 0;
  double accuracy() const { return frames ? static_cast<double>(correct) / static_cast<double>(frames) : 0.0; }
};

struct ProbabilityHistogram {
  static constexpr int kBins = 20;
  std::array<size_t, kBins> normal{};
  std::array<size_t, kBins> carcinoma{};

  static int bin_of(double p);
};

struct PatientReport {
  std::vector<PatientAccuracy> patients;  // sorted by id
  ProbabilityHistogram histogram;

  nlohmann::json to_json() const;
};
PatientReport per_patient_report(const ResultVector& rv, double threshold = 0.5);

/// Precision on one test domain when trained within the domain versus when
/// trained on the other domain.
struct DomainShift {
  Domain test_domain = Domain::synthetic_a;
  double within_precision = 0.0;
  double transfer_precision = 0.0;
  double drop() const { return within_precision - transfer_precision; }
  nlohmann::json to_json() const;
};
DomainShift domain_shift(Domain test_domain, const ResultVector& within, const ResultVector& transfer,
                         double threshold = 0.5);

// ---------------------------------------------------------------- runner

struct HarnessConfig {
  PatchNetConfig ppf;
  ImageModelConfig image;
  double threshold = 0.5;
  int threads = 1;  // concurrent folds

  nlohmann::json to_json() const;
  static HarnessConfig from_json(const nlohmann::json& j);
};

/// Settings sized so that every experiment on the default synthetic dataset
/// runs on one core in minutes.
HarnessConfig desk_harness_config();

/// Per-dataset preprocessing shared across folds and experiments.
struct ExperimentResources {
  std::vector<FovStats> stats;                  // per frame
  std::unique_ptr<ImageInputCache> image_cache;  // built on first image run
  std::map<std::tuple<int, int, double, int, int>, PatchGrid> grids;
};

struct FoldResult {
  int fold = 0;
  std::vector<ResultRecord> records;
  std::vector<std::array<double, 2>> logits;  // image method, aligned with records
  nlohmann::json log;
  Checkpoint checkpoint;
};

struct ExperimentRun {
  ExperimentPlan plan;
  Method method = Method::ppf;
  uint64_t seed = 0;
  ResultVector results;
  std::vector<FoldResult> folds;  // checkpoints and logs in fold order

  bool restore_fired() const;
  int max_epochs_run() const;  // image method; 0 for ppf
};

using ProgressFn = std::function<void(const std::string&)>;

ExperimentRun run_experiment(const ExperimentPlan& plan, const Dataset& dataset, Method method, uint64_t seed,
                             const HarnessConfig& config, ExperimentResources* resources = nullptr,
                             const ProgressFn& progress = {});

/// <root>/<experiment>-<method>-seed<seed>; refuses to reuse an existing one.
std::filesystem::path create_run_directory(const std::filesystem::path& root, ExperimentId id, Method method,
                                           uint64_t seed);
/// Writes results.tsv, metrics.json, patients.json, folds.json, config.json,
/// logits.tsv (image method) and one checkpoint per fold.
void write_run(const std::filesystem::path& dir, const ExperimentRun& run, const HarnessConfig& config);

}  // namespace cle
