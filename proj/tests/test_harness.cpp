#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "cle/harness.hpp"
#include "cle/synth.hpp"

using namespace cle;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cle_test_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::string> ids(int n, const std::string& prefix = "P") {
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i) out.push_back(prefix + std::to_string(10 + i));
  return out;
}

ResultRecord rec(const std::string& frame, const std::string& patient, Label label, std::optional<double> p,
                 int fold = 0) {
  return {frame, patient, label, p, fold};
}

// Brute-force Mann-Whitney: pairs ranked correctly plus half the ties.
double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0, pairs = 0.0;
  for (size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

struct HarnessSetup {
  Dataset dataset;
};

// Two small domains with four patients each.
const HarnessSetup& setup() {
  static const HarnessSetup s = [] {
    SynthSpec spec = SynthSpec::defaults();
    spec.patients_per_domain = 4;
    spec.frames_per_patient = 6;
    spec.size = 128;
    spec.fov_radius = 60;
    const auto dir = scratch_dir("synth");
    generate_synthetic(spec, dir);
    return HarnessSetup{load_dataset(dir / "manifest.tsv")};
  }();
  return s;
}

HarnessConfig tiny_config() {
  HarnessConfig c;
  c.ppf.patch_size = 32;
  c.ppf.grid_stride = 16;
  c.ppf.conv1_stride = 2;
  c.ppf.conv1_width = 4;
  c.ppf.conv2_width = 4;
  c.ppf.fc_width = 8;
  c.ppf.patches_per_frame = 1;
  c.ppf.epochs = 3;
  c.image.input_size = 32;
  c.image.stem_widths = {4, 8};
  c.image.head_learning_rate = 1e-3;
  c.image.batch_size = 4;
  c.image.initial_epochs = 1;
  c.image.max_epochs = 3;
  return c;
}

}  // namespace

TEST_CASE("leave-one-patient-out folds") {
  const auto twelve = make_lopo_folds(ids(12));
  REQUIRE(twelve.size() == 12);
  std::set<std::string> tested;
  for (const auto& f : twelve) {
    CHECK(f.train_patients.size() == 11);
    REQUIRE(f.test_patients.size() == 1);
    CHECK(std::find(f.train_patients.begin(), f.train_patients.end(), f.test_patients[0]) == f.train_patients.end());
    tested.insert(f.test_patients[0]);
    CHECK_NOTHROW(assert_no_leakage(f));
  }
  CHECK(tested.size() == 12);

  const auto five = make_lopo_folds(ids(5));
  CHECK(five.size() == 5);
  for (const auto& f : five) CHECK(f.train_patients.size() == 4);
  CHECK_THROWS_AS(make_lopo_folds(ids(2)), ConfigError);

  auto shuffled = ids(4);
  std::reverse(shuffled.begin(), shuffled.end());
  CHECK(make_lopo_folds(shuffled)[0].test_patients[0] == "P10");
}

TEST_CASE("transfer plan and leakage assertions") {
  const auto folds = make_transfer_folds(ids(3, "A"), ids(2, "B"));
  REQUIRE(folds.size() == 1);
  CHECK(folds[0].train_patients.size() == 3);
  CHECK(folds[0].test_patients.size() == 2);
  CHECK_THROWS_AS(make_transfer_folds({}, ids(2)), ConfigError);

  Fold bad;
  bad.train_patients = {"P1", "P2"};
  bad.test_patients = {"P2"};
  CHECK_THROWS_AS(assert_no_leakage(bad), LeakageError);
  Fold ok;
  ok.train_patients = {"P1", "P2", "P3"};
  ok.test_patients = {"P4"};
  CHECK_NOTHROW(assert_no_leakage(ok, {"P1"}));
  CHECK_THROWS_AS(assert_no_leakage(ok, {"P4"}), LeakageError);
  CHECK_THROWS_AS(assert_no_leakage(ok, {"P9"}), LeakageError);

  CHECK(experiment_from_string("vc2oc") == ExperimentId::vc2oc);
  CHECK_THROWS_AS(experiment_from_string("ab"), ConfigError);
}

TEST_CASE("plans on the synthetic domains") {
  const auto& ds = setup().dataset;
  const auto [a, b] = experiment_domains(ds.manifest);
  CHECK(a == Domain::synthetic_a);
  CHECK(b == Domain::synthetic_b);
  CHECK(make_plan(ExperimentId::oc, ds.manifest).folds.size() == 4);
  CHECK(make_plan(ExperimentId::vc, ds.manifest).folds.size() == 4);
  CHECK(make_plan(ExperimentId::joint, ds.manifest).folds.size() == 8);
  const auto t = make_plan(ExperimentId::vc2oc, ds.manifest);
  REQUIRE(t.folds.size() == 1);
  CHECK(t.folds[0].train_patients == ds.manifest.patients(b));
  CHECK(t.folds[0].test_patients == ds.manifest.patients(a));
}

TEST_CASE("metrics from a confusion example") {
  ResultVector rv;
  int n = 0;
  auto add = [&](Label l, double p, int count) {
    for (int i = 0; i < count; ++i) rv.records.push_back(rec("f" + std::to_string(n++), "P", l, p));
  };
  add(Label::carcinoma, 0.9, 3);          // tp
  add(Label::clinically_normal, 0.6, 1);  // fp
  add(Label::carcinoma, 0.2, 1);          // fn
  add(Label::clinically_normal, 0.1, 5);  // tn
  const auto m = compute_metrics(rv);
  CHECK(m.counts == ConfusionCounts{3, 1, 1, 5});
  CHECK(m.accuracy == doctest::Approx(0.8));
  CHECK(m.precision == doctest::Approx(0.75));
  CHECK(m.recall == doctest::Approx(0.75));
  REQUIRE(m.roc_auc);

  ResultVector perfect;
  perfect.records = {rec("a", "P", Label::carcinoma, 0.7), rec("b", "P", Label::clinically_normal, 0.3)};
  CHECK(*compute_metrics(perfect).roc_auc == 1.0);

  ResultVector single;
  single.records = {rec("a", "P", Label::clinically_normal, 0.2), rec("b", "P", Label::clinically_normal, std::nullopt)};
  const auto s = compute_metrics(single);
  CHECK_FALSE(s.roc_auc);
  CHECK(s.non_diagnostic == 1);
  CHECK(s.counts.total() == 1);
  CHECK(s.precision == 0.0);
  CHECK_THROWS_AS(compute_metrics(ResultVector{}), MetricError);

  ResultVector edge;
  edge.records = {rec("a", "P", Label::clinically_normal, 0.5)};
  CHECK(confusion_counts(edge).fp == 1);
}

TEST_CASE("rank AUC against pairwise counting, with ties") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const size_t n = 2 + rng.below(199);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (size_t i = 0; i < n; ++i) {
      s[i] = trial % 2 ? static_cast<double>(rng.below(7)) / 6.0 : rng.uniform();
      y[i] = static_cast<int>(rng.below(2));
    }
    y[0] = 0, y[1] = 1;
    const double auc = roc_auc(s, y);
    CAPTURE(trial);
    CHECK(std::abs(auc - pairwise_auc(s, y)) <= 1e-12);
    CHECK(std::abs(trapezoid_area(roc_curve(s, y)) - auc) <= 1e-9);

    std::vector<double> t(n);
    for (size_t i = 0; i < n; ++i) t[i] = std::exp(3.0 * s[i]) - 2.0;
    CHECK(roc_auc(t, y) == doctest::Approx(auc).epsilon(1e-12));
  }
  CHECK(roc_auc({0.5, 0.5, 0.5}, {0, 1, 1}) == 0.5);
  CHECK_THROWS_AS(roc_auc({0.1, 0.2}, {1, 1}), MetricError);

  const auto curve = roc_curve({0.9, 0.1}, {1, 0});
  CHECK(curve.front().fpr == 0.0);
  CHECK(curve.front().tpr == 0.0);
  CHECK(curve.back().fpr == 1.0);
  CHECK(curve.back().tpr == 1.0);
}

TEST_CASE("per-fold counts add up to the concatenated counts") {
  Rng rng(5);
  ResultVector all;
  ConfusionCounts summed;
  for (int fold = 0; fold < 6; ++fold) {
    ResultVector part;
    for (int i = 0; i < 20; ++i) {
      const Label l = rng.below(2) ? Label::carcinoma : Label::clinically_normal;
      part.records.push_back(rec(std::to_string(fold) + "_" + std::to_string(i), "P" + std::to_string(fold), l,
                                 rng.uniform(), fold));
    }
    summed += confusion_counts(part);
    all.records.insert(all.records.end(), part.records.begin(), part.records.end());
  }
  CHECK(summed == confusion_counts(all));
  CHECK(summed.total() == 120);
}

TEST_CASE("per-patient report and probability histograms") {
  ResultVector rv;
  for (int i = 0; i < 10; ++i) {
    rv.records.push_back(rec("n" + std::to_string(i), "P2", Label::clinically_normal, 0.01 * i));
    rv.records.push_back(rec("c" + std::to_string(i), "P1", Label::carcinoma, 1.0 - 0.01 * i));
  }
  rv.records.push_back(rec("x", "P1", Label::carcinoma, 0.3));
  const auto r = per_patient_report(rv);
  REQUIRE(r.patients.size() == 2);
  CHECK(r.patients[0].patient_id == "P1");
  CHECK(r.patients[0].frames == 11);
  CHECK(r.patients[0].correct == 10);
  CHECK(r.patients[1].accuracy() == 1.0);
  CHECK(r.histogram.normal[0] == 5);
  CHECK(r.histogram.normal[1] == 5);
  CHECK(r.histogram.carcinoma[19] == 6);  // 1.0 falls in the last bin
  CHECK(r.histogram.carcinoma[18] == 4);
  CHECK(r.histogram.carcinoma[6] == 1);
  CHECK(ProbabilityHistogram::bin_of(0.0) == 0);
  CHECK(ProbabilityHistogram::bin_of(0.05) == 1);
  const auto j = r.to_json();
  CHECK(j.at("histogram").at("bins") == 20);
}

TEST_CASE("result vector round trip and coverage") {
  const auto dir = scratch_dir("rv");
  ResultVector rv;
  rv.records = {rec("a/1", "P1", Label::carcinoma, 0.1 + 1e-13, 0), rec("b/2", "P2", Label::clinically_normal, std::nullopt, 1),
                rec("c/3", "P2", Label::clinically_normal, 2.0 / 3.0, 1)};
  rv.save(dir / "r.tsv");
  CHECK(ResultVector::load(dir / "r.tsv").records == rv.records);
  CHECK(rv.restricted_to({"P2"}).records.size() == 2);
  {
    std::ofstream bad(dir / "bad.tsv");
    bad << "header\nonly\ttwo\n";
  }
  CHECK_THROWS_AS(ResultVector::load(dir / "bad.tsv"), ParseError);

  const auto& ds = setup().dataset;
  const auto plan = make_plan(ExperimentId::oc, ds.manifest);
  ResultVector full;
  for (const auto& f : plan.folds)
    for (const auto& p : f.test_patients)
      for (size_t i : ds.frames_of_patient(p)) full.records.push_back(rec(frame_id(ds, i), p, Label::carcinoma, 0.5));
  CHECK_NOTHROW(assert_coverage(full, plan, ds));
  ResultVector dup = full;
  dup.records.push_back(dup.records.front());
  CHECK_THROWS_AS(assert_coverage(dup, plan, ds), ConfigError);
  ResultVector missing = full;
  missing.records.pop_back();
  CHECK_THROWS_AS(assert_coverage(missing, plan, ds), ConfigError);
}

TEST_CASE("run directories are never reused") {
  const auto root = scratch_dir("runs");
  const auto dir = create_run_directory(root, ExperimentId::oc2vc, Method::image, 7);
  CHECK(dir.filename() == "oc2vc-image-seed7");
  CHECK(fs::is_directory(dir));
  CHECK_THROWS_AS(create_run_directory(root, ExperimentId::oc2vc, Method::image, 7), ConfigError);
}

TEST_CASE("harness config round trip") {
  const HarnessConfig c = desk_harness_config();
  CHECK(HarnessConfig::from_json(c.to_json()).to_json() == c.to_json());
}

TEST_CASE("small experiments are deterministic and cover every test frame") {
  const auto& ds = setup().dataset;
  const HarnessConfig config = tiny_config();
  ExperimentResources res;
  for (Method method : {Method::ppf, Method::image}) {
    CAPTURE(to_string(method));
    const auto plan = make_plan(ExperimentId::oc, ds.manifest);
    std::vector<std::string> messages;
    const auto a = run_experiment(plan, ds, method, 3, config, &res,
                                  [&](const std::string& m) { messages.push_back(m); });
    const auto b = run_experiment(plan, ds, method, 3, config, &res);
    CHECK(messages.size() == plan.folds.size());
    CHECK_NOTHROW(assert_coverage(a.results, plan, ds));
    CHECK(a.results.records == b.results.records);
    REQUIRE(a.folds.size() == b.folds.size());
    for (size_t k = 0; k < a.folds.size(); ++k) CHECK(a.folds[k].checkpoint.encode() == b.folds[k].checkpoint.encode());
    if (method == Method::image) {
      CHECK(a.max_epochs_run() <= 3);
      CHECK(a.max_epochs_run() >= 1);
    }

    const auto root = scratch_dir(std::string("write_") + to_string(method));
    const auto d1 = create_run_directory(root, plan.id, method, 3);
    write_run(d1, a, config);
    for (const char* name : {"results.tsv", "metrics.json", "patients.json", "folds.json", "config.json"}) {
      CHECK(fs::exists(d1 / name));
    }
    CHECK(fs::exists(d1 / "checkpoints" / "fold_00.ckpt"));
    CHECK(ResultVector::load(d1 / "results.tsv").records == a.results.records);
  }
}

TEST_CASE("a single-class training split is reported with its fold") {
  const auto& ds = setup().dataset;
  std::vector<std::string> normal_only;
  for (const auto& p : ds.manifest.patients()) {
    bool has_carcinoma = false;
    for (size_t i : ds.frames_of_patient(p)) has_carcinoma |= ds.manifest.records[i].label == Label::carcinoma;
    if (!has_carcinoma) normal_only.push_back(p);
  }
  REQUIRE_FALSE(normal_only.empty());
  ExperimentPlan plan;
  plan.folds = make_transfer_folds(normal_only, {ds.manifest.patients().front()});
  plan.folds[0].index = 4;
  try {
    run_experiment(plan, ds, Method::ppf, 1, tiny_config());
    FAIL("expected a fold error");
  } catch (const FoldError& e) {
    CHECK(e.fold() == 4);
  }
}
