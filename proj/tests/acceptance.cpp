// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include <unistd.h>

#include "cle/gradcheck.hpp"
#include "cle/harness.hpp"
#include "cle/parallel.hpp"
#include "cle/synth.hpp"

using namespace cle;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
  void note(const std::string& what) {
    if (pass) detail += (detail.empty() ? "" : "; ") + what;
  }
};

int failures = 0;

void report(int id, const Verdict& v, double secs) {
  std::printf("criterion %d: %s (%.1f s) %s\n", id, v.pass ? "PASS" : "FAIL", secs, v.detail.c_str());
  std::fflush(stdout);
  failures += !v.pass;
}

void run_criterion(int id, const std::function<Verdict()>& body) {
  const auto t0 = Clock::now();
  Verdict v;
  try {
    v = body();
  } catch (const std::exception& e) {
    v.pass = false;
    v.detail = std::string("exception: ") + e.what();
  }
  report(id, v, seconds_since(t0));
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<float>(scale * rng.normal());
  return t;
}

FovMask random_mask(int w, int h, Rng& rng) {
  FovMask m;
  m.width = w;
  m.height = h;
  m.grid.resize(static_cast<size_t>(w) * h);
  for (auto& g : m.grid) g = rng.uniform() < 0.6;
  m.grid[rng.below(m.grid.size())] = 1;
  return m;
}

FovMask full_mask(int w, int h) {
  FovMask m;
  m.width = w;
  m.height = h;
  m.grid.assign(static_cast<size_t>(w) * h, 1);
  return m;
}

ImageModelConfig image_config(int input, std::vector<int> widths) {
  ImageModelConfig c;
  c.input_size = input;
  c.stem_widths = std::move(widths);
  return c;
}

// ---------------------------------------------------------------- 1..5, 9

Verdict masked_pooling() {
  Verdict v;
  Rng rng(101);
  int bitwise = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int s = 1 + static_cast<int>(rng.below(12)), c = 1 + static_cast<int>(rng.below(8));
    const Tensor u = random_tensor({1 + static_cast<int>(rng.below(3)), s, s, c}, rng, 10.0);
    const Tensor masked = masked_gap(u, full_mask(s, s));
    const Tensor plain = kernels::avgpool_forward(u, LayerSpec::avg_pool(s, s));
    bitwise += masked.values().size() == plain.values().size() &&
               std::memcmp(masked.values().data(), plain.values().data(), masked.values().size_bytes()) == 0;
  }
  v.require(bitwise == 200, std::to_string(200 - bitwise) + " of 200 all-ones maps differ from plain pooling");

  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int h = 1 + static_cast<int>(rng.below(10)), w = 1 + static_cast<int>(rng.below(10));
    const int c = 1 + static_cast<int>(rng.below(5));
    const Tensor u = random_tensor({2, h, w, c}, rng);
    const std::vector<FovMask> masks{random_mask(w, h, rng), random_mask(w, h, rng)};
    const Tensor pooled = masked_gap(u, std::span<const FovMask>(masks));
    for (int b = 0; b < 2; ++b) {
      for (int ch = 0; ch < c; ++ch) {
        long double sum = 0;
        int count = 0;
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x)
            if (masks[b].at(x, y)) sum += u.at(b, y, x, ch), ++count;
        worst = std::max(worst, std::abs(pooled.at(b, 0, 0, ch) - static_cast<double>(sum / count)));
      }
    }
  }
  v.require(worst <= 1e-6, "masked mean error " + fmt("%.3g", worst));
  v.note("200 all-ones maps bitwise equal, 200 random-mask maps max error " + fmt("%.2g", worst));
  return v;
}

Verdict cam_consistency() {
  Verdict v;
  Rng rng(202);
  double worst = 0.0;
  for (int trial = 0; trial < 120; ++trial) {
    const ImageModel model = make_image_model(image_config(32, {4, 8}), 5000 + trial);
    const Tensor x = random_tensor({1, 32, 32, 1}, rng);
    const FovMask mask = feature_mask(model.feature_size(), rng.uniform(6.0, 16.0), 32);
    const auto pass = image_forward(model, x, std::span<const FovMask>(&mask, 1));
    const ClassActivationMap cam = cam_from_features(model, pass.features);
    for (int k = 0; k < 2; ++k) {
      double sum = 0;
      for (int y = 0; y < cam.size; ++y)
        for (int xx = 0; xx < cam.size; ++xx)
          if (mask.at(xx, y)) sum += cam.score(y, xx, k);
      const double logit = pass.logits.raw()[k];
      worst = std::max(worst, std::abs(sum / mask.count() - logit) / std::max(1.0, std::abs(logit)));
    }
  }
  v.require(worst <= 1e-5, "relative error " + fmt("%.3g", worst));
  v.note("120 models, max relative error " + fmt("%.2g", worst));
  return v;
}

Verdict gradients() {
  Verdict v;
  PatchNetConfig pc;
  pc.patch_size = 16;
  pc.conv1_width = 4;
  pc.conv2_width = 8;
  pc.fc_width = 32;
  int patch_ok = 0, image_ok = 0;
  double worst = 0.0;
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    const Network net = make_patch_net(pc, seed);
    const auto r = gradient_check(net, random_tensor({2, 16, 16, 1}, rng), {0, 1});
    patch_ok += r.passed;
    worst = std::max(worst, r.max_relative_error());
  }
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(100 + seed);
    const ImageModel model = make_image_model(image_config(16, {2, 3}), seed);
    const FovMask mask = feature_mask(model.feature_size(), 7.0, 16);
    const auto r = image_gradient_check(model, random_tensor({2, 16, 16, 1}, rng), mask, {0, 1});
    image_ok += r.passed;
    worst = std::max(worst, r.max_relative_error());
  }
  v.require(patch_ok == 20, "patch net passed " + std::to_string(patch_ok) + "/20 seeds");
  v.require(image_ok == 20, "image model passed " + std::to_string(image_ok) + "/20 seeds");

  Rng rng(303);
  size_t nonzero_outside = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int s = 2 + static_cast<int>(rng.below(8));
    const FovMask m = random_mask(s, s, rng);
    const Tensor g = random_tensor({1, 1, 1, 4}, rng);
    const Tensor dx = masked_gap_backward(g, std::span<const FovMask>(&m, 1), s, s);
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x)
        for (int c = 0; c < 4; ++c) nonzero_outside += !m.at(x, y) && dx.at(0, y, x, c) != 0.0f;
  }
  v.require(nonzero_outside == 0, std::to_string(nonzero_outside) + " nonzero gradients outside the mask");
  v.note("20+20 seeds, max relative error " + fmt("%.2g", worst) + ", zero gradient outside the mask");
  return v;
}

Verdict extrapolation() {
  Verdict v;
  const int n = 576;
  const double r = 270;
  size_t exterior = 0, within = 0, interior_changed = 0;
  for (double slope : {1.0, 10.0, 100.0}) {
    Frame f;
    f.raw = Image16(n, n, 0);
    f.fov_radius = r;
    Rng rng(static_cast<uint64_t>(slope));
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        const double d = std::hypot(x - n / 2.0, y - n / 2.0);
        f.raw.at(x, y) = d <= r ? static_cast<uint16_t>(std::lround(500 + slope * d))
                                : static_cast<uint16_t>(rng.below(65536));
      }
    }
    const Frame out = circular_extrapolate(f, r);
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        const double d = std::hypot(x - n / 2.0, y - n / 2.0);
        if (d <= r) {
          interior_changed += out.raw.at(x, y) != f.raw.at(x, y);
          continue;
        }
        ++exterior;
        const double expected = 500 + slope * std::max(0.0, 2 * r - d);
        within += std::abs(out.raw.at(x, y) - expected) <= 1.0;
      }
    }
  }
  const double frac = static_cast<double>(within) / static_cast<double>(exterior);
  v.require(interior_changed == 0, std::to_string(interior_changed) + " interior pixels changed");
  v.require(frac >= 0.99, "only " + fmt("%.4f", frac) + " of exterior pixels within 1 gray level");
  v.note("ramps of slope 1/10/100 on 576x576 r=270: interior bit-exact, " + fmt("%.4f", frac) +
         " of exterior within 1 gray level");
  return v;
}

Verdict auc_oracle() {
  Verdict v;
  Rng rng(505);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const size_t n = 2 + rng.below(199);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (size_t i = 0; i < n; ++i) {
      s[i] = trial % 2 ? static_cast<double>(rng.below(5)) / 4.0 : rng.uniform();
      y[i] = static_cast<int>(rng.below(2));
    }
    y[0] = 0, y[1] = 1;
    double wins = 0, pairs = 0;
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < n; ++j)
        if (y[i] == 1 && y[j] == 0) {
          pairs += 1;
          wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
        }
    worst = std::max(worst, std::abs(roc_auc(s, y) - wins / pairs));
  }
  v.require(worst <= 1e-12, "max difference " + fmt("%.3g", worst));
  v.note("50 sets (25 heavily tied), max difference " + fmt("%.2g", worst));
  return v;
}

Verdict site_statistics(const Dataset& ds, const SynthSpec& spec) {
  Verdict v;
  std::vector<const Frame*> frames;
  for (const auto& f : ds.frames) frames.push_back(&f);
  const auto report = median_histogram(frames, log_spaced_edges(16.0, 65536.0, 37));
  std::map<Site, double> target;
  for (const auto& d : spec.domains)
    for (const auto& s : d.sites) target[s.site] = s.median_target;
  std::map<Site, std::pair<double, double>> range;  // min, max per-frame median
  for (const auto& h : report.sites) {
    double total = 0;
    for (double m : h.mass) total += m;
    v.require(std::abs(total - 1.0) <= 1e-9, to_string(h.site) + " mass " + fmt("%.12f", total));
    range[h.site] = {*std::min_element(h.medians.begin(), h.medians.end()),
                     *std::max_element(h.medians.begin(), h.medians.end())};
    double log_mean = 0;
    for (double m : h.medians) log_mean += std::log(m);
    log_mean /= static_cast<double>(h.medians.size());
    v.require(std::abs(log_mean - std::log(target[h.site])) < std::log(1.3),
              to_string(h.site) + " median far from its configured level");
  }
  v.require(range.size() == target.size(), "not every configured site has frames");
  // Every site configured below 200 sits entirely below every site above 1000.
  std::string separation;
  for (const auto& [low, lt] : target) {
    if (lt >= 200) continue;
    for (const auto& [high, ht] : target) {
      if (ht <= 1000) continue;
      v.require(range[low].second < range[high].first, to_string(low) + " overlaps " + to_string(high));
      double overlap = 0;
      const auto& ml = std::find_if(report.sites.begin(), report.sites.end(), [&](auto& s) { return s.site == low; })->mass;
      const auto& mh = std::find_if(report.sites.begin(), report.sites.end(), [&](auto& s) { return s.site == high; })->mass;
      for (size_t b = 0; b < ml.size(); ++b) overlap += std::min(ml[b], mh[b]);
      v.require(overlap == 0.0, to_string(low) + " and " + to_string(high) + " histograms share mass");
    }
  }
  v.note(std::to_string(report.sites.size()) + " sites, unit mass, low-median sites disjoint from high-median sites");
  return v;
}

// ------------------------------------------------------------- 6, 7, 8

struct Campaign {
  std::map<std::pair<ExperimentId, Method>, ExperimentRun> runs;
  std::map<std::pair<ExperimentId, Method>, double> seconds;
  std::vector<std::string> errors;
  double total_seconds = 0.0;
};

const std::vector<ExperimentId> kDesigns{ExperimentId::oc, ExperimentId::vc, ExperimentId::oc2vc, ExperimentId::vc2oc,
                                         ExperimentId::joint};

Campaign run_campaign(const Dataset& ds, const HarnessConfig& config, uint64_t seed) {
  Campaign c;
  ExperimentResources resources;
  const auto t0 = Clock::now();
  for (Method method : {Method::image, Method::ppf}) {
    for (ExperimentId id : kDesigns) {
      const auto t = Clock::now();
      try {
        const ExperimentPlan plan = make_plan(id, ds.manifest);
        c.runs[{id, method}] = run_experiment(plan, ds, method, seed, config, &resources);
      } catch (const std::exception& e) {
        c.errors.push_back(to_string(id) + "/" + to_string(method) + ": " + e.what());
      }
      c.seconds[{id, method}] = seconds_since(t);
      std::fprintf(stderr, "  %s/%s %.1f s\n", to_string(id).c_str(), to_string(method).c_str(), c.seconds[{id, method}]);
    }
  }
  c.total_seconds = seconds_since(t0);
  return c;
}

Verdict harness_integrity(const Campaign& c, const Dataset& ds, double setup_seconds) {
  Verdict v;
  for (const auto& e : c.errors) v.require(false, e);
  bool restored = false;
  int max_epochs = 0;
  for (ExperimentId id : kDesigns) {
    for (Method method : {Method::image, Method::ppf}) {
      const auto it = c.runs.find({id, method});
      if (it == c.runs.end()) continue;
      const ExperimentRun& run = it->second;
      try {
        assert_coverage(run.results, run.plan, ds);
        for (const auto& f : run.plan.folds) assert_no_leakage(f);
        for (const auto& f : run.folds) {
          std::vector<std::string> val = f.log.value("validation_patients", std::vector<std::string>{});
          assert_no_leakage(run.plan.folds[static_cast<size_t>(f.fold)], val);
        }
      } catch (const std::exception& e) {
        v.require(false, to_string(id) + "/" + to_string(method) + ": " + e.what());
      }
      if (method == Method::image) {
        restored |= run.restore_fired();
        max_epochs = std::max(max_epochs, run.max_epochs_run());
      }
    }
  }
  v.require(c.runs.size() == 2 * kDesigns.size(), "only " + std::to_string(c.runs.size()) + " of 10 runs finished");
  const auto joint = c.runs.find({ExperimentId::joint, Method::image});
  v.require(joint != c.runs.end() && joint->second.results.records.size() == ds.frames.size(),
            "joint results do not cover the dataset");
  v.require(max_epochs <= 10, "early stopping ran " + std::to_string(max_epochs) + " epochs");
  v.require(restored, "restore-on-decrease never fired");
  const double total = c.total_seconds + setup_seconds;
  v.require(total <= 900.0, "took " + fmt("%.0f", total) + " s");
  v.note("10 runs, full coverage, no leakage, max " + std::to_string(max_epochs) + " epochs, restore fired, " +
         fmt("%.0f", total) + " s including data generation");
  return v;
}

Verdict learnability(const Campaign& c, const Dataset& ds) {
  Verdict v;
  const auto [dom_a, dom_b] = experiment_domains(ds.manifest);
  double secs = 0.0;
  std::string summary;
  for (Method method : {Method::image, Method::ppf}) {
    const std::string m = to_string(method);
    for (ExperimentId id : {ExperimentId::oc, ExperimentId::vc, ExperimentId::oc2vc, ExperimentId::vc2oc}) {
      secs += c.seconds.at({id, method});
    }
    const auto oc = c.runs.find({ExperimentId::oc, method}), vc = c.runs.find({ExperimentId::vc, method});
    const auto ab = c.runs.find({ExperimentId::oc2vc, method}), ba = c.runs.find({ExperimentId::vc2oc, method});
    if (oc == c.runs.end() || vc == c.runs.end() || ab == c.runs.end() || ba == c.runs.end()) {
      v.require(false, m + " runs missing");
      continue;
    }
    const double acc_a = compute_metrics(oc->second.results).accuracy;
    const double acc_b = compute_metrics(vc->second.results).accuracy;
    v.require(acc_a >= 0.95, m + " LOPO accuracy on A " + fmt("%.4f", acc_a));
    v.require(acc_b >= 0.95, m + " LOPO accuracy on B " + fmt("%.4f", acc_b));
    // Domain A carries the cornified normal mode; B never shows it.
    const DomainShift shift_a = domain_shift(dom_a, oc->second.results, ba->second.results);
    const DomainShift shift_b = domain_shift(dom_b, vc->second.results, ab->second.results);
    v.require(shift_a.drop() > 0.0, m + " shows no precision drop on A when trained on B");
    v.require(shift_a.drop() > shift_b.drop(), m + " precision drop is not larger on A than on B");
    summary += m + ": LOPO acc A " + fmt("%.3f", acc_a) + " B " + fmt("%.3f", acc_b) + ", precision on A " +
               fmt("%.3f", shift_a.within_precision) + " -> " + fmt("%.3f", shift_a.transfer_precision) +
               ", on B " + fmt("%.3f", shift_b.within_precision) + " -> " + fmt("%.3f", shift_b.transfer_precision) +
               "; ";
  }
  v.require(secs <= 900.0, "took " + fmt("%.0f", secs) + " s");
  v.note(summary + fmt("%.0f", secs) + " s");
  return v;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Verdict determinism(const Campaign& c, const Dataset& ds, const HarnessConfig& config, uint64_t seed,
                    const fs::path& scratch) {
  Verdict v;
  ExperimentResources resources;
  size_t compared = 0;
  for (Method method : {Method::image, Method::ppf}) {
    for (ExperimentId id : {ExperimentId::oc, ExperimentId::oc2vc}) {
      const auto first = c.runs.find({id, method});
      if (first == c.runs.end()) {
        v.require(false, "no first run of " + to_string(id) + "/" + to_string(method));
        continue;
      }
      const ExperimentRun again = run_experiment(make_plan(id, ds.manifest), ds, method, seed, config, &resources);
      const fs::path a = create_run_directory(scratch / "first", id, method, seed);
      const fs::path b = create_run_directory(scratch / "second", id, method, seed);
      write_run(a, first->second, config);
      write_run(b, again, config);
      for (const auto& entry : fs::recursive_directory_iterator(a)) {
        if (!entry.is_regular_file()) continue;
        const fs::path rel = fs::relative(entry.path(), a);
        ++compared;
        v.require(slurp(entry.path()) == slurp(b / rel), to_string(id) + "/" + to_string(method) + " " +
                                                             rel.string() + " differs");
        if (rel.extension() == ".ckpt") {
          const Checkpoint ca = Checkpoint::load(entry.path()), cb = Checkpoint::load(b / rel);
          v.require(ca.manifest() == cb.manifest(), rel.string() + " manifest differs");
        }
      }
    }
  }
  v.note(std::to_string(compared) + " files (metrics, results, fold logs, checkpoints) identical across repeated runs");
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path scratch =
      argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / ("cle_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(scratch);
  fs::create_directories(scratch);

  run_criterion(1, masked_pooling);
  run_criterion(2, cam_consistency);
  run_criterion(3, gradients);
  run_criterion(4, extrapolation);
  run_criterion(5, auc_oracle);

  const auto t_setup = Clock::now();
  const SynthSpec spec = SynthSpec::defaults();
  Dataset ds;
  bool have_data = true;
  try {
    generate_synthetic(spec, scratch / "data");
    ds = load_dataset(scratch / "data" / "manifest.tsv");
  } catch (const std::exception& e) {
    std::fprintf(stderr, "dataset generation failed: %s\n", e.what());
    have_data = false;
  }
  const double setup_seconds = seconds_since(t_setup);
  std::fprintf(stderr, "default dataset: %zu frames in %.1f s\n", ds.frames.size(), setup_seconds);

  const HarnessConfig config = desk_harness_config();
  const uint64_t seed = 1;
  Campaign campaign;
  if (have_data) campaign = run_campaign(ds, config, seed);

  const auto missing = [] {
    Verdict v;
    v.require(false, "default dataset unavailable");
    return v;
  };
  report(6, have_data ? harness_integrity(campaign, ds, setup_seconds) : missing(),
         campaign.total_seconds + setup_seconds);
  {
    const auto t0 = Clock::now();
    report(7, have_data ? learnability(campaign, ds) : missing(), seconds_since(t0));
  }
  run_criterion(8, [&] { return have_data ? determinism(campaign, ds, config, seed, scratch) : missing(); });
  run_criterion(9, [&] { return have_data ? site_statistics(ds, spec) : missing(); });

  fs::remove_all(scratch);
  std::printf("%d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
