#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "cle/gradcheck.hpp"
#include "cle/patch.hpp"
#include "cle/synth.hpp"

using namespace cle;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cle_test_patch_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

PatchNetConfig small_config() {
  PatchNetConfig c;
  c.patch_size = 32;
  c.grid_stride = 16;
  c.conv1_width = 4;
  c.conv2_width = 8;
  c.fc_width = 16;
  c.patches_per_frame = 2;
  return c;
}

ProbabilityMap map_of(std::vector<double> p) {
  ProbabilityMap m;
  m.patch_size = 4;
  for (size_t i = 0; i < p.size(); ++i) m.origins.push_back({static_cast<int>(4 * i), 0});
  m.p_carcinoma = std::move(p);
  return m;
}

Frame random_frame(int size, double radius, uint64_t seed) {
  Frame f;
  f.raw = Image16(size, size, 0);
  f.fov_radius = radius;
  Rng rng(seed);
  const FovMask m = compute_fov_mask(size, size, radius);
  for (size_t i = 0; i < f.raw.pixels.size(); ++i)
    if (m.grid[i]) f.raw.pixels[i] = static_cast<uint16_t>(500 + rng.below(3000));
  return f;
}

// Eight-patient, single-domain synthetic set shared by the training cases.
struct PatchSetup {
  Dataset dataset;
  std::vector<std::string> patients;
};

const PatchSetup& setup() {
  static const PatchSetup s = [] {
    SynthSpec spec = SynthSpec::defaults();
    spec.domains.resize(1);
    spec.patients_per_domain = 8;
    spec.frames_per_patient = 8;
    spec.size = 160;
    spec.fov_radius = 75;
    for (auto& site : spec.domains[0].sites) site.cornified_fraction = 0.0;
    const auto dir = scratch_dir("synth");
    generate_synthetic(spec, dir);
    PatchSetup out;
    out.dataset = load_dataset(dir / "manifest.tsv");
    out.patients = out.dataset.manifest.patients();
    return out;
  }();
  return s;
}

std::vector<size_t> frames_of(const Dataset& ds, const std::vector<std::string>& patients) {
  std::vector<size_t> out;
  for (const auto& p : patients)
    for (size_t i : ds.frames_of_patient(p)) out.push_back(i);
  return out;
}

}  // namespace

TEST_CASE("fusion examples and properties") {
  CHECK(*fuse(map_of({0.7})).p_carcinoma == doctest::Approx(0.7));
  CHECK(*fuse(map_of({0.2, 0.8})).p_carcinoma == doctest::Approx(0.5));
  CHECK(*fuse(map_of({1.0, 1.0, 1.0})).p_carcinoma == 1.0);
  const auto empty = fuse(map_of({}));
  CHECK_FALSE(empty.diagnostic());
  CHECK(empty.method == Method::ppf);

  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> p(1 + rng.below(30));
    for (auto& v : p) v = rng.uniform();
    const double fused = *fuse(map_of(p)).p_carcinoma;
    CHECK(fused >= *std::min_element(p.begin(), p.end()) - 1e-12);
    CHECK(fused <= *std::max_element(p.begin(), p.end()) + 1e-12);
    std::vector<double> q = p;
    rng.shuffle(q.begin(), q.end());
    CHECK(*fuse(map_of(q)).p_carcinoma == doctest::Approx(fused).epsilon(1e-12));
  }
}

TEST_CASE("three-fold augmentation adds exactly three lossless rotations") {
  Rng rng(9);
  ImageF patch(6, 6);
  for (auto& v : patch.pixels) v = static_cast<float>(rng.normal());
  for (int trial = 0; trial < 10; ++trial) {
    const auto aug = three_fold_augment(patch, rng);
    REQUIRE(aug.size() == 4);
    CHECK(aug[0].quarter_turns == 0);
    CHECK(aug[0].pixels == patch);
    std::set<int> turns;
    std::vector<float> sorted = patch.pixels;
    std::sort(sorted.begin(), sorted.end());
    for (size_t i = 1; i < aug.size(); ++i) {
      turns.insert(aug[i].quarter_turns);
      CHECK(aug[i].pixels == rotate_quarter(patch, aug[i].quarter_turns));
      std::vector<float> s = aug[i].pixels.pixels;
      std::sort(s.begin(), s.end());
      CHECK(s == sorted);
    }
    CHECK(turns == std::set<int>{1, 2, 3});
  }
}

TEST_CASE("zeroed final layer gives 0.5 for every patch") {
  Network net = make_patch_net(small_config(), 3);
  auto& params = net.params();
  params[params.size() - 2].fill(0.0f);
  params.back().fill(0.0f);
  const Frame f = random_frame(96, 45, 1);
  const PatchGrid grid = extract_patch_grid(compute_fov_mask(96, 96, 45), 32, 16);
  REQUIRE(grid.origins.size() > 1);
  const auto map = classify_patches(net, f, grid);
  CHECK(map.size() == grid.origins.size());
  for (double p : map.p_carcinoma) CHECK(p == 0.5);
  CHECK(*fuse(map).p_carcinoma == 0.5);
}

TEST_CASE("probability map follows grid order independent of batching") {
  const Network net = make_patch_net(small_config(), 5);
  const Frame f = random_frame(96, 45, 2);
  const FovStats st = fov_statistics(f);
  const PatchGrid grid = extract_patch_grid(compute_fov_mask(96, 96, 45), 32, 16);
  const auto batched = classify_patches(net, f, grid, st, 64);
  const auto single = classify_patches(net, f, grid, st, 1);
  REQUIRE(batched.size() == single.size());
  CHECK(batched.origins == grid.origins);
  for (size_t i = 0; i < batched.size(); ++i) CHECK(batched.p_carcinoma[i] == doctest::Approx(single.p_carcinoma[i]));

  PatchGrid one = grid;
  one.origins.resize(1);
  CHECK(classify_patches(net, f, one).size() == 1);
  PatchGrid none = grid;
  none.origins.clear();
  CHECK_FALSE(fuse(classify_patches(net, f, none)).diagnostic());
}

TEST_CASE("patch net at quarter width passes finite differences across 20 seeds") {
  PatchNetConfig c;
  c.patch_size = 16;
  c.conv1_width = 4;
  c.conv2_width = 8;
  c.fc_width = 32;
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    const Network net = make_patch_net(c, seed);
    REQUIRE(net.parameter_count() <= 100000);
    Rng rng(seed);
    Tensor x({2, 16, 16, 1});
    for (auto& v : x.values()) v = static_cast<float>(rng.normal());
    CAPTURE(seed);
    CHECK(gradient_check(net, x, {0, 1}).passed);
  }
}

TEST_CASE("training patches inherit their source frame label") {
  const auto& s = setup();
  const auto frames = frames_of(s.dataset, s.patients);
  Rng rng(1);
  const PatchSet set = build_patch_set(s.dataset, frames, small_config(), rng);
  CHECK(set.patches.size() == frames.size() * 2 * 4);
  for (size_t i = 0; i < set.patches.size(); ++i) {
    CHECK(set.labels[i] == class_index(s.dataset.manifest.records[set.source_frames[i]].label));
    CHECK(set.patches[i].width == 32);
  }
}

TEST_CASE("training runs a fixed 60 epochs, is deterministic and needs both classes") {
  const auto& s = setup();
  std::vector<std::string> train(s.patients.begin(), s.patients.begin() + 3);
  const auto frames = frames_of(s.dataset, train);
  PatchNetConfig c = small_config();
  c.patches_per_frame = 1;
  const auto a = train_ppf(s.dataset, frames, c, 21);
  const auto b = train_ppf(s.dataset, frames, c, 21);
  CHECK(a.log.epoch_loss.size() == 60);
  CHECK(a.log.to_json().at("epochs") == 60);
  CHECK(a.log.epoch_loss == b.log.epoch_loss);
  CHECK(a.model.params() == b.model.params());
  CHECK(ppf_checkpoint(a.model, c, 21, 60).encode() == ppf_checkpoint(b.model, c, 21, 60).encode());
  const auto other = train_ppf(s.dataset, frames, c, 22);
  CHECK_FALSE(other.model.params() == a.model.params());
  CHECK(a.log.patches_per_epoch == 2 * std::min(a.log.patches_per_class[0], a.log.patches_per_class[1]));

  std::vector<size_t> normals;
  for (size_t i : frames)
    if (s.dataset.manifest.records[i].label == Label::clinically_normal) normals.push_back(i);
  CHECK_THROWS_AS(train_ppf(s.dataset, normals, c, 1), ConfigError);
}

TEST_CASE("held-out patch accuracy on eight pseudo-patients") {
  const auto& s = setup();
  REQUIRE(s.patients.size() == 8);
  const std::vector<std::string> train(s.patients.begin(), s.patients.begin() + 6);
  const std::vector<std::string> test(s.patients.begin() + 6, s.patients.end());
  PatchNetConfig c = small_config();
  c.conv1_stride = 2;
  const auto result = train_ppf(s.dataset, frames_of(s.dataset, train), c, 7);
  size_t correct = 0, total = 0;
  for (size_t i : frames_of(s.dataset, test)) {
    const Frame& f = s.dataset.frames[i];
    const auto grid = extract_patch_grid(compute_fov_mask(f.width(), f.height(), f.fov_radius), 32, 16);
    const auto map = classify_patches(result.model, f, grid);
    const bool positive = s.dataset.manifest.records[i].label == Label::carcinoma;
    for (double p : map.p_carcinoma) {
      correct += (p >= 0.5) == positive;
      ++total;
    }
  }
  REQUIRE(total > 0);
  CHECK(static_cast<double>(correct) / static_cast<double>(total) >= 0.9);

  const Checkpoint ck = ppf_checkpoint(result.model, c, 7, 60);
  const Checkpoint back = Checkpoint::decode(ck.encode());
  CHECK(ppf_model_from_checkpoint(back).params() == result.model.params());
  CHECK(ppf_config_from_checkpoint(back).to_json() == c.to_json());
  Checkpoint wrong = back;
  wrong.kind = "wholeimage";
  CHECK_THROWS_AS(ppf_model_from_checkpoint(wrong), ConfigError);
}

TEST_CASE("probability map export and overlay") {
  const auto dir = scratch_dir("export");
  ProbabilityMap m;
  m.patch_size = 32;
  m.origins = {{16, 16}, {48, 16}};
  m.p_carcinoma = {1.0, 0.25};
  write_probability_map(dir / "map.tsv", m);
  std::ifstream in(dir / "map.tsv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "x\ty\tp_carcinoma");
  std::getline(in, line);
  CHECK(line == "16\t16\t1");
  std::getline(in, line);
  CHECK(line == "48\t16\t0.25");
  CHECK_FALSE(std::getline(in, line));

  const Frame f = random_frame(96, 45, 3);
  const Image8 overlay = probability_overlay(f, m);
  CHECK(overlay.width == 96);
  CHECK(overlay.height == 96);
  // Heat contributes half of 255 where the p = 1 patch alone covers the pixel.
  CHECK(overlay.at(20, 20) >= 127);
  CHECK(overlay.at(0, 0) <= 128);
}
