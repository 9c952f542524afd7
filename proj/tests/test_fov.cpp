#include <doctest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "cle/fov.hpp"
#include "cle/rng.hpp"

using namespace cle;

namespace {

// Independent enumeration of the mask predicate written out by hand.
size_t brute_force_mask_count(int w, int h, double r) {
  size_t n = 0;
  for (int j = 0; j < h; ++j) {
    for (int i = 0; i < w; ++i) {
      const double di = i - 0.5 * w, dj = j - 0.5 * h;
      if (di * di + dj * dj <= r * r) ++n;
    }
  }
  return n;
}

Frame make_frame(int w, int h, double r, uint16_t fill) {
  Frame f;
  f.raw = Image16(w, h, fill);
  f.fov_radius = r;
  return f;
}

double dist(int x, int y, int w, int h) { return std::hypot(x - w / 2.0, y - h / 2.0); }

}  // namespace

TEST_CASE("fov mask examples") {
  auto m = compute_fov_mask(4, 4, 10);
  CHECK(m.count() == 16);

  m = compute_fov_mask(4, 4, 0);
  CHECK(m.count() == 1);
  CHECK(m.at(2, 2) == 1);

  m = compute_fov_mask(5, 5, 2);
  CHECK(brute_force_mask_count(5, 5, 2) == 12);
  CHECK(m.count() == 12);

  for (int w : {7, 16, 33}) {
    for (double r : {0.0, 1.5, 4.0, 7.3, 20.0}) CHECK(compute_fov_mask(w, w + 3, r).count() == brute_force_mask_count(w, w + 3, r));
  }
}

TEST_CASE("fov mask transpose symmetry and radius monotonicity") {
  for (int w = 1; w < 14; w += 3) {
    for (int h = 1; h < 14; h += 4) {
      double prev_r = 0.0;
      FovMask prev = compute_fov_mask(w, h, prev_r);
      for (double r : {0.75, 1.0, 2.5, 3.2, 6.0, 9.9}) {
        const FovMask a = compute_fov_mask(w, h, r), b = compute_fov_mask(h, w, r);
        for (int j = 0; j < h; ++j) {
          for (int i = 0; i < w; ++i) {
            CHECK(a.at(i, j) == b.at(j, i));
            CHECK(prev.at(i, j) <= a.at(i, j));
          }
        }
        CHECK(a.count() >= 1);
        prev = a;
      }
    }
  }
}

TEST_CASE("circular extrapolation of a constant image stays constant") {
  ImageF img(64, 64, 0.0f);
  const FovMask mask = compute_fov_mask(64, 64, 30);
  for (size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = mask.grid[i] ? 812.0f : 0.0f;
  const ImageF out = circular_extrapolate(img, 30);
  for (float v : out.pixels) CHECK(v == doctest::Approx(812.0f).epsilon(1e-6));

  Frame f = make_frame(64, 64, 30, 0);
  for (size_t i = 0; i < f.raw.pixels.size(); ++i) f.raw.pixels[i] = mask.grid[i] ? 500 : 0;
  const Frame g = circular_extrapolate(f, 30);
  for (uint16_t v : g.raw.pixels) CHECK(v == 500);
}

TEST_CASE("circular extrapolation copies the interior and mirrors a radial ramp") {
  const int w = 256, h = 256;
  const double r = 100;
  Frame f = make_frame(w, h, r, 0);
  Rng rng(5);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double d = dist(x, y, w, h);
      f.raw.at(x, y) = d <= r ? static_cast<uint16_t>(std::lround(d)) : static_cast<uint16_t>(rng.below(60000));
    }
  }
  const Frame out = circular_extrapolate(f, r);
  const Frame twice = circular_extrapolate(out, r);
  size_t exterior = 0, within = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double d = dist(x, y, w, h);
      if (d <= r) {
        CHECK(out.raw.at(x, y) == f.raw.at(x, y));
        CHECK(twice.raw.at(x, y) == f.raw.at(x, y));
        continue;
      }
      ++exterior;
      const double expected = std::max(0.0, 2 * r - d);
      if (std::abs(out.raw.at(x, y) - expected) <= 1.0) ++within;
    }
  }
  CHECK(static_cast<double>(within) >= 0.99 * exterior);

  // pixel at radius 110 along +x
  CHECK(std::abs(static_cast<double>(out.raw.at(w / 2 + 110, h / 2)) - 90.0) <= 1.0);
}

TEST_CASE("circular extrapolation rejects radii larger than the frame") {
  ImageF img(40, 30);
  CHECK_THROWS_AS(circular_extrapolate(img, 15.5), GeometryError);
  CHECK_NOTHROW(circular_extrapolate(img, 15.0));
  ExtrapolationSettings s;
  s.radial_samples = 5;
  CHECK_THROWS_AS(circular_extrapolate(img, 10.0, s), ConfigError);
}

TEST_CASE("linear-polar-linear round trip on bandlimited content") {
  const int n = 200;
  const double r = 90;
  ImageF img(n, n);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      img.at(x, y) = static_cast<float>(1000 + 300 * std::sin(x * 0.11) * std::cos(y * 0.07) + 150 * std::sin((x + y) * 0.05));
    }
  }
  const ImageF back = from_polar(to_polar(img, r), n, n);
  const FovMask mask = compute_fov_mask(n, n, r);
  double err = 0;
  size_t count = 0;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      if (!inside_fov(x, y, n, n, r - 1)) continue;
      err += std::abs(back.at(x, y) - img.at(x, y));
      ++count;
    }
  }
  CHECK(err / count < 1.5);
  CHECK(mask.count() > count);
}

TEST_CASE("patch grid examples") {
  CHECK(extract_patch_grid(compute_fov_mask(64, 64, 32), 64, 8).origins.empty());

  const auto g = extract_patch_grid(compute_fov_mask(8, 8, 10), 4, 4);
  const std::vector<PatchOrigin> expected{{0, 0}, {4, 0}, {0, 4}, {4, 4}};
  CHECK(g.origins == expected);

  CHECK_THROWS_AS(extract_patch_grid(compute_fov_mask(8, 8, 10), 9, 1), ConfigError);
  CHECK_THROWS_AS(extract_patch_grid(compute_fov_mask(8, 8, 10), 4, 0), ConfigError);
}

TEST_CASE("patch grid on the default geometry matches a brute-force corner test") {
  const int n = 576, p = 80, s = 40;
  const double r = 270;
  auto in = [&](int i, int j) {
    const double di = i - n / 2.0, dj = j - n / 2.0;
    return di * di + dj * dj <= r * r;
  };
  std::set<std::pair<int, int>> brute;
  for (int y = 0; y <= n - p; y += s) {
    for (int x = 0; x <= n - p; x += s) {
      if (in(x, y) && in(x + p - 1, y) && in(x, y + p - 1) && in(x + p - 1, y + p - 1)) brute.insert({x, y});
    }
  }
  const auto grid = extract_patch_grid(compute_fov_mask(n, n, r), p, s);
  CHECK(grid.origins.size() == brute.size());
  CHECK(grid.origins.size() >= 20);
  CHECK(std::is_sorted(grid.origins.begin(), grid.origins.end()));
  for (const auto& o : grid.origins) {
    CHECK(brute.count({o.x, o.y}) == 1);
    CHECK(in(o.x, o.y));
    CHECK(in(o.x + p - 1, o.y + p - 1));
  }
}

TEST_CASE("median raw value") {
  CHECK(median_raw_value(make_frame(32, 32, 12, 500)) == 500.0);

  // 3x3 frame, centre (1.5, 1.5): radius 0.75 admits exactly the 2x2 block at (1..2, 1..2)
  Frame f = make_frame(3, 3, 0.75, 0);
  REQUIRE(compute_fov_mask(3, 3, 0.75).count() == 4);
  f.raw.at(1, 1) = 1;
  f.raw.at(2, 1) = 2;
  f.raw.at(1, 2) = 3;
  f.raw.at(2, 2) = 4;
  f.raw.at(0, 0) = 60000;
  CHECK(median_raw_value(f) == 2.5);

  Frame vessel = make_frame(100, 100, 50, 100);
  const FovMask vm = compute_fov_mask(100, 100, 50);
  size_t bright = 0, inside = vm.count();
  for (int y = 0; y < 100 && bright < inside / 100; ++y) {
    for (int x = 0; x < 100 && bright < inside / 100; ++x) {
      if (vm.at(x, y) && x == 50) {
        vessel.raw.at(x, y) = 65535;
        ++bright;
      }
    }
  }
  CHECK(bright > 0);
  CHECK(median_raw_value(vessel) == 100.0);
}

TEST_CASE("median histogram normalization and separation") {
  const auto edges = log_spaced_edges(10, 10000, 31);
  Frame a = make_frame(20, 20, 8, 300);
  a.site = Site::hard_palate;
  auto rep = median_histogram({&a}, edges);
  REQUIRE(rep.sites.size() == 1);
  size_t nonzero = 0;
  for (double m : rep.sites[0].mass) nonzero += m > 0;
  CHECK(nonzero == 1);

  std::vector<Frame> frames;
  for (int i = 0; i < 10; ++i) {
    Frame low = make_frame(20, 20, 8, static_cast<uint16_t>(40 + i));
    low.site = Site::hard_palate;
    Frame high = make_frame(20, 20, 8, static_cast<uint16_t>(1800 + 30 * i));
    high.site = Site::vocal_fold;
    frames.push_back(low);
    frames.push_back(high);
  }
  Frame zero = make_frame(20, 20, 8, 0);
  zero.site = Site::hard_palate;
  frames.push_back(zero);
  std::vector<const Frame*> ptrs;
  for (const auto& f : frames) ptrs.push_back(&f);
  rep = median_histogram(ptrs, edges, {Site::hard_palate, Site::vocal_fold, Site::inner_labium});
  REQUIRE(rep.sites.size() == 2);
  CHECK(rep.warnings.size() == 1);
  for (const auto& s : rep.sites) {
    double total = 0;
    for (double m : s.mass) total += m;
    CHECK(std::abs(total - 1.0) < 1e-9);
  }
  CHECK(rep.sites[0].mass[0] == doctest::Approx(1.0 / 11));
  double overlap = 0;
  for (size_t b = 0; b < rep.sites[0].mass.size(); ++b) overlap += std::min(rep.sites[0].mass[b], rep.sites[1].mass[b]);
  CHECK(overlap == 0.0);
}
