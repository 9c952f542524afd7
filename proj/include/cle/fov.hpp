#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cle/frame.hpp"
#include "cle/image.hpp"

namespace cle {

/// Validity predicate of the circular field of view. The circle is centred at
/// (W/2, H/2) with pixel centres on integer coordinates; the boundary counts
/// as inside.
inline bool inside_fov(double i, double j, int width, int height, double radius) {
  const double dx = i - width / 2.0, dy = j - height / 2.0;
  return radius * radius - dy * dy - dx * dx >= 0.0;
}

/// Binary W x H validity map; `at(i, j)` with i the column, j the row.
struct FovMask {
  int width = 0;
  int height = 0;
  double radius = 0.0;
  std::vector<uint8_t> grid;  // row-major, H rows of W

  uint8_t at(int i, int j) const { return grid[static_cast<size_t>(j) * width + i]; }
  size_t count() const;
};

FovMask compute_fov_mask(int width, int height, double radius);

struct ExtrapolationSettings {
  int angular_samples = 0;  // 0 = ceil(2*pi*r)
  int radial_samples = 0;   // 0 = ceil(r)
};

/// Image resampled on a (angle, distance) lattice around (W/2, H/2). Row a
/// holds angle 2*pi*a/angular; column k holds distance (k + 1) * r / radial,
/// so the last column lies on the rim.
struct PolarImage {
  int angular = 0;
  int radial = 0;    // columns in use (2 * radial - 1 after mirror_distance_axis)
  double radius = 0.0;
  double step = 0.0;  // distance between radial samples
  double cx = 0.0, cy = 0.0;
  std::vector<double> values;  // angular x radial, row-major

  double at(int a, int k) const { return values[static_cast<size_t>(a) * radial + k]; }
};

/// Linear-to-polar transform of the in-circle content. Only pixels passing the
/// mask predicate contribute to each bilinear sample; samples within 1.5 px of
/// the rim come from a line fitted along the ray to the four samples below.
PolarImage to_polar(const ImageF& img, double radius, ExtrapolationSettings settings = {});

/// Appends the copy flipped about the rim column, so column radial - 1 + m
/// holds the value at distance r - m * step.
PolarImage mirror_distance_axis(const PolarImage& polar);

/// Polar-to-linear transform onto a width x height grid (bilinear, angular
/// wrap, distance clamped to the sampled range).
ImageF from_polar(const PolarImage& polar, int width, int height);

/// Fills everything outside the circle of radius `radius` with the radial
/// mirror of the interior: polar resampling, concatenation with the
/// distance-flipped copy, and back-projection. Pixels inside the circle are
/// copied from the input unchanged.
ImageF circular_extrapolate(const ImageF& img, double radius, ExtrapolationSettings settings = {});
Frame circular_extrapolate(const Frame& frame, double radius, ExtrapolationSettings settings = {});

struct PatchOrigin {
  int x = 0;
  int y = 0;
  bool operator==(const PatchOrigin&) const = default;
  auto operator<=>(const PatchOrigin& o) const {
    if (auto c = y <=> o.y; c != 0) return c;
    return x <=> o.x;
  }
};

struct PatchGrid {
  int patch_size = 0;
  int stride = 0;
  std::vector<PatchOrigin> origins;  // row-major order
};

/// Lattice origins (multiples of `stride`) whose patch has all four corner
/// pixels inside the mask predicate.
PatchGrid extract_patch_grid(const FovMask& mask, int patch_size, int stride);

/// Mean and standard deviation of in-FOV raw values.
struct FovStats {
  double mean = 0.0;
  double stddev = 1.0;
};
FovStats fov_statistics(const Frame& frame);

/// (raw - mean) / stddev inside the FOV, 0 outside.
ImageF standardize_fov(const Frame& frame, const FovStats& stats);

/// Median of in-FOV raw values; even counts average the two central values.
double median_raw_value(const Frame& frame);

/// `count` log-spaced edges from lo to hi inclusive.
std::vector<double> log_spaced_edges(double lo, double hi, int count);

struct SiteHistogram {
  Site site = Site::synthetic;
  size_t frames = 0;
  /// mass[0] underflow (median below the first edge, including zero);
  /// mass[1..edges-1] regular bins [e_k, e_k+1); mass.back() overflow.
  std::vector<double> mass;
  std::vector<double> medians;
};

struct MedianHistogramReport {
  std::vector<double> edges;
  std::vector<SiteHistogram> sites;
  std::vector<std::string> warnings;
};

/// Per-site normalized histograms of per-frame median raw values. Sites
/// listed in `requested` without frames are omitted with a warning.
MedianHistogramReport median_histogram(const std::vector<const Frame*>& frames, const std::vector<double>& edges,
                                       const std::vector<Site>& requested = {});

}  // namespace cle
