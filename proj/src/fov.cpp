#include "cle/fov.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace cle {

size_t FovMask::count() const {
  return static_cast<size_t>(std::count(grid.begin(), grid.end(), uint8_t{1}));
}

FovMask compute_fov_mask(int width, int height, double radius) {
  if (width < 1 || height < 1) throw ConfigError("mask dimensions must be positive");
  if (radius < 0) throw ConfigError("mask radius must be non-negative");
  FovMask m;
  m.width = width;
  m.height = height;
  m.radius = radius;
  m.grid.resize(static_cast<size_t>(width) * height);
  for (int j = 0; j < height; ++j) {
    for (int i = 0; i < width; ++i) {
      m.grid[static_cast<size_t>(j) * width + i] = inside_fov(i, j, width, height, radius) ? 1 : 0;
    }
  }
  return m;
}

namespace {

// Bilinear sample restricted to in-circle pixels, renormalizing the weights.
double masked_sample(const ImageF& img, const FovMask& mask, double x, double y) {
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0, fy = y - y0;
  double acc = 0.0, wsum = 0.0;
  for (int dy = 0; dy < 2; ++dy) {
    for (int dx = 0; dx < 2; ++dx) {
      const int px = x0 + dx, py = y0 + dy;
      if (px < 0 || py < 0 || px >= img.width || py >= img.height || !mask.at(px, py)) continue;
      const double w = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy);
      acc += w * img.at(px, py);
      wsum += w;
    }
  }
  if (wsum > 1e-9) return acc / wsum;
  // No valid neighbour carries weight: fall back to the nearest valid one.
  double best = 0.0, best_d = 1e300;
  for (int dy = -1; dy <= 2; ++dy) {
    for (int dx = -1; dx <= 2; ++dx) {
      const int px = x0 + dx, py = y0 + dy;
      if (px < 0 || py < 0 || px >= img.width || py >= img.height || !mask.at(px, py)) continue;
      const double d = (px - x) * (px - x) + (py - y) * (py - y);
      if (d < best_d) {
        best_d = d;
        best = img.at(px, py);
      }
    }
  }
  return best;
}

double polar_lookup(const PolarImage& polar, double x, double y) {
  const double dx = x - polar.cx, dy = y - polar.cy;
  const double rho = std::sqrt(dx * dx + dy * dy);
  double theta = std::atan2(dy, dx);
  if (theta < 0) theta += 2.0 * std::numbers::pi;
  const double u = theta / (2.0 * std::numbers::pi) * polar.angular;
  const double v = std::clamp(rho / polar.step - 1.0, 0.0, static_cast<double>(polar.radial - 1));
  const int a0 = static_cast<int>(std::floor(u)) % polar.angular;
  const int a1 = (a0 + 1) % polar.angular;
  const double fu = u - std::floor(u);
  const int k0 = static_cast<int>(std::floor(v));
  const int k1 = std::min(k0 + 1, polar.radial - 1);
  const double fv = v - k0;
  const double near = polar.at(a0, k0) * (1.0 - fv) + polar.at(a0, k1) * fv;
  const double far = polar.at(a1, k0) * (1.0 - fv) + polar.at(a1, k1) * fv;
  return near * (1.0 - fu) + far * fu;
}

}  // namespace

PolarImage to_polar(const ImageF& img, double radius, ExtrapolationSettings settings) {
  if (radius <= 0.0 || radius > std::min(img.width, img.height) / 2.0) {
    throw GeometryError("FOV radius " + std::to_string(radius) + " does not fit a " + std::to_string(img.width) +
                        "x" + std::to_string(img.height) + " frame");
  }
  PolarImage polar;
  polar.angular = settings.angular_samples > 0 ? settings.angular_samples
                                               : static_cast<int>(std::ceil(2.0 * std::numbers::pi * radius));
  polar.radial = settings.radial_samples > 0 ? settings.radial_samples : static_cast<int>(std::ceil(radius));
  if (polar.radial < radius) throw ConfigError("radial sample count must be at least the radius");
  polar.radius = radius;
  polar.step = radius / polar.radial;
  polar.cx = img.width / 2.0;
  polar.cy = img.height / 2.0;
  polar.values.resize(static_cast<size_t>(polar.angular) * polar.radial);

  const FovMask mask = compute_fov_mask(img.width, img.height, radius);
  // Samples within this distance of the rim have bilinear neighbours outside
  // the circle; they are replaced by a line fitted to the clean samples below.
  const double clean_limit = radius - 1.5;
  int clean = 0;
  while (clean < polar.radial && (clean + 1) * polar.step <= clean_limit) ++clean;
  const int fit = std::min(clean, 4);
  for (int a = 0; a < polar.angular; ++a) {
    const double theta = 2.0 * std::numbers::pi * a / polar.angular;
    const double c = std::cos(theta), s = std::sin(theta);
    double* row = &polar.values[static_cast<size_t>(a) * polar.radial];
    for (int k = 0; k < polar.radial; ++k) {
      const double rho = (k + 1) * polar.step;
      row[k] = fit >= 2 && k >= clean ? 0.0 : masked_sample(img, mask, polar.cx + rho * c, polar.cy + rho * s);
    }
    if (fit < 2 || clean == polar.radial) continue;
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (int k = clean - fit; k < clean; ++k) {
      sx += k, sy += row[k], sxx += double(k) * k, sxy += k * row[k];
    }
    const double slope = (fit * sxy - sx * sy) / (fit * sxx - sx * sx);
    const double intercept = (sy - slope * sx) / fit;
    for (int k = clean; k < polar.radial; ++k) row[k] = intercept + slope * k;
  }
  return polar;
}

PolarImage mirror_distance_axis(const PolarImage& polar) {
  PolarImage out = polar;
  out.radial = 2 * polar.radial - 1;
  out.values.resize(static_cast<size_t>(out.angular) * out.radial);
  for (int a = 0; a < polar.angular; ++a) {
    for (int k = 0; k < polar.radial; ++k) {
      const double v = polar.at(a, k);
      out.values[static_cast<size_t>(a) * out.radial + k] = v;
      out.values[static_cast<size_t>(a) * out.radial + (out.radial - 1 - k)] = v;
    }
  }
  return out;
}

ImageF from_polar(const PolarImage& polar, int width, int height) {
  ImageF out(width, height);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) out.at(x, y) = static_cast<float>(polar_lookup(polar, x, y));
  }
  return out;
}

ImageF circular_extrapolate(const ImageF& img, double radius, ExtrapolationSettings settings) {
  const PolarImage mirrored = mirror_distance_axis(to_polar(img, radius, settings));
  const FovMask mask = compute_fov_mask(img.width, img.height, radius);
  // Back-project only the exterior; the interior keeps the source pixels.
  ImageF out = img;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      if (!mask.at(x, y)) out.at(x, y) = static_cast<float>(polar_lookup(mirrored, x, y));
    }
  }
  return out;
}

Frame circular_extrapolate(const Frame& frame, double radius, ExtrapolationSettings settings) {
  const ImageF filled = circular_extrapolate(to_float(frame.raw), radius, settings);
  Frame out = frame;
  const FovMask mask = compute_fov_mask(frame.width(), frame.height(), radius);
  for (size_t i = 0; i < filled.pixels.size(); ++i) {
    if (mask.grid[i]) continue;
    out.raw.pixels[i] = static_cast<uint16_t>(std::lround(std::clamp(static_cast<double>(filled.pixels[i]), 0.0, 65535.0)));
  }
  return out;
}

PatchGrid extract_patch_grid(const FovMask& mask, int patch_size, int stride) {
  if (patch_size < 1 || patch_size > std::min(mask.width, mask.height)) {
    throw ConfigError("patch size must be in [1, min(W, H)]");
  }
  if (stride < 1) throw ConfigError("patch stride must be at least 1");
  PatchGrid grid;
  grid.patch_size = patch_size;
  grid.stride = stride;
  auto ok = [&](int i, int j) { return inside_fov(i, j, mask.width, mask.height, mask.radius); };
  for (int y = 0; y + patch_size <= mask.height; y += stride) {
    for (int x = 0; x + patch_size <= mask.width; x += stride) {
      const int x1 = x + patch_size - 1, y1 = y + patch_size - 1;
      if (ok(x, y) && ok(x1, y) && ok(x, y1) && ok(x1, y1)) grid.origins.push_back({x, y});
    }
  }
  return grid;
}

FovStats fov_statistics(const Frame& frame) {
  const FovMask mask = compute_fov_mask(frame.width(), frame.height(), frame.fov_radius);
  double sum = 0.0, sq = 0.0;
  size_t n = 0;
  for (size_t i = 0; i < frame.raw.pixels.size(); ++i) {
    if (!mask.grid[i]) continue;
    const double v = frame.raw.pixels[i];
    sum += v;
    sq += v * v;
    ++n;
  }
  if (n == 0) throw GeometryError("frame has an empty field of view");
  FovStats s;
  s.mean = sum / static_cast<double>(n);
  const double var = std::max(0.0, sq / static_cast<double>(n) - s.mean * s.mean);
  s.stddev = std::max(std::sqrt(var), 1e-6);
  return s;
}

ImageF standardize_fov(const Frame& frame, const FovStats& stats) {
  const FovMask mask = compute_fov_mask(frame.width(), frame.height(), frame.fov_radius);
  ImageF out(frame.width(), frame.height());
  for (size_t i = 0; i < out.pixels.size(); ++i) {
    if (mask.grid[i]) out.pixels[i] = static_cast<float>((frame.raw.pixels[i] - stats.mean) / stats.stddev);
  }
  return out;
}

double median_raw_value(const Frame& frame) {
  const FovMask mask = compute_fov_mask(frame.width(), frame.height(), frame.fov_radius);
  std::vector<uint16_t> values;
  values.reserve(mask.count());
  for (size_t i = 0; i < frame.raw.pixels.size(); ++i) {
    if (mask.grid[i]) values.push_back(frame.raw.pixels[i]);
  }
  if (values.empty()) throw GeometryError("frame has an empty field of view");
  const size_t n = values.size();
  auto mid = values.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(values.begin(), mid, values.end());
  const double upper = *mid;
  if (n % 2 == 1) return upper;
  const double lower = *std::max_element(values.begin(), mid);
  return 0.5 * (lower + upper);
}

std::vector<double> log_spaced_edges(double lo, double hi, int count) {
  if (!(lo > 0.0) || !(hi > lo) || count < 2) throw ConfigError("log-spaced edges need 0 < lo < hi and count >= 2");
  std::vector<double> edges(static_cast<size_t>(count));
  const double a = std::log(lo), b = std::log(hi);
  for (int i = 0; i < count; ++i) edges[static_cast<size_t>(i)] = std::exp(a + (b - a) * i / (count - 1));
  edges.front() = lo;
  edges.back() = hi;
  return edges;
}

MedianHistogramReport median_histogram(const std::vector<const Frame*>& frames, const std::vector<double>& edges,
                                       const std::vector<Site>& requested) {
  if (edges.size() < 2 || !std::is_sorted(edges.begin(), edges.end()) || !(edges.front() > 0.0)) {
    throw ConfigError("histogram edges must be positive and ascending");
  }
  MedianHistogramReport report;
  report.edges = edges;
  std::map<Site, std::vector<double>> by_site;
  for (const Frame* f : frames) by_site[f->site].push_back(median_raw_value(*f));

  std::vector<Site> sites = requested;
  if (sites.empty()) {
    for (const auto& [site, medians] : by_site) sites.push_back(site);
  }
  for (Site site : sites) {
    auto it = by_site.find(site);
    if (it == by_site.end() || it->second.empty()) {
      report.warnings.push_back("site " + to_string(site) + " has no frames; omitted");
      continue;
    }
    SiteHistogram h;
    h.site = site;
    h.frames = it->second.size();
    h.medians = it->second;
    std::vector<size_t> counts(edges.size() + 1, 0);
    for (double m : it->second) {
      size_t bin;
      if (!(m >= edges.front())) {
        bin = 0;
      } else if (m >= edges.back()) {
        bin = edges.size();
      } else {
        bin = static_cast<size_t>(std::upper_bound(edges.begin(), edges.end(), m) - edges.begin());
      }
      ++counts[bin];
    }
    for (size_t c : counts) h.mass.push_back(static_cast<double>(c) / static_cast<double>(h.frames));
    report.sites.push_back(std::move(h));
  }
  return report;
}

}  // namespace cle
