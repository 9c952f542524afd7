#include "cle/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "cle/fov.hpp"
#include "cle/parallel.hpp"
#include "cle/pgm.hpp"
#include "cle/rng.hpp"

namespace cle {

SynthSpec SynthSpec::defaults() {
  SynthSpec s;
  DomainSpec a;
  a.domain = Domain::synthetic_a;
  a.patient_prefix = "A";
  a.sites = {{Site::alveolar_ridge, 1800.0, 0.6}, {Site::hard_palate, 60.0, 0.7}, {Site::inner_labium, 80.0, 0.7}};
  a.cell_spacing = 24.0;
  a.carcinoma_scale = 40.0;
  DomainSpec b;
  b.domain = Domain::synthetic_b;
  b.patient_prefix = "B";
  b.sites = {{Site::vocal_fold, 1400.0, 0.0}};
  b.cell_spacing = 17.0;
  b.carcinoma_scale = 32.0;
  b.normal_only_last_patient = true;
  s.domains = {a, b};
  return s;
}

nlohmann::json SynthSpec::to_json() const {
  nlohmann::json j;
  j["seed"] = seed;
  j["patients_per_domain"] = patients_per_domain;
  j["frames_per_patient"] = frames_per_patient;
  j["sequences_per_patient"] = sequences_per_patient;
  j["size"] = size;
  j["fov_radius"] = fov_radius;
  j["background"] = background;
  j["shot_noise_gain"] = shot_noise_gain;
  j["patient_intensity_spread"] = patient_intensity_spread;
  j["domains"] = nlohmann::json::array();
  for (const auto& d : domains) {
    nlohmann::json dj;
    dj["domain"] = to_string(d.domain);
    dj["patient_prefix"] = d.patient_prefix;
    dj["cell_spacing"] = d.cell_spacing;
    dj["cell_jitter"] = d.cell_jitter;
    dj["carcinoma_scale"] = d.carcinoma_scale;
    dj["normal_only_last_patient"] = d.normal_only_last_patient;
    dj["sites"] = nlohmann::json::array();
    for (const auto& s : d.sites) {
      dj["sites"].push_back(
          {{"site", to_string(s.site)}, {"median_target", s.median_target}, {"cornified_fraction", s.cornified_fraction}});
    }
    j["domains"].push_back(dj);
  }
  return j;
}

SynthSpec SynthSpec::from_json(const nlohmann::json& j) {
  SynthSpec s;
  s.seed = j.at("seed").get<uint64_t>();
  s.patients_per_domain = j.at("patients_per_domain").get<int>();
  s.frames_per_patient = j.at("frames_per_patient").get<int>();
  s.sequences_per_patient = j.at("sequences_per_patient").get<int>();
  s.size = j.at("size").get<int>();
  s.fov_radius = j.at("fov_radius").get<double>();
  s.background = j.at("background").get<uint16_t>();
  s.shot_noise_gain = j.at("shot_noise_gain").get<double>();
  s.patient_intensity_spread = j.at("patient_intensity_spread").get<double>();
  for (const auto& dj : j.at("domains")) {
    DomainSpec d;
    d.domain = domain_from_string(dj.at("domain").get<std::string>());
    d.patient_prefix = dj.at("patient_prefix").get<std::string>();
    d.cell_spacing = dj.at("cell_spacing").get<double>();
    d.cell_jitter = dj.at("cell_jitter").get<double>();
    d.carcinoma_scale = dj.at("carcinoma_scale").get<double>();
    d.normal_only_last_patient = dj.at("normal_only_last_patient").get<bool>();
    for (const auto& sj : dj.at("sites")) {
      d.sites.push_back({site_from_string(sj.at("site").get<std::string>()), sj.at("median_target").get<double>(),
                         sj.at("cornified_fraction").get<double>()});
    }
    s.domains.push_back(d);
  }
  return s;
}

namespace {

double hash_unit(uint64_t seed, int64_t a, int64_t b) {
  return static_cast<double>(mix_seed(seed, static_cast<uint64_t>(a), static_cast<uint64_t>(b)) >> 11) * 0x1.0p-53;
}

// Jittered lattice of feature points in a rotated, offset frame of reference.
class CellLattice {
 public:
  CellLattice(int size, double spacing, double jitter, Rng& rng)
      : spacing_(spacing), angle_(rng.uniform(0, 2 * std::numbers::pi)) {
    offset_x_ = rng.uniform(0, spacing);
    offset_y_ = rng.uniform(0, spacing);
    cos_ = std::cos(angle_);
    sin_ = std::sin(angle_);
    seed_ = rng.next_u64();
    // Rotated frame covers at most size * sqrt(2) around the centre.
    extent_ = static_cast<int>(std::ceil(size * 0.75 / spacing)) + 3;
    const int n = 2 * extent_ + 1;
    points_.resize(static_cast<size_t>(n) * n);
    brightness_.resize(points_.size());
    for (int gy = -extent_; gy <= extent_; ++gy) {
      for (int gx = -extent_; gx <= extent_; ++gx) {
        const size_t idx = index(gx, gy);
        points_[idx] = {gx + 0.5 + jitter * (2 * hash_unit(seed_, gx, gy * 2) - 1),
                        gy + 0.5 + jitter * (2 * hash_unit(seed_, gx, gy * 2 + 1) - 1)};
        brightness_[idx] = hash_unit(seed_ ^ 0x5bd1e995ULL, gx, gy);
      }
    }
    centre_ = size / 2.0;
  }

  struct Hit {
    double f1, f2;        // distances to the nearest and second nearest point, px
    double brightness;    // of the nearest cell
  };

  Hit query(double x, double y) const {
    const double dx = x - centre_, dy = y - centre_;
    const double u = (cos_ * dx - sin_ * dy) / spacing_ + offset_x_ / spacing_;
    const double v = (sin_ * dx + cos_ * dy) / spacing_ + offset_y_ / spacing_;
    const int cx = static_cast<int>(std::floor(u)), cy = static_cast<int>(std::floor(v));
    double best = 1e300, second = 1e300, bright = 0;
    for (int gy = cy - 1; gy <= cy + 1; ++gy) {
      for (int gx = cx - 1; gx <= cx + 1; ++gx) {
        if (std::abs(gx) > extent_ || std::abs(gy) > extent_) continue;
        const auto& p = points_[index(gx, gy)];
        const double d = (p.first - u) * (p.first - u) + (p.second - v) * (p.second - v);
        if (d < best) {
          second = best;
          best = d;
          bright = brightness_[index(gx, gy)];
        } else if (d < second) {
          second = d;
        }
      }
    }
    return {std::sqrt(best) * spacing_, std::sqrt(second) * spacing_, bright};
  }

 private:
  size_t index(int gx, int gy) const {
    return static_cast<size_t>(gy + extent_) * static_cast<size_t>(2 * extent_ + 1) + static_cast<size_t>(gx + extent_);
  }

  double spacing_, angle_, cos_ = 1, sin_ = 0, offset_x_ = 0, offset_y_ = 0, centre_ = 0;
  uint64_t seed_ = 0;
  int extent_ = 0;
  std::vector<std::pair<double, double>> points_;
  std::vector<double> brightness_;
};

// Smoothly interpolated lattice noise in [0, 1).
class ValueNoise {
 public:
  ValueNoise(int size, double scale, uint64_t seed) : scale_(scale) {
    n_ = static_cast<int>(std::ceil(size / scale)) + 2;
    values_.resize(static_cast<size_t>(n_) * n_);
    for (int y = 0; y < n_; ++y) {
      for (int x = 0; x < n_; ++x) values_[static_cast<size_t>(y) * n_ + x] = hash_unit(seed, x, y);
    }
  }

  double operator()(double x, double y) const {
    const double u = x / scale_, v = y / scale_;
    const int x0 = static_cast<int>(u), y0 = static_cast<int>(v);
    const double fx = smooth(u - x0), fy = smooth(v - y0);
    auto at = [&](int xi, int yi) { return values_[static_cast<size_t>(yi) * n_ + xi]; };
    const double top = at(x0, y0) * (1 - fx) + at(x0 + 1, y0) * fx;
    const double bottom = at(x0, y0 + 1) * (1 - fx) + at(x0 + 1, y0 + 1) * fx;
    return top * (1 - fy) + bottom * fy;
  }

 private:
  static double smooth(double t) { return t * t * (3 - 2 * t); }
  double scale_;
  int n_ = 0;
  std::vector<double> values_;
};

struct Streak {
  double px, py, nx, ny, sigma, amplitude;
};

}  // namespace

Image16 render_frame(const SynthSpec& spec, const DomainSpec& domain, const SiteSpec& site, Texture texture,
                     double intensity_factor, double spacing_factor, uint64_t stream_seed) {
  const int n = spec.size;
  Rng rng(stream_seed);
  std::vector<double> t(static_cast<size_t>(n) * n, 0.0);
  const FovMask mask = compute_fov_mask(n, n, spec.fov_radius);

  if (texture == Texture::normal_lattice) {
    const CellLattice cells(n, domain.cell_spacing * spacing_factor, domain.cell_jitter, rng);
    const double wall = 1.4;
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        if (!mask.at(x, y)) continue;
        const auto h = cells.query(x, y);
        const double gap = (h.f2 - h.f1) / wall;
        t[static_cast<size_t>(y) * n + x] = 0.55 + 0.3 * h.brightness + 1.5 * std::exp(-gap * gap);
      }
    }
  } else if (texture == Texture::cornified) {
    // Irregular keratin background (carcinoma-like) sprinkled with small bright flakes.
    std::vector<ValueNoise> octaves;
    double scale = domain.carcinoma_scale * spacing_factor;
    for (int o = 0; o < 4; ++o, scale /= 2) octaves.emplace_back(n, std::max(scale, 2.0), rng.next_u64());
    const CellLattice flakes(n, 22.0, 0.45, rng);
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        if (!mask.at(x, y)) continue;
        double noise = 0, amp = 1, norm = 0;
        for (const auto& o : octaves) {
          noise += amp * o(x, y);
          norm += amp;
          amp *= 0.5;
        }
        noise = 2 * noise / norm - 1;
        const auto f = flakes.query(x, y);
        const double flake = f.brightness < 0.5 ? 3.5 * std::exp(-f.f1 * f.f1 / (2 * 3.0 * 3.0)) : 0.0;
        t[static_cast<size_t>(y) * n + x] = 0.9 * std::exp(1.1 * noise) + flake;
      }
    }
  } else {
    std::vector<ValueNoise> octaves;
    double scale = domain.carcinoma_scale * spacing_factor;
    for (int o = 0; o < 4; ++o, scale /= 2) octaves.emplace_back(n, std::max(scale, 2.0), rng.next_u64());
    std::vector<Streak> streaks;
    const int count = 1 + static_cast<int>(rng.below(3));
    for (int i = 0; i < count; ++i) {
      const double angle = rng.uniform(0, std::numbers::pi);
      const double r = rng.uniform(0, spec.fov_radius * 0.7), phi = rng.uniform(0, 2 * std::numbers::pi);
      streaks.push_back({n / 2.0 + r * std::cos(phi), n / 2.0 + r * std::sin(phi), -std::sin(angle), std::cos(angle),
                         rng.uniform(2.0, 4.0), rng.uniform(2.5, 4.0)});
    }
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        if (!mask.at(x, y)) continue;
        double noise = 0, amp = 1, norm = 0;
        for (const auto& o : octaves) {
          noise += amp * o(x, y);
          norm += amp;
          amp *= 0.5;
        }
        noise = 2 * noise / norm - 1;
        double v = 0.9 * std::exp(1.1 * noise);
        for (const auto& s : streaks) {
          const double d = (x - s.px) * s.nx + (y - s.py) * s.ny;
          v += s.amplitude * std::exp(-d * d / (2 * s.sigma * s.sigma));
        }
        t[static_cast<size_t>(y) * n + x] = v;
      }
    }
  }

  std::vector<double> inside;
  inside.reserve(mask.count());
  for (size_t i = 0; i < t.size(); ++i) {
    if (mask.grid[i]) inside.push_back(t[i]);
  }
  auto mid = inside.begin() + static_cast<std::ptrdiff_t>(inside.size() / 2);
  std::nth_element(inside.begin(), mid, inside.end());
  const double scale = site.median_target * intensity_factor / *mid;

  Image16 img(n, n, spec.background);
  for (size_t i = 0; i < t.size(); ++i) {
    if (!mask.grid[i]) continue;
    const double signal = t[i] * scale;
    const double noisy = signal + rng.normal() * std::sqrt(spec.shot_noise_gain * signal + 4.0);
    img.pixels[i] = static_cast<uint16_t>(std::lround(std::clamp(noisy, 0.0, 65535.0)));
  }
  return img;
}

DatasetManifest generate_synthetic(const SynthSpec& spec, const std::filesystem::path& out_dir) {
  if (spec.frames_per_patient < 1 || spec.patients_per_domain < 1 || spec.sequences_per_patient < 1) {
    throw ConfigError("synthetic spec must produce at least one frame per patient");
  }
  if (spec.patients_per_domain < 3) throw ConfigError("at least 3 patients per domain are needed for LOPO");
  if (spec.domains.empty()) throw ConfigError("synthetic spec has no domains");
  if (spec.fov_radius <= 0 || spec.fov_radius > spec.size / 2.0) throw ConfigError("FOV radius does not fit the frame");

  struct Job {
    ManifestRecord record;
    const DomainSpec* domain;
    const SiteSpec* site;
    Texture texture;
    double intensity, spacing;
    uint64_t seed;
  };
  std::vector<Job> jobs;
  for (size_t di = 0; di < spec.domains.size(); ++di) {
    const auto& d = spec.domains[di];
    if (d.sites.empty()) throw ConfigError("domain " + to_string(d.domain) + " has no sites");
    for (int p = 0; p < spec.patients_per_domain; ++p) {
      char pid[32];
      std::snprintf(pid, sizeof pid, "%s%02d", d.patient_prefix.c_str(), p + 1);
      Rng patient_rng(mix_seed(spec.seed, di, static_cast<uint64_t>(p), 0x9a7ULL));
      const double intensity = 1.0 + spec.patient_intensity_spread * (2 * patient_rng.uniform() - 1);
      const double spacing = 1.0 + 0.1 * (2 * patient_rng.uniform() - 1);
      const bool normal_only = d.normal_only_last_patient && p == spec.patients_per_domain - 1;
      for (int f = 0; f < spec.frames_per_patient; ++f) {
        const int seq = f * spec.sequences_per_patient / spec.frames_per_patient;
        const SiteSpec& site = d.sites[static_cast<size_t>(p + seq) % d.sites.size()];
        const Label label = !normal_only && seq % 2 == 1 ? Label::carcinoma : Label::clinically_normal;
        const uint64_t frame_seed = mix_seed(spec.seed, di, static_cast<uint64_t>(p), static_cast<uint64_t>(f));
        Texture texture = Texture::carcinoma;
        if (label == Label::clinically_normal) {
          texture = hash_unit(frame_seed, 17, 29) < site.cornified_fraction ? Texture::cornified : Texture::normal_lattice;
        }
        char name[96];
        std::snprintf(name, sizeof name, "frames/%s/s%d_%03d.pgm", pid, seq + 1, f);
        ManifestRecord r;
        r.path = name;
        r.patient_id = pid;
        r.sequence_id = std::string(pid) + "-s" + std::to_string(seq + 1);
        r.label = label;
        r.site = site.site;
        r.domain = d.domain;
        r.fov_radius = spec.fov_radius;
        jobs.push_back({r, &d, &site, texture, intensity, spacing, frame_seed});
      }
    }
  }

  std::filesystem::create_directories(out_dir);
  for (const auto& j : jobs) std::filesystem::create_directories((out_dir / j.record.path).parent_path());
  parallel_for(jobs.size(), default_thread_count(), [&](size_t i) {
    const auto& j = jobs[i];
    save_pgm(out_dir / j.record.path, render_frame(spec, *j.domain, *j.site, j.texture, j.intensity, j.spacing, j.seed));
  });

  DatasetManifest m;
  m.root = out_dir;
  for (auto& j : jobs) m.records.push_back(j.record);
  save_manifest(m, out_dir / "manifest.tsv");
  std::ofstream(out_dir / "synth_spec.json") << spec.to_json().dump(2) << "\n";
  return m;
}

}  // namespace cle
