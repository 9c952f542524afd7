#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cle/dataset.hpp"
#include "cle/frame.hpp"

namespace cle {

/// Acquisition site of a synthetic domain with its intensity statistics.
struct SiteSpec {
  Site site = Site::synthetic;
  double median_target = 1000.0;  // scanner units
  /// Fraction of normal frames rendered with the cornified texture mode.
  double cornified_fraction = 0.0;
};

struct DomainSpec {
  Domain domain = Domain::synthetic_a;
  std::string patient_prefix = "A";
  std::vector<SiteSpec> sites;
  double cell_spacing = 24.0;    // mean lattice spacing of normal epithelium, px
  double cell_jitter = 0.35;     // lattice jitter as a fraction of spacing
  double carcinoma_scale = 40.0;  // coarsest noise octave of carcinoma texture, px
  /// Last patient of the domain only contributes normal frames.
  bool normal_only_last_patient = false;
};

/// Everything that determines a synthetic dataset. Same spec, same bytes.
struct SynthSpec {
  uint64_t seed = 1;
  int patients_per_domain = 6;
  int frames_per_patient = 40;
  int sequences_per_patient = 4;
  int size = 576;
  double fov_radius = 270.0;
  uint16_t background = 0;
  double shot_noise_gain = 4.0;  // noise variance per unit of signal
  double patient_intensity_spread = 0.2;
  std::vector<DomainSpec> domains;

  /// Two domains x 6 patients x 40 frames at 576 x 576, radius 270. Domain A
  /// (oral-cavity-like) mixes one bright and two dim sites and renders part of
  /// its normals as cornified tissue (irregular background with bright
  /// flakes); domain B (vocal-fold-like) has one bright site, a finer lattice
  /// and a normal-only patient, and never shows the cornified mode.
  static SynthSpec defaults();

  nlohmann::json to_json() const;
  static SynthSpec from_json(const nlohmann::json& j);
};

/// Texture families rendered by the generator.
enum class Texture { normal_lattice, cornified, carcinoma };

/// Renders one frame. `stream_seed` selects the per-frame random stream.
Image16 render_frame(const SynthSpec& spec, const DomainSpec& domain, const SiteSpec& site, Texture texture,
                     double intensity_factor, double spacing_factor, uint64_t stream_seed);

/// Writes frames (frames/<patient>/<sequence>_<n>.pgm), manifest.tsv and
/// synth_spec.json under `out_dir`; returns the manifest.
DatasetManifest generate_synthetic(const SynthSpec& spec, const std::filesystem::path& out_dir);

}  // namespace cle
