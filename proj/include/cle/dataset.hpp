#pragma once

#include <filesystem>
#include <array>
#include <map>
#include <string>
#include <vector>

#include "cle/frame.hpp"

namespace cle {

enum class Domain { oc, vc, synthetic_a, synthetic_b };

std::string to_string(Domain d);
Domain domain_from_string(const std::string& s);

struct ManifestRecord {
  std::string path;  // relative to the manifest's directory
  std::string patient_id;
  std::string sequence_id;
  Label label = Label::clinically_normal;
  Site site = Site::synthetic;
  Domain domain = Domain::synthetic_a;
  double fov_radius = 0.0;

  bool operator==(const ManifestRecord&) const = default;
};

/// Line-based, tab-separated frame list with a versioned header:
///
///   # cle-manifest v1
///   path  patient  sequence  label  site  domain  fov_radius
///   ...one record per line...
struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestRecord> records;
  std::vector<std::string> warnings;

  /// Sorted unique patient ids, optionally restricted to one domain.
  std::vector<std::string> patients() const;
  std::vector<std::string> patients(Domain domain) const;
  Domain domain_of(const std::string& patient) const;

  /// Frame counts per domain, class and patient, one line each.
  std::string summary() const;
};

inline constexpr const char* kManifestHeader = "# cle-manifest v1";
inline constexpr const char* kManifestColumns = "path\tpatient\tsequence\tlabel\tsite\tdomain\tfov_radius";

/// Parses and validates a manifest. Errors (missing file, duplicate path,
/// unknown label, patient in two domains) raise ParseError with the line.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Manifest plus decoded frames, index-aligned with `manifest.records`.
struct Dataset {
  DatasetManifest manifest;
  std::vector<Frame> frames;

  std::vector<size_t> frames_of_patient(const std::string& patient) const;
};

Dataset load_dataset(const std::filesystem::path& manifest_path);

/// Stable identifier of a frame inside a dataset (its manifest path).
inline const std::string& frame_id(const Dataset& ds, size_t index) { return ds.manifest.records[index].path; }

}  // namespace cle
