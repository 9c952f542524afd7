#include "cle/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "cle/pgm.hpp"

namespace cle {

std::string to_string(Domain d) {
  switch (d) {
    case Domain::oc: return "OC";
    case Domain::vc: return "VC";
    case Domain::synthetic_a: return "synthetic-A";
    case Domain::synthetic_b: return "synthetic-B";
  }
  return "synthetic-A";
}

Domain domain_from_string(const std::string& s) {
  for (auto d : {Domain::oc, Domain::vc, Domain::synthetic_a, Domain::synthetic_b}) {
    if (to_string(d) == s) return d;
  }
  throw ConfigError("unknown domain '" + s + "'");
}

std::vector<std::string> DatasetManifest::patients() const {
  std::set<std::string> ids;
  for (const auto& r : records) ids.insert(r.patient_id);
  return {ids.begin(), ids.end()};
}

std::vector<std::string> DatasetManifest::patients(Domain domain) const {
  std::set<std::string> ids;
  for (const auto& r : records) {
    if (r.domain == domain) ids.insert(r.patient_id);
  }
  return {ids.begin(), ids.end()};
}

Domain DatasetManifest::domain_of(const std::string& patient) const {
  for (const auto& r : records) {
    if (r.patient_id == patient) return r.domain;
  }
  throw ConfigError("unknown patient '" + patient + "'");
}

std::string DatasetManifest::summary() const {
  std::map<std::string, std::array<size_t, 2>> by_domain, by_patient;
  for (const auto& r : records) {
    by_domain[to_string(r.domain)][static_cast<size_t>(class_index(r.label))]++;
    by_patient[r.patient_id][static_cast<size_t>(class_index(r.label))]++;
  }
  std::ostringstream out;
  out << "frames: " << records.size() << "\n";
  for (const auto& [d, c] : by_domain) {
    out << "domain " << d << ": normal " << c[0] << ", carcinoma " << c[1] << "\n";
  }
  for (const auto& [p, c] : by_patient) {
    out << "patient " << p << ": normal " << c[0] << ", carcinoma " << c[1] << "\n";
  }
  return out.str();
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, '\t')) out.push_back(cell);
  if (!line.empty() && line.back() == '\t') out.emplace_back();
  return out;
}

bool pgm_header_ok(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  char magic[2] = {0, 0};
  in.read(magic, 2);
  return in && magic[0] == 'P' && magic[1] == '5';
}

}  // namespace

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open manifest " + path.string(), 0);
  DatasetManifest m;
  m.root = path.parent_path();
  std::string line;
  int lineno = 0;
  bool have_header = false, have_columns = false;
  std::set<std::string> paths;
  std::map<std::string, Domain> patient_domain;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!have_header) {
      if (line != kManifestHeader) throw ParseError("expected header '" + std::string(kManifestHeader) + "'", lineno);
      have_header = true;
      continue;
    }
    if (!have_columns) {
      if (line != kManifestColumns) throw ParseError("unexpected column header", lineno);
      have_columns = true;
      continue;
    }
    if (line.empty()) continue;
    const auto cells = split_tabs(line);
    if (cells.size() != 7) throw ParseError("expected 7 tab-separated fields, got " + std::to_string(cells.size()), lineno);
    ManifestRecord r;
    r.path = cells[0];
    r.patient_id = cells[1];
    r.sequence_id = cells[2];
    try {
      r.label = label_from_string(cells[3]);
      r.site = site_from_string(cells[4]);
      r.domain = domain_from_string(cells[5]);
      size_t used = 0;
      r.fov_radius = std::stod(cells[6], &used);
      if (used != cells[6].size() || !(r.fov_radius > 0)) throw ConfigError("invalid fov_radius '" + cells[6] + "'");
    } catch (const ConfigError& e) {
      throw ParseError(e.what(), lineno);
    } catch (const std::exception&) {
      throw ParseError("invalid fov_radius '" + cells[6] + "'", lineno);
    }
    if (r.path.empty() || r.patient_id.empty()) throw ParseError("empty path or patient id", lineno);
    if (!paths.insert(r.path).second) throw ParseError("duplicate path '" + r.path + "'", lineno);
    const auto [it, inserted] = patient_domain.emplace(r.patient_id, r.domain);
    if (!inserted && it->second != r.domain) {
      throw ParseError("patient '" + r.patient_id + "' appears in two domains", lineno);
    }
    const auto file = m.root / r.path;
    if (!std::filesystem::exists(file)) throw ParseError("missing file '" + r.path + "'", lineno);
    if (!pgm_header_ok(file)) throw ParseError("file '" + r.path + "' is not a binary PGM", lineno);
    m.records.push_back(std::move(r));
  }
  if (!have_header || !have_columns) throw ParseError("manifest header missing", lineno);
  if (m.records.empty()) m.warnings.push_back("manifest " + path.string() + " lists no frames");
  return m;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << kManifestHeader << "\n" << kManifestColumns << "\n";
  for (const auto& r : manifest.records) {
    std::ostringstream radius;
    radius.precision(17);
    radius << r.fov_radius;
    out << r.path << '\t' << r.patient_id << '\t' << r.sequence_id << '\t' << to_string(r.label) << '\t'
        << to_string(r.site) << '\t' << to_string(r.domain) << '\t' << radius.str() << "\n";
  }
}

std::vector<size_t> Dataset::frames_of_patient(const std::string& patient) const {
  std::vector<size_t> idx;
  for (size_t i = 0; i < manifest.records.size(); ++i) {
    if (manifest.records[i].patient_id == patient) idx.push_back(i);
  }
  return idx;
}

Dataset load_dataset(const std::filesystem::path& manifest_path) {
  Dataset ds;
  ds.manifest = load_manifest(manifest_path);
  ds.frames.reserve(ds.manifest.records.size());
  for (const auto& r : ds.manifest.records) {
    DecodedPgm pgm;
    try {
      pgm = load_pgm(ds.manifest.root / r.path);
    } catch (const DecodeError& e) {
      throw DecodeError(r.path + ": " + e.what());
    }
    Frame f;
    f.raw = std::move(pgm.image);
    f.widened_from_8bit = pgm.widened_from_8bit;
    f.fov_radius = r.fov_radius;
    f.patient_id = r.patient_id;
    f.sequence_id = r.sequence_id;
    f.label = r.label;
    f.site = r.site;
    ds.frames.push_back(std::move(f));
  }
  return ds;
}

}  // namespace cle
