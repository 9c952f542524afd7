#pragma once

#include <string>

#include "cle/image.hpp"

namespace cle {

enum class Label { clinically_normal = 0, carcinoma = 1 };
enum class Site { alveolar_ridge, hard_palate, inner_labium, vocal_fold, synthetic };

std::string to_string(Label label);
std::string to_string(Site site);
Label label_from_string(const std::string& s);
Site site_from_string(const std::string& s);

/// Class index used by every network: carcinoma is the positive class (1).
inline int class_index(Label label) { return static_cast<int>(label); }

/// One raw grayscale frame with a circular field of view.
struct Frame {
  Image16 raw;
  double fov_radius = 0.0;
  std::string patient_id;
  std::string sequence_id;
  Label label = Label::clinically_normal;
  Site site = Site::synthetic;
  bool widened_from_8bit = false;

  int width() const { return raw.width; }
  int height() const { return raw.height; }
};

}  // namespace cle
