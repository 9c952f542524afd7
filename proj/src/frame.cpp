#include "cle/frame.hpp"

namespace cle {

std::string to_string(Label label) {
  return label == Label::carcinoma ? "carcinoma" : "clinically_normal";
}

std::string to_string(Site site) {
  switch (site) {
    case Site::alveolar_ridge: return "alveolar_ridge";
    case Site::hard_palate: return "hard_palate";
    case Site::inner_labium: return "inner_labium";
    case Site::vocal_fold: return "vocal_fold";
    case Site::synthetic: return "synthetic";
  }
  return "synthetic";
}

Label label_from_string(const std::string& s) {
  if (s == "carcinoma") return Label::carcinoma;
  if (s == "clinically_normal") return Label::clinically_normal;
  throw ConfigError("unknown label '" + s + "'");
}

Site site_from_string(const std::string& s) {
  for (auto site : {Site::alveolar_ridge, Site::hard_palate, Site::inner_labium, Site::vocal_fold, Site::synthetic}) {
    if (to_string(site) == s) return site;
  }
  throw ConfigError("unknown site '" + s + "'");
}

}  // namespace cle
