#pragma once

#include <optional>
#include <string>

namespace cle {

enum class Method { ppf, image };

std::string to_string(Method m);
Method method_from_string(const std::string& s);

/// Per-frame carcinoma probability. A frame without any usable patch has no
/// probability and is reported as non-diagnostic.
struct ImageProbability {
  std::optional<double> p_carcinoma;
  Method method = Method::ppf;

  bool diagnostic() const { return p_carcinoma.has_value(); }
};

}  // namespace cle
