#include "cle/method.hpp"

#include "cle/errors.hpp"

namespace cle {

std::string to_string(Method m) { return m == Method::ppf ? "ppf" : "image"; }

Method method_from_string(const std::string& s) {
  if (s == "ppf") return Method::ppf;
  if (s == "image") return Method::image;
  throw ConfigError("unknown method '" + s + "' (expected ppf or image)");
}

}  // namespace cle
