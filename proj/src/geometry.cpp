#include "detlens/geometry.hpp"

namespace detlens {

void validate(const Detection& d) {
  validate(d.box);
  if (!(d.objectness >= 0.0 && d.objectness <= 1.0))
    throw std::invalid_argument("objectness outside [0,1]: " + std::to_string(d.objectness));
  if (d.class_probs) {
    for (double p : *d.class_probs) {
      if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("class probability outside [0,1]: " + std::to_string(p));
    }
  }
}

}  // namespace detlens
