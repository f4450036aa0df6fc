#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace detlens {

/// Axis-aligned box in pixel space, stored as corners (x rightward, y downward).
template <typename Scalar>
struct Box {
  Scalar x1{0}, y1{0}, x2{0}, y2{0};

  Scalar width() const { return x2 - x1; }
  Scalar height() const { return y2 - y1; }
  Scalar area() const { return width() * height(); }

  bool is_finite() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2);
  }
  bool is_valid() const { return is_finite() && x1 <= x2 && y1 <= y2; }

  /// Translated copy.
  Box translated(Scalar dx, Scalar dy) const { return {x1 + dx, y1 + dy, x2 + dx, y2 + dy}; }
  Box scaled(Scalar k) const { return {x1 * k, y1 * k, x2 * k, y2 * k}; }

  friend bool operator==(const Box&, const Box&) = default;
};

using BBox = Box<double>;

/// Throws std::invalid_argument when the box is non-finite or has inverted corners.
template <typename Scalar>
void validate(const Box<Scalar>& b) {
  if (!b.is_finite()) throw std::invalid_argument("box has non-finite coordinates");
  if (b.x1 > b.x2 || b.y1 > b.y2) throw std::invalid_argument("box corners are inverted");
}

/// Converts a CrowdHuman-style (x, y, w, h) box to corner form.
template <typename Scalar>
Box<Scalar> from_xywh(Scalar x, Scalar y, Scalar w, Scalar h) {
  return {x, y, x + w, y + h};
}

template <typename Scalar>
Scalar intersection_area(const Box<Scalar>& a, const Box<Scalar>& b) {
  const Scalar w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const Scalar h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (w <= Scalar(0) || h <= Scalar(0)) return Scalar(0);
  return w * h;
}

/// Intersection over union; 0 when the union is empty.
template <typename Scalar>
Scalar iou(const Box<Scalar>& a, const Box<Scalar>& b) {
  const Scalar inter = intersection_area(a, b);
  const Scalar uni = a.area() + b.area() - inter;
  if (uni <= Scalar(0)) return Scalar(0);
  return std::clamp(inter / uni, Scalar(0), Scalar(1));
}

template <typename Scalar>
struct ClampedBox {
  Box<Scalar> box;
  /// Set when the clamped box has zero area (the input lay outside the image).
  bool degenerate{false};
};

/// Clamps corners into [0,w] x [0,h]:
///   x1' = max(0, x1), y1' = max(0, y1), x2' = min(w, x2), y2' = min(h, y2).
/// A box that lies entirely outside is collapsed onto the boundary so the
/// result still satisfies x1 <= x2, y1 <= y2.
template <typename Scalar>
ClampedBox<Scalar> clamp_box(const Box<Scalar>& b, Scalar w, Scalar h) {
  if (!(w > Scalar(0)) || !(h > Scalar(0))) throw std::invalid_argument("clamp_box: image size must be positive");
  auto clamp = [](Scalar v, Scalar hi) { return std::min(hi, std::max(Scalar(0), v)); };
  Box<Scalar> out{clamp(b.x1, w), clamp(b.y1, h), clamp(b.x2, w), clamp(b.y2, h)};
  // x2 < x1 can only happen here if the input was inverted; keep the invariant anyway.
  out.x2 = std::max(out.x1, out.x2);
  out.y2 = std::max(out.y1, out.y2);
  return {out, out.area() <= Scalar(0)};
}

template <typename Scalar>
bool box_inside(const Box<Scalar>& b, Scalar w, Scalar h) {
  if (!(w > Scalar(0)) || !(h > Scalar(0))) throw std::invalid_argument("box_inside: image size must be positive");
  return b.x1 >= Scalar(0) && b.y1 >= Scalar(0) && b.x2 <= w && b.y2 <= h;
}

/// A single detector output.
struct Detection {
  BBox box;
  double objectness{1.0};
  std::optional<std::vector<double>> class_probs;
};

/// Throws std::invalid_argument when box or scores violate their ranges.
void validate(const Detection& d);

}  // namespace detlens
