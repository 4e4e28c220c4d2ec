#pragma once

// Scale-aware pseudo label generation: per-level binary label maps built
// only from boxes whose width and height fall inside the level's range.

#include "protodet/proto.hpp"
#include "protodet/tensor.hpp"

#include <optional>
#include <set>
#include <utility>
#include <vector>

namespace protodet {

/// Axis-aligned box in pixels, centre + size. class_id is a 0-based
/// foreground index (background is never annotated).
struct BoxAnnotation {
  int class_id = 0;
  double cx = 0, cy = 0, w = 0, h = 0;

  double x0() const { return cx - 0.5 * w; }
  double x1() const { return cx + 0.5 * w; }
  double y0() const { return cy - 0.5 * h; }
  double y1() const { return cy + 0.5 * h; }
  double area() const { return w * h; }

  static BoxAnnotation from_corners(int class_id, double x0, double y0, double x1, double y1) {
    return {class_id, 0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0};
  }
  bool operator==(const BoxAnnotation&) const = default;
};

/// Clips to [0, width] x [0, height]; nullopt when nothing visible remains.
std::optional<BoxAnnotation> clip_box(const BoxAnnotation& box, int width, int height);

struct SizeRange {
  double lo = 0;
  double hi = 0;
  bool contains(double v) const { return v >= lo && v <= hi; }
};

/// [0, tau * stride]
SizeRange valid_range(const LevelSpec& level);

/// True when both sides of the box lie in the level's valid range.
bool admitted(const BoxAnnotation& box, const LevelSpec& level);

struct LabelMapStack {
  LevelSpec level;
  Tensor maps;  // C x H x W in {0, 1}; channel C - 1 is background

  int class_count() const { return maps.dim(0); }
};

struct LabelOptions {
  bool scale_gating = true;  // false admits every box at every level
};

/// Boxes must already be clipped to the image. A cell (i, j) is set for an
/// admitted box when its centre ((j + .5) s, (i + .5) s) lies inside the
/// box, edges inclusive. Background = 1 - max over foreground maps.
LabelMapStack generate_label_maps(const std::vector<BoxAnnotation>& boxes, const LevelSpec& level, int class_count,
                                  const LabelOptions& options = {});

/// Brute-force containment test over every cell centre of the level.
std::set<std::pair<int, int>> rasterize_oracle(const BoxAnnotation& box, const LevelSpec& level);

}  // namespace protodet
