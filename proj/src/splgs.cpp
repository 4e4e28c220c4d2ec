#include "protodet/splgs.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace protodet {

std::optional<BoxAnnotation> clip_box(const BoxAnnotation& box, int width, int height) {
  const double x0 = std::clamp(box.x0(), 0.0, static_cast<double>(width));
  const double x1 = std::clamp(box.x1(), 0.0, static_cast<double>(width));
  const double y0 = std::clamp(box.y0(), 0.0, static_cast<double>(height));
  const double y1 = std::clamp(box.y1(), 0.0, static_cast<double>(height));
  if (x1 <= x0 || y1 <= y0) return std::nullopt;
  return BoxAnnotation::from_corners(box.class_id, x0, y0, x1, y1);
}

SizeRange valid_range(const LevelSpec& level) { return {0.0, level.range_hi()}; }

bool admitted(const BoxAnnotation& box, const LevelSpec& level) {
  const auto r = valid_range(level);
  return r.contains(box.w) && r.contains(box.h);
}

namespace {

// Inclusive index span of cell centres (k + 0.5) * s inside [lo, hi].
std::pair<int, int> covered_cells(double lo, double hi, int stride, int cells) {
  const int first = std::max(0, static_cast<int>(std::ceil(lo / stride - 0.5)));
  const int last = std::min(cells - 1, static_cast<int>(std::floor(hi / stride - 0.5)));
  return {first, last};
}

}  // namespace

LabelMapStack generate_label_maps(const std::vector<BoxAnnotation>& boxes, const LevelSpec& level, int class_count,
                                  const LabelOptions& options) {
  if (class_count < 2) throw std::invalid_argument("generate_label_maps: need at least one foreground class");
  const int h = level.grid_h, w = level.grid_w;
  LabelMapStack out{level, Tensor(Shape{class_count, h, w})};
  for (const auto& box : boxes) {
    if (box.class_id < 0 || box.class_id >= class_count - 1) {
      throw std::out_of_range("generate_label_maps: class index " + std::to_string(box.class_id) +
                              " outside foreground range [0, " + std::to_string(class_count - 2) + "]");
    }
    if (options.scale_gating && !admitted(box, level)) continue;
    const auto [j0, j1] = covered_cells(box.x0(), box.x1(), level.stride, w);
    const auto [i0, i1] = covered_cells(box.y0(), box.y1(), level.stride, h);
    for (int i = i0; i <= i1; ++i)
      for (int j = j0; j <= j1; ++j) out.maps.at(box.class_id, i, j) = 1.0f;
  }
  const int bg = class_count - 1;
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      float any = 0.0f;
      for (int k = 0; k < bg; ++k) any = std::max(any, out.maps.at(k, i, j));
      out.maps.at(bg, i, j) = 1.0f - any;
    }
  }
  return out;
}

std::set<std::pair<int, int>> rasterize_oracle(const BoxAnnotation& box, const LevelSpec& level) {
  std::set<std::pair<int, int>> cells;
  for (int i = 0; i < level.grid_h; ++i) {
    for (int j = 0; j < level.grid_w; ++j) {
      const double x = (j + 0.5) * level.stride;
      const double y = (i + 0.5) * level.stride;
      if (x >= box.x0() && x <= box.x1() && y >= box.y0() && y <= box.y1()) cells.emplace(i, j);
    }
  }
  return cells;
}

}  // namespace protodet
