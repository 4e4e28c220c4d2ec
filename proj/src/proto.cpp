#include "protodet/proto.hpp"

#include "protodet/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace protodet {

std::vector<LevelSpec> make_levels(int image_h, int image_w, double tau1, double tau2) {
  if (image_h <= 0 || image_w <= 0 || image_h % 32 != 0 || image_w % 32 != 0) {
    throw std::invalid_argument("image size " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                                " must be positive and divisible by 32");
  }
  std::vector<LevelSpec> levels = {
      {1, 8, tau1, image_h / 8, image_w / 8},
      {2, 16, tau2, image_h / 16, image_w / 16},
      {3, 32, static_cast<double>(image_h) / 32.0, image_h / 32, image_w / 32},
  };
  validate_levels(levels);
  return levels;
}

void validate_levels(std::span<const LevelSpec> levels) {
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const auto& l = levels[i];
    if (!(l.tau > 0)) throw std::invalid_argument("level " + std::to_string(l.index) + ": tau must be positive");
    if (l.stride <= 0) throw std::invalid_argument("level " + std::to_string(l.index) + ": stride must be positive");
    if (i > 0) {
      if (l.stride <= levels[i - 1].stride) throw std::invalid_argument("strides must strictly increase");
      if (l.range_hi() < levels[i - 1].range_hi()) {
        throw std::invalid_argument("range upper bound tau*s must be non-decreasing across levels");
      }
    }
  }
}

Plane ScoreStack::plane(int k) const {
  const int h = scores.dim(1), w = scores.dim(2);
  Plane p(h, w);
  std::copy_n(scores.ptr() + static_cast<std::ptrdiff_t>(k) * h * w, h * w, p.data());
  return p;
}

ScoreStack response_map(const PrototypeSet& protos, const FeatureGrid& grid) {
  if (grid.values.rank() != 3) throw ShapeError("response_map: grid must be D x H x W");
  if (grid.channels() != protos.dim()) {
    throw ShapeError("response_map: grid has " + std::to_string(grid.channels()) +
                     " channels, prototypes have dimension " + std::to_string(protos.dim()));
  }
  if (protos.biases.size() != protos.prototypes.rows()) throw ShapeError("response_map: bias count mismatch");
  if (!(protos.level == grid.level)) throw std::invalid_argument("response_map: prototype and grid levels differ");
  const int c = protos.class_count(), h = grid.values.dim(1), w = grid.values.dim(2);
  Tensor scores(Shape{c, h, w});
  auto sm = scores.matrix(c);
  sm.noalias() = protos.prototypes * grid.values.matrix(grid.channels());
  sm.colwise() += protos.biases;
  sm = sm.unaryExpr([](float v) { return 1.0f / (1.0f + std::exp(-v)); });
  return {grid.level, std::move(scores)};
}

Plane resize_plane(const Plane& src, int height, int width, Interp mode) {
  if (height < 1 || width < 1) throw ShapeError("resize_plane: zero target dimension");
  if (src.rows() < 1 || src.cols() < 1) throw ShapeError("resize_plane: empty source");
  const int h = static_cast<int>(src.rows()), w = static_cast<int>(src.cols());
  Plane out(height, width);
  if (mode == Interp::Nearest) {
    for (int i = 0; i < height; ++i) {
      const int si = std::min(h - 1, static_cast<int>(std::floor((i + 0.5) * h / height)));
      for (int j = 0; j < width; ++j) {
        const int sj = std::min(w - 1, static_cast<int>(std::floor((j + 0.5) * w / width)));
        out(i, j) = src(si, sj);
      }
    }
    return out;
  }
  const auto ty = ag::resize_taps(h, height);
  const auto tx = ag::resize_taps(w, width);
  for (int i = 0; i < height; ++i) {
    const auto& a = ty[static_cast<std::size_t>(i)];
    const float fy = static_cast<float>(a.frac);
    for (int j = 0; j < width; ++j) {
      const auto& b = tx[static_cast<std::size_t>(j)];
      const float fx = static_cast<float>(b.frac);
      out(i, j) = (1 - fy) * ((1 - fx) * src(a.lo, b.lo) + fx * src(a.lo, b.hi)) +
                  fy * ((1 - fx) * src(a.hi, b.lo) + fx * src(a.hi, b.hi));
    }
  }
  return out;
}

SaliencyMap aggregate_saliency(std::span<const ScoreStack> stacks, int k, int height, int width, Interp mode) {
  if (stacks.empty()) throw std::invalid_argument("aggregate_saliency: no levels given");
  SaliencyMap out{k, Plane::Zero(height, width)};
  for (const auto& s : stacks) {
    if (s.scores.rank() != 3 || s.scores.numel() == 0) {
      throw std::invalid_argument("aggregate_saliency: missing score stack for level " + std::to_string(s.level.index));
    }
    if (k < 0 || k >= s.class_count()) throw std::out_of_range("aggregate_saliency: class index out of range");
    if (s.scores.dim(1) > height || s.scores.dim(2) > width) {
      throw ShapeError("aggregate_saliency: input size smaller than a grid");
    }
    out.values += resize_plane(s.plane(k), height, width, mode);
  }
  out.values /= static_cast<float>(stacks.size());
  return out;
}

}  // namespace protodet
