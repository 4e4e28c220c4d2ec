#include "protodet/data.hpp"
#include "protodet/splgs.hpp"

#include <doctest.h>

using namespace protodet;

namespace {

std::set<std::pair<int, int>> support(const LabelMapStack& s, int k) {
  std::set<std::pair<int, int>> out;
  for (int i = 0; i < s.level.grid_h; ++i)
    for (int j = 0; j < s.level.grid_w; ++j)
      if (s.maps.at(k, i, j) == 1.0f) out.insert({i, j});
  return out;
}

bool background_complement_holds(const LabelMapStack& s) {
  const int C = s.class_count();
  for (int i = 0; i < s.level.grid_h; ++i)
    for (int j = 0; j < s.level.grid_w; ++j) {
      float m = 0;
      for (int k = 0; k + 1 < C; ++k) {
        const float v = s.maps.at(k, i, j);
        if (v != 0.0f && v != 1.0f) return false;
        m = std::max(m, v);
      }
      if (s.maps.at(C - 1, i, j) != 1.0f - m) return false;
    }
  return true;
}

const LevelSpec kLevel64{1, 8, 4.0, 8, 8};

}  // namespace

TEST_SUITE("splgs") {

TEST_CASE("valid_range at the default settings") {
  const auto lv = make_levels(256, 256);
  CHECK(valid_range(lv[0]).hi == 32.0);
  CHECK(valid_range(lv[1]).hi == 128.0);
  CHECK(valid_range(lv[2]).hi == 256.0);
  CHECK(valid_range(lv[0]).lo == 0.0);
}

TEST_CASE("no boxes gives an all-background stack") {
  const auto s = generate_label_maps({}, kLevel64, 3);
  CHECK(support(s, 0).empty());
  CHECK(support(s, 1).empty());
  CHECK(support(s, 2).size() == 64);
}

TEST_CASE("16 px box covers a 2x2 block") {
  const auto s = generate_label_maps({BoxAnnotation{1, 32, 32, 16, 16}}, kLevel64, 3);
  const std::set<std::pair<int, int>> want{{3, 3}, {3, 4}, {4, 3}, {4, 4}};
  CHECK(support(s, 1) == want);
  CHECK(support(s, 0).empty());
  CHECK(support(s, 2).size() == 60);
}

TEST_CASE("box wider than the range is excluded") {
  const auto s = generate_label_maps({BoxAnnotation{1, 32, 32, 40, 16}}, kLevel64, 3);
  CHECK(support(s, 1).empty());
  CHECK(support(s, 2).size() == 64);

  LabelOptions off;
  off.scale_gating = false;
  CHECK_FALSE(support(generate_label_maps({BoxAnnotation{1, 32, 32, 40, 16}}, kLevel64, 3, off), 1).empty());
}

TEST_CASE("class index out of range is rejected") {
  CHECK_THROWS(generate_label_maps({BoxAnnotation{2, 32, 32, 16, 16}}, kLevel64, 3));
  CHECK_THROWS(generate_label_maps({BoxAnnotation{-1, 32, 32, 16, 16}}, kLevel64, 3));
}

TEST_CASE("overlapping classes both set, background cleared") {
  const auto s = generate_label_maps({BoxAnnotation{0, 28, 28, 16, 16}, BoxAnnotation{1, 36, 36, 16, 16}}, kLevel64, 3);
  CHECK(s.maps.at(0, 3, 3) == 1.0f);
  CHECK(s.maps.at(1, 3, 3) == 1.0f);
  CHECK(s.maps.at(2, 3, 3) == 0.0f);
  CHECK(background_complement_holds(s));
}

TEST_CASE("rasterize_oracle edge cases") {
  CHECK(rasterize_oracle(BoxAnnotation{0, 30, 30, 2, 2}, kLevel64).empty());
  CHECK(rasterize_oracle(BoxAnnotation{0, 32, 32, 64, 64}, kLevel64).size() == 64);
  // edges are inclusive: a box whose side lies on a cell centre
  CHECK(rasterize_oracle(BoxAnnotation::from_corners(0, 4, 4, 12, 12), kLevel64).size() == 4);
}

TEST_CASE("40 px box: rejected at stride 8, admitted at stride 16") {
  const auto lv = make_levels(256, 256);
  const BoxAnnotation b{0, 100, 100, 40, 40};
  CHECK_FALSE(admitted(b, lv[0]));
  CHECK(admitted(b, lv[1]));
}

TEST_CASE("gating follows tau * stride over random sizes") {
  const auto lv = make_levels(256, 256);
  Rng rng(77);
  for (int n = 0; n < 2000; ++n) {
    const double w = 1 + 255 * rng.uniform(), h = 1 + 255 * rng.uniform();
    const BoxAnnotation b{0, 128, 128, w, h};
    for (const auto& l : lv) CHECK(admitted(b, l) == (w <= l.tau * l.stride && h <= l.tau * l.stride));
  }
}

TEST_CASE("enlarging tau never removes an admitted box") {
  Rng rng(78);
  for (int n = 0; n < 500; ++n) {
    const BoxAnnotation b{0, 128, 128, 1 + 100 * rng.uniform(), 1 + 100 * rng.uniform()};
    LevelSpec l{1, 8, 1 + 8 * rng.uniform(), 32, 32};
    const bool before = admitted(b, l);
    l.tau += 3 * rng.uniform();
    if (before) CHECK(admitted(b, l));
  }
}

TEST_CASE("generator matches the per-cell oracle on random boxes") {
  const auto lv = make_levels(256, 256);
  Rng rng(1234);
  for (int n = 0; n < 1000; ++n) {
    const auto& level = lv[static_cast<std::size_t>(rng.uniform_int(0, 2))];
    const double x0 = 256 * rng.uniform(), y0 = 256 * rng.uniform();
    const double x1 = std::min(256.0, x0 + 1 + 200 * rng.uniform());
    const double y1 = std::min(256.0, y0 + 1 + 200 * rng.uniform());
    const auto box = BoxAnnotation::from_corners(rng.uniform_int(0, 2), x0, y0, x1, y1);
    const auto stack = generate_label_maps({box}, level, 4);
    const auto expect = admitted(box, level) ? rasterize_oracle(box, level) : std::set<std::pair<int, int>>{};
    CHECK(support(stack, box.class_id) == expect);
    CHECK(background_complement_holds(stack));
  }
}

TEST_CASE("clip_box") {
  const auto c = clip_box(BoxAnnotation{0, 0, 10, 20, 10}, 64, 64);
  REQUIRE(c);
  CHECK(c->x0() == 0.0);
  CHECK(c->w == 10.0);
  CHECK_FALSE(clip_box(BoxAnnotation{0, -20, 10, 10, 10}, 64, 64));
  CHECK(*clip_box(BoxAnnotation{1, 20, 20, 8, 8}, 64, 64) == BoxAnnotation{1, 20, 20, 8, 8});
}

}  // TEST_SUITE
