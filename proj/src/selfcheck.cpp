#include "protodet/selfcheck.hpp"

#include "protodet/data.hpp"
#include "protodet/detector.hpp"
#include "protodet/linalg.hpp"
#include "protodet/losses.hpp"
#include "protodet/metrics.hpp"
#include "protodet/splgs.hpp"

#include <algorithm>
#include <cmath>

namespace protodet {

namespace {

constexpr double kFdStep = 1e-4;

TensorD random_tensor(Rng& rng, Shape shape, double lo, double hi) {
  TensorD t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

TensorD normal_tensor(Rng& rng, Shape shape) {
  TensorD t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal();
  return t;
}

std::vector<BoxAnnotation> random_boxes(Rng& rng, int count, int classes, int image, int min_size, int max_size) {
  std::vector<BoxAnnotation> boxes;
  for (int n = 0; n < count; ++n) {
    const double w = rng.uniform(min_size, max_size), h = rng.uniform(min_size, max_size);
    const double x0 = rng.uniform(0, image - w), y0 = rng.uniform(0, image - h);
    boxes.push_back(BoxAnnotation::from_corners(rng.uniform_int(0, classes - 1), x0, y0, x0 + w, y0 + h));
  }
  return boxes;
}

CheckResult judge(std::string name, std::uint64_t seed, const ag::GradCheckResult& r, double tol) {
  return {std::move(name), seed, r.max_rel_error, tol, r.max_rel_error < tol};
}

// A spectrum entry sitting on |sigma - 1|'s kink has no derivative; move away.
bool near_unit_singular_value(const TensorD& P) {
  const auto f = linalg::svd(P.matrix(P.dim(0)));
  return ((f.sigma.array() - 1.0).abs() < 1e-3).any();
}

}  // namespace

std::vector<CheckResult> gradient_suite(int seeds, std::uint64_t base_seed, double tol) {
  std::vector<CheckResult> out;
  for (int s = 0; s < seeds; ++s) {
    const auto seed = mix_seed(base_seed, static_cast<std::uint64_t>(s));
    Rng rng(seed);

    {  // contrastive BCE on a small stack, directly on scores and through a sigmoid
      const LevelSpec level{1, 8, 4.0, 4, 4};
      const int C = 3;
      const auto labels = generate_label_maps(random_boxes(rng, 2, C - 1, 32, 4, 20), level, C);
      const auto scores = random_tensor(rng, {C, 4, 4}, 0.05, 0.95);
      ag::ScalarFn<double> direct = [&](ag::TapeD&, ag::VarD x) { return rpc_loss<double>(x, labels); };
      out.push_back(judge("rpc", seed, ag::finite_diff_check(direct, scores, kFdStep), tol));
      ag::ScalarFn<double> logits = [&](ag::TapeD&, ag::VarD x) { return rpc_loss<double>(ag::sigmoid(x), labels); };
      out.push_back(judge("rpc_logits", seed, ag::finite_diff_check(logits, normal_tensor(rng, {C, 4, 4}), kFdStep), tol));
    }

    for (const auto variant : {PrVariant::Svd, PrVariant::Cosine, PrVariant::Pop}) {
      TensorD P;
      do {
        P = normal_tensor(rng, {4, 16});
      } while (variant == PrVariant::Svd && near_unit_singular_value(P));
      ag::ScalarFn<double> fn = [&](ag::TapeD&, ag::VarD x) { return pr_loss<double>(x, variant); };
      out.push_back(judge("pr_" + to_string(variant), seed, ag::finite_diff_check(fn, P, kFdStep), tol));
    }

    {  // distribution focal loss, 8 bins of offset per side
      std::vector<double> targets;
      for (int r = 0; r < 6; ++r) targets.push_back(rng.uniform(0.0, 8.0));
      ag::ScalarFn<double> fn = [&](ag::TapeD&, ag::VarD x) { return dfl_loss<double>(x, targets); };
      out.push_back(judge("dfl", seed, ag::finite_diff_check(fn, normal_tensor(rng, {6, 9}), kFdStep), tol));
    }

    {  // composed objective of a small detector
      ModelConfig cfg;
      cfg.image_size = 64;
      cfg.dim = 8;
      cfg.stem = 4;
      cfg.width = 8;
      cfg.tau1 = 2;  // keeps ranges non-decreasing with tau3 = 64 / 32
      cfg.tau2 = 4;
      const auto params = ModelParams::initialize(cfg, seed);
      Image image(64, 64);
      for (std::size_t i = 0; i < image.rgb.numel(); ++i) image.rgb[i] = static_cast<float>(rng.uniform());
      const auto boxes = random_boxes(rng, 3, cfg.num_classes - 1, 64, 6, 40);
      for (const char* name : {"l1.proto.w", "l2.dist.w", "l3.cls2.w"}) {
        const std::size_t which = params.index_of(name);
        ag::ScalarFn<double> fn = [&](ag::TapeD& tape, ag::VarD x) {
          std::vector<ag::VarD> leaves;
          for (std::size_t i = 0; i < params.size(); ++i) {
            leaves.push_back(i == which ? x : tape.constant(params.tensor(i).cast<double>()));
          }
          const auto outputs = forward_with<double>(tape, params, leaves, tape.constant(image.rgb.cast<double>()));
          auto total = image_loss<double>(tape, outputs, boxes, LossToggles{}).total;
          for (const auto& term : prototype_losses<double>(params, leaves, PrVariant::Svd)) total = ag::add(total, term);
          return total;
        };
        out.push_back(judge(std::string("total:") + name, seed,
                            ag::finite_diff_check(fn, params.tensor(which).cast<double>(), kFdStep), tol));
      }
    }
  }
  return out;
}

std::vector<CheckResult> oracle_suite(int cases, std::uint64_t base_seed) {
  std::vector<CheckResult> out;
  Rng rng(base_seed);
  const auto levels = make_levels(256, 256);
  int raster_mismatch = 0, complement_mismatch = 0;
  for (int n = 0; n < cases; ++n) {
    const auto& level = levels[static_cast<std::size_t>(rng.uniform_int(0, 2))];
    const auto box = random_boxes(rng, 1, 3, 256, 1, 256).front();
    const auto stack = generate_label_maps({box}, level, 4);
    const auto cells = rasterize_oracle(box, level);
    const bool gated = admitted(box, level);
    for (int i = 0; i < level.grid_h; ++i) {
      for (int j = 0; j < level.grid_w; ++j) {
        const float want = gated && cells.contains({i, j}) ? 1.0f : 0.0f;
        float fg_max = 0;
        for (int k = 0; k < 3; ++k) {
          const float expect = k == box.class_id ? want : 0.0f;
          if (stack.maps.at(k, i, j) != expect) ++raster_mismatch;
          fg_max = std::max(fg_max, stack.maps.at(k, i, j));
        }
        if (stack.maps.at(3, i, j) != 1.0f - fg_max) ++complement_mismatch;
      }
    }
  }
  out.push_back({"label_maps_vs_rasterizer", base_seed, static_cast<double>(raster_mismatch), 0, raster_mismatch == 0});
  out.push_back({"background_complement", base_seed, static_cast<double>(complement_mismatch), 0,
                 complement_mismatch == 0});

  double worst = 0;
  for (int n = 0; n < cases; ++n) {
    const int h = rng.uniform_int(2, 16), w = rng.uniform_int(2, 16);
    Plane s(h, w), m(h, w);
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      // coarse values force ties
      s.data()[i] = static_cast<float>(rng.uniform_int(0, 9)) / 9.0f;
      m.data()[i] = rng.uniform() < 0.3 ? 1.0f : 0.0f;
    }
    const auto fast = auc_ft(s, m);
    const auto slow = auc_pairwise(s, m);
    if (fast.has_value() != slow.has_value()) {
      worst = 1;
      continue;
    }
    if (fast) worst = std::max(worst, std::abs(*fast - *slow));
  }
  out.push_back({"auc_vs_pairwise", base_seed, worst, 1e-9, worst <= 1e-9});
  return out;
}

}  // namespace protodet
