#include "protodet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace protodet {

// ---- config / params ----------------------------------------------------------

void ModelConfig::validate() const {
  if (image_size <= 0 || image_size % 32 != 0) {
    throw std::invalid_argument("image size must be a positive multiple of 32, got " + std::to_string(image_size));
  }
  if (num_classes < 2) throw std::invalid_argument("need at least one foreground class plus background");
  if (dim < 1 || stem < 1 || width < 1) throw std::invalid_argument("channel counts must be positive");
  for (const auto& level : levels()) dist_bins(level);
}

int dist_bins(const LevelSpec& level) {
  if (level.tau < 1 || level.tau != std::floor(level.tau)) {
    throw std::invalid_argument("level " + std::to_string(level.index) + ": tau must be an integer >= 1 for DFL bins");
  }
  return static_cast<int>(level.tau) + 1;
}

namespace {
const char* kBackbone[] = {"stem", "c2", "c3", "c4", "c5"};
std::string level_prefix(int l) { return "l" + std::to_string(l) + "."; }
}  // namespace

ModelParams::ModelParams(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const int D = config_.dim, W = config_.width, C = config_.num_classes;
  add("stem.w", {config_.stem, 3, 3, 3});
  add("stem.b", {config_.stem});
  add("c2.w", {W, config_.stem, 3, 3});
  add("c2.b", {W});
  for (const char* name : {"c3", "c4", "c5"}) {
    add(std::string(name) + ".w", {W, W, 3, 3});
    add(std::string(name) + ".b", {W});
  }
  for (const auto& level : config_.levels()) {
    const auto p = level_prefix(level.index);
    add(p + "cls1.w", {D, W, 3, 3});
    add(p + "cls1.b", {D});
    add(p + "cls2.w", {D, D, 3, 3});
    add(p + "cls2.b", {D});
    add(p + "reg1.w", {D, W, 3, 3});
    add(p + "reg1.b", {D});
    add(p + "reg2.w", {D, D, 3, 3});
    add(p + "reg2.b", {D});
    add(p + "proto.w", {C, D});
    add(p + "proto.b", {C});
    add(p + "dist.w", {4 * dist_bins(level), D});
    add(p + "dist.b", {4 * dist_bins(level)});
  }
}

void ModelParams::add(std::string name, Shape shape) { tensors_.emplace_back(std::move(name), Tensor(std::move(shape))); }

std::size_t ModelParams::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < tensors_.size(); ++i)
    if (tensors_[i].first == name) return i;
  throw std::out_of_range("no parameter named " + name);
}

Tensor& ModelParams::operator[](const std::string& name) { return tensors_[index_of(name)].second; }
const Tensor& ModelParams::operator[](const std::string& name) const { return tensors_[index_of(name)].second; }

bool ModelParams::decays(std::size_t i) const { return tensors_.at(i).second.rank() > 1; }

ModelParams ModelParams::initialize(const ModelConfig& config, std::uint64_t seed) {
  ModelParams p(config);
  Rng rng(seed);
  constexpr double kPrior = 0.1;
  const double prior_bias = std::log(kPrior / (1 - kPrior));
  for (auto& [name, t] : p.tensors_) {
    if (t.rank() == 4) {
      const double std_dev = std::sqrt(2.0 / (t.dim(1) * 9));
      for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(std_dev * rng.normal());
    } else if (t.rank() == 2) {
      const double std_dev = std::sqrt(1.0 / t.dim(1));
      for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(std_dev * rng.normal());
    } else if (name.ends_with("proto.b")) {
      for (std::size_t k = 0; k < t.numel(); ++k) {
        t[k] = static_cast<float>(k + 1 == t.numel() ? -prior_bias : prior_bias);
      }
    }
  }
  return p;
}

std::vector<RowMatrixXd> ModelParams::prototypes() const {
  std::vector<RowMatrixXd> out;
  for (const auto& level : config_.levels()) {
    const auto& t = (*this)[level_prefix(level.index) + "proto.w"];
    out.push_back(t.matrix(t.dim(0)).cast<double>());
  }
  return out;
}

// ---- forward ----------------------------------------------------------------

template <typename S>
std::vector<LevelOutputs<S>> forward_with(ag::BasicTape<S>& tape, const ModelParams& params,
                                          const std::vector<ag::BasicVar<S>>& leaves, ag::BasicVar<S> image) {
  (void)tape;
  const auto& cfg = params.config();
  const Shape& shape = image.shape();
  if (shape.size() != 3 || shape[0] != 3 || shape[1] != cfg.image_size || shape[2] != cfg.image_size) {
    throw ShapeError("forward: expected a 3 x " + std::to_string(cfg.image_size) + " x " +
                     std::to_string(cfg.image_size) + " image, got " + shape_str(shape));
  }
  if (leaves.size() != params.size()) throw std::invalid_argument("forward: parameter count mismatch");
  auto P = [&](const std::string& name) { return leaves[params.index_of(name)]; };
  auto conv = [&](ag::BasicVar<S> x, const std::string& name, int stride) {
    return ag::relu(ag::conv3x3(x, P(name + ".w"), P(name + ".b"), stride));
  };

  ag::BasicVar<S> x = image;
  std::vector<ag::BasicVar<S>> stages;
  for (const char* name : kBackbone) {
    x = conv(x, name, 2);
    stages.push_back(x);
  }
  // stages: strides 2, 4, 8, 16, 32
  const auto p5 = stages[4];
  const auto p4 = ag::add(stages[3], ag::upsample2x(p5));
  const auto p3 = ag::add(stages[2], ag::upsample2x(p4));
  const ag::BasicVar<S> pyramid[3] = {p3, p4, p5};

  std::vector<LevelOutputs<S>> out;
  for (const auto& level : cfg.levels()) {
    const auto pre = level_prefix(level.index);
    const auto feat = pyramid[level.index - 1];
    LevelOutputs<S> o;
    o.level = level;
    o.cls_feat = conv(conv(feat, pre + "cls1", 1), pre + "cls2", 1);
    o.reg_feat = conv(conv(feat, pre + "reg1", 1), pre + "reg2", 1);
    o.proto_w = P(pre + "proto.w");
    o.proto_b = P(pre + "proto.b");
    o.scores = ag::sigmoid(ag::conv1x1(o.cls_feat, o.proto_w, o.proto_b));
    o.dist_logits = ag::conv1x1(o.reg_feat, P(pre + "dist.w"), P(pre + "dist.b"));
    out.push_back(o);
  }
  return out;
}

template <typename S>
ForwardResult<S> forward(ag::BasicTape<S>& tape, const ModelParams& params, const Image& image, bool requires_grad) {
  ForwardResult<S> r;
  for (std::size_t i = 0; i < params.size(); ++i) {
    r.params.push_back(tape.leaf(params.tensor(i).template cast<S>(), requires_grad));
  }
  r.levels = forward_with(tape, params, r.params, tape.constant(image.rgb.template cast<S>()));
  return r;
}

// ---- targets ----------------------------------------------------------------

int cell_of(double coord, int stride, int cells) {
  const int c = static_cast<int>(std::ceil(coord / stride)) - 1;
  return std::clamp(c, 0, cells - 1);
}

std::vector<std::vector<Assignment>> assign_targets(const std::vector<BoxAnnotation>& boxes,
                                                    std::span<const LevelSpec> levels) {
  std::vector<std::vector<Assignment>> out(levels.size());
  for (std::size_t l = 0; l < levels.size(); ++l) {
    const auto& level = levels[l];
    const double s = level.stride;
    std::vector<int> owner(static_cast<std::size_t>(level.grid_h * level.grid_w), -1);
    for (std::size_t b = 0; b < boxes.size(); ++b) {
      const auto& box = boxes[b];
      if (!admitted(box, level)) continue;
      Assignment a;
      a.row = cell_of(box.cy, level.stride, level.grid_h);
      a.col = cell_of(box.cx, level.stride, level.grid_w);
      a.class_id = box.class_id;
      a.box = b;
      const double px = (a.col + 0.5) * s, py = (a.row + 0.5) * s;
      const double raw[4] = {px - box.x0(), py - box.y0(), box.x1() - px, box.y1() - py};
      for (int k = 0; k < 4; ++k) a.ltrb[k] = std::clamp(raw[k] / s, 0.0, level.tau);

      int& slot = owner[static_cast<std::size_t>(a.row * level.grid_w + a.col)];
      if (slot >= 0) {
        auto& prev = out[l][static_cast<std::size_t>(slot)];
        if (boxes[prev.box].area() <= box.area()) continue;
        prev = a;
        continue;
      }
      slot = static_cast<int>(out[l].size());
      out[l].push_back(a);
    }
  }
  return out;
}

std::vector<ClsTargets> build_cls_targets(const std::vector<BoxAnnotation>& boxes,
                                          const std::vector<std::vector<Assignment>>& assignments,
                                          std::span<const LevelSpec> levels, int num_classes) {
  if (assignments.size() != levels.size()) throw std::invalid_argument("build_cls_targets: level count mismatch");
  const int C = num_classes;
  std::vector<ClsTargets> out(levels.size());
  std::vector<std::vector<char>> negative(levels.size());
  int total_pos = 0, total_neg = 0;
  for (std::size_t l = 0; l < levels.size(); ++l) {
    const auto& level = levels[l];
    const int h = level.grid_h, w = level.grid_w;
    auto& neg = negative[l];
    neg.assign(static_cast<std::size_t>(h * w), 1);
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        const double px = (j + 0.5) * level.stride, py = (i + 0.5) * level.stride;
        for (const auto& b : boxes) {
          if (px >= b.x0() && px <= b.x1() && py >= b.y0() && py <= b.y1()) {
            neg[static_cast<std::size_t>(i * w + j)] = 0;
            break;
          }
        }
      }
    }
    for (const auto& a : assignments[l]) neg[static_cast<std::size_t>(a.row * w + a.col)] = 0;
    total_neg += static_cast<int>(std::count(neg.begin(), neg.end(), 1));
    total_pos += static_cast<int>(assignments[l].size());
  }
  const float wp = total_pos > 0 ? 1.0f / static_cast<float>(total_pos * C) : 0.0f;
  const float wn = total_neg > 0 ? 1.0f / static_cast<float>(total_neg * C) : 0.0f;
  for (std::size_t l = 0; l < levels.size(); ++l) {
    const auto& level = levels[l];
    const int h = level.grid_h, w = level.grid_w;
    auto& t = out[l];
    t.target = Tensor({C, h, w});
    t.weight = Tensor({C, h, w});
    t.positives = static_cast<int>(assignments[l].size());
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        if (!negative[l][static_cast<std::size_t>(i * w + j)]) continue;
        for (int k = 0; k < C; ++k) t.weight.at(k, i, j) = wn;
        t.target.at(C - 1, i, j) = 1.0f;
      }
    }
    for (const auto& a : assignments[l]) {
      for (int k = 0; k < C; ++k) t.weight.at(k, a.row, a.col) = wp;
      t.target.at(a.class_id, a.row, a.col) = 1.0f;
    }
  }
  return out;
}

// ---- losses -----------------------------------------------------------------

template <typename S>
ImageLoss<S> image_loss(ag::BasicTape<S>& tape, const std::vector<LevelOutputs<S>>& outputs,
                        const std::vector<BoxAnnotation>& boxes, const LossToggles& toggles) {
  std::vector<LevelSpec> levels;
  std::vector<ag::BasicVar<S>> scores;
  for (const auto& o : outputs) {
    levels.push_back(o.level);
    scores.push_back(o.scores);
  }
  const int C = outputs.at(0).scores.shape()[0];
  const auto assignments = assign_targets(boxes, levels);
  const auto targets = build_cls_targets(boxes, assignments, levels, C);

  ImageLoss<S> r;
  r.cls = cls_loss<S>(scores, targets);

  std::size_t total_pos = 0;
  for (const auto& a : assignments) total_pos += a.size();
  ag::BasicVar<S> reg{}, dfl{};
  for (std::size_t l = 0; l < outputs.size() && total_pos > 0; ++l) {
    const auto& assigned = assignments[l];
    if (assigned.empty()) continue;
    const int bins = dist_bins(levels[l]);
    const int n = static_cast<int>(assigned.size());
    std::vector<std::pair<int, int>> cells;
    std::vector<double> side_targets;
    BasicTensor<S> ltrb({n, 4});
    for (int r_ = 0; r_ < n; ++r_) {
      const auto& a = assigned[static_cast<std::size_t>(r_)];
      cells.emplace_back(a.row, a.col);
      for (int k = 0; k < 4; ++k) {
        side_targets.push_back(a.ltrb[k]);
        ltrb[static_cast<std::size_t>(r_ * 4 + k)] = static_cast<S>(a.ltrb[k]);
      }
    }
    const auto logits = ag::reshape(ag::gather_cells(outputs[l].dist_logits, cells), {4 * n, bins});
    BasicTensor<S> bin_index({bins, 1});
    for (int b = 0; b < bins; ++b) bin_index[static_cast<std::size_t>(b)] = static_cast<S>(b);
    const auto expected = ag::matmul(ag::softmax(logits), tape.constant(bin_index));
    const auto pred = ag::reshape(expected, {n, 4});

    const S share = static_cast<S>(n) / static_cast<S>(total_pos);
    const auto reg_l = ag::scale(ag::iou_loss(pred, ltrb), share);
    const auto dfl_l = ag::scale(dfl_loss<S>(logits, side_targets), share);
    reg = reg.valid() ? ag::add(reg, reg_l) : reg_l;
    dfl = dfl.valid() ? ag::add(dfl, dfl_l) : dfl_l;
  }
  const auto zero = [&] { return tape.constant(BasicTensor<S>::scalar(S(0))); };
  r.reg = reg.valid() ? reg : zero();
  r.dfl = dfl.valid() ? dfl : zero();

  r.total = ag::add(ag::add(r.cls, r.reg), r.dfl);
  for (const auto& o : outputs) {
    if (!toggles.rpc) {
      r.rpc.push_back(zero());
      continue;
    }
    const auto labels = generate_label_maps(boxes, o.level, C, LabelOptions{toggles.splgs});
    auto response = o.scores;
    if (toggles.rpc_stop_grad) {
      // same prototype layer, but the feature map is cut from the graph
      response = ag::sigmoid(ag::conv1x1(ag::detach(o.cls_feat), o.proto_w, o.proto_b));
    }
    const auto term = rpc_loss<S>(response, labels);
    r.rpc.push_back(term);
    r.total = ag::add(r.total, term);
  }
  return r;
}

template <typename S>
std::vector<ag::BasicVar<S>> prototype_losses(const ModelParams& params, const std::vector<ag::BasicVar<S>>& leaves,
                                              PrVariant variant) {
  std::vector<ag::BasicVar<S>> out;
  if (variant == PrVariant::Off) return out;
  for (const auto& level : params.config().levels()) {
    out.push_back(pr_loss<S>(leaves[params.index_of(level_prefix(level.index) + "proto.w")], variant));
  }
  return out;
}

// ---- inference ----------------------------------------------------------------

std::vector<LevelPrediction> predict(const ModelParams& params, const Image& image) {
  ag::Tape tape;
  const auto r = forward<float>(tape, params, image, false);
  std::vector<LevelPrediction> out;
  for (const auto& o : r.levels) out.push_back({ScoreStack{o.level, o.scores.value()}, o.dist_logits.value()});
  return out;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.class_id < b.class_id;
  });
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.class_id == d.class_id && k.image == d.image && box_iou(k.box, d.box) > iou_threshold;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

std::vector<Detection> decode(const std::vector<LevelPrediction>& levels, int image_index,
                              const DecodeOptions& options) {
  if (!(options.score_threshold > 0 && options.score_threshold < 1) || !(options.nms_iou > 0 && options.nms_iou < 1)) {
    throw std::invalid_argument("decode: thresholds must lie in (0, 1)");
  }
  std::vector<Detection> candidates;
  for (const auto& lp : levels) {
    const auto& level = lp.scores.level;
    if (options.level && *options.level != level.index) continue;
    const int C = lp.scores.class_count();
    const int h = level.grid_h, w = level.grid_w;
    const int bins = dist_bins(level);
    std::vector<double> logits(static_cast<std::size_t>(bins));
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        int best = 0;
        for (int k = 1; k < C - 1; ++k)
          if (lp.scores.scores.at(k, i, j) > lp.scores.scores.at(best, i, j)) best = k;
        const double score = lp.scores.scores.at(best, i, j);
        if (score < options.score_threshold) continue;
        double dist[4];
        for (int side = 0; side < 4; ++side) {
          for (int b = 0; b < bins; ++b) logits[static_cast<std::size_t>(b)] = lp.dist_logits.at(side * bins + b, i, j);
          dist[side] = dfl_decode(logits) * level.stride;
        }
        const double px = (j + 0.5) * level.stride, py = (i + 0.5) * level.stride;
        const auto box = BoxAnnotation::from_corners(best, px - dist[0], py - dist[1], px + dist[2], py + dist[3]);
        if (box.w <= 0 || box.h <= 0) continue;
        candidates.push_back({image_index, best, score, box});
      }
    }
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (static_cast<int>(candidates.size()) > options.max_candidates) {
    candidates.resize(static_cast<std::size_t>(options.max_candidates));
  }
  return nms(std::move(candidates), options.nms_iou);
}

MetricReport evaluate(const ModelParams& params, const std::vector<const DatasetSample*>& samples,
                      const std::vector<std::string>& class_names, const EvalOptions& options) {
  const int C = params.config().num_classes;
  const int F = C - 1;
  if (static_cast<int>(class_names.size()) != F) {
    throw std::invalid_argument("evaluate: checkpoint has " + std::to_string(F) + " foreground classes, dataset has " +
                                std::to_string(class_names.size()));
  }
  MetricReport report;
  report.level = options.decode.level;
  report.images = static_cast<int>(samples.size());
  report.classes.resize(static_cast<std::size_t>(F));
  for (int k = 0; k < F; ++k) report.classes[static_cast<std::size_t>(k)].name = class_names[static_cast<std::size_t>(k)];

  std::vector<Detection> detections;
  std::vector<std::vector<BoxAnnotation>> gts;
  double disc_sum = 0, auc_sum = 0;
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const auto& sample = *samples[n];
    const auto preds = predict(params, sample.image);
    const auto dets = decode(preds, static_cast<int>(n), options.decode);
    detections.insert(detections.end(), dets.begin(), dets.end());
    gts.push_back(sample.boxes);

    std::vector<ScoreStack> stacks;
    for (const auto& p : preds)
      if (!options.decode.level || *options.decode.level == p.scores.level.index) stacks.push_back(p.scores);
    const int H = sample.image.height(), W = sample.image.width();
    for (int k = 0; k < F; ++k) {
      const bool present = std::any_of(sample.boxes.begin(), sample.boxes.end(),
                                       [k](const BoxAnnotation& b) { return b.class_id == k; });
      if (!present) continue;
      const auto sal = aggregate_saliency(stacks, k, H, W, options.saliency_interp);
      const auto mask = make_mask(sample.boxes, k, H, W);
      auto& cm = report.classes[static_cast<std::size_t>(k)];
      const double d = discriminability(sal.values, mask.values);
      disc_sum += d;
      cm.disc += d;
      ++cm.disc_count;
      ++report.n_pairs;
      if (const auto auc = auc_ft(sal.values, mask.values)) {
        auc_sum += *auc;
        cm.auc_ft += *auc;
        ++cm.auc_count;
        ++report.auc_pairs;
      } else {
        ++report.auc_skipped;
      }
    }
  }
  for (auto& cm : report.classes) {
    if (cm.disc_count > 0) cm.disc /= cm.disc_count;
    if (cm.auc_count > 0) cm.auc_ft /= cm.auc_count;
  }
  report.disc = report.n_pairs > 0 ? disc_sum / report.n_pairs : 0.0;
  report.auc_ft = report.auc_pairs > 0 ? auc_sum / report.auc_pairs : 0.0;
  report.spar = sparsity(params.prototypes());

  const auto all = map50(detections, gts, F, SizeBucket::All, options.buckets, options.interp);
  report.map50 = all.map;
  for (int k = 0; k < F; ++k) report.classes[static_cast<std::size_t>(k)].ap50 = all.per_class[static_cast<std::size_t>(k)];
  report.map_s = map50(detections, gts, F, SizeBucket::Small, options.buckets, options.interp).map;
  report.map_m = map50(detections, gts, F, SizeBucket::Medium, options.buckets, options.interp).map;
  report.map_l = map50(detections, gts, F, SizeBucket::Large, options.buckets, options.interp).map;
  return report;
}

#define PROTODET_INSTANTIATE(S)                                                                                     \
  template ForwardResult<S> forward<S>(ag::BasicTape<S>&, const ModelParams&, const Image&, bool);                 \
  template std::vector<LevelOutputs<S>> forward_with<S>(ag::BasicTape<S>&, const ModelParams&,                      \
                                                        const std::vector<ag::BasicVar<S>>&, ag::BasicVar<S>);      \
  template ImageLoss<S> image_loss<S>(ag::BasicTape<S>&, const std::vector<LevelOutputs<S>>&,                      \
                                      const std::vector<BoxAnnotation>&, const LossToggles&);                       \
  template std::vector<ag::BasicVar<S>> prototype_losses<S>(const ModelParams&, const std::vector<ag::BasicVar<S>>&, \
                                                            PrVariant);

PROTODET_INSTANTIATE(float)
PROTODET_INSTANTIATE(double)

#undef PROTODET_INSTANTIATE

}  // namespace protodet
