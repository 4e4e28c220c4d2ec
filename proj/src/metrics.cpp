#include "protodet/metrics.hpp"

#include "protodet/losses.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace protodet {

GroundTruthMask make_mask(const std::vector<BoxAnnotation>& boxes, int class_id, int height, int width) {
  GroundTruthMask m{class_id, Plane::Zero(height, width)};
  for (const auto& b : boxes) {
    if (b.class_id != class_id) continue;
    const int c0 = std::max(0, static_cast<int>(std::ceil(b.x0() - 0.5)));
    const int c1 = std::min(width - 1, static_cast<int>(std::floor(b.x1() - 0.5)));
    const int r0 = std::max(0, static_cast<int>(std::ceil(b.y0() - 0.5)));
    const int r1 = std::min(height - 1, static_cast<int>(std::floor(b.y1() - 0.5)));
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c) m.values(r, c) = 1.0f;
  }
  return m;
}

namespace {
void check_same_size(const Plane& a, const Plane& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument(std::string(what) + ": size mismatch");
}
}  // namespace

std::optional<double> auc_ft(const Plane& saliency, const Plane& mask) {
  check_same_size(saliency, mask, "auc_ft");
  const Eigen::Index n = saliency.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const float* s = saliency.data();
  const float* m = mask.data();
  std::sort(order.begin(), order.end(), [s](Eigen::Index a, Eigen::Index b) { return s[a] < s[b]; });

  double rank_sum_fg = 0;
  double n_fg = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && s[order[j]] == s[order[i]]) ++j;
    // ranks i+1 .. j share their average
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t k = i; k < j; ++k) {
      if (m[order[k]] > 0.5f) {
        rank_sum_fg += avg_rank;
        n_fg += 1;
      }
    }
    i = j;
  }
  const double n_bg = static_cast<double>(n) - n_fg;
  if (n_fg == 0 || n_bg == 0) return std::nullopt;
  return (rank_sum_fg - n_fg * (n_fg + 1) / 2) / (n_fg * n_bg);
}

std::optional<double> auc_pairwise(const Plane& saliency, const Plane& mask) {
  check_same_size(saliency, mask, "auc_pairwise");
  std::vector<float> fg, bg;
  for (Eigen::Index i = 0; i < saliency.size(); ++i) (mask.data()[i] > 0.5f ? fg : bg).push_back(saliency.data()[i]);
  if (fg.empty() || bg.empty()) return std::nullopt;
  double wins = 0;
  for (float f : fg)
    for (float b : bg) wins += f > b ? 1.0 : (f == b ? 0.5 : 0.0);
  return wins / (static_cast<double>(fg.size()) * static_cast<double>(bg.size()));
}

double mean_abs_cosine(const RowMatrixXd& prototypes) { return pr_loss_cosine(prototypes); }

double sparsity(std::span<const RowMatrixXd> levels) {
  if (levels.empty()) throw std::invalid_argument("sparsity: no levels");
  double acc = 0;
  for (const auto& P : levels) acc += mean_abs_cosine(P);
  return 1.0 - acc / static_cast<double>(levels.size());
}

// ---- mAP --------------------------------------------------------------------

SizeBucket bucket_of(double area, const SizeBuckets& buckets) {
  if (area < buckets.small_max_area) return SizeBucket::Small;
  if (area < buckets.medium_max_area) return SizeBucket::Medium;
  return SizeBucket::Large;
}

namespace {

double average_precision(std::vector<std::pair<double, bool>> scored, int num_gt, ApInterpolation interp) {
  // scored: (confidence, is_tp) for every counted detection
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<double> recall, precision;
  double tp = 0, fp = 0;
  for (const auto& [conf, hit] : scored) {
    (hit ? tp : fp) += 1;
    recall.push_back(tp / num_gt);
    precision.push_back(tp / (tp + fp));
  }
  // precision envelope: max precision at any recall >= r
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  if (interp == ApInterpolation::Points101) {
    double ap = 0;
    std::size_t k = 0;
    for (int t = 0; t <= 100; ++t) {
      const double r = t / 100.0;
      while (k < recall.size() && recall[k] < r - 1e-12) ++k;
      if (k < recall.size()) ap += precision[k];
    }
    return ap / 101.0;
  }
  double ap = 0, prev_recall = 0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

}  // namespace

MapResult map50(const std::vector<Detection>& detections, const std::vector<std::vector<BoxAnnotation>>& ground_truth,
                int num_classes, SizeBucket bucket, const SizeBuckets& buckets, ApInterpolation interp) {
  MapResult result;
  result.per_class.assign(static_cast<std::size_t>(num_classes), std::nullopt);
  auto in_bucket = [&](const BoxAnnotation& b) { return bucket == SizeBucket::All || bucket_of(b.area(), buckets) == bucket; };

  double sum = 0;
  int counted = 0;
  for (int k = 0; k < num_classes; ++k) {
    int num_gt = 0;
    for (const auto& img : ground_truth)
      for (const auto& b : img)
        if (b.class_id == k && in_bucket(b)) ++num_gt;
    if (num_gt == 0) continue;

    std::vector<const Detection*> dets;
    for (const auto& d : detections)
      if (d.class_id == k) dets.push_back(&d);
    std::stable_sort(dets.begin(), dets.end(), [](const Detection* a, const Detection* b) { return a->score > b->score; });

    std::vector<std::vector<bool>> matched(ground_truth.size());
    for (std::size_t i = 0; i < ground_truth.size(); ++i) matched[i].assign(ground_truth[i].size(), false);

    std::vector<std::pair<double, bool>> scored;
    for (const Detection* d : dets) {
      if (d->image < 0 || static_cast<std::size_t>(d->image) >= ground_truth.size()) {
        throw std::out_of_range("map50: detection refers to unknown image " + std::to_string(d->image));
      }
      const auto& gts = ground_truth[static_cast<std::size_t>(d->image)];
      auto& used = matched[static_cast<std::size_t>(d->image)];
      int best = -1;
      double best_iou = 0.5;
      bool hits_ignored = false;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (gts[g].class_id != k) continue;
        const double iou = box_iou(d->box, gts[g]);
        if (iou < 0.5) continue;
        if (!in_bucket(gts[g])) {
          hits_ignored = true;
        } else if (!used[g] && iou >= best_iou) {
          best = static_cast<int>(g);
          best_iou = iou;
        }
      }
      if (best >= 0) {
        used[static_cast<std::size_t>(best)] = true;
        scored.emplace_back(d->score, true);
        continue;
      }
      if (hits_ignored) continue;
      if (!in_bucket(d->box)) continue;
      scored.emplace_back(d->score, false);
    }
    const double ap = average_precision(std::move(scored), num_gt, interp);
    result.per_class[static_cast<std::size_t>(k)] = ap;
    sum += ap;
    ++counted;
  }
  result.map = counted > 0 ? sum / counted : 0.0;
  return result;
}

// ---- reporting --------------------------------------------------------------

std::string to_json(const MetricReport& r) {
  nlohmann::json j;
  j["disc"] = r.disc;
  j["auc_ft"] = r.auc_ft;
  j["spar"] = r.spar;
  j["spar_percent"] = 100.0 * r.spar;
  j["map50"] = r.map50;
  j["map_s"] = r.map_s;
  j["map_m"] = r.map_m;
  j["map_l"] = r.map_l;
  j["n_pairs"] = r.n_pairs;
  j["auc_pairs"] = r.auc_pairs;
  j["auc_skipped"] = r.auc_skipped;
  j["images"] = r.images;
  j["level"] = r.level ? nlohmann::json(*r.level) : nlohmann::json(nullptr);
  j["classes"] = nlohmann::json::array();
  for (const auto& c : r.classes) {
    j["classes"].push_back({{"name", c.name},
                            {"ap50", c.ap50 ? nlohmann::json(*c.ap50) : nlohmann::json(nullptr)},
                            {"disc", c.disc},
                            {"auc_ft", c.auc_ft},
                            {"disc_count", c.disc_count},
                            {"auc_count", c.auc_count}});
  }
  return j.dump(2);
}

MetricReport metric_report_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  MetricReport r;
  r.disc = j.at("disc");
  r.auc_ft = j.at("auc_ft");
  r.spar = j.at("spar");
  r.map50 = j.at("map50");
  r.map_s = j.at("map_s");
  r.map_m = j.at("map_m");
  r.map_l = j.at("map_l");
  r.n_pairs = j.at("n_pairs");
  r.auc_pairs = j.at("auc_pairs");
  r.auc_skipped = j.at("auc_skipped");
  r.images = j.at("images");
  if (!j.at("level").is_null()) r.level = j.at("level").get<int>();
  for (const auto& c : j.at("classes")) {
    ClassMetrics m;
    m.name = c.at("name");
    if (!c.at("ap50").is_null()) m.ap50 = c.at("ap50").get<double>();
    m.disc = c.at("disc");
    m.auc_ft = c.at("auc_ft");
    m.disc_count = c.at("disc_count");
    m.auc_count = c.at("auc_count");
    r.classes.push_back(m);
  }
  return r;
}

std::string to_csv(const MetricReport& r) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(1);
  os << "class,AP50,Disc.,AUC_ft\n";
  for (const auto& c : r.classes) {
    os << c.name << ',';
    if (c.ap50) os << 100.0 * *c.ap50;
    os << ',' << 100.0 * c.disc << ',' << 100.0 * c.auc_ft << '\n';
  }
  os << "all," << 100.0 * r.map50 << ',' << 100.0 * r.disc << ',' << 100.0 * r.auc_ft << '\n';
  os << "\nmAP,Disc.,Spar.,AUC_ft,mAP_s,mAP_m,mAP_l\n";
  os << 100.0 * r.map50 << ',' << 100.0 * r.disc << ',' << 100.0 * r.spar << ',' << 100.0 * r.auc_ft << ','
     << 100.0 * r.map_s << ',' << 100.0 * r.map_m << ',' << 100.0 * r.map_l << '\n';
  return os.str();
}

}  // namespace protodet
