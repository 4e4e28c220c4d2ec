// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero when any criterion fails.

#include "protodet/cli.hpp"
#include "protodet/data.hpp"
#include "protodet/linalg.hpp"
#include "protodet/losses.hpp"
#include "protodet/metrics.hpp"
#include "protodet/selfcheck.hpp"
#include "protodet/splgs.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

using namespace protodet;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

const fs::path kSource = PROTODET_SOURCE_DIR;
const fs::path kWork = fs::path(PROTODET_BINARY_DIR) / "acceptance_work";

int cli_run(std::vector<std::string> args, std::string* captured = nullptr) {
  args.insert(args.begin(), "protodet");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  if (captured) *captured = out.str();
  if (code != 0) std::cerr << "protodet " << args.at(1) << " failed (" << code << "): " << err.str();
  return code;
}

// ---- 1 ----------------------------------------------------------------------

Verdict gradients() {
  const auto t0 = Clock::now();
  const auto results = gradient_suite(20, 5, 1e-4);
  const double secs = seconds_since(t0);
  int failed = 0;
  double worst = 0;
  for (const auto& r : results) {
    failed += !r.pass;
    worst = std::max(worst, r.error);
  }
  return {failed == 0 && secs < 60.0, std::to_string(results.size() - failed) + "/" + std::to_string(results.size()) +
                                         " checks, worst rel err " + fmt("%.2e", worst) + ", " + fmt("%.1f", secs) +
                                         " s"};
}

// ---- 2 ----------------------------------------------------------------------

// Singular values from the characteristic polynomial of M M^T, roots
// polished by Newton steps in long double.
std::vector<double> charpoly_sigma(const RowMatrixXd& M) {
  using LD = long double;
  const int n = static_cast<int>(M.rows());
  Eigen::Matrix<LD, Eigen::Dynamic, Eigen::Dynamic> B = M.cast<LD>() * M.cast<LD>().transpose();
  std::vector<LD> lam;
  if (n == 2) {
    const LD t = B(0, 0) + B(1, 1), d = B(0, 0) * B(1, 1) - B(0, 1) * B(1, 0);
    const LD big = (t + std::sqrt(std::max<LD>(0, t * t - 4 * d))) / 2;
    lam = {big, big > 0 ? d / big : 0};
  } else {
    const LD c2 = B.trace();
    const LD c1 = B(0, 0) * B(1, 1) - B(0, 1) * B(1, 0) + B(0, 0) * B(2, 2) - B(0, 2) * B(2, 0) +
                  B(1, 1) * B(2, 2) - B(1, 2) * B(2, 1);
    const LD c0 = B.determinant();
    auto p = [&](LD x) { return ((x - c2) * x + c1) * x - c0; };
    auto dp = [&](LD x) { return (3 * x - 2 * c2) * x + c1; };
    // trigonometric seeds for the three real roots
    const LD q = c2 / 3, pp = (c2 * c2 - 3 * c1) / 9, r = (2 * c2 * c2 * c2 - 9 * c2 * c1 + 27 * c0) / 54;
    const LD sq = std::sqrt(std::max<LD>(pp, 0));
    const LD arg = sq > 0 ? std::clamp<LD>(-r / (sq * sq * sq), -1, 1) : 0;
    const LD th = std::acos(arg);
    const LD pi = std::acos(LD(-1));
    for (int k = 0; k < 3; ++k) {
      LD x = -2 * sq * std::cos((th + 2 * pi * k) / 3) + q;
      for (int it = 0; it < 20; ++it) {
        const LD d = dp(x);
        if (d == 0) break;
        x -= p(x) / d;
      }
      lam.push_back(x);
    }
    std::sort(lam.begin(), lam.end(), std::greater<>());
    if (lam[0] * lam[1] > 0) lam[2] = c0 / (lam[0] * lam[1]);
  }
  std::vector<double> sigma;
  for (LD l : lam) sigma.push_back(static_cast<double>(std::sqrt(std::max<LD>(l, 0))));
  return sigma;
}

Verdict svd_correctness() {
  Rng rng(mix_seed(5, 2));
  double worst_rec = 0, worst_orth = 0;
  for (int n = 0; n < 100; ++n) {
    const int rows = rng.uniform_int(1, 8), cols = rng.uniform_int(1, 64);
    RowMatrixXd M(rows, cols);
    for (Eigen::Index i = 0; i < M.size(); ++i) M.data()[i] = rng.normal();
    const auto f = linalg::svd(M);
    worst_rec = std::max(worst_rec, linalg::svd_reconstruction_error(M, f));
    worst_orth = std::max({worst_orth, linalg::orthogonality_residual(f.U), linalg::orthogonality_residual(f.V)});
  }
  double worst_sigma = 0;
  for (int n = 0; n < 200; ++n) {
    const int k = n % 2 ? 3 : 2;
    RowMatrixXd M(k, k);
    for (Eigen::Index i = 0; i < M.size(); ++i) M.data()[i] = rng.normal();
    const auto f = linalg::svd(M);
    const auto want = charpoly_sigma(M);
    for (int i = 0; i < k; ++i) worst_sigma = std::max(worst_sigma, std::abs(f.sigma[i] - want[static_cast<std::size_t>(i)]));
  }
  return {worst_rec < 1e-6 && worst_orth < 1e-8 && worst_sigma < 1e-9,
          "recon " + fmt("%.1e", worst_rec) + ", orth " + fmt("%.1e", worst_orth) + ", sigma vs charpoly " +
              fmt("%.1e", worst_sigma)};
}

// ---- 3 ----------------------------------------------------------------------

Verdict pr_orthonormality() {
  // Subgradient steps move every singular value by exactly the step size, so
  // a constant step ends in a limit cycle of that amplitude; the step starts
  // at 0.05 and decays geometrically.
  Rng rng(mix_seed(5, 3));
  RowMatrixXd P(5, 16);
  for (Eigen::Index i = 0; i < P.size(); ++i) P.data()[i] = rng.normal();
  double lr = 0.05;
  int step = 0;
  double loss = pr_loss_svd(P);
  for (; step < 2000 && loss >= 0.01; ++step) {
    P -= lr * pr_loss_svd_grad(P);
    lr *= 0.995;
    loss = pr_loss_svd(P);
  }
  const RowMatrixXd lv[1] = {P};
  const double spar = sparsity(lv);
  return {loss < 0.01 && spar > 0.99,
          "loss " + fmt("%.4f", loss) + " after " + std::to_string(step) + " steps, Spar " + fmt("%.4f", spar)};
}

// ---- 4 ----------------------------------------------------------------------

Verdict splgs_oracle() {
  Rng rng(mix_seed(5, 4));
  const auto levels = make_levels(256, 256);
  int mismatched_cells = 0, complement_bad = 0;
  for (int n = 0; n < 1000; ++n) {
    const auto& level = levels[static_cast<std::size_t>(rng.uniform_int(0, 2))];
    std::vector<BoxAnnotation> boxes;
    const int count = rng.uniform_int(1, 4);
    for (int b = 0; b < count; ++b) {
      const double w = 1 + 255 * std::pow(rng.uniform(), 2), h = 1 + 255 * std::pow(rng.uniform(), 2);
      const auto c = clip_box(BoxAnnotation{rng.uniform_int(0, 2), 256 * rng.uniform(), 256 * rng.uniform(), w, h},
                              256, 256);
      if (c) boxes.push_back(*c);
    }
    const auto stack = generate_label_maps(boxes, level, 4);
    std::vector<std::set<std::pair<int, int>>> want(3);
    for (const auto& b : boxes) {
      const bool in_range = b.w <= level.tau * level.stride && b.h <= level.tau * level.stride;
      if (!in_range) continue;
      for (const auto& cell : rasterize_oracle(b, level)) want[static_cast<std::size_t>(b.class_id)].insert(cell);
    }
    for (int i = 0; i < level.grid_h; ++i)
      for (int j = 0; j < level.grid_w; ++j) {
        float mx = 0;
        for (int k = 0; k < 3; ++k) {
          const float v = stack.maps.at(k, i, j);
          mismatched_cells += v != (want[static_cast<std::size_t>(k)].contains({i, j}) ? 1.0f : 0.0f);
          mx = std::max(mx, v);
        }
        complement_bad += stack.maps.at(3, i, j) != 1.0f - mx;
      }
  }
  return {mismatched_cells == 0 && complement_bad == 0, "1000 stacks, " + std::to_string(mismatched_cells) +
                                                            " cell mismatches, " + std::to_string(complement_bad) +
                                                            " complement violations"};
}

// ---- 5 ----------------------------------------------------------------------

Verdict splgs_gating() {
  const auto lv = make_levels(256, 256, 4.0, 8.0);
  const BoxAnnotation forty{0, 128, 128, 40, 40};
  const auto at8 = generate_label_maps({forty}, lv[0], 4);
  const auto at16 = generate_label_maps({forty}, lv[1], 4);
  const bool excluded8 = !admitted(forty, lv[0]) && at8.maps.matrix(4).row(0).sum() == 0;
  const bool included16 = admitted(forty, lv[1]) && at16.maps.matrix(4).row(0).sum() > 0;

  Rng rng(mix_seed(5, 5));
  int violations = 0;
  for (int n = 0; n < 2000; ++n) {
    const double w = 2 + 254 * rng.uniform(), h = 2 + 254 * rng.uniform();
    const BoxAnnotation b{0, 128, 128, w, h};
    for (const auto& l : lv) {
      const bool expect = std::max(w, h) <= l.tau * l.stride;
      const bool labelled = generate_label_maps({b}, l, 2).maps.matrix(2).row(0).sum() > 0;
      violations += admitted(b, l) != expect;
      violations += labelled && !expect;
    }
  }
  return {excluded8 && included16 && violations == 0,
          std::string("40 px: stride 8 ") + (excluded8 ? "excluded" : "INCLUDED") + ", stride 16 " +
              (included16 ? "included" : "EXCLUDED") + "; " + std::to_string(violations) +
              " violations over 2000 random sizes"};
}

// ---- 6 ----------------------------------------------------------------------

Verdict metric_oracles() {
  Rng rng(mix_seed(5, 6));
  double worst_auc = 0;
  int compared = 0;
  while (compared < 200) {
    const int h = rng.uniform_int(1, 16), w = rng.uniform_int(1, 16);
    Plane s(h, w), m(h, w);
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      s.data()[i] = rng.uniform() < 0.3 ? static_cast<float>(rng.uniform_int(0, 4)) / 4.0f
                                        : static_cast<float>(rng.uniform());
      m.data()[i] = rng.uniform() < 0.35 ? 1.0f : 0.0f;
    }
    const auto fast = auc_ft(s, m);
    const auto slow = auc_pairwise(s, m);
    if (fast.has_value() != slow.has_value()) return {false, "auc defined-ness disagrees with the pairwise oracle"};
    if (!fast) continue;
    worst_auc = std::max(worst_auc, std::abs(*fast - *slow));
    ++compared;
  }

  Plane mask(2, 2);
  mask << 1, 0, 1, 0;
  Plane inside(2, 2);
  inside << 0.7f, 0, 0.4f, 0;
  const double d1 = discriminability(inside, mask);
  const double d0 = discriminability(Plane::Zero(2, 2).eval(), mask);
  const double dh = discriminability(Plane::Constant(2, 2, 0.5f).eval(), mask);
  const double disc_err = std::max({std::abs(d1 - 1.0), std::abs(d0), std::abs(dh - 0.5)});

  RowMatrixXd ortho = RowMatrixXd::Identity(4, 6), same(3, 2), diag(2, 2);
  same << 1, 1, 1, 1, 1, 1;
  diag << 1, 0, 1, 1;
  const RowMatrixXd a[3] = {ortho, ortho, ortho}, b[1] = {same}, c[1] = {diag};
  const double spar_err = std::max({std::abs(sparsity(a) - 1.0), std::abs(sparsity(b)),
                                    std::abs(sparsity(c) - (1.0 - std::sqrt(0.5)))});
  const double spar_table_err = std::abs(sparsity(c) - 0.2929);
  return {worst_auc < 1e-9 && disc_err < 1e-6 && spar_err < 1e-4 && spar_table_err < 1e-4,
          "auc vs pairwise " + fmt("%.1e", worst_auc) + " on 200 maps, disc cases " + fmt("%.1e", disc_err) +
              ", sparsity cases " + fmt("%.1e", spar_err)};
}

// ---- 7 ----------------------------------------------------------------------

Verdict fog() {
  const FogParams p{0.5, 0.1};
  Rng rng(mix_seed(5, 7));
  Image j(512, 512);
  for (std::size_t i = 0; i < j.rgb.numel(); ++i) j.rgb[i] = static_cast<float>(rng.uniform());
  const Image out = apply_fog(j, p);
  long mismatches = 0;
  for (int y = 0; y < 512; ++y)
    for (int x = 0; x < 512; ++x) {
      const double rho = std::sqrt(double(y - 256) * (y - 256) + double(x - 256) * (x - 256));
      const double d = -0.04 * rho + std::sqrt(512.0);
      const double t = std::clamp(std::exp(-p.beta * d), 0.0, 1.0);
      for (int c = 0; c < 3; ++c) {
        const float want = static_cast<float>(j.at(c, y, x) * t + p.A * (1 - t));
        mismatches += out.at(c, y, x) != want;
      }
    }
  const double centre = apply_fog(Image(512, 512, 1.0f), p).at(0, 256, 256);
  const double corner = apply_fog(Image(512, 512, 0.0f), p).at(0, 0, 0);
  const bool spots = std::abs(centre - 0.5520) < 1e-4 && std::abs(corner - 0.2786) < 1e-4;
  return {mismatches == 0 && spots, std::to_string(mismatches) + " pixel mismatches of " +
                                        std::to_string(3 * 512 * 512) + "; centre " + fmt("%.4f", centre) +
                                        ", corner " + fmt("%.4f", corner)};
}

// ---- 8, 9 ------------------------------------------------------------------

struct Toy {
  bool ready = false;
  fs::path data;
  std::map<std::string, MetricReport> reports;  // run name -> test report
  std::map<std::string, double> train_seconds;
  double seconds = 0;
};

Toy& toy() {
  static Toy t;
  return t;
}

bool prepare_toy() {
  auto& t = toy();
  if (t.ready) return true;
  const auto t0 = Clock::now();
  const fs::path root = kWork / "toy";
  t.data = root / "data" / "clean";
  if (cli_run({"synth", "--config", (kSource / "configs" / "toy_synth.json").string(), "--out",
               (root / "data").string(), "--no-fog", "--no-lowlight", "--force"}) != 0)
    return false;
  t.ready = true;
  t.seconds += seconds_since(t0);
  return true;
}

bool train_and_eval(const std::string& name, const std::vector<std::string>& flags,
                    const std::vector<int>& levels = {}) {
  auto& t = toy();
  if (t.reports.count(name)) return true;
  const auto t0 = Clock::now();
  const fs::path run = kWork / "toy" / name;
  std::vector<std::string> args{"train", "--config", (kSource / "configs" / "toy_train.json").string(), "--data",
                                t.data.string(), "--out", run.string(), "--force"};
  args.insert(args.end(), flags.begin(), flags.end());
  if (cli_run(args) != 0) return false;
  t.train_seconds[name] = seconds_since(t0);
  for (int level : levels) {
    const std::string key = level ? name + "@l" + std::to_string(level) : name;
    const fs::path out = run / (level ? "eval_l" + std::to_string(level) : std::string("eval"));
    if (cli_run({"eval", "--checkpoint", (run / "checkpoint.json").string(), "--data", t.data.string(), "--out",
                 out.string(), "--level", std::to_string(level), "--force"}) != 0)
      return false;
    t.reports[key] = metric_report_from_json(read_file(out / "report.json"));
  }
  t.seconds += seconds_since(t0);
  return true;
}

std::string summary(const std::string& name, const MetricReport& r) {
  return name + " mAP " + fmt("%.3f", r.map50) + " Disc " + fmt("%.3f", r.disc) + " Spar " + fmt("%.3f", r.spar);
}

Verdict ablation() {
  if (!prepare_toy()) return {false, "toy dataset generation failed"};
  if (!train_and_eval("full", {}, {0, 1, 2, 3})) return {false, "full run failed"};
  if (!train_and_eval("baseline", {"--no-rpc", "--no-pr", "--no-splgs"}, {0})) return {false, "baseline run failed"};
  if (!train_and_eval("rpc_pr", {"--no-splgs"}, {0})) return {false, "rpc+pr run failed"};
  const auto& R = toy().reports;
  const auto& full = R.at("full");
  const auto& base = R.at("baseline");
  const auto& nos = R.at("rpc_pr");
  const bool a = full.map50 > base.map50 && full.disc > base.disc && full.spar > base.spar;
  const bool b = full.map50 >= nos.map50;
  const auto& l1 = R.at("full@l1");
  const auto& l2 = R.at("full@l2");
  const auto& l3 = R.at("full@l3");
  const bool cs = l1.map_s > l2.map_s && l1.map_s > l3.map_s;
  const bool cm = l2.map_m > l1.map_m && l2.map_m > l3.map_m;
  const bool cl = l3.map_l > l1.map_l && l3.map_l > l2.map_l;
  const double secs = toy().train_seconds.at("full") + toy().train_seconds.at("baseline") +
                      toy().train_seconds.at("rpc_pr");
  std::ostringstream os;
  os << "(a) " << (a ? "ok" : "NO") << ": " << summary("full", full) << " | " << summary("baseline", base)
     << "; (b) " << (b ? "ok" : "NO") << ": without SPLGS mAP " << fmt("%.3f", nos.map50) << "; (c) "
     << (cs && cm && cl ? "ok" : "NO") << ": s/m/l by level l1 " << fmt("%.2f", l1.map_s) << "/"
     << fmt("%.2f", l1.map_m) << "/" << fmt("%.2f", l1.map_l) << " l2 " << fmt("%.2f", l2.map_s) << "/"
     << fmt("%.2f", l2.map_m) << "/" << fmt("%.2f", l2.map_l) << " l3 " << fmt("%.2f", l3.map_s) << "/"
     << fmt("%.2f", l3.map_m) << "/" << fmt("%.2f", l3.map_l) << "; 3 runs " << fmt("%.0f", secs) << " s";
  return {a && b && cs && cm && cl && secs < 1800, os.str()};
}

Verdict pr_variants() {
  if (!prepare_toy()) return {false, "toy dataset generation failed"};
  if (!train_and_eval("full", {}, {0, 1, 2, 3})) return {false, "svd run failed"};
  if (!train_and_eval("cosine", {"--pr-variant", "cosine"}, {0})) return {false, "cosine run failed"};
  if (!train_and_eval("pop", {"--pr-variant", "pop"}, {0})) return {false, "pop run failed"};
  const auto& R = toy().reports;
  const double svd = R.at("full").spar, cos = R.at("cosine").spar, pop = R.at("pop").spar;
  return {svd >= cos && svd >= pop, "Spar svd " + fmt("%.4f", svd) + ", cosine " + fmt("%.4f", cos) + ", pop " +
                                        fmt("%.4f", pop) + " (mAP " + fmt("%.3f", R.at("full").map50) + "/" +
                                        fmt("%.3f", R.at("cosine").map50) + "/" + fmt("%.3f", R.at("pop").map50) +
                                        ")"};
}

// ---- 10 ---------------------------------------------------------------------

Verdict reproducibility() {
  const fs::path root = kWork / "repro";
  if (cli_run({"synth", "--out", (root / "data").string(), "--n-train", "16", "--n-test", "2", "--no-fog",
               "--no-lowlight", "--force"}) != 0)
    return {false, "synth failed"};
  const std::vector<std::string> common{"--data", (root / "data" / "clean").string(), "--epochs", "2", "--seed", "5",
                                        "--batch-size", "8", "--force"};
  for (const char* run : {"a", "b"}) {
    std::vector<std::string> args{"train", "--out", (root / run).string()};
    args.insert(args.end(), common.begin(), common.end());
    if (cli_run(args) != 0) return {false, std::string("train ") + run + " failed"};
  }
  int differ = 0;
  for (const char* f : {"checkpoint.bin", "checkpoint.json", "train_log.jsonl"})
    differ += read_file(root / "a" / f) != read_file(root / "b" / f);
  const auto bytes = fs::file_size(root / "a" / "checkpoint.bin");
  return {differ == 0, std::to_string(3 - differ) + "/3 artifacts byte-identical (checkpoint blob " +
                           std::to_string(bytes) + " bytes)"};
}

}  // namespace

int main() {
  fs::create_directories(kWork);
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient correctness", gradients},
      {"svd correctness", svd_correctness},
      {"spectral regularizer orthonormalizes prototypes", pr_orthonormality},
      {"label maps equal the per-cell oracle", splgs_oracle},
      {"scale gating by level range", splgs_gating},
      {"metric oracles", metric_oracles},
      {"haze synthesis", fog},
      {"toy ablation ordering", ablation},
      {"prototype regularizer ordering", pr_variants},
      {"training reproducibility", reproducibility},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += !v.pass;
    std::cout << (v.pass ? "PASS " : "FAIL ") << i + 1 << " " << criteria[i].first << ": " << v.detail << std::endl;
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " acceptance criteria passed" << std::endl;
  return failed ? 1 : 0;
}
