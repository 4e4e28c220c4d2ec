#include "protodet/detector.hpp"
#include "protodet/train.hpp"

#include <doctest.h>
#include <json.hpp>

#include <filesystem>
#include <sstream>

using namespace protodet;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model() {
  ModelConfig m;
  m.image_size = 64;
  m.dim = 8;
  m.stem = 4;
  m.width = 8;
  m.tau1 = 2;
  m.tau2 = 4;
  return m;
}

Dataset tiny_dataset(int n_train) {
  SceneSpec s;
  s.image_size = 64;
  s.bands = {{6, 14, 0.5}, {18, 40, 0.5}};
  s.min_objects = 1;
  s.max_objects = 3;
  return build_synthetic_dataset(s, 5, n_train, 2);
}

TrainConfig tiny_train() {
  TrainConfig c;
  c.model = tiny_model();
  c.epochs = 1;
  c.batch_size = 4;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("protodet_test_det_" + name);
  fs::remove_all(p);
  return p;
}

LevelPrediction one_hot_level(const LevelSpec& level, int C, int bins) {
  LevelPrediction p;
  p.scores.level = level;
  p.scores.scores = Tensor({C, level.grid_h, level.grid_w}, 0.0f);
  p.dist_logits = Tensor({4 * bins, level.grid_h, level.grid_w}, -30.0f);
  return p;
}

}  // namespace

TEST_SUITE("detector") {

TEST_CASE("pyramid grid sizes") {
  const ModelConfig cfg;
  const auto lv = cfg.levels();
  CHECK(lv[0].grid_h == 32);
  CHECK(lv[1].grid_h == 16);
  CHECK(lv[2].grid_h == 8);
  CHECK(dist_bins(lv[0]) == 5);
  CHECK(dist_bins(lv[1]) == 9);
  CHECK(dist_bins(lv[2]) == 9);

  ModelConfig bad;
  bad.image_size = 250;
  CHECK_THROWS(bad.validate());
  CHECK_THROWS(ModelParams::initialize(bad, 5));
}

TEST_CASE("zero model scores one half everywhere and is deterministic") {
  ModelParams p = ModelParams::initialize(tiny_model(), 5);
  for (std::size_t i = 0; i < p.size(); ++i) p.tensor(i).data().setZero();
  const Image im(64, 64, 0.3f);
  const auto out = predict(p, im);
  REQUIRE(out.size() == 3);
  for (const auto& l : out) {
    CHECK((l.scores.scores.data().array() - 0.5f).abs().maxCoeff() == 0.0f);
    CHECK(l.scores.scores.dim(0) == 4);
  }
  CHECK(out[0].scores.scores.dim(1) == 8);
  CHECK(out[2].scores.scores.dim(1) == 2);

  const ModelParams q = ModelParams::initialize(tiny_model(), 5);
  const auto a = predict(q, im), b = predict(q, im);
  for (std::size_t l = 0; l < 3; ++l) {
    CHECK(a[l].scores.scores.data() == b[l].scores.scores.data());
    CHECK(a[l].dist_logits.data() == b[l].dist_logits.data());
  }
}

TEST_CASE("forward and backward on the tape") {
  const ModelParams p = ModelParams::initialize(tiny_model(), 5);
  const Dataset d = tiny_dataset(2);
  ag::BasicTape<float> tape;
  const auto fr = forward<float>(tape, p, d.samples[0].image);
  REQUIRE(fr.levels.size() == 3);
  const auto loss = image_loss<float>(tape, fr.levels, d.samples[0].boxes, LossToggles{});
  CHECK(std::isfinite(loss.total.value()[0]));
  tape.backward(loss.total);
  CHECK(tape.grad(fr.params[p.index_of("l1.proto.w")]).data().norm() > 0.0f);
}

TEST_CASE("assignment by range") {
  const auto lv = ModelConfig{}.levels();
  SUBCASE("16 px box lands at the two finer levels") {
    const auto a = assign_targets({BoxAnnotation{0, 100, 100, 16, 16}}, lv);
    CHECK(a[0].size() == 1);
    CHECK(a[1].size() == 1);
    CHECK(a[2].size() == 1);  // the coarsest range [0, 256] admits everything
  }
  SUBCASE("200 px box only at stride 32") {
    const auto a = assign_targets({BoxAnnotation{0, 128, 128, 200, 200}}, lv);
    CHECK(a[0].empty());
    CHECK(a[1].empty());
    REQUIRE(a[2].size() == 1);
    CHECK(a[2][0].row == 3);
    CHECK(a[2][0].col == 3);
  }
  SUBCASE("centre on a cell boundary picks the lower index") {
    CHECK(cell_of(16.0, 8, 32) == 1);
    CHECK(cell_of(16.01, 8, 32) == 2);
    CHECK(cell_of(0.0, 8, 32) == 0);
    CHECK(cell_of(256.0, 8, 32) == 31);
  }
  SUBCASE("one-cell box has exact side distances") {
    const auto a = assign_targets({BoxAnnotation{2, 20, 20, 8, 8}}, lv);
    REQUIRE(a[0].size() == 1);
    const auto& t = a[0][0];
    CHECK(t.row == 2);
    CHECK(t.col == 2);
    CHECK(t.class_id == 2);
    for (double v : t.ltrb) CHECK(v == doctest::Approx(0.5));
  }
}

TEST_CASE("side distances always lie within [0, tau]") {
  const auto lv = ModelConfig{}.levels();
  Rng rng(50);
  for (int n = 0; n < 300; ++n) {
    std::vector<BoxAnnotation> boxes;
    for (int k = 0; k < 4; ++k) {
      const double w = 4 + 250 * rng.uniform(), h = 4 + 250 * rng.uniform();
      boxes.push_back(*clip_box(BoxAnnotation{k % 3, 256 * rng.uniform(), 256 * rng.uniform(), w, h}, 256, 256));
    }
    const auto a = assign_targets(boxes, lv);
    for (std::size_t l = 0; l < 3; ++l)
      for (const auto& t : a[l]) {
        CHECK(admitted(boxes[t.box], lv[l]));
        for (double v : t.ltrb) {
          CHECK(v >= 0.0);
          CHECK(v <= lv[l].tau);
        }
      }
  }
}

TEST_CASE("classification targets") {
  const auto lv = tiny_model().levels();
  const std::vector<BoxAnnotation> boxes{BoxAnnotation{1, 20, 20, 16, 16}};
  const auto a = assign_targets(boxes, lv);
  const auto t = build_cls_targets(boxes, a, lv, 4);
  REQUIRE(t.size() == 3);
  const auto& l1 = t[0];
  CHECK(l1.positives == 1);
  CHECK(l1.target.at(1, 2, 2) == 1.0f);
  CHECK(l1.target.at(3, 2, 2) == 0.0f);
  CHECK(l1.target.at(3, 7, 7) == 1.0f);  // far from the box: background
  CHECK(l1.weight.at(0, 1, 1) == 0.0f);  // inside the box, not the centre: unsupervised
  CHECK(l1.weight.at(0, 2, 2) > 0.0f);
}

TEST_CASE("decode: empty, one-hot boxes and NMS") {
  const auto lv = tiny_model().levels();
  std::vector<LevelPrediction> levels;
  for (const auto& l : lv) levels.push_back(one_hot_level(l, 4, dist_bins(l)));
  CHECK(decode(levels, 0, DecodeOptions{}).empty());

  // level 1, cell (3, 2): centre (20, 28); one-hot bin 2 on every side
  levels[0].scores.scores.at(1, 3, 2) = 0.9f;
  for (int side = 0; side < 4; ++side) levels[0].dist_logits.at(side * 3 + 2, 3, 2) = 30.0f;
  const auto dets = decode(levels, 7, DecodeOptions{});
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].image == 7);
  CHECK(dets[0].class_id == 1);
  CHECK(dets[0].score == doctest::Approx(0.9));
  CHECK(dets[0].box.x0() == doctest::Approx(4.0));
  CHECK(dets[0].box.x1() == doctest::Approx(36.0));
  CHECK(dets[0].box.y0() == doctest::Approx(12.0));
  CHECK(dets[0].box.y1() == doctest::Approx(44.0));

  DecodeOptions only2;
  only2.level = 2;
  CHECK(decode(levels, 0, only2).empty());

  const BoxAnnotation b{0, 30, 30, 10, 10};
  const auto kept = nms({Detection{0, 0, 0.8, b}, Detection{0, 0, 0.9, b}, Detection{0, 1, 0.7, b}}, 0.5);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].score == doctest::Approx(0.9));
}

TEST_CASE("zero learning rate leaves parameters bit-identical") {
  const Dataset d = tiny_dataset(4);
  TrainConfig cfg = tiny_train();
  ModelParams p = ModelParams::initialize(cfg.model, cfg.seed);
  const ModelParams before = p;
  std::vector<Tensor> momentum;
  const auto report = train_step(cfg, p, momentum, d.split("train"), 0.0);
  CHECK(std::isfinite(report.total));
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(p.tensor(i).data() == before.tensor(i).data());
}

TEST_CASE("a step moves parameters and reports every component") {
  const Dataset d = tiny_dataset(4);
  TrainConfig cfg = tiny_train();
  ModelParams p = ModelParams::initialize(cfg.model, cfg.seed);
  const ModelParams before = p;
  std::vector<Tensor> momentum;
  const auto report = train_step(cfg, p, momentum, d.split("train"), 0.01);
  for (const char* k : {"cls", "reg", "dfl", "rpc_l1", "rpc_l2", "rpc_l3", "pr_l1", "pr_l2", "pr_l3"})
    CHECK(report.components.count(k) == 1);
  CHECK(p["l1.proto.w"].data() != before["l1.proto.w"].data());
  CHECK(momentum.size() == p.size());
}

TEST_CASE("training log, checkpoint round-trip and resume") {
  const Dataset d = tiny_dataset(8);
  TrainConfig cfg = tiny_train();
  const fs::path one = scratch("one");
  const Checkpoint c1 = train(cfg, d, one);
  CHECK(c1.state.epoch == 1);
  CHECK(c1.state.step == 2);
  const std::string log = read_file(one / "train_log.jsonl");
  CHECK(std::count(log.begin(), log.end(), '\n') == 2);
  CHECK(log.rfind("{\"step\":1,\"epoch\":1,", 0) == 0);

  const Checkpoint back = load_checkpoint(one / "checkpoint.json");
  CHECK(back.params.config() == c1.params.config());
  CHECK(back.class_names == d.manifest.class_names);
  for (std::size_t i = 0; i < back.params.size(); ++i)
    CHECK(back.params.tensor(i).data() == c1.params.tensor(i).data());
  CHECK(back.state.momentum.size() == back.params.size());

  cfg.epochs = 2;
  const fs::path straight = scratch("straight");
  train(cfg, d, straight);
  train(cfg, d, one, back);
  CHECK(read_file(one / "checkpoint.bin") == read_file(straight / "checkpoint.bin"));
  CHECK(read_file(one / "train_log.jsonl") == read_file(straight / "train_log.jsonl"));

  const std::string blob = read_file(one / "checkpoint.bin");
  write_file(one / "checkpoint.bin", blob.substr(0, blob.size() - 8));
  CHECK_THROWS_AS(load_checkpoint(one / "checkpoint.json"), CheckpointError);
}

TEST_CASE("learning rate decays linearly to lr_final at the last step") {
  const Dataset d = tiny_dataset(8);
  TrainConfig cfg = tiny_train();
  cfg.epochs = 2;
  cfg.lr_final = 0.25;
  const fs::path dir = scratch("decay");
  train(cfg, d, dir);
  std::istringstream log(read_file(dir / "train_log.jsonl"));
  const double want[] = {0.01, 0.0075, 0.005, 0.0025};
  std::string line;
  for (double w : want) {
    REQUIRE(std::getline(log, line));
    CHECK(nlohmann::json::parse(line)["lr"].get<double>() == doctest::Approx(w).epsilon(1e-12));
  }
  CHECK_FALSE(std::getline(log, line));
}

TEST_CASE("evaluate reports sane ranges") {
  const Dataset d = tiny_dataset(2);
  const ModelParams p = ModelParams::initialize(tiny_model(), 5);
  const auto r = evaluate(p, d.split("test"), d.manifest.class_names);
  CHECK(r.images == 2);
  CHECK(r.disc >= 0.0);
  CHECK(r.disc <= 1.0);
  CHECK(r.spar <= 1.0);
  CHECK(r.map50 >= 0.0);
  CHECK(r.classes.size() == 3);
}

TEST_CASE("invalid training configs") {
  TrainConfig c = tiny_train();
  c.lr = -1;
  CHECK_THROWS(validate(c));
  c = tiny_train();
  c.batch_size = 0;
  CHECK_THROWS(validate(c));
  c = tiny_train();
  c.momentum = 1.0;
  CHECK_THROWS(validate(c));
  c = tiny_train();
  c.lr_final = 1.5;
  CHECK_THROWS(validate(c));
}

}  // TEST_SUITE
