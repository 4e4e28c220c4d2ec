#include "protodet/cli.hpp"
#include "protodet/imageio.hpp"

#include <doctest.h>

#include <filesystem>
#include <sstream>

using namespace protodet;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "protodet");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("protodet_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Small 64 px dataset plus a one-epoch tiny model, shared by the tests below.
struct Fixture {
  fs::path root = scratch("fixture");
  fs::path data = root / "synth" / "clean";
  fs::path ckpt = root / "train" / "checkpoint.json";

  Fixture() {
    write_file(root / "synth.json",
               R"({"image_size": 64, "n_train": 8, "n_test": 3, "min_objects": 1, "max_objects": 3,
                   "bands": [[6, 14, 0.5], [18, 40, 0.5]]})");
    const auto s = run_cli({"synth", "--config", (root / "synth.json").string(), "--out", (root / "synth").string()});
    REQUIRE_MESSAGE(s.code == 0, s.err);
    const auto t = run_cli({"train", "--data", data.string(), "--out", (root / "train").string(), "--epochs", "1",
                            "--batch-size", "4", "--dim", "8", "--stem", "4", "--width", "8", "--tau1", "2", "--tau2",
                            "4"});
    REQUIRE_MESSAGE(t.code == 0, t.err);
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("usage errors exit 1") {
  CHECK(run_cli({}).code == cli::kExitUsage);
  CHECK(run_cli({"bogus"}).code == cli::kExitUsage);
  CHECK(run_cli({"train", "--no-such-flag"}).code == cli::kExitUsage);
  CHECK(run_cli({"train", "--epochs", "many"}).code == cli::kExitUsage);
  CHECK(run_cli({"synth", "--config", "/nonexistent/config.json"}).code == cli::kExitUsage);
  CHECK(run_cli({"train", "--rpc", "--no-rpc"}).code == cli::kExitUsage);
  CHECK(run_cli({"train", "--no-pr", "--pr-variant", "svd", "--data", "x", "--out", "y"}).code == cli::kExitUsage);
  CHECK(run_cli({"--help"}).code == cli::kExitOk);
}

TEST_CASE("config merging rejects unknown keys and wrong types") {
  const auto d = cli::train_defaults();
  CHECK_THROWS_AS(cli::merge_config(d, cli::Json{{"learning_rate", 0.1}}, "f"), cli::ValidationError);
  CHECK_THROWS_AS(cli::merge_config(d, cli::Json{{"epochs", "3"}}, "f"), cli::ValidationError);
  CHECK_THROWS_AS(cli::merge_config(d, cli::Json{{"epochs", 2.5}}, "f"), cli::ValidationError);
  CHECK(cli::merge_config(d, cli::Json{{"lr", 1}}, "f")["lr"] == 1);

  const fs::path dir = scratch("unknown");
  write_file(dir / "bad.json", R"({"n_train": 2, "colour": "red"})");
  const auto r = run_cli({"synth", "--config", (dir / "bad.json").string(), "--out", (dir / "o").string()});
  CHECK(r.code == cli::kExitValidation);
  CHECK(r.err.find("colour") != std::string::npos);
}

TEST_CASE("flags override the config file") {
  const fs::path dir = scratch("precedence");
  write_file(dir / "s.json", R"({"image_size": 64, "n_train": 3, "n_test": 1, "seed": 9,
                                 "bands": [[6, 14, 0.5], [18, 40, 0.5]]})");
  const auto r = run_cli({"synth", "--config", (dir / "s.json").string(), "--seed", "11", "--no-fog", "--out",
                          (dir / "o").string()});
  REQUIRE(r.code == 0);
  const auto resolved = cli::Json::parse(read_file(dir / "o" / "resolved_synth.json"));
  CHECK(resolved["seed"] == 11);
  CHECK(resolved["n_train"] == 3);
  CHECK(resolved["fog"] == false);
  CHECK(fs::exists(dir / "o" / "lowlight" / "manifest.json"));
  CHECK_FALSE(fs::exists(dir / "o" / "fog"));
}

TEST_CASE("synth is deterministic and refuses a non-empty output without --force") {
  auto& f = fixture();
  const fs::path again = f.root / "synth_again";
  const auto a = run_cli({"synth", "--config", (f.root / "synth.json").string(), "--out", again.string()});
  REQUIRE(a.code == 0);
  CHECK(dataset_digest(again / "clean") == dataset_digest(f.data));
  CHECK(dataset_digest(again / "fog") == dataset_digest(f.root / "synth" / "fog"));

  const auto refused = run_cli({"synth", "--config", (f.root / "synth.json").string(), "--out", again.string()});
  CHECK(refused.code == cli::kExitValidation);
  CHECK(refused.err.find("--force") != std::string::npos);
  CHECK(run_cli({"synth", "--config", (f.root / "synth.json").string(), "--out", again.string(), "--force"}).code ==
        0);
}

TEST_CASE("fog subcommand matches the synth fog output up to 8-bit input") {
  auto& f = fixture();
  const fs::path out = f.root / "fog_only";
  REQUIRE(run_cli({"fog", "--data", f.data.string(), "--out", out.string()}).code == 0);
  const auto a = read_dataset(out), b = read_dataset(f.root / "synth" / "fog");
  REQUIRE(a.samples.size() == b.samples.size());
  // synth hazes the unquantized scene, fog reads the stored PPM
  for (std::size_t i = 0; i < a.samples.size(); ++i)
    CHECK((a.samples[i].image.rgb.data() - b.samples[i].image.rgb.data()).cwiseAbs().maxCoeff() <= 1.5f / 255.0f);
}

TEST_CASE("train writes checkpoint, log and resolved config") {
  auto& f = fixture();
  const fs::path dir = f.ckpt.parent_path();
  CHECK(fs::exists(dir / "checkpoint.bin"));
  CHECK(fs::exists(dir / "train_log.jsonl"));
  const auto resolved = cli::Json::parse(read_file(dir / "resolved_train.json"));
  CHECK(resolved["epochs"] == 1);
  CHECK(resolved["pr_variant"] == "svd");

  CHECK(run_cli({"train", "--data", (f.root / "missing").string(), "--out", (f.root / "t2").string()}).code ==
        cli::kExitValidation);
  CHECK(run_cli({"train", "--data", f.data.string(), "--out", (f.root / "t3").string(), "--lr", "-1"}).code ==
        cli::kExitValidation);
}

TEST_CASE("eval writes JSON and CSV reports") {
  auto& f = fixture();
  const fs::path out = f.root / "eval";
  const auto r = run_cli({"eval", "--checkpoint", f.ckpt.string(), "--data", f.data.string(), "--out", out.string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto report = metric_report_from_json(read_file(out / "report.json"));
  CHECK(report.images == 3);
  CHECK(report.spar <= 1.0);
  CHECK(read_file(out / "report.csv").rfind("class,AP50", 0) == 0);
  CHECK(fs::exists(out / "resolved_eval.json"));

  const auto lvl = run_cli({"eval", "--checkpoint", f.ckpt.string(), "--data", f.data.string(), "--out",
                            (f.root / "eval2").string(), "--level", "2"});
  REQUIRE(lvl.code == 0);
  CHECK(metric_report_from_json(read_file(f.root / "eval2" / "report.json")).level == 2);
  CHECK(run_cli({"eval", "--checkpoint", f.ckpt.string(), "--data", f.data.string(), "--out",
                 (f.root / "eval3").string(), "--level", "4"})
            .code == cli::kExitValidation);
}

TEST_CASE("eval rejects a class-count mismatch") {
  auto& f = fixture();
  const fs::path dir = scratch("two_classes");
  write_file(dir / "s.json", R"({"image_size": 64, "n_train": 1, "n_test": 2, "num_classes": 2,
                                 "bands": [[6, 14, 0.5], [18, 40, 0.5]]})");
  REQUIRE(run_cli({"synth", "--config", (dir / "s.json").string(), "--out", (dir / "d").string()}).code == 0);
  const auto r = run_cli({"eval", "--checkpoint", f.ckpt.string(), "--data", (dir / "d" / "clean").string(), "--out",
                          (dir / "e").string()});
  CHECK(r.code == cli::kExitValidation);
  CHECK(r.err.find("classes") != std::string::npos);
}

TEST_CASE("visualize writes L + 1 maps per class") {
  auto& f = fixture();
  const fs::path out = f.root / "vis";
  const auto r = run_cli({"visualize", "--checkpoint", f.ckpt.string(), "--data", f.data.string(), "--sample",
                          "test_0000", "--class", "square", "--out", out.string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  int pgm = 0;
  for (const auto& e : fs::directory_iterator(out)) pgm += e.path().extension() == ".pgm";
  CHECK(pgm == 4);
  CHECK(fs::exists(out / "square_combined_overlay.ppm"));
  const Plane combined = read_pgm(out / "square_combined.pgm");
  CHECK(combined.rows() == 64);

  const auto bad = run_cli({"visualize", "--checkpoint", f.ckpt.string(), "--data", f.data.string(), "--sample",
                            "test_0000", "--class", "hexagon", "--out", (f.root / "vis2").string()});
  CHECK(bad.code == cli::kExitValidation);
  CHECK(bad.err.find("triangle") != std::string::npos);
}

TEST_CASE("oracle and gradient subcommands") {
  const auto o = run_cli({"oracle", "--cases", "50"});
  CHECK(o.code == 0);
  CHECK(o.out.find("OK ") != std::string::npos);
  const auto g = run_cli({"check-grads", "--seeds", "1"});
  CHECK(g.code == 0);
  CHECK(g.out.find("OK 9/9") != std::string::npos);
}

}  // TEST_SUITE
