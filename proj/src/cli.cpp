#include "protodet/cli.hpp"

#include "protodet/checkpoint.hpp"
#include "protodet/imageio.hpp"
#include "protodet/selfcheck.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>

namespace protodet::cli {

namespace fs = std::filesystem;

// ---- configs ------------------------------------------------------------------

Json synth_defaults() {
  return Json{{"out", ""},
              {"seed", 5},
              {"n_train", 240},
              {"n_test", 60},
              {"image_size", 256},
              {"num_classes", 3},
              {"min_objects", 2},
              {"max_objects", 4},
              {"max_large", 1},
              {"bands", Json::array({Json::array({10, 22, 0.45}), Json::array({28, 60, 0.35}),
                                     Json::array({96, 200, 0.20})})},
              {"background_level", 0.12},
              {"noise_level", 0.03},
              {"min_gap", 2.0},
              {"max_retries", 200},
              {"fog", true},
              {"fog_A", 0.5},
              {"fog_beta", 0.1},
              {"lowlight", true},
              {"lowlight_gamma", 2.5},
              {"lowlight_sigma", 0.02}};
}

Json train_defaults() {
  return Json{{"data", ""},          {"out", ""},           {"epochs", 12},          {"lr", 0.01},
              {"momentum", 0.937},   {"weight_decay", 0.0005}, {"batch_size", 8},    {"seed", 5},
              {"rpc", true},         {"splgs", true},       {"pr_variant", "svd"},   {"rpc_stop_grad", false},
              {"warmup_steps", 0},   {"lr_final", 1.0},     {"grad_clip", 0.0},    {"dim", 32},             {"stem", 16},
              {"width", 32},         {"tau1", 4.0},         {"tau2", 8.0},           {"resume", ""}};
}

Json eval_defaults() {
  return Json{{"checkpoint", ""},     {"data", ""},          {"split", "test"},      {"level", 0},
              {"out", ""},            {"score_threshold", 0.05}, {"nms_iou", 0.5},   {"max_candidates", 300},
              {"small_max_area", 576.0}, {"medium_max_area", 4096.0}, {"interp", "points101"},
              {"saliency_interp", "bilinear"}};
}

namespace {

Json fog_defaults() { return Json{{"data", ""}, {"out", ""}, {"fog_A", 0.5}, {"fog_beta", 0.1}}; }

Json visualize_defaults() {
  return Json{{"checkpoint", ""}, {"image", ""}, {"data", ""}, {"sample", ""},
              {"class", ""},      {"out", ""},   {"saliency_interp", "bilinear"}};
}

Json check_grads_defaults() { return Json{{"seeds", 20}, {"seed", 5}, {"tolerance", 1e-4}}; }
Json oracle_defaults() { return Json{{"cases", 1000}, {"seed", 5}}; }

bool same_kind(const Json& want, const Json& got) {
  if (want.is_number()) return got.is_number() && (!want.is_number_integer() || got.is_number_integer());
  if (want.is_boolean()) return got.is_boolean();
  if (want.is_string()) return got.is_string();
  if (want.is_array()) return got.is_array();
  return want.type() == got.type();
}

}  // namespace

Json merge_config(const Json& defaults, const Json& overrides, const std::string& source) {
  if (!overrides.is_object()) throw ValidationError(source + ": config must be a JSON object");
  Json out = defaults;
  for (const auto& [key, value] : overrides.items()) {
    if (!defaults.contains(key)) throw ValidationError(source + ": unknown config key '" + key + "'");
    if (!same_kind(defaults[key], value)) {
      throw ValidationError(source + ": key '" + key + "' expects " + defaults[key].type_name() + ", got " +
                            value.type_name());
    }
    out[key] = value;
  }
  return out;
}

Json load_config(const fs::path& path, const Json& defaults) {
  if (!fs::exists(path)) throw UsageError("config file not found: " + path.string());
  Json j;
  try {
    j = Json::parse(read_file(path));
  } catch (const Json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return merge_config(defaults, j, path.string());
}

SceneSpec scene_spec_from(const Json& c) {
  SceneSpec s;
  s.image_size = c.at("image_size");
  s.num_classes = c.at("num_classes");
  s.min_objects = c.at("min_objects");
  s.max_objects = c.at("max_objects");
  s.max_large = c.at("max_large");
  s.background_level = c.at("background_level");
  s.noise_level = c.at("noise_level");
  s.min_gap = c.at("min_gap");
  s.max_retries = c.at("max_retries");
  s.bands.clear();
  for (const auto& b : c.at("bands")) {
    if (!b.is_array() || b.size() != 3) throw ValidationError("bands: each entry must be [min, max, weight]");
    s.bands.push_back({b[0].get<int>(), b[1].get<int>(), b[2].get<double>()});
  }
  if (s.min_objects < 0 || s.max_objects < s.min_objects) throw ValidationError("need 0 <= min_objects <= max_objects");
  for (const auto& b : s.bands) {
    if (b.min_size < 2 || b.max_size < b.min_size || b.max_size > s.image_size || b.weight <= 0) {
      throw ValidationError("bands: need 2 <= min <= max <= image_size and weight > 0");
    }
  }
  return s;
}

TrainConfig train_config_from(const Json& c) {
  TrainConfig t;
  t.epochs = c.at("epochs");
  t.lr = c.at("lr");
  t.momentum = c.at("momentum");
  t.weight_decay = c.at("weight_decay");
  t.batch_size = c.at("batch_size");
  t.seed = c.at("seed").get<std::uint64_t>();
  t.toggles.rpc = c.at("rpc");
  t.toggles.splgs = c.at("splgs");
  t.toggles.rpc_stop_grad = c.at("rpc_stop_grad");
  try {
    t.toggles.pr = parse_pr_variant(c.at("pr_variant"));
  } catch (const std::invalid_argument& e) {
    throw ValidationError(e.what());
  }
  t.warmup_steps = c.at("warmup_steps");
  t.grad_clip = c.at("grad_clip");
  t.lr_final = c.at("lr_final");
  t.model.dim = c.at("dim");
  t.model.stem = c.at("stem");
  t.model.width = c.at("width");
  t.model.tau1 = c.at("tau1");
  t.model.tau2 = c.at("tau2");
  return t;
}

namespace {

std::string dashed(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

// Registers one flag per scalar key; resolve() applies file then flags.
class Binder {
 public:
  Binder(CLI::App* app, Json defaults) : app_(app), defaults_(std::move(defaults)) {
    app_->add_option("--config", config_path_, "JSON config file (flags take precedence)");
    for (const auto& [key, value] : defaults_.items()) {
      if (value.is_boolean()) {
        flags_[key].on = app_->add_flag("--" + dashed(key))->description("enable " + key);
        flags_[key].off = app_->add_flag("--no-" + dashed(key))->description("disable " + key);
      } else if (value.is_primitive()) {
        options_[key] = app_->add_option("--" + dashed(key), raw_[key], "default " + value.dump());
      }
    }
  }

  Json resolve() const {
    Json cfg = config_path_.empty() ? defaults_ : load_config(config_path_, defaults_);
    for (const auto& [key, opt] : options_) {
      if (opt->count() == 0) continue;
      const auto& text = raw_.at(key);
      const auto& want = defaults_[key];
      if (want.is_string()) {
        cfg[key] = text;
        continue;
      }
      Json parsed;
      try {
        parsed = Json::parse(text);
      } catch (const Json::parse_error&) {
        throw UsageError("--" + dashed(key) + ": cannot parse '" + text + "'");
      }
      if (!same_kind(want, parsed)) throw UsageError("--" + dashed(key) + " expects " + want.type_name());
      cfg[key] = parsed;
    }
    for (const auto& [key, f] : flags_) {
      if (f.on->count() && f.off->count()) throw UsageError("both --" + dashed(key) + " and --no-" + dashed(key));
      if (f.on->count()) cfg[key] = true;
      if (f.off->count()) cfg[key] = false;
    }
    return cfg;
  }

  CLI::App* app() const { return app_; }

 private:
  struct FlagPair {
    CLI::Option* on = nullptr;
    CLI::Option* off = nullptr;
  };
  CLI::App* app_;
  Json defaults_;
  std::string config_path_;
  std::map<std::string, std::string> raw_;
  std::map<std::string, CLI::Option*> options_;
  std::map<std::string, FlagPair> flags_;
};

std::string require_path(const Json& cfg, const std::string& key) {
  const auto v = cfg.at(key).get<std::string>();
  if (v.empty()) throw UsageError("missing required --" + dashed(key));
  return v;
}

void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_directory(dir)) throw ValidationError(dir.string() + " exists and is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
    throw ValidationError("output directory " + dir.string() + " is not empty; pass --force to overwrite");
  }
  fs::create_directories(dir);
}

void write_resolved(const fs::path& dir, const std::string& command, const Json& cfg) {
  write_file(dir / ("resolved_" + command + ".json"), cfg.dump(2) + "\n");
}

Interp parse_interp(const std::string& s) {
  if (s == "bilinear") return Interp::Bilinear;
  if (s == "nearest") return Interp::Nearest;
  throw ValidationError("saliency_interp must be bilinear or nearest, got '" + s + "'");
}

// ---- commands -----------------------------------------------------------------

int cmd_synth(const Json& cfg, bool force, std::ostream& out) {
  const fs::path dir = require_path(cfg, "out");
  const auto spec = scene_spec_from(cfg);
  const int n_train = cfg.at("n_train"), n_test = cfg.at("n_test");
  if (n_train < 0 || n_test < 0) throw ValidationError("n_train and n_test must be >= 0");
  const auto seed = cfg.at("seed").get<std::uint64_t>();
  prepare_out_dir(dir, force);

  const auto clean = build_synthetic_dataset(spec, seed, n_train, n_test);
  write_dataset(dir / "clean", clean);
  out << "clean    " << dataset_digest(dir / "clean") << "  " << clean.samples.size() << " images\n";
  if (cfg.at("fog")) {
    const FogParams fog{cfg.at("fog_A"), cfg.at("fog_beta")};
    if (fog.A < 0 || fog.A > 1 || fog.beta < 0) throw ValidationError("fog needs A in [0, 1] and beta >= 0");
    write_dataset(dir / "fog", fog_dataset(clean, fog));
    out << "fog      " << dataset_digest(dir / "fog") << "\n";
  }
  if (cfg.at("lowlight")) {
    const double gamma = cfg.at("lowlight_gamma"), sigma = cfg.at("lowlight_sigma");
    if (gamma < 1 || sigma < 0) throw ValidationError("lowlight needs gamma >= 1 and sigma >= 0");
    write_dataset(dir / "lowlight", lowlight_dataset(clean, gamma, sigma, seed));
    out << "lowlight " << dataset_digest(dir / "lowlight") << "\n";
  }
  write_resolved(dir, "synth", cfg);
  return kExitOk;
}

int cmd_fog(const Json& cfg, bool force, std::ostream& out) {
  const fs::path src = require_path(cfg, "data");
  const fs::path dir = require_path(cfg, "out");
  const FogParams fog{cfg.at("fog_A"), cfg.at("fog_beta")};
  if (fog.A < 0 || fog.A > 1 || fog.beta < 0) throw ValidationError("fog needs A in [0, 1] and beta >= 0");
  const auto clean = read_dataset(src);
  prepare_out_dir(dir, force);
  write_dataset(dir, fog_dataset(clean, fog));
  write_resolved(dir, "fog", cfg);
  out << "fog " << dataset_digest(dir) << "\n";
  return kExitOk;
}

int cmd_train(const Json& cfg, bool force, std::ostream& out) {
  const fs::path data = require_path(cfg, "data");
  const fs::path dir = require_path(cfg, "out");
  auto config = train_config_from(cfg);
  try {
    validate(config);
  } catch (const std::invalid_argument& e) {
    throw ValidationError(e.what());
  }
  const auto dataset = read_dataset(data);
  config.model.image_size = dataset.manifest.image_size;
  config.model.num_classes = dataset.manifest.num_classes() + 1;

  std::optional<Checkpoint> resume;
  const auto resume_path = cfg.at("resume").get<std::string>();
  if (!resume_path.empty()) {
    resume = load_checkpoint(resume_path);
    if (resume->class_names != dataset.manifest.class_names) {
      throw ValidationError("resume checkpoint classes do not match the dataset manifest");
    }
    fs::create_directories(dir);
  } else {
    prepare_out_dir(dir, force);
  }
  write_resolved(dir, "train", cfg);

  double epoch_sum = 0;
  int epoch_steps = 0, current = -1;
  auto flush = [&] {
    if (epoch_steps > 0) {
      out << "epoch " << current << "/" << config.epochs << "  mean loss " << std::fixed << std::setprecision(4)
          << epoch_sum / epoch_steps << std::defaultfloat << "\n";
    }
  };
  const auto ckpt = train(config, dataset, dir, resume, [&](const StepRecord& r) {
    if (r.epoch != current) {
      flush();
      current = r.epoch;
      epoch_sum = 0;
      epoch_steps = 0;
    }
    epoch_sum += r.loss.total;
    ++epoch_steps;
  });
  flush();
  out << "checkpoint " << (dir / "checkpoint.json").string() << " (epoch " << ckpt.state.epoch << ", step "
      << ckpt.state.step << ")\n";
  return kExitOk;
}

EvalOptions eval_options_from(const Json& cfg) {
  EvalOptions o;
  const int level = cfg.at("level");
  if (level < 0 || level > 3) throw ValidationError("level must be 0 (all) or 1..3, got " + std::to_string(level));
  if (level > 0) o.decode.level = level;
  o.decode.score_threshold = cfg.at("score_threshold");
  o.decode.nms_iou = cfg.at("nms_iou");
  o.decode.max_candidates = cfg.at("max_candidates");
  o.buckets.small_max_area = cfg.at("small_max_area");
  o.buckets.medium_max_area = cfg.at("medium_max_area");
  const auto interp = cfg.at("interp").get<std::string>();
  if (interp == "points101") o.interp = ApInterpolation::Points101;
  else if (interp == "continuous") o.interp = ApInterpolation::Continuous;
  else throw ValidationError("interp must be points101 or continuous, got '" + interp + "'");
  o.saliency_interp = parse_interp(cfg.at("saliency_interp"));
  return o;
}

int cmd_eval(const Json& cfg, bool force, std::ostream& out) {
  const fs::path ckpt_path = require_path(cfg, "checkpoint");
  const fs::path data = require_path(cfg, "data");
  const fs::path dir = require_path(cfg, "out");
  const auto options = eval_options_from(cfg);
  const auto ckpt = load_checkpoint(ckpt_path);
  const auto dataset = read_dataset(data);
  if (ckpt.params.config().num_classes != dataset.manifest.num_classes() + 1) {
    throw ValidationError("checkpoint has " + std::to_string(ckpt.params.config().num_classes - 1) +
                          " foreground classes but the dataset manifest lists " +
                          std::to_string(dataset.manifest.num_classes()));
  }
  const auto split = cfg.at("split").get<std::string>();
  const auto samples = dataset.split(split);
  if (samples.empty()) throw ValidationError("split '" + split + "' is empty or missing");
  prepare_out_dir(dir, force);
  const auto report = evaluate(ckpt.params, samples, dataset.manifest.class_names, options);
  const auto json = to_json(report);
  write_file(dir / "report.json", json + "\n");
  write_file(dir / "report.csv", to_csv(report));
  write_resolved(dir, "eval", cfg);
  out << json << "\n";
  return kExitOk;
}

int cmd_visualize(const Json& cfg, bool force, std::ostream& out) {
  const fs::path ckpt_path = require_path(cfg, "checkpoint");
  const fs::path dir = require_path(cfg, "out");
  const auto ckpt = load_checkpoint(ckpt_path);
  const auto interp = parse_interp(cfg.at("saliency_interp"));

  Image image;
  std::optional<std::vector<BoxAnnotation>> boxes;
  const auto image_path = cfg.at("image").get<std::string>();
  const auto data = cfg.at("data").get<std::string>();
  if (!image_path.empty()) {
    image = read_ppm(image_path);
  } else if (!data.empty()) {
    const auto sample_id = require_path(cfg, "sample");
    const auto dataset = read_dataset(data);
    const auto it = std::find_if(dataset.samples.begin(), dataset.samples.end(),
                                 [&](const DatasetSample& s) { return s.id == sample_id; });
    if (it == dataset.samples.end()) throw ValidationError("sample '" + sample_id + "' not found in " + data);
    image = it->image;
    boxes = it->boxes;
  } else {
    throw UsageError("visualize needs --image or --data with --sample");
  }

  const auto& names = ckpt.class_names;
  const auto wanted = require_path(cfg, "class");
  std::vector<int> classes;
  for (int k = 0; k < static_cast<int>(names.size()); ++k) {
    if (wanted == "all" || wanted == names[static_cast<std::size_t>(k)] || wanted == std::to_string(k)) {
      classes.push_back(k);
    }
  }
  if (classes.empty()) {
    std::string valid;
    for (std::size_t k = 0; k < names.size(); ++k) valid += (k ? ", " : "") + std::to_string(k) + "=" + names[k];
    throw ValidationError("unknown class '" + wanted + "'; valid classes: " + valid + " (or all)");
  }

  prepare_out_dir(dir, force);
  const auto preds = predict(ckpt.params, image);
  std::vector<ScoreStack> stacks;
  for (const auto& p : preds) stacks.push_back(p.scores);
  const int H = image.height(), W = image.width();
  int files = 0;
  for (int k : classes) {
    const auto& name = names[static_cast<std::size_t>(k)];
    for (const auto& s : stacks) {
      write_pgm(dir / (name + "_level" + std::to_string(s.level.index) + ".pgm"),
                resize_plane(s.plane(k), H, W, interp));
      ++files;
    }
    const auto sal = aggregate_saliency(stacks, k, H, W, interp);
    write_pgm(dir / (name + "_combined.pgm"), sal.values);
    ++files;
    std::vector<BoxAnnotation> shown;
    if (boxes) {
      for (const auto& b : *boxes)
        if (b.class_id == k) shown.push_back(b);
    } else {
      DecodeOptions shown_opts;
      shown_opts.score_threshold = 0.3;
      for (const auto& d : decode(preds, 0, shown_opts))
        if (d.class_id == k) shown.push_back(d.box);
    }
    write_ppm(dir / (name + "_combined_overlay.ppm"), overlay_boxes(sal.values, shown));
  }
  write_resolved(dir, "visualize", cfg);
  out << "wrote " << files << " response maps to " << dir.string() << "\n";
  return kExitOk;
}

int print_checks(const std::vector<CheckResult>& results, std::ostream& out) {
  int failed = 0;
  std::map<std::string, std::pair<int, double>> summary;
  for (const auto& r : results) {
    auto& [n, worst] = summary[r.name];
    ++n;
    worst = std::max(worst, r.error);
    if (!r.pass) {
      ++failed;
      out << "FAIL " << r.name << " seed=" << r.seed << " error=" << r.error << " tolerance=" << r.tolerance << "\n";
    }
  }
  for (const auto& [name, s] : summary) {
    out << std::left << std::setw(28) << name << " runs=" << s.first << " worst=" << s.second << "\n";
  }
  out << (failed ? "FAILED " : "OK ") << results.size() - failed << "/" << results.size() << " checks passed\n";
  return failed ? kExitValidation : kExitOk;
}

int cmd_check_grads(const Json& cfg, std::ostream& out) {
  const int seeds = cfg.at("seeds");
  if (seeds < 1) throw ValidationError("seeds must be >= 1");
  return print_checks(gradient_suite(seeds, cfg.at("seed").get<std::uint64_t>(), cfg.at("tolerance")), out);
}

int cmd_oracle(const Json& cfg, std::ostream& out) {
  const int cases = cfg.at("cases");
  if (cases < 1) throw ValidationError("cases must be >= 1");
  return print_checks(oracle_suite(cases, cfg.at("seed").get<std::uint64_t>()), out);
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Prototype-based toy object detector: data synthesis, training, evaluation"};
  app.require_subcommand(1);
  bool force = false;

  struct Entry {
    std::unique_ptr<Binder> binder;
    std::function<int(const Json&)> run;
  };
  std::vector<Entry> entries;
  auto add = [&](const char* name, const char* help, Json defaults, std::function<int(const Json&)> fn,
                 bool takes_force) {
    auto* sub = app.add_subcommand(name, help);
    if (takes_force) sub->add_flag("--force", force, "write into a non-empty output directory");
    entries.push_back({std::make_unique<Binder>(sub, std::move(defaults)), std::move(fn)});
    return sub;
  };

  add("synth", "generate clean, hazy and low-light synthetic datasets", synth_defaults(),
      [&](const Json& c) { return cmd_synth(c, force, out); }, true);
  add("fog", "apply atmospheric haze to an existing dataset", fog_defaults(),
      [&](const Json& c) { return cmd_fog(c, force, out); }, true);
  auto* train_cmd = add("train", "train the detector", train_defaults(),
                        [&](const Json& c) { return cmd_train(c, force, out); }, true);
  bool no_pr = false;
  train_cmd->add_flag("--no-pr", no_pr, "disable prototype regularization (same as --pr-variant off)");
  add("eval", "evaluate a checkpoint: mAP@0.5, Disc., AUC_ft, Spar.", eval_defaults(),
      [&](const Json& c) { return cmd_eval(c, force, out); }, true);
  add("visualize", "export per-level and combined response maps", visualize_defaults(),
      [&](const Json& c) { return cmd_visualize(c, force, out); }, true);
  add("check-grads", "run the finite-difference gradient suite", check_grads_defaults(),
      [&](const Json& c) { return cmd_check_grads(c, out); }, false);
  add("oracle", "run the rasterization and AUC oracles", oracle_defaults(),
      [&](const Json& c) { return cmd_oracle(c, out); }, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitUsage;
  }

  try {
    for (auto& e : entries) {
      if (!e.binder->app()->parsed()) continue;
      auto cfg = e.binder->resolve();
      if (e.binder->app() == train_cmd && no_pr) {
        if (train_cmd->get_option("--pr-variant")->count() && cfg["pr_variant"] != "off") {
          throw UsageError("--no-pr conflicts with --pr-variant " + cfg["pr_variant"].get<std::string>());
        }
        cfg["pr_variant"] = "off";
      }
      return e.run(cfg);
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  return kExitUsage;
}

}  // namespace protodet::cli
