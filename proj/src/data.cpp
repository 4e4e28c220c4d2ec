#include "protodet/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

namespace protodet {

// ---- rng --------------------------------------------------------------------

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

int Rng::uniform_int(int lo, int hi) {
  if (hi < lo) throw std::invalid_argument("uniform_int: empty range");
  const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(engine_() % span);
}

double Rng::normal() {
  if (spare_) {
    const double v = *spare_;
    spare_.reset();
    return v;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
  return r * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finalizer over the combined key
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ull + index + 0x632BE59BD9B4E019ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

const std::vector<std::string>& shape_class_names() {
  static const std::vector<std::string> names = {"disc", "square", "triangle"};
  return names;
}

// ---- scenes -----------------------------------------------------------------

namespace {

bool inside_shape(ShapeKind kind, const BoxAnnotation& b, double x, double y) {
  switch (kind) {
    case ShapeKind::Disc: {
      const double r = 0.5 * b.w;
      return (x - b.cx) * (x - b.cx) + (y - b.cy) * (y - b.cy) <= r * r;
    }
    case ShapeKind::Square: return x >= b.x0() && x <= b.x1() && y >= b.y0() && y <= b.y1();
    case ShapeKind::Triangle: {
      if (y < b.y0() || y > b.y1()) return false;
      const double half = 0.5 * b.w * (y - b.y0()) / b.h;
      return std::abs(x - b.cx) <= half;
    }
  }
  return false;
}

constexpr float kClassColor[3][3] = {{0.85f, 0.30f, 0.25f}, {0.30f, 0.80f, 0.35f}, {0.30f, 0.40f, 0.90f}};

bool overlaps(const BoxAnnotation& a, const BoxAnnotation& b, double gap) {
  return a.x0() < b.x1() + gap && b.x0() < a.x1() + gap && a.y0() < b.y1() + gap && b.y0() < a.y1() + gap;
}

std::vector<ObjectRequest> draw_objects(Rng& rng, const SceneSpec& spec) {
  if (!spec.fixed_objects.empty()) return spec.fixed_objects;
  std::vector<ObjectRequest> out;
  const int count = rng.uniform_int(spec.min_objects, spec.max_objects);
  double total_weight = 0;
  for (const auto& b : spec.bands) total_weight += b.weight;
  int large = 0;
  for (int n = 0; n < count; ++n) {
    double pick = rng.uniform() * total_weight;
    std::size_t band = 0;
    while (band + 1 < spec.bands.size() && pick >= spec.bands[band].weight) pick -= spec.bands[band++].weight;
    if (band + 1 == spec.bands.size() && spec.bands.size() > 1) {
      if (large >= spec.max_large) band = rng.uniform_int(0, static_cast<int>(spec.bands.size()) - 2);
      else ++large;
    }
    const auto& b = spec.bands[band];
    out.push_back({rng.uniform_int(0, spec.num_classes - 1), rng.uniform_int(b.min_size, b.max_size)});
  }
  // big objects first so they still find room
  std::stable_sort(out.begin(), out.end(), [](const ObjectRequest& a, const ObjectRequest& b) { return a.size > b.size; });
  return out;
}

}  // namespace

Scene synth_scene(std::uint64_t seed, const SceneSpec& spec) {
  if (spec.num_classes < 1 || spec.num_classes > 3) {
    throw std::invalid_argument("synth_scene: between 1 and 3 shape classes are supported");
  }
  if (spec.bands.empty()) throw std::invalid_argument("synth_scene: no size bands");
  const int n = spec.image_size;
  Rng rng(seed);
  Scene scene;
  scene.seed = seed;
  scene.image = Image(n, n);

  // dim background with a slow gradient and a faint tint
  const double gx = rng.uniform(-1, 1), gy = rng.uniform(-1, 1);
  float tint[3];
  for (float& t : tint) t = static_cast<float>(rng.uniform(0.7, 1.3));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const double g = 1.0 + 0.5 * (gx * (j / double(n) - 0.5) + gy * (i / double(n) - 0.5));
      for (int c = 0; c < 3; ++c) scene.image.at(c, i, j) = static_cast<float>(spec.background_level * g * tint[c]);
    }
  }

  const auto requests = draw_objects(rng, spec);
  for (const auto& req : requests) {
    if (req.class_id < 0 || req.class_id >= spec.num_classes) {
      throw std::invalid_argument("synth_scene: class " + std::to_string(req.class_id) + " not in spec");
    }
    if (req.size < 2 || req.size > n) {
      throw PlacementError("synth_scene: object size " + std::to_string(req.size) + " does not fit image size " +
                           std::to_string(n));
    }
    std::optional<BoxAnnotation> placed;
    for (int attempt = 0; attempt < spec.max_retries && !placed; ++attempt) {
      const int x0 = rng.uniform_int(0, n - req.size);
      const int y0 = rng.uniform_int(0, n - req.size);
      const auto cand = BoxAnnotation::from_corners(req.class_id, x0, y0, x0 + req.size, y0 + req.size);
      const bool clash = std::any_of(scene.boxes.begin(), scene.boxes.end(),
                                     [&](const BoxAnnotation& b) { return overlaps(cand, b, spec.min_gap); });
      if (!clash) placed = cand;
    }
    if (!placed) {
      if (!spec.fixed_objects.empty()) {
        throw PlacementError("synth_scene: no non-overlapping position (gap " + std::to_string(spec.min_gap) +
                             " px) for a " + std::to_string(req.size) + " px object after " +
                             std::to_string(spec.max_retries) + " retries");
      }
      continue;  // random draws just skip objects that do not fit
    }
    const auto& box = *placed;
    const auto kind = static_cast<ShapeKind>(box.class_id);
    const double brightness = rng.uniform(0.55, 1.0);
    float color[3];
    for (int c = 0; c < 3; ++c) {
      color[c] = static_cast<float>(std::clamp(kClassColor[box.class_id][c] * brightness + rng.uniform(-0.12, 0.12), 0.0, 1.0));
    }
    for (int i = static_cast<int>(box.y0()); i < static_cast<int>(box.y1()); ++i) {
      for (int j = static_cast<int>(box.x0()); j < static_cast<int>(box.x1()); ++j) {
        if (!inside_shape(kind, box, j + 0.5, i + 0.5)) continue;
        for (int c = 0; c < 3; ++c) scene.image.at(c, i, j) = color[c];
      }
    }
    scene.boxes.push_back(box);
  }

  for (std::size_t k = 0; k < scene.image.rgb.numel(); ++k) {
    scene.image.rgb[k] = static_cast<float>(std::clamp(scene.image.rgb[k] + spec.noise_level * rng.normal(), 0.0, 1.0));
  }
  return scene;
}

// ---- degradation ------------------------------------------------------------

double fog_depth(int i, int j, int rows, int cols) {
  const double ci = rows / 2, cj = cols / 2;
  const double rho = std::hypot(i - ci, j - cj);
  return -0.04 * rho + std::sqrt(static_cast<double>(std::max(rows, cols)));
}

Image apply_fog(const Image& image, const FogParams& params) {
  const int h = image.height(), w = image.width();
  Image out(h, w);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const double t = std::clamp(std::exp(-params.beta * fog_depth(i, j, h, w)), 0.0, 1.0);
      for (int c = 0; c < 3; ++c) {
        out.at(c, i, j) = static_cast<float>(image.at(c, i, j) * t + params.A * (1.0 - t));
      }
    }
  }
  return out;
}

Image apply_lowlight(const Image& image, double gamma, double noise_sigma, std::uint64_t seed) {
  if (gamma < 1.0) throw std::invalid_argument("apply_lowlight: gamma must be >= 1");
  if (noise_sigma < 0.0) throw std::invalid_argument("apply_lowlight: noise sigma must be >= 0");
  Image out = image;
  Rng rng(seed);
  for (std::size_t k = 0; k < out.rgb.numel(); ++k) {
    double v = std::pow(static_cast<double>(image.rgb[k]), gamma);
    if (noise_sigma > 0) v += noise_sigma * rng.normal();
    out.rgb[k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return out;
}

// ---- datasets ---------------------------------------------------------------

std::vector<const DatasetSample*> Dataset::split(const std::string& name) const {
  std::vector<const DatasetSample*> out;
  const auto it = manifest.splits.find(name);
  if (it == manifest.splits.end()) return out;
  for (const auto& id : it->second) {
    const auto s = std::find_if(samples.begin(), samples.end(), [&](const DatasetSample& d) { return d.id == id; });
    if (s == samples.end()) throw DatasetError("split '" + name + "' lists unknown image " + id);
    out.push_back(&*s);
  }
  return out;
}

namespace {
std::string sample_id(const std::string& split, int index) {
  std::ostringstream os;
  os << split << '_' << std::setw(4) << std::setfill('0') << index;
  return os.str();
}
}  // namespace

Dataset build_synthetic_dataset(const SceneSpec& spec, std::uint64_t seed, int n_train, int n_test) {
  Dataset ds;
  ds.manifest.name = "synthetic";
  ds.manifest.image_size = spec.image_size;
  ds.manifest.class_names.assign(shape_class_names().begin(), shape_class_names().begin() + spec.num_classes);
  ds.manifest.seed = seed;
  int index = 0;
  for (const auto& [split, count] : {std::pair<std::string, int>{"train", n_train}, {"test", n_test}}) {
    auto& ids = ds.manifest.splits[split];
    for (int k = 0; k < count; ++k) {
      auto scene = synth_scene(mix_seed(seed, static_cast<std::uint64_t>(index++)), spec);
      DatasetSample s{sample_id(split, k), split, std::move(scene.image), std::move(scene.boxes)};
      ids.push_back(s.id);
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

Dataset fog_dataset(const Dataset& clean, const FogParams& params) {
  Dataset out = clean;
  out.manifest.name = clean.manifest.name + "-fog";
  out.manifest.degradation["fog_A"] = params.A;
  out.manifest.degradation["fog_beta"] = params.beta;
  for (auto& s : out.samples) s.image = apply_fog(s.image, params);
  return out;
}

Dataset lowlight_dataset(const Dataset& clean, double gamma, double noise_sigma, std::uint64_t seed) {
  Dataset out = clean;
  out.manifest.name = clean.manifest.name + "-lowlight";
  out.manifest.degradation["lowlight_gamma"] = gamma;
  out.manifest.degradation["lowlight_sigma"] = noise_sigma;
  std::uint64_t k = 0;
  for (auto& s : out.samples) s.image = apply_lowlight(s.image, gamma, noise_sigma, mix_seed(seed, k++));
  return out;
}

void write_dataset(const std::filesystem::path& root, const Dataset& dataset) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "images");
  nlohmann::json m;
  m["name"] = dataset.manifest.name;
  m["image_size"] = dataset.manifest.image_size;
  m["classes"] = dataset.manifest.class_names;
  m["splits"] = dataset.manifest.splits;
  m["degradation"] = dataset.manifest.degradation;
  m["seed"] = dataset.manifest.seed;
  m["annotations"] = "annotations.jsonl";
  m["image_dir"] = "images";
  write_file(root / "manifest.json", m.dump(2) + "\n");

  std::string lines;
  for (const auto& s : dataset.samples) {
    for (const auto& b : s.boxes) {
      nlohmann::ordered_json r = {{"image", s.id}, {"class", b.class_id}, {"cx", b.cx}, {"cy", b.cy}, {"w", b.w}, {"h", b.h}};
      lines += r.dump() + "\n";
    }
    write_ppm(root / "images" / (s.id + ".ppm"), s.image);
  }
  write_file(root / "annotations.jsonl", lines);
}

Dataset read_dataset(const std::filesystem::path& root) {
  const auto manifest_path = root / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) throw DatasetError("missing manifest " + manifest_path.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(manifest_path.string() + ": " + e.what());
  }
  Dataset ds;
  try {
    ds.manifest.name = m.value("name", "dataset");
    ds.manifest.image_size = m.at("image_size").get<int>();
    ds.manifest.class_names = m.at("classes").get<std::vector<std::string>>();
    ds.manifest.splits = m.at("splits").get<std::map<std::string, std::vector<std::string>>>();
    if (m.contains("degradation")) ds.manifest.degradation = m.at("degradation").get<std::map<std::string, double>>();
    ds.manifest.seed = m.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(manifest_path.string() + ": " + e.what());
  }

  std::map<std::string, std::vector<BoxAnnotation>> boxes;
  const auto ann_path = root / m.value("annotations", std::string("annotations.jsonl"));
  std::ifstream in(ann_path);
  if (!in) throw DatasetError("missing annotations " + ann_path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto r = nlohmann::json::parse(line);
      BoxAnnotation b{r.at("class").get<int>(), r.at("cx").get<double>(), r.at("cy").get<double>(),
                      r.at("w").get<double>(), r.at("h").get<double>()};
      if (b.class_id < 0 || b.class_id >= ds.manifest.num_classes()) throw DatasetError("class index out of range");
      if (!(b.w > 0 && b.h > 0)) throw DatasetError("box width and height must be positive");
      boxes[r.at("image").get<std::string>()].push_back(b);
    } catch (const std::exception& e) {
      throw DatasetError(ann_path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }

  const auto image_dir = root / m.value("image_dir", std::string("images"));
  for (const auto& [split, ids] : ds.manifest.splits) {
    for (const auto& id : ids) {
      DatasetSample s;
      s.id = id;
      s.split = split;
      s.image = read_ppm(image_dir / (id + ".ppm"));
      if (auto it = boxes.find(id); it != boxes.end()) s.boxes = it->second;
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string dataset_digest(const std::filesystem::path& root) {
  std::string all = read_file(root / "manifest.json");
  all += read_file(root / "annotations.jsonl");
  const auto ds_manifest = nlohmann::json::parse(read_file(root / "manifest.json"));
  for (const auto& [split, ids] : ds_manifest.at("splits").items()) {
    for (const auto& id : ids) all += read_file(root / "images" / (id.get<std::string>() + ".ppm"));
  }
  return fnv1a_hex(all);
}

}  // namespace protodet
