#pragma once

// Synthetic multi-scale scenes, degradation (haze, low light) and the
// on-disk dataset format: PPM images, JSON-lines annotations, a manifest.

#include "protodet/imageio.hpp"
#include "protodet/splgs.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace protodet {

/// Portable deterministic generator: mt19937_64 output is fixed by the
/// standard, and the conversions below do not depend on the library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform();  // [0, 1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int uniform_int(int lo, int hi);  // inclusive
  double normal();                  // N(0, 1), Box-Muller
  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
  std::optional<double> spare_;
};

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

enum class ShapeKind { Disc = 0, Square = 1, Triangle = 2 };

struct SizeBand {
  int min_size = 10;
  int max_size = 22;
  double weight = 1.0;
};

struct ObjectRequest {
  int class_id = 0;
  int size = 16;
};

struct SceneSpec {
  int image_size = 256;
  int num_classes = 3;  // foreground classes; disc, square, triangle
  int min_objects = 2;
  int max_objects = 4;
  int max_large = 1;  // objects drawn from the last band
  std::vector<SizeBand> bands = {{10, 22, 0.45}, {28, 60, 0.35}, {96, 200, 0.20}};
  double background_level = 0.12;
  double noise_level = 0.03;
  double min_gap = 2.0;  // pixels between placed boxes
  int max_retries = 200;
  std::vector<ObjectRequest> fixed_objects;  // when non-empty, replaces the random draw
};

struct Scene {
  Image image;
  std::vector<BoxAnnotation> boxes;
  std::uint64_t seed = 0;
};

class PlacementError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Scene synth_scene(std::uint64_t seed, const SceneSpec& spec);

const std::vector<std::string>& shape_class_names();

// ---- degradation ------------------------------------------------------------

struct FogParams {
  double A = 0.5;
  double beta = 0.1;
};

/// Atmospheric scattering I = J t + A (1 - t), t = clamp(exp(-beta d), 0, 1)
/// with d = -0.04 rho + sqrt(max(rows, cols)) and rho the pixel distance to
/// the image centre (rows / 2, cols / 2).
Image apply_fog(const Image& image, const FogParams& params);

/// Haze depth d and transmission at pixel (i, j); exposed for the oracle.
double fog_depth(int i, int j, int rows, int cols);

/// clamp(I^gamma + N(0, sigma), 0, 1), deterministic per seed.
Image apply_lowlight(const Image& image, double gamma, double noise_sigma, std::uint64_t seed);

// ---- persistence --------------------------------------------------------------

struct DatasetSample {
  std::string id;
  std::string split;
  Image image;
  std::vector<BoxAnnotation> boxes;
};

struct Manifest {
  std::string name = "dataset";
  int image_size = 256;
  std::vector<std::string> class_names;
  std::map<std::string, std::vector<std::string>> splits;
  std::map<std::string, double> degradation;  // e.g. fog_A, fog_beta
  std::uint64_t seed = 0;

  int num_classes() const { return static_cast<int>(class_names.size()); }
};

struct Dataset {
  Manifest manifest;
  std::vector<DatasetSample> samples;

  std::vector<const DatasetSample*> split(const std::string& name) const;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Builds train/test splits of synthetic scenes. Scene i uses
/// mix_seed(seed, i).
Dataset build_synthetic_dataset(const SceneSpec& spec, std::uint64_t seed, int n_train, int n_test);

Dataset fog_dataset(const Dataset& clean, const FogParams& params);
Dataset lowlight_dataset(const Dataset& clean, double gamma, double noise_sigma, std::uint64_t seed);

/// root/manifest.json, root/annotations.jsonl, root/images/<id>.ppm
void write_dataset(const std::filesystem::path& root, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& root);

/// FNV-1a 64 over manifest, annotations and every image file, in manifest
/// order; hex encoded.
std::string dataset_digest(const std::filesystem::path& root);

std::string fnv1a_hex(const std::string& bytes);

}  // namespace protodet
