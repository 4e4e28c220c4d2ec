#pragma once

#include "protodet/proto.hpp"
#include "protodet/splgs.hpp"
#include "protodet/tensor.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace protodet {

/// RGB image, channel-first 3 x H x W, values in [0, 1].
struct Image {
  Tensor rgb;

  Image() = default;
  Image(int height, int width, float fill = 0.0f) : rgb(Shape{3, height, width}, fill) {}
  explicit Image(Tensor t) : rgb(std::move(t)) {}

  int height() const { return rgb.dim(1); }
  int width() const { return rgb.dim(2); }
  float& at(int c, int i, int j) { return rgb.at(c, i, j); }
  float at(int c, int i, int j) const { return rgb.at(c, i, j); }
};

class ImageFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary PPM (P6, maxval 255). Values are clamped and rounded.
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);
std::string encode_ppm(const Image& image);
Image decode_ppm(const std::string& bytes, const std::string& source = "<memory>");

/// Binary PGM (P5) with pixel = round(255 * clamp(v, 0, 1)).
void write_pgm(const std::filesystem::path& path, const Plane& plane);
Plane read_pgm(const std::filesystem::path& path);

/// Grayscale plane rendered to RGB with box outlines in red.
Image overlay_boxes(const Plane& plane, const std::vector<BoxAnnotation>& boxes);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace protodet
