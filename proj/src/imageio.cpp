#include "protodet/imageio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace protodet {

namespace {

unsigned char quantize(float v) {
  return static_cast<unsigned char>(std::lround(255.0f * std::clamp(v, 0.0f, 1.0f)));
}

// Parses "P?\n<w> <h>\n<maxval>\n" style headers with comments.
struct PnmHeader {
  int width = 0;
  int height = 0;
  int maxval = 0;
  std::size_t data_offset = 0;
};

PnmHeader parse_header(const std::string& bytes, const char* magic, const std::string& source) {
  if (bytes.size() < 2 || bytes.compare(0, 2, magic) != 0) {
    throw ImageFormatError(source + ": bad magic at byte offset 0, expected " + magic);
  }
  std::size_t pos = 2;
  auto next_int = [&](const char* what) {
    while (pos < bytes.size()) {
      if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    long value = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      value = value * 10 + (bytes[pos] - '0');
      if (value > 1'000'000) throw ImageFormatError(source + ": " + what + " too large at byte offset " + std::to_string(start));
      ++pos;
    }
    if (pos == start) throw ImageFormatError(source + ": missing " + what + " at byte offset " + std::to_string(start));
    return static_cast<int>(value);
  };
  PnmHeader h;
  h.width = next_int("width");
  h.height = next_int("height");
  h.maxval = next_int("maxval");
  if (h.maxval != 255) throw ImageFormatError(source + ": only maxval 255 is supported");
  if (h.width <= 0 || h.height <= 0) throw ImageFormatError(source + ": empty image");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw ImageFormatError(source + ": missing separator after header at byte offset " + std::to_string(pos));
  }
  h.data_offset = pos + 1;
  return h;
}

}  // namespace

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string encode_ppm(const Image& image) {
  const int h = image.height(), w = image.width();
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + static_cast<std::size_t>(h) * w * 3);
  std::size_t p = header;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int c = 0; c < 3; ++c) out[p++] = static_cast<char>(quantize(image.at(c, i, j)));
  return out;
}

Image decode_ppm(const std::string& bytes, const std::string& source) {
  const auto h = parse_header(bytes, "P6", source);
  const std::size_t need = static_cast<std::size_t>(h.width) * h.height * 3;
  if (bytes.size() < h.data_offset + need) {
    throw ImageFormatError(source + ": truncated pixel data at byte offset " + std::to_string(bytes.size()) +
                           " (expected " + std::to_string(h.data_offset + need) + " bytes)");
  }
  Image img(h.height, h.width);
  std::size_t p = h.data_offset;
  for (int i = 0; i < h.height; ++i)
    for (int j = 0; j < h.width; ++j)
      for (int c = 0; c < 3; ++c) img.at(c, i, j) = static_cast<unsigned char>(bytes[p++]) / 255.0f;
  return img;
}

void write_ppm(const std::filesystem::path& path, const Image& image) { write_file(path, encode_ppm(image)); }

Image read_ppm(const std::filesystem::path& path) { return decode_ppm(read_file(path), path.string()); }

void write_pgm(const std::filesystem::path& path, const Plane& plane) {
  const auto h = static_cast<int>(plane.rows()), w = static_cast<int>(plane.cols());
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.reserve(out.size() + static_cast<std::size_t>(h) * w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) out.push_back(static_cast<char>(quantize(plane(i, j))));
  write_file(path, out);
}

Plane read_pgm(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const auto h = parse_header(bytes, "P5", path.string());
  const std::size_t need = static_cast<std::size_t>(h.width) * h.height;
  if (bytes.size() < h.data_offset + need) {
    throw ImageFormatError(path.string() + ": truncated pixel data at byte offset " + std::to_string(bytes.size()));
  }
  Plane p(h.height, h.width);
  for (std::size_t k = 0; k < need; ++k) p.data()[k] = static_cast<unsigned char>(bytes[h.data_offset + k]) / 255.0f;
  return p;
}

Image overlay_boxes(const Plane& plane, const std::vector<BoxAnnotation>& boxes) {
  const int h = static_cast<int>(plane.rows()), w = static_cast<int>(plane.cols());
  Image img(h, w);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) img.at(c, i, j) = plane(i, j);
  auto paint = [&](int i, int j) {
    if (i < 0 || i >= h || j < 0 || j >= w) return;
    img.at(0, i, j) = 1.0f;
    img.at(1, i, j) = 0.0f;
    img.at(2, i, j) = 0.0f;
  };
  for (const auto& b : boxes) {
    const int x0 = static_cast<int>(std::floor(b.x0())), x1 = static_cast<int>(std::ceil(b.x1())) - 1;
    const int y0 = static_cast<int>(std::floor(b.y0())), y1 = static_cast<int>(std::ceil(b.y1())) - 1;
    for (int j = x0; j <= x1; ++j) {
      paint(y0, j);
      paint(y1, j);
    }
    for (int i = y0; i <= y1; ++i) {
      paint(i, x0);
      paint(i, x1);
    }
  }
  return img;
}

}  // namespace protodet
