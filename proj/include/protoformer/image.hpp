#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "protoformer/autograd.hpp"
#include "protoformer/error.hpp"

namespace protoformer {

/// Square RGB image, pixels as 3 x (size*size) with values in [0, 1].
/// Normalized coordinate (x, y) maps to pixel position (x*size - 0.5, y*size - 0.5)
/// in pixel-center units.
struct Image {
  int size = 0;
  Mat pixels;

  static Image from_gray(int size, const std::vector<double>& gray) {
    Image img;
    img.size = size;
    img.pixels.resize(3, static_cast<Eigen::Index>(size) * size);
    for (Eigen::Index i = 0; i < img.pixels.cols(); ++i) img.pixels.col(i).setConstant(gray[i]);
    return img;
  }

  double at(int channel, int y, int x) const { return pixels(channel, static_cast<Eigen::Index>(y) * size + x); }
};

/// Bilinear sample of channel `c` at continuous pixel coordinates; zero outside.
inline double sample_bilinear(const Image& img, int c, double px, double py) {
  const int x0 = static_cast<int>(std::floor(px));
  const int y0 = static_cast<int>(std::floor(py));
  const double fx = px - x0, fy = py - y0;
  auto get = [&](int y, int x) { return (x < 0 || y < 0 || x >= img.size || y >= img.size) ? 0.0 : img.at(c, y, x); };
  return (1 - fy) * ((1 - fx) * get(y0, x0) + fx * get(y0, x0 + 1)) + fy * ((1 - fx) * get(y0 + 1, x0) + fx * get(y0 + 1, x0 + 1));
}

/// Rotates by `degrees` about the image center, matching rotate_point.
inline Image rotate_image(const Image& img, double degrees) {
  const double t = degrees * 3.14159265358979323846 / 180.0;
  const double c = std::cos(t), s = std::sin(t);
  Image out;
  out.size = img.size;
  out.pixels = Mat::Zero(img.pixels.rows(), img.pixels.cols());
  const double center = img.size / 2.0;
  for (int y = 0; y < img.size; ++y) {
    for (int x = 0; x < img.size; ++x) {
      const double dx = x + 0.5 - center, dy = y + 0.5 - center;
      // inverse rotation
      const double sx = c * dx + s * dy + center - 0.5;
      const double sy = -s * dx + c * dy + center - 0.5;
      for (int ch = 0; ch < img.pixels.rows(); ++ch) {
        out.pixels(ch, static_cast<Eigen::Index>(y) * img.size + x) = sample_bilinear(img, ch, sx, sy);
      }
    }
  }
  return out;
}

inline Image flip_image(const Image& img) {
  Image out = img;
  for (int y = 0; y < img.size; ++y) {
    for (int x = 0; x < img.size; ++x) {
      out.pixels.col(static_cast<Eigen::Index>(y) * img.size + x) =
          img.pixels.col(static_cast<Eigen::Index>(y) * img.size + (img.size - 1 - x));
    }
  }
  return out;
}

/// Writes channel 0 as an 8-bit binary PGM.
inline void save_pgm(const Image& img, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "P5\n" << img.size << " " << img.size << "\n255\n";
  std::vector<unsigned char> bytes(static_cast<std::size_t>(img.size) * img.size);
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const double v = std::clamp(img.pixels(0, static_cast<Eigen::Index>(i)), 0.0, 1.0);
    bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// Reads a square 8-bit binary PGM, replicating it into three channels.
inline Image load_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open image " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P5" || w <= 0 || w != h || maxval != 255) throw ConfigError("unsupported image format in " + path.string());
  in.get();
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw ConfigError("truncated image " + path.string());
  std::vector<double> gray(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) gray[i] = bytes[i] / 255.0;
  return Image::from_gray(w, gray);
}

}  // namespace protoformer
