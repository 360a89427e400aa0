#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "error.hpp"
#include "geometry.hpp"

namespace zsg {

/// Binary PPM (P6, 8-bit) from planar RGB floats in [0, 1].
inline void write_ppm(const std::string& path, ImageSize size, const std::vector<float>& planar) {
  const std::size_t hw = static_cast<std::size_t>(size.width * size.height);
  require(planar.size() == 3 * hw, ErrorClass::InvalidInput, "write_ppm: pixel count mismatch");
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorClass::IoError, "cannot write image " + path);
  out << "P6\n" << size.width << ' ' << size.height << "\n255\n";
  std::vector<unsigned char> bytes(3 * hw);
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      bytes[3 * i + c] = static_cast<unsigned char>(std::lround(std::clamp(planar[c * hw + i], 0.0f, 1.0f) * 255.0f));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorClass::IoError, "failed writing image " + path);
}

inline std::vector<float> read_ppm(const std::string& path, ImageSize* size_out) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorClass::IoError, "cannot open image " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  require(magic == "P6" && w > 0 && h > 0 && maxval == 255, ErrorClass::IoError, "unsupported PPM " + path);
  in.get();
  const std::size_t hw = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  std::vector<unsigned char> bytes(3 * hw);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(in), ErrorClass::IoError, "truncated PPM " + path);
  std::vector<float> planar(3 * hw);
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c) planar[c * hw + i] = static_cast<float>(bytes[3 * i + c]) / 255.0f;
  if (size_out) *size_out = {w, h};
  return planar;
}

/// Draws a 1-pixel rectangle outline into planar RGB pixels.
inline void draw_box(std::vector<float>& planar, ImageSize size, const Box& b, float r, float g, float bl) {
  const std::size_t hw = static_cast<std::size_t>(size.width * size.height);
  auto put = [&](long x, long y) {
    if (x < 0 || y < 0 || x >= size.width || y >= size.height) return;
    const std::size_t i = static_cast<std::size_t>(y * size.width + x);
    planar[i] = r;
    planar[hw + i] = g;
    planar[2 * hw + i] = bl;
  };
  const long x1 = std::lround(b.x1), y1 = std::lround(b.y1);
  const long x2 = std::lround(b.x2) - 1, y2 = std::lround(b.y2) - 1;
  for (long x = x1; x <= x2; ++x) {
    put(x, y1);
    put(x, y2);
  }
  for (long y = y1; y <= y2; ++y) {
    put(x1, y);
    put(x2, y);
  }
}

}  // namespace zsg
