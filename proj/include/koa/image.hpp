#pragma once

// Grayscale images in [0,1] and portable graymap (PGM) I/O.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include "koa/errors.hpp"

namespace koa {

struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;  // row-major

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 0.f) : height(h), width(w), pixels(h * w, fill) {}

  float& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
  float at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
  bool empty() const noexcept { return pixels.empty(); }

  friend bool operator==(const Image&, const Image&) = default;
};

inline Image flip_horizontal(const Image& img) {
  Image out(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) out.at(y, x) = img.at(y, img.width - 1 - x);
  return out;
}

// Bilinear resampling with corner-aligned grids: output corners sample
// input corners exactly, and an equal-size resize is the identity.
inline Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w) {
  if (img.empty()) throw ArgumentError("resize_bilinear: empty image");
  if (out_h == 0 || out_w == 0) throw ArgumentError("resize_bilinear: output size must be positive");
  Image out(out_h, out_w);
  const double sy = out_h > 1 ? static_cast<double>(img.height - 1) / static_cast<double>(out_h - 1) : 0.0;
  const double sx = out_w > 1 ? static_cast<double>(img.width - 1) / static_cast<double>(out_w - 1) : 0.0;
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = static_cast<double>(y) * sy;
    const std::size_t y0 = std::min(static_cast<std::size_t>(fy), img.height - 1);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double ay = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = static_cast<double>(x) * sx;
      const std::size_t x0 = std::min(static_cast<std::size_t>(fx), img.width - 1);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double ax = fx - static_cast<double>(x0);
      const double top = img.at(y0, x0) * (1 - ax) + img.at(y0, x1) * ax;
      const double bottom = img.at(y1, x0) * (1 - ax) + img.at(y1, x1) * ax;
      out.at(y, x) = static_cast<float>(top * (1 - ay) + bottom * ay);
    }
  }
  return out;
}

namespace detail {

inline std::string pgm_token(std::istream& in, const std::string& source) {
  std::string tok;
  while (in) {
    const int c = in.peek();
    if (c == '#') {
      std::string comment;
      std::getline(in, comment);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  if (!(in >> tok)) throw ParseError(source, 0, "truncated PGM header");
  return tok;
}

inline std::size_t pgm_number(std::istream& in, const std::string& source, const char* field) {
  const std::string tok = pgm_token(in, source);
  try {
    std::size_t pos = 0;
    const unsigned long v = std::stoul(tok, &pos);
    if (pos != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw ParseError(source, 0, std::string("bad PGM ") + field + " '" + tok + "'");
  }
}

}  // namespace detail

// Reads binary (P5) or ASCII (P2) graymaps with maxval up to 65535 and
// normalizes samples to [0,1].
inline Image read_pgm(std::istream& in, const std::string& source = "<stream>") {
  const std::string magic = detail::pgm_token(in, source);
  if (magic != "P5" && magic != "P2") throw ParseError(source, 0, "not a PGM file (magic '" + magic + "')");
  const std::size_t width = detail::pgm_number(in, source, "width");
  const std::size_t height = detail::pgm_number(in, source, "height");
  const std::size_t maxval = detail::pgm_number(in, source, "maxval");
  if (width == 0 || height == 0) throw ParseError(source, 0, "PGM dimensions must be positive");
  if (maxval == 0 || maxval > 65535) throw ParseError(source, 0, "PGM maxval out of range");
  Image img(height, width);
  const float scale = 1.f / static_cast<float>(maxval);
  if (magic == "P5") {
    in.get();  // single whitespace after maxval
    const std::size_t bytes = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> raw(width * height * bytes);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw ParseError(source, 0, "truncated PGM raster");
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      const unsigned v = bytes == 2 ? (static_cast<unsigned>(raw[2 * i]) << 8) | raw[2 * i + 1] : raw[i];
      img.pixels[i] = static_cast<float>(v) * scale;
    }
  } else {
    for (auto& p : img.pixels) p = static_cast<float>(detail::pgm_number(in, source, "sample")) * scale;
  }
  return img;
}

inline Image read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open image " + path.string());
  return read_pgm(in, path.string());
}

// Writes a binary graymap with 8 or 16 bits per sample (big-endian for 16).
inline void write_pgm(std::ostream& out, const Image& img, int bit_depth = 8) {
  if (bit_depth != 8 && bit_depth != 16) throw ArgumentError("write_pgm: bit depth must be 8 or 16");
  const unsigned maxval = bit_depth == 8 ? 255u : 65535u;
  out << "P5\n" << img.width << ' ' << img.height << '\n' << maxval << '\n';
  std::vector<unsigned char> raw;
  raw.reserve(img.pixels.size() * (bit_depth / 8));
  for (float p : img.pixels) {
    const auto v = static_cast<unsigned>(std::lround(std::clamp(p, 0.f, 1.f) * static_cast<float>(maxval)));
    if (bit_depth == 16) raw.push_back(static_cast<unsigned char>(v >> 8));
    raw.push_back(static_cast<unsigned char>(v & 0xff));
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

inline void write_pgm(const std::filesystem::path& path, const Image& img, int bit_depth = 8) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write image " + path.string());
  write_pgm(out, img, bit_depth);
  if (!out) throw Error("failed writing image " + path.string());
}

}  // namespace koa
