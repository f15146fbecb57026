#pragma once

#include <cctype>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "dml/error.hpp"

namespace dml {

/// 8-bit raster, interleaved channels (1 = gray, 3 = RGB).
struct Raster {
  std::size_t w = 0;
  std::size_t h = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;

  bool operator==(const Raster&) const = default;
};

namespace detail {

inline void write_pnm(const std::string& path, const char* magic, const Raster& img, std::size_t channels) {
  if (img.channels != channels || img.pixels.size() != img.w * img.h * channels)
    throw DataError("raster layout does not match " + std::string(magic) + " for '" + path + "'");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << magic << '\n' << img.w << ' ' << img.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw DataError("short write to '" + path + "'");
}

// Reads the next header integer, skipping whitespace and '#' comments.
inline std::size_t next_header_int(const std::vector<std::uint8_t>& buf, std::size_t& pos, const std::string& path) {
  while (pos < buf.size()) {
    if (buf[pos] == '#') {
      while (pos < buf.size() && buf[pos] != '\n') ++pos;
    } else if (std::isspace(buf[pos])) {
      ++pos;
    } else {
      break;
    }
  }
  if (pos >= buf.size() || !std::isdigit(buf[pos])) throw DataError("malformed netpbm header in '" + path + "'");
  std::size_t v = 0;
  while (pos < buf.size() && std::isdigit(buf[pos])) {
    v = v * 10 + static_cast<std::size_t>(buf[pos] - '0');
    if (v > (1u << 24)) throw DataError("netpbm header value out of range in '" + path + "'");
    ++pos;
  }
  return v;
}

inline Raster read_pnm(const std::string& path, char kind, std::size_t channels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 2 || buf[0] != 'P' || buf[1] != static_cast<std::uint8_t>(kind))
    throw DataError("'" + path + "' is not a binary P" + std::string(1, kind) + " file");
  std::size_t pos = 2;
  Raster img;
  img.channels = channels;
  img.w = next_header_int(buf, pos, path);
  img.h = next_header_int(buf, pos, path);
  const std::size_t maxval = next_header_int(buf, pos, path);
  if (maxval != 255) throw DataError("'" + path + "' has maxval " + std::to_string(maxval) + ", expected 255");
  if (pos >= buf.size() || !std::isspace(buf[pos])) throw DataError("malformed netpbm header in '" + path + "'");
  ++pos;  // single whitespace before raster
  const std::size_t need = img.w * img.h * channels;
  if (buf.size() - pos != need)
    throw DataError("'" + path + "' holds " + std::to_string(buf.size() - pos) + " raster bytes, expected " +
                    std::to_string(need));
  img.pixels.assign(buf.begin() + static_cast<std::ptrdiff_t>(pos), buf.end());
  return img;
}

}  // namespace detail

inline void write_ppm(const std::string& path, const Raster& img) { detail::write_pnm(path, "P6", img, 3); }
inline void write_pgm(const std::string& path, const Raster& img) { detail::write_pnm(path, "P5", img, 1); }
inline Raster read_ppm(const std::string& path) { return detail::read_pnm(path, '6', 3); }
inline Raster read_pgm(const std::string& path) { return detail::read_pnm(path, '5', 1); }

}  // namespace dml
