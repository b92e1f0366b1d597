#ifndef FUNDSEG_IMAGE_HPP
#define FUNDSEG_IMAGE_HPP

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "error.hpp"

namespace fundseg {

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
struct Image {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), rgb(3 * w * h, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t ch) { return rgb[3 * (y * width + x) + ch]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t ch) const { return rgb[3 * (y * width + x) + ch]; }

  bool operator==(const Image&) const = default;
};

/// 8-bit single-channel raster.
struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> values;

  GrayImage() = default;
  GrayImage(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), values(w * h, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y) { return values[y * width + x]; }
  std::uint8_t at(std::size_t x, std::size_t y) const { return values[y * width + x]; }

  bool operator==(const GrayImage&) const = default;
};

/// Binary raster; every entry is 0 or 1.
struct MaskImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> bits;

  MaskImage() = default;
  MaskImage(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), bits(w * h, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y) { return bits[y * width + x]; }
  std::uint8_t at(std::size_t x, std::size_t y) const { return bits[y * width + x]; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto b : bits) n += b;
    return n;
  }

  bool operator==(const MaskImage&) const = default;
};

namespace detail {

struct PnmHeader {
  std::size_t width = 0, height = 0;
  std::size_t payload_offset = 0;
};

/// Parses a binary netpbm header with the given magic ("P5" or "P6").
/// Comments run from '#' to the end of the line.
inline PnmHeader parse_pnm_header(const std::vector<std::uint8_t>& buf, const char* magic, const std::string& src) {
  if (buf.size() < 2 || buf[0] != magic[0] || buf[1] != magic[1])
    throw FormatError(src + ": expected magic " + magic);
  std::size_t pos = 2;
  auto next_token = [&](const char* what) -> std::size_t {
    while (pos < buf.size()) {
      if (buf[pos] == '#') {
        while (pos < buf.size() && buf[pos] != '\n' && buf[pos] != '\r') ++pos;
      } else if (std::isspace(buf[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    if (pos >= buf.size() || !std::isdigit(buf[pos])) throw FormatError(src + ": missing " + what);
    std::size_t v = 0;
    while (pos < buf.size() && std::isdigit(buf[pos])) {
      v = v * 10 + static_cast<std::size_t>(buf[pos] - '0');
      if (v > (std::size_t{1} << 31)) throw FormatError(src + ": " + what + " too large");
      ++pos;
    }
    return v;
  };
  PnmHeader h;
  h.width = next_token("width");
  h.height = next_token("height");
  const std::size_t maxval = next_token("maxval");
  if (h.width == 0 || h.height == 0) throw FormatError(src + ": zero image dimension");
  if (maxval != 255) throw FormatError(src + ": maxval " + std::to_string(maxval) + " unsupported (need 255)");
  if (pos >= buf.size() || !std::isspace(buf[pos])) throw FormatError(src + ": missing whitespace before payload");
  h.payload_offset = pos + 1;
  return h;
}

inline std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void dump(const std::filesystem::path& path, const std::string& header, const std::vector<std::uint8_t>& payload) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << header;
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!out) throw IoError("short write to " + path.string());
}

} // namespace detail

inline Image decode_ppm(const std::vector<std::uint8_t>& buf, const std::string& src = "<memory>") {
  const auto h = detail::parse_pnm_header(buf, "P6", src);
  const std::size_t need = 3 * h.width * h.height;
  if (buf.size() - h.payload_offset < need) throw FormatError(src + ": short payload");
  Image img(h.width, h.height);
  std::copy_n(buf.begin() + static_cast<std::ptrdiff_t>(h.payload_offset), need, img.rgb.begin());
  return img;
}

inline GrayImage decode_pgm(const std::vector<std::uint8_t>& buf, const std::string& src = "<memory>") {
  const auto h = detail::parse_pnm_header(buf, "P5", src);
  const std::size_t need = h.width * h.height;
  if (buf.size() - h.payload_offset < need) throw FormatError(src + ": short payload");
  GrayImage img(h.width, h.height);
  std::copy_n(buf.begin() + static_cast<std::ptrdiff_t>(h.payload_offset), need, img.values.begin());
  return img;
}

inline Image load_ppm(const std::filesystem::path& path) { return decode_ppm(detail::slurp(path), path.string()); }
inline GrayImage load_pgm(const std::filesystem::path& path) { return decode_pgm(detail::slurp(path), path.string()); }

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
  detail::dump(path, "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n", img.rgb);
}

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  detail::dump(path, "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n", img.values);
}

inline GrayImage mask_to_gray(const MaskImage& m) {
  GrayImage g(m.width, m.height);
  for (std::size_t i = 0; i < m.bits.size(); ++i) g.values[i] = m.bits[i] ? 255 : 0;
  return g;
}

/// Masks are stored as 0/255 PGM.
inline void write_mask(const std::filesystem::path& path, const MaskImage& m) { write_pgm(path, mask_to_gray(m)); }

} // namespace fundseg

#endif
