#ifndef FUNDSEG_DATA_HPP
#define FUNDSEG_DATA_HPP

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "image.hpp"
#include "model.hpp"
#include "tensor.hpp"
#include "text.hpp"

namespace fundseg {

/// Channel order of every target and probability stack.
enum ClassId : std::size_t { kMA = 0, kHEM = 1, kEX = 2, kSE = 3, kOD = 4, kRD = 5, kBG = 6 };

/// Number of annotated classes (lesions + optic disk); RD and BG are derived.
inline constexpr std::size_t kNumAnnotated = 5;

inline constexpr std::array<const char*, kNumClasses> kClassNames{"ma", "hem", "ex", "se", "od", "rd", "bg"};

inline constexpr std::uint8_t kDefaultRetinaThreshold = 20;
inline constexpr double kSoftmapAgreement = 0.75;

using TargetStack = std::array<MaskImage, kNumClasses>;

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// Per-channel 8x8 block mean, rounded half up.
inline Image downsample8(const Image& img) {
  if (img.width % 8 || img.height % 8)
    throw ShapeError("downsample8 needs dims divisible by 8, got " + std::to_string(img.width) + "x" +
                     std::to_string(img.height));
  Image out(img.width / 8, img.height / 8);
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x)
      for (std::size_t ch = 0; ch < 3; ++ch) {
        unsigned sum = 0;
        for (std::size_t dy = 0; dy < 8; ++dy)
          for (std::size_t dx = 0; dx < 8; ++dx) sum += img.at(8 * x + dx, 8 * y + dy, ch);
        out.at(x, y, ch) = static_cast<std::uint8_t>((sum + 32) / 64);
      }
  return out;
}

/// A block is set when at least half of its 64 pixels are set.
inline MaskImage downsample8(const MaskImage& m) {
  if (m.width % 8 || m.height % 8)
    throw ShapeError("downsample8 needs dims divisible by 8, got " + std::to_string(m.width) + "x" +
                     std::to_string(m.height));
  MaskImage out(m.width / 8, m.height / 8);
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x) {
      unsigned sum = 0;
      for (std::size_t dy = 0; dy < 8; ++dy)
        for (std::size_t dx = 0; dx < 8; ++dx) sum += m.at(8 * x + dx, 8 * y + dy);
      out.at(x, y) = sum >= 32 ? 1 : 0;
    }
  return out;
}

/// Retinal disk: integer channel mean >= thresh.
inline MaskImage retina_mask(const Image& img, std::uint8_t thresh = kDefaultRetinaThreshold) {
  MaskImage m(img.width, img.height);
  for (std::size_t i = 0; i < img.width * img.height; ++i) {
    const unsigned gray = (unsigned{img.rgb[3 * i]} + img.rgb[3 * i + 1] + img.rgb[3 * i + 2]) / 3;
    m.bits[i] = gray >= thresh ? 1 : 0;
  }
  return m;
}

/// Real-valued raster in [0,1], e.g. an annotator-agreement soft map.
struct SoftMap {
  std::size_t width = 0, height = 0;
  std::vector<double> values;
};

inline MaskImage binarize_softmap(const SoftMap& soft) {
  MaskImage m(soft.width, soft.height);
  for (std::size_t i = 0; i < soft.values.size(); ++i) {
    const double v = soft.values[i];
    if (!(v >= 0.0 && v <= 1.0))
      throw DataError("soft map value " + format_real(v) + " at pixel " + std::to_string(i) + " outside [0,1]");
    m.bits[i] = v >= kSoftmapAgreement ? 1 : 0;
  }
  return m;
}

inline SoftMap softmap_from_gray(const GrayImage& g) {
  SoftMap s{g.width, g.height, std::vector<double>(g.values.size())};
  for (std::size_t i = 0; i < g.values.size(); ++i) s.values[i] = g.values[i] / 255.0;
  return s;
}

/// Loads a mask PGM. Gray levels are read as a soft map and binarized at
/// the agreement level, so 0/255 masks load exactly and soft maps are
/// thresholded.
inline MaskImage load_mask(const std::filesystem::path& path) { return binarize_softmap(softmap_from_gray(load_pgm(path))); }

inline TargetStack build_target(const std::array<MaskImage, 4>& lesions, const MaskImage& od, const MaskImage& retina) {
  const std::size_t W = retina.width, H = retina.height;
  auto check = [&](const MaskImage& m, const char* what) {
    if (m.width != W || m.height != H)
      throw ShapeError(std::string(what) + " mask is " + std::to_string(m.width) + "x" + std::to_string(m.height) +
                       ", retina mask is " + std::to_string(W) + "x" + std::to_string(H));
  };
  for (std::size_t c = 0; c < 4; ++c) check(lesions[c], kClassNames[c]);
  check(od, "od");
  TargetStack t;
  for (std::size_t c = 0; c < 4; ++c) t[c] = lesions[c];
  t[kOD] = od;
  t[kRD] = MaskImage(W, H);
  t[kBG] = MaskImage(W, H);
  for (std::size_t i = 0; i < W * H; ++i) {
    bool annotated = false;
    for (std::size_t c = 0; c < kNumAnnotated; ++c) annotated = annotated || t[c].bits[i];
    t[kRD].bits[i] = retina.bits[i] && !annotated ? 1 : 0;
    t[kBG].bits[i] = retina.bits[i] ? 0 : 1;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Flip augmentation
// ---------------------------------------------------------------------------

namespace detail {
template <typename Raster, typename Storage>
Raster flip_raster(const Raster& r, Storage Raster::*data, std::size_t channels, bool horizontal, bool vertical) {
  Raster out = r;
  auto& dst = out.*data;
  const auto& src = r.*data;
  for (std::size_t y = 0; y < r.height; ++y)
    for (std::size_t x = 0; x < r.width; ++x) {
      const std::size_t sx = horizontal ? r.width - 1 - x : x;
      const std::size_t sy = vertical ? r.height - 1 - y : y;
      for (std::size_t c = 0; c < channels; ++c)
        dst[channels * (y * r.width + x) + c] = src[channels * (sy * r.width + sx) + c];
    }
  return out;
}
} // namespace detail

inline Image flip(const Image& img, bool horizontal, bool vertical) {
  return detail::flip_raster(img, &Image::rgb, 3, horizontal, vertical);
}
inline MaskImage flip(const MaskImage& m, bool horizontal, bool vertical) {
  return detail::flip_raster(m, &MaskImage::bits, 1, horizontal, vertical);
}

/// Identity, horizontal flip, vertical flip, 180-degree rotation, in that order.
inline std::array<std::pair<Image, TargetStack>, 4> augment_flips(const Image& img, const TargetStack& t) {
  std::array<std::pair<Image, TargetStack>, 4> out;
  constexpr bool hv[4][2] = {{false, false}, {true, false}, {false, true}, {true, true}};
  for (std::size_t k = 0; k < 4; ++k) {
    out[k].first = flip(img, hv[k][0], hv[k][1]);
    for (std::size_t c = 0; c < kNumClasses; ++c) out[k].second[c] = flip(t[c], hv[k][0], hv[k][1]);
  }
  return out;
}

/// Nearest-neighbour rescale by min(target_w/W, target_h/H), then zero pad
/// on the right and bottom.
inline Image resize_pad(const Image& img, std::size_t target_w, std::size_t target_h) {
  if (target_w == 0 || target_h == 0) throw ShapeError("resize_pad target must be at least 1x1");
  const std::size_t W = img.width, H = img.height;
  std::size_t nw, nh;
  if (target_w * H <= target_h * W) {
    nw = target_w;
    nh = std::max<std::size_t>(1, H * target_w / W);
  } else {
    nh = target_h;
    nw = std::max<std::size_t>(1, W * target_h / H);
  }
  Image out(target_w, target_h);
  for (std::size_t y = 0; y < nh; ++y) {
    const std::size_t sy = std::min(H - 1, (2 * y + 1) * H / (2 * nh));
    for (std::size_t x = 0; x < nw; ++x) {
      const std::size_t sx = std::min(W - 1, (2 * x + 1) * W / (2 * nw));
      for (std::size_t c = 0; c < 3; ++c) out.at(x, y, c) = img.at(sx, sy, c);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
  case Split::train: return "train";
  case Split::val: return "val";
  case Split::test: return "test";
  }
  return "?";
}

inline std::optional<Split> parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  return std::nullopt;
}

inline constexpr const char* kManifestHeader = "split,image,mask_ma,mask_hem,mask_ex,mask_se,mask_od,od_cx,od_cy";

struct ManifestRecord {
  Split split = Split::train;
  std::string image;                                       // as written, relative to the manifest
  std::array<std::string, kNumAnnotated> masks;            // empty => all-zero channel
  std::optional<double> od_cx, od_cy;                      // full-resolution pixels
};

struct DatasetManifest {
  std::filesystem::path base_dir;
  std::vector<ManifestRecord> records;

  std::filesystem::path resolve(const std::string& rel) const {
    std::filesystem::path p(rel);
    return p.is_absolute() ? p : base_dir / p;
  }

  std::vector<const ManifestRecord*> select(Split s) const {
    std::vector<const ManifestRecord*> out;
    for (auto& r : records)
      if (r.split == s) out.push_back(&r);
    return out;
  }
};

/// Parses the manifest CSV; paths resolve against the manifest's directory
/// and must exist. Errors name the line.
inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  DatasetManifest m;
  m.base_dir = path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& why) -> void {
    throw DataError(path.string() + " row " + std::to_string(lineno) + ": " + why);
  };
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty manifest");
  ++lineno;
  if (trim(line) != kManifestHeader) fail("header must be '" + std::string(kManifestHeader) + "'");
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto cols = split(trim(line), ',');
    if (cols.size() != 9) fail("expected 9 columns, found " + std::to_string(cols.size()));
    for (auto& c : cols) c = std::string(trim(c));
    ManifestRecord r;
    auto sp = parse_split(cols[0]);
    if (!sp) fail("unknown split '" + cols[0] + "'");
    r.split = *sp;
    if (cols[1].empty()) fail("missing image path");
    r.image = cols[1];
    if (!std::filesystem::exists(m.resolve(r.image))) fail("missing file " + m.resolve(r.image).string());
    for (std::size_t c = 0; c < kNumAnnotated; ++c) {
      r.masks[c] = cols[2 + c];
      if (!r.masks[c].empty() && !std::filesystem::exists(m.resolve(r.masks[c])))
        fail("missing file " + m.resolve(r.masks[c]).string());
    }
    if (!cols[7].empty() || !cols[8].empty()) {
      r.od_cx = parse_real(cols[7]);
      r.od_cy = parse_real(cols[8]);
      if (!r.od_cx || !r.od_cy) fail("od_cx/od_cy must both be reals");
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

inline void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << kManifestHeader << "\n";
  for (auto& r : m.records) {
    out << split_name(r.split) << "," << r.image;
    for (auto& mk : r.masks) out << "," << mk;
    out << "," << (r.od_cx ? format_real(*r.od_cx) : "") << "," << (r.od_cy ? format_real(*r.od_cy) : "") << "\n";
  }
  if (!out) throw IoError("short write to " + path.string());
}

// ---------------------------------------------------------------------------
// Samples and tensors
// ---------------------------------------------------------------------------

struct Sample {
  std::string name;
  Image image;
  TargetStack target;
  std::optional<std::pair<double, double>> od_center; // full resolution
  std::size_t full_width = 0, full_height = 0;
};

/// Loads one record: image and masks at full resolution, optional 8x
/// downsampling (`input_scale` 8), then target assembly with the retina
/// mask of the (downsampled) image.
inline Sample load_sample(const DatasetManifest& m, const ManifestRecord& r,
                          std::uint8_t retina_thresh = kDefaultRetinaThreshold, std::size_t input_scale = 1) {
  if (input_scale != 1 && input_scale != 8) throw ConfigError("input_scale must be 1 or 8");
  Sample s;
  s.name = std::filesystem::path(r.image).stem().string();
  Image full = load_ppm(m.resolve(r.image));
  s.full_width = full.width;
  s.full_height = full.height;
  std::array<MaskImage, kNumAnnotated> ann;
  for (std::size_t c = 0; c < kNumAnnotated; ++c) {
    if (r.masks[c].empty()) {
      ann[c] = MaskImage(full.width, full.height);
    } else {
      ann[c] = load_mask(m.resolve(r.masks[c]));
      if (ann[c].width != full.width || ann[c].height != full.height)
        throw ShapeError(r.masks[c] + " does not match the size of " + r.image);
    }
  }
  if (input_scale == 8) {
    full = downsample8(full);
    for (auto& a : ann) a = downsample8(a);
  }
  s.image = std::move(full);
  s.target = build_target({ann[0], ann[1], ann[2], ann[3]}, ann[kOD], retina_mask(s.image, retina_thresh));
  if (r.od_cx && r.od_cy) s.od_center = std::make_pair(*r.od_cx, *r.od_cy);
  return s;
}

/// Stacks images into [N,3,H,W] scaled to [0,1]. All images must share a size.
inline Tensor images_to_tensor(const std::vector<const Image*>& imgs) {
  if (imgs.empty()) throw ShapeError("no images to stack");
  const std::size_t W = imgs[0]->width, H = imgs[0]->height;
  Tensor t({imgs.size(), 3, H, W});
  for (std::size_t n = 0; n < imgs.size(); ++n) {
    if (imgs[n]->width != W || imgs[n]->height != H) throw ShapeError("batch images differ in size");
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        for (std::size_t c = 0; c < 3; ++c) t.at(n, c, y, x) = imgs[n]->at(x, y, c) / 255.0;
  }
  return t;
}

inline Tensor targets_to_tensor(const std::vector<const TargetStack*>& ts) {
  if (ts.empty()) throw ShapeError("no targets to stack");
  const std::size_t W = (*ts[0])[0].width, H = (*ts[0])[0].height;
  Tensor t({ts.size(), kNumClasses, H, W});
  for (std::size_t n = 0; n < ts.size(); ++n)
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      const MaskImage& m = (*ts[n])[c];
      if (m.width != W || m.height != H) throw ShapeError("batch targets differ in size");
      for (std::size_t i = 0; i < W * H; ++i) t[(n * kNumClasses + c) * W * H + i] = m.bits[i];
    }
  return t;
}

// ---------------------------------------------------------------------------
// Synthetic fundus-like fixtures
// ---------------------------------------------------------------------------

namespace detail {

struct Rgb {
  int r, g, b;
};

inline std::uint8_t jitter(Prng& p, int base, int amp) {
  const int v = base + static_cast<int>(p.next_below(static_cast<std::uint64_t>(2 * amp + 1))) - amp;
  return static_cast<std::uint8_t>(std::clamp(v, 0, 255));
}

/// Uniform point with distance <= max_r from (cx, cy).
inline std::pair<double, double> point_in_disc(Prng& p, double cx, double cy, double max_r) {
  for (;;) {
    const double dx = (2.0 * p.next_uniform() - 1.0) * max_r;
    const double dy = (2.0 * p.next_uniform() - 1.0) * max_r;
    if (dx * dx + dy * dy <= max_r * max_r) return {cx + dx, cy + dy};
  }
}

} // namespace detail

inline std::string fixture_stem(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%03zu", i);
  return buf;
}

/// Split assignment for generated datasets: the last max(1, count/8) rows
/// are test, the max(1, count/8) before them val, the rest train. Datasets
/// with fewer than 3 images are all train.
inline Split fixture_split(std::size_t i, std::size_t count) {
  if (count < 3) return Split::train;
  const std::size_t k = std::max<std::size_t>(1, count / 8);
  if (i >= count - k) return Split::test;
  if (i >= count - 2 * k) return Split::val;
  return Split::train;
}

/// Writes `count` deterministic synthetic fundus images with exact masks:
/// dark background, a bright circular retina, coloured lesion blobs, and
/// one bright optic disk painted last. Layout: images/NNN.ppm,
/// masks/NNN_<class>.pgm, manifest.csv.
inline DatasetManifest gen_fixtures(std::uint64_t seed, std::size_t count, std::size_t w, std::size_t h,
                                    const std::filesystem::path& out_dir) {
  if (w < 16 || h < 16) throw ConfigError("fixture size must be at least 16x16");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "masks", ec);
  if (ec || !fs::is_directory(out_dir / "masks")) throw IoError("cannot create fixture directory " + out_dir.string());

  static constexpr detail::Rgb kLesionColor[4] = {{200, 15, 25}, {95, 20, 10}, {245, 225, 60}, {210, 210, 225}};
  static constexpr double kLesionRadius[4] = {1.0, 2.0, 1.6, 2.6};
  static constexpr detail::Rgb kRetina{160, 75, 35}, kDisk{250, 245, 200};
  constexpr std::uint8_t kNone = 255;

  Prng prng(seed);
  DatasetManifest manifest;
  manifest.base_dir = out_dir;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0, cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double R = 0.46 * static_cast<double>(std::min(w, h));
  const double od_r = std::max(2.0, 0.12 * static_cast<double>(std::min(w, h)));

  for (std::size_t i = 0; i < count; ++i) {
    std::vector<std::uint8_t> label(w * h, kNone);
    std::vector<std::uint8_t> inside(w * h, 0);
    auto paint = [&](double px, double py, double r, std::uint8_t cls) {
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double dx = static_cast<double>(x) - px, dy = static_cast<double>(y) - py;
          if (dx * dx + dy * dy <= r * r) label[y * w + x] = cls;
        }
    };
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        inside[y * w + x] = dx * dx + dy * dy <= R * R ? 1 : 0;
      }
    for (std::uint8_t c = 0; c < 4; ++c) {
      const std::size_t blobs = 1 + static_cast<std::size_t>(prng.next_below(2));
      for (std::size_t b = 0; b < blobs; ++b) {
        const auto [px, py] = detail::point_in_disc(prng, cx, cy, R - kLesionRadius[c] - 1.0);
        paint(px, py, kLesionRadius[c], c);
      }
    }
    const auto [ox, oy] = detail::point_in_disc(prng, cx, cy, R - od_r - 1.0);
    paint(ox, oy, od_r, kOD);

    Image img(w, h);
    std::array<MaskImage, kNumAnnotated> masks;
    for (auto& mk : masks) mk = MaskImage(w, h);
    for (std::size_t p = 0; p < w * h; ++p) {
      detail::Rgb base{0, 0, 0};
      int amp = 4;
      if (label[p] != kNone) {
        base = label[p] == kOD ? kDisk : kLesionColor[label[p]];
        masks[label[p]].bits[p] = 1;
        amp = 6;
      } else if (inside[p]) {
        base = kRetina;
        amp = 8;
      } else {
        base = {4, 4, 4};
      }
      img.rgb[3 * p] = detail::jitter(prng, base.r, amp);
      img.rgb[3 * p + 1] = detail::jitter(prng, base.g, amp);
      img.rgb[3 * p + 2] = detail::jitter(prng, base.b, amp);
    }

    const std::string stem = fixture_stem(i);
    ManifestRecord rec;
    rec.split = fixture_split(i, count);
    rec.image = "images/" + stem + ".ppm";
    write_ppm(out_dir / rec.image, img);
    for (std::size_t c = 0; c < kNumAnnotated; ++c) {
      rec.masks[c] = "masks/" + stem + "_" + kClassNames[c] + ".pgm";
      write_mask(out_dir / rec.masks[c], masks[c]);
    }
    rec.od_cx = ox;
    rec.od_cy = oy;
    manifest.records.push_back(std::move(rec));
  }
  write_manifest(out_dir / "manifest.csv", manifest);
  return manifest;
}

} // namespace fundseg

#endif
