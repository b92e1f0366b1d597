#ifndef FUNDSEG_METRICS_HPP
#define FUNDSEG_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "image.hpp"
#include "layers.hpp"
#include "model.hpp"

namespace fundseg {

/// Read-only view of one probability plane.
struct PlaneView {
  std::span<const double> values;
  std::size_t width = 0, height = 0;
};

/// Seven probability planes for one image, stored plane after plane.
struct ProbStack {
  std::size_t width = 0, height = 0;
  std::vector<double> data; // kNumClasses * height * width

  ProbStack() = default;
  ProbStack(std::size_t w, std::size_t h) : width(w), height(h), data(kNumClasses * w * h, 0.0) {}

  /// From a [1,7,H,W] tensor.
  static ProbStack from_tensor(const Tensor& t) {
    if (t.rank() != 4 || t.dim(0) != 1 || t.dim(1) != kNumClasses)
      throw ShapeError("probability stack needs [1,7,H,W], got " + shape_str(t.shape()));
    ProbStack p(t.dim(3), t.dim(2));
    std::copy(t.data().begin(), t.data().end(), p.data.begin());
    return p;
  }

  Tensor to_tensor() const { return Tensor::from({1, kNumClasses, height, width}, data); }

  PlaneView plane(std::size_t c) const {
    return {std::span<const double>(data).subspan(c * width * height, width * height), width, height};
  }
  std::span<double> plane_mut(std::size_t c) { return std::span<double>(data).subspan(c * width * height, width * height); }
};

inline ProbStack boost(const ProbStack& p) { return ProbStack::from_tensor(channel_softmax(p.to_tensor())); }

/// Nearest-neighbour enlargement: source = floor(dst * in / out).
inline ProbStack upsample_nearest(const ProbStack& p, std::size_t out_w, std::size_t out_h) {
  if (out_w < p.width || out_h < p.height)
    throw ShapeError("upsample_nearest cannot shrink " + std::to_string(p.width) + "x" + std::to_string(p.height) +
                     " to " + std::to_string(out_w) + "x" + std::to_string(out_h));
  ProbStack out(out_w, out_h);
  std::vector<std::size_t> sx(out_w);
  for (std::size_t x = 0; x < out_w; ++x) sx[x] = x * p.width / out_w;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const auto src = p.plane(c).values;
    auto dst = out.plane_mut(c);
    for (std::size_t y = 0; y < out_h; ++y) {
      const std::size_t sy = y * p.height / out_h;
      for (std::size_t x = 0; x < out_w; ++x) dst[y * out_w + x] = src[sy * p.width + sx[x]];
    }
  }
  return out;
}

inline MaskImage threshold_plane(const PlaneView& plane, double t) {
  MaskImage m(plane.width, plane.height);
  for (std::size_t i = 0; i < plane.values.size(); ++i) m.bits[i] = plane.values[i] >= t ? 1 : 0;
  return m;
}

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;

  Confusion& operator+=(const Confusion& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  std::size_t total() const { return tp + fp + fn + tn; }
  bool operator==(const Confusion&) const = default;
};

namespace detail {
inline void require_same_size(const MaskImage& a, const MaskImage& b, const char* what) {
  if (a.width != b.width || a.height != b.height)
    throw ShapeError(std::string(what) + ": " + std::to_string(a.width) + "x" + std::to_string(a.height) + " vs " +
                     std::to_string(b.width) + "x" + std::to_string(b.height));
}
} // namespace detail

inline Confusion confusion(const MaskImage& pred, const MaskImage& gt) {
  detail::require_same_size(pred, gt, "confusion");
  Confusion c;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    const bool p = pred.bits[i], g = gt.bits[i];
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

struct Metrics {
  double sensitivity = 0.0;
  double ppv = 0.0;
  double accuracy = 0.0;
};

/// SE is 1 when there are no positives to find. PPV is 0 when nothing is
/// predicted but positives exist, and 1 when there is neither.
inline Metrics metrics(const Confusion& c) {
  Metrics m;
  const std::size_t pos = c.tp + c.fn, pred = c.tp + c.fp;
  m.sensitivity = pos == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(pos);
  if (pred > 0)
    m.ppv = static_cast<double>(c.tp) / static_cast<double>(pred);
  else
    m.ppv = pos > 0 ? 0.0 : 1.0;
  m.accuracy = c.total() == 0 ? 1.0 : static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  return m;
}

/// |A and B| / |A or B|; 1 when both masks are empty.
inline double jaccard(const MaskImage& pred, const MaskImage& gt) {
  detail::require_same_size(pred, gt, "jaccard");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    inter += pred.bits[i] && gt.bits[i];
    uni += pred.bits[i] || gt.bits[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------------
// Threshold sweeps
// ---------------------------------------------------------------------------

struct CurvePoint {
  double threshold = 0.0;
  double sensitivity = 0.0;
  double ppv = 0.0;
};

struct MetricCurve {
  std::vector<CurvePoint> points;
};

/// 0.01, 0.02, ..., 0.99 computed as i/100.
inline std::vector<double> default_grid() {
  std::vector<double> g;
  for (int i = 1; i <= 99; ++i) g.push_back(i / 100.0);
  return g;
}

inline void check_grid(std::span<const double> grid) {
  if (grid.empty()) throw ConfigError("threshold grid is empty");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!(grid[i] > 0.0 && grid[i] < 1.0)) throw ConfigError("thresholds must lie in (0,1)");
    if (i && !(grid[i] > grid[i - 1])) throw ConfigError("threshold grid must be strictly increasing");
  }
}

/// Confusion counts of `plane >= grid[k]` against `gt` for every k, in one
/// pass: a pixel with value v is predicted positive for exactly the grid
/// points <= v.
inline std::vector<Confusion> sweep_counts(const PlaneView& plane, const MaskImage& gt, std::span<const double> grid) {
  check_grid(grid);
  if (plane.width != gt.width || plane.height != gt.height) throw ShapeError("sweep: plane and mask differ in size");
  const std::size_t G = grid.size();
  std::vector<std::size_t> pos_hist(G + 1, 0), neg_hist(G + 1, 0);
  for (std::size_t i = 0; i < plane.values.size(); ++i) {
    const auto k = static_cast<std::size_t>(std::upper_bound(grid.begin(), grid.end(), plane.values[i]) - grid.begin());
    (gt.bits[i] ? pos_hist : neg_hist)[k]++;
  }
  // positives at grid index j are the pixels with k > j
  std::vector<Confusion> out(G);
  std::size_t pos_above = 0, neg_above = 0;
  const std::size_t pos_total = gt.count(), neg_total = gt.bits.size() - pos_total;
  for (std::size_t j = G; j-- > 0;) {
    pos_above += pos_hist[j + 1];
    neg_above += neg_hist[j + 1];
    out[j] = Confusion{pos_above, neg_above, pos_total - pos_above, neg_total - neg_above};
  }
  return out;
}

inline MetricCurve curve_from_counts(std::span<const double> grid, std::span<const Confusion> counts) {
  MetricCurve c;
  for (std::size_t j = 0; j < grid.size(); ++j) {
    const Metrics m = metrics(counts[j]);
    c.points.push_back({grid[j], m.sensitivity, m.ppv});
  }
  return c;
}

inline MetricCurve sweep_curve(const PlaneView& plane, const MaskImage& gt, std::span<const double> grid) {
  const auto counts = sweep_counts(plane, gt, grid);
  return curve_from_counts(grid, counts);
}

/// First crossing of SE(t) - PPV(t), linearly interpolated; a grid point
/// where they are equal wins outright. Without a crossing, the threshold
/// maximizing min(SE, PPV) (smallest such t).
inline double calibrate(const MetricCurve& curve) {
  const auto& p = curve.points;
  if (p.empty()) throw ConfigError("cannot calibrate an empty curve");
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p[i].sensitivity - p[i].ppv;
    if (d == 0.0) return p[i].threshold;
    if (i + 1 < p.size()) {
      const double dn = p[i + 1].sensitivity - p[i + 1].ppv;
      if (dn != 0.0 && (d < 0.0) != (dn < 0.0))
        return p[i].threshold + (p[i + 1].threshold - p[i].threshold) * d / (d - dn);
    }
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < p.size(); ++i)
    if (std::min(p[i].sensitivity, p[i].ppv) > std::min(p[best].sensitivity, p[best].ppv)) best = i;
  return p[best].threshold;
}

/// Trapezoidal area under PPV as a function of SE over the observed SE
/// range. Equal SE values keep the largest PPV. Fewer than two distinct SE
/// values give 0.
inline double auc_ppv_se(const MetricCurve& curve) {
  std::vector<std::pair<double, double>> pts;
  for (auto& q : curve.points) pts.emplace_back(q.sensitivity, q.ppv);
  std::sort(pts.begin(), pts.end());
  std::vector<std::pair<double, double>> uniq;
  for (auto& q : pts) {
    if (!uniq.empty() && uniq.back().first == q.first)
      uniq.back().second = std::max(uniq.back().second, q.second);
    else
      uniq.push_back(q);
  }
  double area = 0.0;
  for (std::size_t i = 1; i < uniq.size(); ++i)
    area += (uniq[i].first - uniq[i - 1].first) * (uniq[i].second + uniq[i - 1].second) / 2.0;
  return area;
}

/// Mean column (x) and row (y) of the set pixels.
inline std::optional<std::pair<double, double>> centroid(const MaskImage& m) {
  double sx = 0.0, sy = 0.0;
  std::size_t n = 0;
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width; ++x)
      if (m.at(x, y)) {
        sx += static_cast<double>(x);
        sy += static_cast<double>(y);
        ++n;
      }
  if (n == 0) return std::nullopt;
  return std::make_pair(sx / static_cast<double>(n), sy / static_cast<double>(n));
}

inline double localization_error(std::pair<double, double> pred, std::pair<double, double> gt) {
  return std::hypot(pred.first - gt.first, pred.second - gt.second);
}

/// Mean distance where a missing prediction costs `penalty`.
inline double mean_localization_error(std::span<const std::optional<std::pair<double, double>>> preds,
                                      std::span<const std::pair<double, double>> gts, double penalty) {
  if (preds.size() != gts.size()) throw ShapeError("prediction and ground-truth counts differ");
  if (preds.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) s += preds[i] ? localization_error(*preds[i], gts[i]) : penalty;
  return s / static_cast<double>(preds.size());
}

} // namespace fundseg

#endif
