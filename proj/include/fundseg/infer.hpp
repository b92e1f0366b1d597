#ifndef FUNDSEG_INFER_HPP
#define FUNDSEG_INFER_HPP

#include <array>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "metrics.hpp"
#include "train.hpp"

namespace fundseg {

/// Per-class networks of an ensemble; entries may share one network.
struct LoadedEnsemble {
  std::array<std::shared_ptr<const Network>, kNumClasses> members;
};

inline LoadedEnsemble load_ensemble(const EnsembleManifest& e) {
  LoadedEnsemble out;
  std::map<std::string, std::shared_ptr<const Network>> cache;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const auto& file = e.classes[c].checkpoint;
    if (file.empty()) throw IoError("ensemble has no checkpoint for class " + std::string(kClassNames[c]));
    auto it = cache.find(file);
    if (it == cache.end()) {
      const auto path = e.path_of(e.classes[c]);
      if (!std::filesystem::exists(path)) throw IoError("missing checkpoint " + path.string());
      it = cache.emplace(file, std::make_shared<const Network>(load_checkpoint(path).net)).first;
    }
    out.members[c] = it->second;
  }
  return out;
}

/// A degenerate ensemble where every class uses `net`.
inline LoadedEnsemble single_network_ensemble(std::shared_ptr<const Network> net) {
  LoadedEnsemble out;
  out.members.fill(std::move(net));
  return out;
}

/// Channel c comes from member c's sigmoid output. With `boost`, the
/// assembled stack is passed through the per-pixel channel softmax.
inline ProbStack infer(const LoadedEnsemble& ens, const Image& img, bool boost_on) {
  const Tensor x = images_to_tensor({&img});
  ProbStack out(img.width, img.height);
  std::map<const Network*, ProbStack> done;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const Network* net = ens.members[c].get();
    auto it = done.find(net);
    if (it == done.end()) it = done.emplace(net, ProbStack::from_tensor(forward(*net, x).first)).first;
    const auto src = it->second.plane(c).values;
    std::copy(src.begin(), src.end(), out.plane_mut(c).begin());
  }
  return boost_on ? boost(out) : out;
}

// ---------------------------------------------------------------------------
// Threshold sets
// ---------------------------------------------------------------------------

using ThresholdSet = std::array<double, kNumAnnotated>;

inline void write_thresholds(const std::filesystem::path& path, const ThresholdSet& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "class,threshold\n";
  for (std::size_t c = 0; c < kNumAnnotated; ++c) out << kClassNames[c] << "," << format_real(t[c]) << "\n";
  if (!out) throw IoError("short write to " + path.string());
}

inline ThresholdSet load_thresholds(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open thresholds " + path.string());
  std::string line;
  std::getline(in, line);
  if (trim(line) != "class,threshold") throw DataError(path.string() + ": bad header");
  ThresholdSet t{};
  std::array<bool, kNumAnnotated> seen{};
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    auto cols = split(trim(line), ',');
    if (cols.size() != 2) throw DataError(path.string() + ": malformed row '" + line + "'");
    auto v = parse_real(cols[1]);
    if (!v || !(*v > 0.0 && *v < 1.0)) throw DataError(path.string() + ": threshold must lie in (0,1)");
    bool matched = false;
    for (std::size_t c = 0; c < kNumAnnotated; ++c)
      if (trim(cols[0]) == kClassNames[c]) {
        t[c] = *v;
        seen[c] = matched = true;
      }
    if (!matched) throw DataError(path.string() + ": unknown class '" + cols[0] + "'");
  }
  for (std::size_t c = 0; c < kNumAnnotated; ++c)
    if (!seen[c]) throw DataError(path.string() + ": missing threshold for " + kClassNames[c]);
  return t;
}

// ---------------------------------------------------------------------------
// Dataset-level pipelines
// ---------------------------------------------------------------------------

struct PipelineOptions {
  bool boost = true;
  std::uint8_t retina_threshold = kDefaultRetinaThreshold;
  std::size_t input_scale = 1;
  double loc_penalty = 0.0; // <= 0 means the full-resolution image diagonal
  std::size_t threads = 1;
  std::vector<double> grid = default_grid();
};

/// A sample at full resolution plus its upsampled ensemble prediction.
struct Prediction {
  Sample sample; // full-resolution image and targets
  ProbStack probs;
};

inline Prediction predict_record(const LoadedEnsemble& ens, const DatasetManifest& m, const ManifestRecord& r,
                                 const PipelineOptions& opt) {
  Prediction p;
  p.sample = load_sample(m, r, opt.retina_threshold, 1);
  const Image input = opt.input_scale == 8 ? downsample8(p.sample.image) : p.sample.image;
  p.probs = infer(ens, input, opt.boost);
  if (p.probs.width != p.sample.image.width || p.probs.height != p.sample.image.height)
    p.probs = upsample_nearest(p.probs, p.sample.image.width, p.sample.image.height);
  return p;
}

/// Runs `fn(i)` for i in [0, n) on up to `threads` workers. Each index is
/// handled exactly once; results are written by index so aggregation order
/// never depends on scheduling.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct CalibrationResult {
  ThresholdSet thresholds{};
  std::array<MetricCurve, kNumAnnotated> curves;
};

/// Pools per-threshold confusion counts over the split, then applies the
/// SE/PPV intersection rule to each annotated class.
inline CalibrationResult calibrate_split(const LoadedEnsemble& ens, const DatasetManifest& m, Split split,
                                         const PipelineOptions& opt) {
  const auto records = m.select(split);
  if (records.empty()) throw ConfigError(std::string("no records in the ") + split_name(split) + " split");
  check_grid(opt.grid);
  std::vector<std::array<std::vector<Confusion>, kNumAnnotated>> per_image(records.size());
  parallel_for(records.size(), opt.threads, [&](std::size_t i) {
    const Prediction p = predict_record(ens, m, *records[i], opt);
    for (std::size_t c = 0; c < kNumAnnotated; ++c)
      per_image[i][c] = sweep_counts(p.probs.plane(c), p.sample.target[c], opt.grid);
  });
  CalibrationResult out;
  for (std::size_t c = 0; c < kNumAnnotated; ++c) {
    std::vector<Confusion> pooled(opt.grid.size());
    for (auto& img : per_image)
      for (std::size_t j = 0; j < pooled.size(); ++j) pooled[j] += img[c][j];
    out.curves[c] = curve_from_counts(opt.grid, pooled);
    out.thresholds[c] = calibrate(out.curves[c]);
  }
  return out;
}

inline void write_curves(const std::filesystem::path& path, const std::array<MetricCurve, kNumAnnotated>& curves) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "class,threshold,sensitivity,ppv\n";
  for (std::size_t c = 0; c < kNumAnnotated; ++c)
    for (auto& p : curves[c].points)
      out << kClassNames[c] << "," << format_real(p.threshold) << "," << format_real(p.sensitivity) << ","
          << format_real(p.ppv) << "\n";
  if (!out) throw IoError("short write to " + path.string());
}

struct ClassReport {
  double threshold = 0.0;
  Metrics at_threshold;
  double jaccard = 0.0; // mean over images
  double auc = 0.0;     // of the pooled PPV-vs-SE curve
};

struct LocalizationRow {
  std::string image;
  std::optional<std::pair<double, double>> pred;
  std::pair<double, double> gt;
  double distance = 0.0;
};

struct EvalReport {
  std::array<ClassReport, kNumAnnotated> classes;
  std::vector<LocalizationRow> localization;
  double mean_distance = 0.0;
};

/// Full metric report over one split: SE/PPV/accuracy from pooled counts
/// at the calibrated thresholds, per-image mean Jaccard, pooled-curve AUC,
/// and optic-disk centroid distances for records with a ground-truth centre.
inline EvalReport evaluate_split(const LoadedEnsemble& ens, const DatasetManifest& m, Split split,
                                 const ThresholdSet& thresholds, const PipelineOptions& opt) {
  const auto records = m.select(split);
  if (records.empty()) throw ConfigError(std::string("no records in the ") + split_name(split) + " split");
  check_grid(opt.grid);

  struct PerImage {
    std::array<Confusion, kNumAnnotated> at_t;
    std::array<double, kNumAnnotated> jac{};
    std::array<std::vector<Confusion>, kNumAnnotated> sweep;
    std::optional<std::pair<double, double>> od_pred;
    double diagonal = 0.0;
    std::string name;
  };
  std::vector<PerImage> per(records.size());
  parallel_for(records.size(), opt.threads, [&](std::size_t i) {
    const Prediction p = predict_record(ens, m, *records[i], opt);
    PerImage& r = per[i];
    r.name = p.sample.name;
    for (std::size_t c = 0; c < kNumAnnotated; ++c) {
      const MaskImage pred = threshold_plane(p.probs.plane(c), thresholds[c]);
      r.at_t[c] = confusion(pred, p.sample.target[c]);
      r.jac[c] = jaccard(pred, p.sample.target[c]);
      r.sweep[c] = sweep_counts(p.probs.plane(c), p.sample.target[c], opt.grid);
      if (c == kOD) r.od_pred = centroid(pred);
    }
    r.diagonal = std::hypot(static_cast<double>(p.sample.image.width), static_cast<double>(p.sample.image.height));
  });

  EvalReport rep;
  for (std::size_t c = 0; c < kNumAnnotated; ++c) {
    Confusion pooled;
    double jac = 0.0;
    std::vector<Confusion> curve_counts(opt.grid.size());
    for (auto& r : per) {
      pooled += r.at_t[c];
      jac += r.jac[c];
      for (std::size_t j = 0; j < curve_counts.size(); ++j) curve_counts[j] += r.sweep[c][j];
    }
    ClassReport& cr = rep.classes[c];
    cr.threshold = thresholds[c];
    cr.at_threshold = metrics(pooled);
    cr.jaccard = jac / static_cast<double>(per.size());
    cr.auc = auc_ppv_se(curve_from_counts(opt.grid, curve_counts));
  }

  std::vector<std::optional<std::pair<double, double>>> preds;
  std::vector<std::pair<double, double>> gts;
  double sum = 0.0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!records[i]->od_cx || !records[i]->od_cy) continue;
    LocalizationRow row;
    row.image = per[i].name;
    row.pred = per[i].od_pred;
    row.gt = {*records[i]->od_cx, *records[i]->od_cy};
    const double penalty = opt.loc_penalty > 0.0 ? opt.loc_penalty : per[i].diagonal;
    row.distance = row.pred ? localization_error(*row.pred, row.gt) : penalty;
    sum += row.distance;
    rep.localization.push_back(row);
  }
  rep.mean_distance = rep.localization.empty() ? 0.0 : sum / static_cast<double>(rep.localization.size());
  return rep;
}

inline void write_report(const std::filesystem::path& path, const EvalReport& rep) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "class,threshold,sensitivity,ppv,accuracy,jaccard,auc\n";
  for (std::size_t c = 0; c < kNumAnnotated; ++c) {
    const auto& r = rep.classes[c];
    out << kClassNames[c] << "," << format_real(r.threshold) << "," << format_real(r.at_threshold.sensitivity) << ","
        << format_real(r.at_threshold.ppv) << "," << format_real(r.at_threshold.accuracy) << ","
        << format_real(r.jaccard) << "," << format_real(r.auc) << "\n";
  }
  if (!out) throw IoError("short write to " + path.string());
}

inline void write_localization(const std::filesystem::path& path, const EvalReport& rep) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "image,pred_x,pred_y,gt_x,gt_y,distance\n";
  for (auto& r : rep.localization) {
    out << r.image << "," << (r.pred ? format_real(r.pred->first) : "") << ","
        << (r.pred ? format_real(r.pred->second) : "") << "," << format_real(r.gt.first) << ","
        << format_real(r.gt.second) << "," << format_real(r.distance) << "\n";
  }
  if (!out) throw IoError("short write to " + path.string());
}

} // namespace fundseg

#endif
