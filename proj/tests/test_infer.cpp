#include <gtest/gtest.h>

#include "support.hpp"

using namespace fundseg;
namespace fs = std::filesystem;

namespace {

// One short training run shared by the tests in this file.
struct Trained {
  fs::path data, run;
  DatasetManifest manifest;
  LoadedEnsemble ens;
};

const Trained& trained() {
  static const Trained t = [] {
    Trained r;
    r.data = testsupport::scratch_dir("infer_data");
    r.run = testsupport::scratch_dir("infer_run");
    gen_fixtures(5, 16, 24, 24, r.data);
    r.manifest = load_manifest(r.data / "manifest.csv");
    TrainConfig cfg;
    cfg.epochs_max = 6;
    cfg.augment = false;
    train(cfg, r.manifest, r.run);
    r.ens = load_ensemble(load_ensemble_manifest(r.run));
    return r;
  }();
  return t;
}

} // namespace

TEST(Ensemble, DegenerateMatchesSingleNetwork) {
  const Checkpoint ck = load_checkpoint(trained().run / "last.fseg");
  auto net = std::make_shared<const Network>(ck.net);
  const Sample s = load_sample(trained().manifest, trained().manifest.records[0]);
  const ProbStack got = infer(single_network_ensemble(net), s.image, false);
  const Tensor want = forward(*net, images_to_tensor({&s.image})).first;
  EXPECT_EQ(got.to_tensor(), want);
}

TEST(Ensemble, ChannelsComeFromTheirMembers) {
  const Trained& t = trained();
  const Sample s = load_sample(t.manifest, t.manifest.records[1]);
  const ProbStack got = infer(t.ens, s.image, false);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const ProbStack own = ProbStack::from_tensor(forward(*t.ens.members[c], images_to_tensor({&s.image})).first);
    const auto a = got.plane(c).values, b = own.plane(c).values;
    ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << c;
  }
}

TEST(Ensemble, BoostNormalizesAndKeepsArgmax) {
  const Trained& t = trained();
  const Sample s = load_sample(t.manifest, t.manifest.records[2]);
  const ProbStack raw = infer(t.ens, s.image, false), b = infer(t.ens, s.image, true);
  const std::size_t n = raw.width * raw.height;
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0.0;
    std::size_t ar = 0, ab = 0;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      sum += b.plane(c).values[i];
      if (raw.plane(c).values[i] > raw.plane(ar).values[i]) ar = c;
      if (b.plane(c).values[i] > b.plane(ab).values[i]) ab = c;
    }
    ASSERT_NEAR(sum, 1.0, 1e-12);
    ASSERT_EQ(ar, ab);
  }
}

TEST(Ensemble, MissingCheckpoint) {
  EnsembleManifest e = load_ensemble_manifest(trained().run);
  e.classes[3].checkpoint = "gone.fseg";
  EXPECT_THROW(load_ensemble(e), IoError);
}

TEST(Thresholds, RoundTripAndErrors) {
  const auto dir = testsupport::scratch_dir("thr");
  const ThresholdSet t{0.1, 0.25, 1.0 / 3.0, 0.5, 0.99};
  write_thresholds(dir / "t.csv", t);
  EXPECT_EQ(load_thresholds(dir / "t.csv"), t);
  std::ofstream(dir / "bad.csv") << "class,threshold\nma,0.5\n";
  EXPECT_THROW(load_thresholds(dir / "bad.csv"), DataError);
  std::ofstream(dir / "range.csv") << "class,threshold\nma,1.5\nhem,.5\nex,.5\nse,.5\nod,.5\n";
  EXPECT_THROW(load_thresholds(dir / "range.csv"), DataError);
  EXPECT_THROW(load_thresholds(dir / "none.csv"), IoError);
}

TEST(Pipeline, CalibrationThresholdsInsideGrid) {
  const Trained& t = trained();
  const CalibrationResult r = calibrate_split(t.ens, t.manifest, Split::val, PipelineOptions{});
  for (std::size_t c = 0; c < kNumAnnotated; ++c) {
    EXPECT_GE(r.thresholds[c], 0.01);
    EXPECT_LE(r.thresholds[c], 0.99);
    EXPECT_EQ(r.curves[c].points.size(), 99u);
  }
}

TEST(Pipeline, CalibrationPoolsCounts) {
  const Trained& t = trained();
  PipelineOptions opt;
  const CalibrationResult r = calibrate_split(t.ens, t.manifest, Split::val, opt);
  std::vector<Confusion> pooled(opt.grid.size());
  for (const ManifestRecord* rec : t.manifest.select(Split::val)) {
    const Prediction p = predict_record(t.ens, t.manifest, *rec, opt);
    for (std::size_t k = 0; k < opt.grid.size(); ++k)
      pooled[k] += confusion(threshold_plane(p.probs.plane(kEX), opt.grid[k]), p.sample.target[kEX]);
  }
  for (std::size_t k = 0; k < opt.grid.size(); ++k) {
    const Metrics m = metrics(pooled[k]);
    ASSERT_EQ(r.curves[kEX].points[k].sensitivity, m.sensitivity);
    ASSERT_EQ(r.curves[kEX].points[k].ppv, m.ppv);
  }
}

TEST(Pipeline, EvalIndependentOfThreadCount) {
  const Trained& t = trained();
  const ThresholdSet thr{0.3, 0.3, 0.3, 0.3, 0.3};
  const auto dir = testsupport::scratch_dir("eval_threads");
  for (std::size_t threads : {1u, 2u, 3u, 5u}) {
    PipelineOptions opt;
    opt.threads = threads;
    const EvalReport r = evaluate_split(t.ens, t.manifest, Split::train, thr, opt);
    write_report(dir / ("r" + std::to_string(threads) + ".csv"), r);
    write_localization(dir / ("l" + std::to_string(threads) + ".csv"), r);
    const CalibrationResult c = calibrate_split(t.ens, t.manifest, Split::train, opt);
    write_curves(dir / ("c" + std::to_string(threads) + ".csv"), c.curves);
  }
  for (const char* k : {"r", "l", "c"})
    for (std::size_t threads : {2u, 3u, 5u})
      EXPECT_EQ(testsupport::slurp(dir / (std::string(k) + "1.csv")),
                testsupport::slurp(dir / (k + std::to_string(threads) + ".csv")));
}

TEST(Pipeline, EvalReportConsistency) {
  const Trained& t = trained();
  const ThresholdSet thr{0.4, 0.4, 0.4, 0.4, 0.4};
  const EvalReport r = evaluate_split(t.ens, t.manifest, Split::train, thr, PipelineOptions{});
  const auto recs = t.manifest.select(Split::train);
  ASSERT_EQ(r.localization.size(), recs.size());
  double jac = 0.0, dist = 0.0;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const Prediction p = predict_record(t.ens, t.manifest, *recs[i], PipelineOptions{});
    const MaskImage od = threshold_plane(p.probs.plane(kOD), 0.4);
    jac += jaccard(od, p.sample.target[kOD]);
    const auto c = centroid(od);
    const double d = c ? localization_error(*c, {*recs[i]->od_cx, *recs[i]->od_cy}) : std::hypot(24.0, 24.0);
    EXPECT_DOUBLE_EQ(r.localization[i].distance, d);
    dist += d;
  }
  EXPECT_NEAR(r.classes[kOD].jaccard, jac / static_cast<double>(recs.size()), 1e-12);
  EXPECT_NEAR(r.mean_distance, dist / static_cast<double>(recs.size()), 1e-9);
}

TEST(Pipeline, MissingPredictionPenalty) {
  const Trained& t = trained();
  // a threshold no probability reaches leaves every optic-disk mask empty
  const ThresholdSet thr{0.5, 0.5, 0.5, 0.5, 0.999999};
  PipelineOptions opt;
  opt.boost = true;
  opt.loc_penalty = 17.0;
  const EvalReport r = evaluate_split(t.ens, t.manifest, Split::test, thr, opt);
  ASSERT_FALSE(r.localization.empty());
  for (auto& row : r.localization) {
    EXPECT_FALSE(row.pred);
    EXPECT_EQ(row.distance, 17.0);
  }
  EXPECT_EQ(r.mean_distance, 17.0);
}

TEST(Pipeline, InputScaleEightPredictsAtFullResolution) {
  const auto dir = testsupport::scratch_dir("scale8_data");
  gen_fixtures(2, 3, 32, 24, dir);
  const DatasetManifest m = load_manifest(dir / "manifest.csv");
  Prng prng(1);
  auto net = std::make_shared<const Network>(build_network(NetConfig::desk(), prng));
  PipelineOptions opt;
  opt.input_scale = 8;
  const Prediction p = predict_record(single_network_ensemble(net), m, m.records[0], opt);
  EXPECT_EQ(p.probs.width, 32u);
  EXPECT_EQ(p.probs.height, 24u);
  EXPECT_EQ(p.sample.image.width, 32u);
  // every 8x8 block is constant
  for (std::size_t y = 0; y < 24; ++y)
    for (std::size_t x = 0; x < 32; ++x)
      ASSERT_EQ(p.probs.plane(0).values[y * 32 + x], p.probs.plane(0).values[(y / 8 * 8) * 32 + x / 8 * 8]);
}

TEST(ParallelFor, CoversEveryIndexOnceAndRethrows) {
  std::vector<int> hits(37, 0);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i]++; });
  for (int h : hits) EXPECT_EQ(h, 1);
  EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) {
                 if (i == 7) throw DataError("boom");
               }),
               DataError);
}
