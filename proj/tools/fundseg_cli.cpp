// fundseg: fixture generation, training, calibration, inference, evaluation
// and gradient checking from the command line.

#include <CLI11.hpp>

#include <fundseg/fundseg.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

namespace fs = std::filesystem;
using namespace fundseg;

namespace {

struct Size2 {
  std::size_t w = 0, h = 0;
};

Size2 parse_size(const std::string& s, const char* flag) {
  const auto x = s.find('x');
  if (x == std::string::npos) throw UsageError(std::string(flag) + " expects WxH, got '" + s + "'");
  auto w = parse_count(s.substr(0, x));
  auto h = parse_count(s.substr(x + 1));
  if (!w || !h || *w == 0 || *h == 0) throw UsageError(std::string(flag) + " expects WxH, got '" + s + "'");
  return {*w, *h};
}

// An ensemble directory carries the config it was trained with.
RunConfig ensemble_config(const fs::path& dir) {
  const fs::path p = dir / "config.txt";
  return fs::exists(p) ? load_run_config(p) : RunConfig{};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("short write to " + path.string());
}

int run_gradcheck(std::uint64_t seed) {
  bool ok = true;
  for (const auto& r : run_gradcheck_suite(seed)) {
    std::printf("%-22s max_rel_err %.3e  (%zu entries)%s\n", r.name.c_str(), r.max_rel_error, r.checked,
                r.ok() ? "" : "  FAIL");
    ok = ok && r.ok();
  }
  if (!ok) throw NumericalError("gradient check exceeded tolerance " + format_real(kGradTolerance));
  return 0;
}

int run_infer(const fs::path& ens_dir, const fs::path& image_path, const fs::path& thr_path, const fs::path& out_dir,
              bool no_boost, const std::string& full_res) {
  const RunConfig rc = ensemble_config(ens_dir);
  const LoadedEnsemble ens = load_ensemble(load_ensemble_manifest(ens_dir));
  const ThresholdSet thr = load_thresholds(thr_path);
  const Image img = load_ppm(image_path);

  Size2 full{img.width, img.height};
  if (!full_res.empty()) full = parse_size(full_res, "--full-res");
  const Image input = rc.train.input_scale == 8 ? downsample8(img) : img;
  ProbStack probs = infer(ens, input, rc.boost && !no_boost);
  if (probs.width != full.w || probs.height != full.h) probs = upsample_nearest(probs, full.w, full.h);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (!fs::is_directory(out_dir)) throw IoError("cannot create output directory " + out_dir.string());
  const std::string stem = image_path.stem().string();
  std::string xy = ","; // empty columns when no optic disk is found
  for (std::size_t c = 0; c < kNumAnnotated; ++c) {
    const MaskImage m = threshold_plane(probs.plane(c), thr[c]);
    write_mask(out_dir / (stem + "_" + kClassNames[c] + ".pgm"), m);
    if (c != kOD) continue;
    if (const auto od = centroid(m)) xy = format_real(od->first) + "," + format_real(od->second);
  }
  write_text(out_dir / "centroid.csv", "image,od_x,od_y\n" + stem + "," + xy + "\n");
  std::printf("optic disk centroid: %s\n", xy == "," ? "none" : xy.c_str());
  return 0;
}

int exit_code(const Error& e) { return e.kind() == Error::Kind::numerical ? 2 : 1; }

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Retinal lesion segmentation with an encoder-decoder network"};
  app.footer(config_help());
  app.require_subcommand(1);

  std::string out, data, config, ensemble, image, thresholds, curves, report, loc, size = "32x32", full_res;
  std::size_t count = 8;
  std::uint64_t seed = 1;
  bool no_boost = false;

  auto* gen = app.add_subcommand("gen-fixtures", "write a synthetic fundus dataset with manifest.csv");
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--count", count, "number of images")->required();
  gen->add_option("--size", size, "image size WxH")->required();
  gen->add_option("--seed", seed, "generator seed")->required();

  auto* tr = app.add_subcommand("train", "train and save per-class checkpoints");
  tr->add_option("--config", config, "key = value config file")->required();
  tr->add_option("--data", data, "dataset manifest.csv")->required();
  tr->add_option("--out", out, "output directory")->required();

  auto* cal = app.add_subcommand("calibrate", "pick per-class thresholds on the val split");
  cal->add_option("--ensemble", ensemble, "training output directory")->required();
  cal->add_option("--data", data, "dataset manifest.csv")->required();
  cal->add_option("--out", out, "thresholds.csv to write")->required();
  cal->add_option("--curves", curves, "curves.csv to write")->required();

  auto* inf = app.add_subcommand("infer", "segment one image");
  inf->add_option("--ensemble", ensemble, "training output directory")->required();
  inf->add_option("--image", image, "input PPM")->required();
  inf->add_option("--thresholds", thresholds, "thresholds.csv")->required();
  inf->add_option("--out", out, "output directory")->required();
  inf->add_flag("--no-boost", no_boost, "skip the channel softmax");
  inf->add_option("--full-res", full_res, "upsample the prediction to WxH");

  auto* ev = app.add_subcommand("eval", "report metrics on the test split");
  ev->add_option("--ensemble", ensemble, "training output directory")->required();
  ev->add_option("--data", data, "dataset manifest.csv")->required();
  ev->add_option("--thresholds", thresholds, "thresholds.csv")->required();
  ev->add_option("--report", report, "report.csv to write")->required();
  ev->add_option("--loc", loc, "localization csv to write")->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every backward pass");
  gc->add_option("--seed", seed, "seed for the random inputs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*gen) {
      const Size2 s = parse_size(size, "--size");
      gen_fixtures(seed, count, s.w, s.h, out);
      std::printf("wrote %zu fixtures to %s\n", count, out.c_str());
    } else if (*tr) {
      const RunConfig rc = load_run_config(config);
      const DatasetManifest m = load_manifest(data);
      std::error_code ec;
      fs::create_directories(out, ec);
      if (!fs::is_directory(out)) throw IoError("cannot create output directory " + out);
      write_text(fs::path(out) / "config.txt", to_text(rc));
      const TrainResult r = train(rc.train, m, out);
      const HistoryRow& last = r.history.back();
      std::printf("trained %zu epochs; last train loss %s, val loss %s; best total at epoch %zu\n", last.epoch,
                  format_real(last.train_loss).c_str(), format_real(last.val.total).c_str(), r.ensemble.total.epoch);
    } else if (*cal) {
      const RunConfig rc = ensemble_config(ensemble);
      const CalibrationResult r =
          calibrate_split(load_ensemble(load_ensemble_manifest(ensemble)), load_manifest(data), Split::val, rc.pipeline());
      write_thresholds(out, r.thresholds);
      write_curves(curves, r.curves);
      for (std::size_t c = 0; c < kNumAnnotated; ++c)
        std::printf("%-3s threshold %s\n", kClassNames[c], format_real(r.thresholds[c]).c_str());
    } else if (*inf) {
      return run_infer(ensemble, image, thresholds, out, no_boost, full_res);
    } else if (*ev) {
      const RunConfig rc = ensemble_config(ensemble);
      const EvalReport r = evaluate_split(load_ensemble(load_ensemble_manifest(ensemble)), load_manifest(data),
                                          Split::test, load_thresholds(thresholds), rc.pipeline());
      write_report(report, r);
      write_localization(loc, r);
      for (std::size_t c = 0; c < kNumAnnotated; ++c) {
        const auto& x = r.classes[c];
        std::printf("%-3s SE %.4f PPV %.4f ACC %.4f J %.4f AUC %.4f\n", kClassNames[c], x.at_threshold.sensitivity,
                    x.at_threshold.ppv, x.at_threshold.accuracy, x.jaccard, x.auc);
      }
      std::printf("mean optic disk distance: %s px over %zu images\n", format_real(r.mean_distance).c_str(),
                  r.localization.size());
    } else if (*gc) {
      return run_gradcheck(seed);
    }
  } catch (const Error& e) {
    std::cerr << "fundseg: " << e.what() << "\n";
    return exit_code(e);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "fundseg: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "fundseg: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
