#ifndef FUNDSEG_TRAIN_HPP
#define FUNDSEG_TRAIN_HPP

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "data.hpp"
#include "objective.hpp"
#include "text.hpp"

namespace fundseg {

struct TrainConfig {
  std::uint64_t seed = 1;
  NetConfig net = NetConfig::desk();
  std::size_t batch_size = 4;
  std::size_t epochs_max = 200;
  std::size_t patience = 10;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  bool augment = true;
  std::uint8_t retina_threshold = kDefaultRetinaThreshold;
  std::size_t input_scale = 1;

  void validate() const {
    net.validate();
    if (net.out_channels != kNumClasses) throw ConfigError("network must have 7 output channels");
    if (net.in_channels != 3) throw ConfigError("network must take 3 input channels");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (patience == 0) throw ConfigError("patience must be >= 1");
    if (epochs_max == 0) throw ConfigError("epochs_max must be >= 1");
    if (!(lr >= 0.0)) throw ConfigError("lr must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0,1)");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
    if (input_scale != 1 && input_scale != 8) throw ConfigError("input_scale must be 1 or 8");
  }
};

// ---------------------------------------------------------------------------
// Ensemble manifest: one checkpoint per class plus the best-total network.
// ---------------------------------------------------------------------------

struct EnsembleEntry {
  std::string checkpoint; // relative to the ensemble directory
  std::size_t epoch = 0;
  double val_loss = std::numeric_limits<double>::infinity();
};

struct EnsembleManifest {
  std::filesystem::path dir;
  std::array<EnsembleEntry, kNumClasses> classes;
  EnsembleEntry total;

  std::filesystem::path path_of(const EnsembleEntry& e) const { return dir / e.checkpoint; }
};

inline constexpr const char* kEnsembleFile = "ensemble.csv";
inline constexpr const char* kHistoryFile = "history.csv";
inline constexpr const char* kEnsembleHeader = "class,checkpoint,epoch,val_loss";
inline constexpr const char* kHistoryHeader = "epoch,train_loss,val_loss,val_ma,val_hem,val_ex,val_se,val_od,val_rd,val_bg";

inline void write_ensemble(const EnsembleManifest& e) {
  std::ofstream out(e.dir / kEnsembleFile, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + (e.dir / kEnsembleFile).string());
  out << kEnsembleHeader << "\n";
  auto row = [&](const char* name, const EnsembleEntry& x) {
    out << name << "," << x.checkpoint << "," << x.epoch << "," << format_real(x.val_loss) << "\n";
  };
  for (std::size_t c = 0; c < kNumClasses; ++c) row(kClassNames[c], e.classes[c]);
  row("total", e.total);
  if (!out) throw IoError("short write to " + (e.dir / kEnsembleFile).string());
}

/// Reads `<dir>/ensemble.csv`.
inline EnsembleManifest load_ensemble_manifest(const std::filesystem::path& dir) {
  const auto path = dir / kEnsembleFile;
  std::ifstream in(path);
  if (!in) throw IoError("cannot open ensemble manifest " + path.string());
  EnsembleManifest e;
  e.dir = dir;
  std::string line;
  std::getline(in, line);
  if (trim(line) != kEnsembleHeader) throw DataError(path.string() + ": bad header");
  std::array<bool, kNumClasses + 1> seen{};
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto cols = split(trim(line), ',');
    auto fail = [&](const std::string& why) {
      throw DataError(path.string() + " row " + std::to_string(lineno) + ": " + why);
    };
    if (cols.size() != 4) fail("expected 4 columns");
    EnsembleEntry x;
    x.checkpoint = std::string(trim(cols[1]));
    auto ep = parse_count(cols[2]);
    auto vl = parse_real(cols[3]);
    if (!ep) fail("bad epoch");
    x.epoch = *ep;
    x.val_loss = vl ? *vl : std::numeric_limits<double>::infinity();
    const std::string name(trim(cols[0]));
    std::size_t slot = kNumClasses + 1;
    for (std::size_t c = 0; c < kNumClasses; ++c)
      if (name == kClassNames[c]) slot = c;
    if (name == "total") slot = kNumClasses;
    if (slot > kNumClasses) fail("unknown class '" + name + "'");
    if (slot == kNumClasses)
      e.total = x;
    else
      e.classes[slot] = x;
    seen[slot] = true;
  }
  for (std::size_t c = 0; c <= kNumClasses; ++c)
    if (!seen[c]) throw DataError(path.string() + ": missing row for " + (c < kNumClasses ? kClassNames[c] : "total"));
  return e;
}

// ---------------------------------------------------------------------------
// History and stopping
// ---------------------------------------------------------------------------

struct HistoryRow {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  LossReport val;
};

using History = std::vector<HistoryRow>;

inline std::string history_line(const HistoryRow& r) {
  std::string s = std::to_string(r.epoch) + "," + format_real(r.train_loss) + "," + format_real(r.val.total);
  for (double v : r.val.per_class) s += "," + format_real(v);
  return s;
}

inline void write_history(const std::filesystem::path& path, const History& h) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << kHistoryHeader << "\n";
  for (auto& r : h) out << history_line(r) << "\n";
  if (!out) throw IoError("short write to " + path.string());
}

/// Stops once `patience` consecutive observations fail to improve strictly
/// on the best loss so far.
class EarlyStopper {
public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

  /// Returns true when training should stop after this observation.
  bool observe(double loss) {
    if (loss < best_) {
      best_ = loss;
      stale_ = 0;
    } else {
      ++stale_;
    }
    return stale_ >= patience_;
  }

  double best() const { return best_; }

private:
  std::size_t patience_;
  std::size_t stale_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Mean loss report over `samples`, one forward per sample. `predict` maps
/// a [1,3,H,W] input to [1,7,H,W] probabilities.
template <typename Predict>
LossReport validate_with(Predict&& predict, const std::vector<Sample>& samples) {
  if (samples.empty()) throw ConfigError("validation set is empty");
  LossReport mean;
  for (const Sample& s : samples) {
    const Tensor x = images_to_tensor({&s.image});
    const Tensor t = targets_to_tensor({&s.target});
    const LossReport r = bce_loss(predict(x), t);
    mean.total += r.total;
    for (std::size_t c = 0; c < kNumClasses; ++c) mean.per_class[c] += r.per_class[c];
  }
  const double n = static_cast<double>(samples.size());
  mean.total /= n;
  for (auto& v : mean.per_class) v /= n;
  return mean;
}

inline LossReport validate(const Network& net, const std::vector<Sample>& samples) {
  return validate_with([&](const Tensor& x) { return forward(net, x).first; }, samples);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainResult {
  EnsembleManifest ensemble;
  History history;
};

namespace detail {
inline bool all_finite(Network& net) {
  for (const Tensor& p : net.parameters())
    for (double v : p.data())
      if (!std::isfinite(v)) return false;
  return true;
}
} // namespace detail

inline std::vector<Sample> load_split(const DatasetManifest& m, Split split, const TrainConfig& cfg) {
  std::vector<Sample> out;
  for (const ManifestRecord* r : m.select(split)) out.push_back(load_sample(m, *r, cfg.retina_threshold, cfg.input_scale));
  return out;
}

inline std::string class_checkpoint_name(std::size_t c) { return std::string("class_") + kClassNames[c] + ".fseg"; }

/// Minibatch Adam on BCE with per-epoch validation. Writes into `out_dir`:
/// class_<name>.fseg whenever that class's validation loss improves,
/// best_total.fseg whenever the total improves, last.fseg at the end,
/// history.csv and ensemble.csv.
inline TrainResult train(const TrainConfig& cfg, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                         const std::filesystem::path& out_dir) {
  cfg.validate();
  if (train_set.empty()) throw ConfigError("training split is empty");
  if (val_set.empty()) throw ConfigError("validation split is empty");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (!std::filesystem::is_directory(out_dir)) throw IoError("cannot create output directory " + out_dir.string());

  std::vector<Sample> augmented;
  const std::vector<Sample>* samples = &train_set;
  if (cfg.augment) {
    for (const Sample& s : train_set)
      for (auto& [img, tgt] : augment_flips(s.image, s.target)) {
        Sample a;
        a.name = s.name;
        a.image = std::move(img);
        a.target = std::move(tgt);
        augmented.push_back(std::move(a));
      }
    samples = &augmented;
  }

  Prng prng(cfg.seed);
  Network net = build_network(cfg.net, prng);
  AdamState adam = adam_init(net, cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon);

  TrainResult result;
  result.ensemble.dir = out_dir;
  EarlyStopper stopper(cfg.patience);
  const std::size_t n = samples->size();

  for (std::size_t epoch = 1; epoch <= cfg.epochs_max; ++epoch) {
    const auto order = prng.shuffle(n);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      std::vector<const Image*> imgs;
      std::vector<const TargetStack*> tgts;
      for (std::size_t i = start; i < stop; ++i) {
        imgs.push_back(&(*samples)[order[i]].image);
        tgts.push_back(&(*samples)[order[i]].target);
      }
      const Tensor x = images_to_tensor(imgs);
      const Tensor t = targets_to_tensor(tgts);
      auto [probs, cache] = forward(net, x, Mode::train);
      const LossReport batch = bce_loss(probs, t);
      if (!std::isfinite(batch.total)) throw NumericalError("training diverged at epoch " + std::to_string(epoch));
      loss_sum += batch.total * static_cast<double>(stop - start);
      const ParamGrads grads = backward(net, cache, bce_grad(probs, t));
      adam_step(adam, net, grads);
      if (!detail::all_finite(net))
        throw NumericalError("training diverged at epoch " + std::to_string(epoch) + ": non-finite parameters");
    }

    HistoryRow row{epoch, loss_sum / static_cast<double>(n), validate(net, val_set)};
    if (!std::isfinite(row.train_loss) || !std::isfinite(row.val.total))
      throw NumericalError("training diverged at epoch " + std::to_string(epoch));
    result.history.push_back(row);

    std::optional<std::vector<std::uint8_t>> bytes;
    auto save_if = [&](EnsembleEntry& entry, double loss, const std::string& file) {
      if (!(loss < entry.val_loss)) return;
      if (!bytes) bytes = encode_checkpoint(Checkpoint{net, epoch, row.val.per_class});
      write_file_bytes(out_dir / file, *bytes);
      entry = EnsembleEntry{file, epoch, loss};
    };
    for (std::size_t c = 0; c < kNumClasses; ++c)
      save_if(result.ensemble.classes[c], row.val.per_class[c], class_checkpoint_name(c));
    save_if(result.ensemble.total, row.val.total, "best_total.fseg");

    write_history(out_dir / kHistoryFile, result.history);
    if (stopper.observe(row.val.total)) break;
  }

  const HistoryRow& last = result.history.back();
  save_checkpoint(Checkpoint{net, last.epoch, last.val.per_class}, out_dir / "last.fseg");
  write_ensemble(result.ensemble);
  return result;
}

inline TrainResult train(const TrainConfig& cfg, const DatasetManifest& data, const std::filesystem::path& out_dir) {
  cfg.validate();
  return train(cfg, load_split(data, Split::train, cfg), load_split(data, Split::val, cfg), out_dir);
}

} // namespace fundseg

#endif
