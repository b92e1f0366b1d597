#ifndef FUNDSEG_CONFIG_HPP
#define FUNDSEG_CONFIG_HPP

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "infer.hpp"
#include "train.hpp"

namespace fundseg {

/// Every knob of a run, read from a `key = value` text file. Unknown keys
/// are rejected; absent keys keep their defaults.
struct RunConfig {
  TrainConfig train;
  bool boost = true;
  double loc_penalty = 0.0;
  std::size_t eval_threads = 1;

  PipelineOptions pipeline() const {
    PipelineOptions o;
    o.boost = boost;
    o.retina_threshold = train.retina_threshold;
    o.input_scale = train.input_scale;
    o.loc_penalty = loc_penalty;
    o.threads = eval_threads;
    return o;
  }
};

struct ConfigKey {
  const char* name;
  const char* help;
};

inline constexpr ConfigKey kConfigKeys[] = {
    {"seed", "RNG seed for initialization and shuffling (default 1)"},
    {"convs_per_stage", "comma list, convolutions per pooling stage (default 2,2)"},
    {"channels_per_stage", "comma list, feature width per stage (default 8,16)"},
    {"bn_momentum", "batch-norm running-stat momentum (default 0.1)"},
    {"bn_epsilon", "batch-norm epsilon (default 1e-5)"},
    {"batch_size", "minibatch size; the last partial batch is kept (default 4)"},
    {"epochs_max", "maximum epochs (default 200)"},
    {"patience", "epochs without validation improvement before stopping (default 10)"},
    {"lr", "Adam learning rate (default 1e-3)"},
    {"beta1", "Adam first-moment decay (default 0.9)"},
    {"beta2", "Adam second-moment decay (default 0.999)"},
    {"epsilon", "Adam epsilon (default 1e-8)"},
    {"augment", "true/false, add horizontal/vertical/180 flips (default true)"},
    {"retina_threshold", "0-255 grayscale level for the retinal disk mask (default 20)"},
    {"input_scale", "1 or 8; 8 downsamples images by 8x8 block means (default 1)"},
    {"boost", "true/false, channel softmax after the sigmoid at inference (default true)"},
    {"loc_penalty", "distance charged for a missing optic-disk prediction; <= 0 means image diagonal (default 0)"},
    {"eval_threads", "worker threads for calibrate/eval (default 1)"},
};

inline std::string config_help() {
  std::string s = "Config keys (key = value, '#' starts a comment):\n";
  for (auto& k : kConfigKeys) s += "  " + std::string(k.name) + ": " + k.help + "\n";
  return s;
}

namespace detail {

inline std::vector<std::size_t> parse_count_list(const std::string& v, const std::string& key) {
  std::vector<std::size_t> out;
  for (auto& part : split(v, ',')) {
    auto c = parse_count(part);
    if (!c) throw ConfigError(key + ": '" + v + "' is not a comma list of counts");
    out.push_back(*c);
  }
  return out;
}

inline std::string join_counts(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

} // namespace detail

inline RunConfig parse_run_config(const std::string& text, const std::string& src = "<config>") {
  RunConfig rc;
  TrainConfig& t = rc.train;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::map<std::string, bool> seen;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const std::string body(trim(hash == std::string::npos ? line : line.substr(0, hash)));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    auto where = [&] { return src + " line " + std::to_string(lineno) + ": "; };
    if (eq == std::string::npos) throw ConfigError(where() + "expected key = value");
    const std::string key(trim(body.substr(0, eq)));
    const std::string val(trim(body.substr(eq + 1)));
    if (seen[key]) throw ConfigError(where() + "duplicate key '" + key + "'");
    seen[key] = true;

    auto real = [&] {
      auto v = parse_real(val);
      if (!v) throw ConfigError(where() + key + " expects a real, got '" + val + "'");
      return *v;
    };
    auto count = [&] {
      auto v = parse_count(val);
      if (!v) throw ConfigError(where() + key + " expects a non-negative integer, got '" + val + "'");
      return *v;
    };
    auto flag = [&] {
      if (val == "true" || val == "1") return true;
      if (val == "false" || val == "0") return false;
      throw ConfigError(where() + key + " expects true/false, got '" + val + "'");
    };

    if (key == "seed") t.seed = count();
    else if (key == "convs_per_stage") t.net.convs_per_stage = detail::parse_count_list(val, key);
    else if (key == "channels_per_stage") t.net.channels_per_stage = detail::parse_count_list(val, key);
    else if (key == "bn_momentum") t.net.bn_momentum = real();
    else if (key == "bn_epsilon") t.net.bn_epsilon = real();
    else if (key == "batch_size") t.batch_size = count();
    else if (key == "epochs_max") t.epochs_max = count();
    else if (key == "patience") t.patience = count();
    else if (key == "lr") t.lr = real();
    else if (key == "beta1") t.beta1 = real();
    else if (key == "beta2") t.beta2 = real();
    else if (key == "epsilon") t.epsilon = real();
    else if (key == "augment") t.augment = flag();
    else if (key == "retina_threshold") {
      const auto v = count();
      if (v > 255) throw ConfigError(where() + "retina_threshold must be 0-255");
      t.retina_threshold = static_cast<std::uint8_t>(v);
    } else if (key == "input_scale") t.input_scale = count();
    else if (key == "boost") rc.boost = flag();
    else if (key == "loc_penalty") rc.loc_penalty = real();
    else if (key == "eval_threads") rc.eval_threads = count();
    else throw ConfigError(where() + "unknown key '" + key + "'");
  }
  t.validate();
  if (rc.eval_threads == 0) throw ConfigError(src + ": eval_threads must be >= 1");
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.string());
}

/// Effective configuration, one key per line, parseable by parse_run_config.
inline std::string to_text(const RunConfig& rc) {
  const TrainConfig& t = rc.train;
  std::ostringstream o;
  o << "seed = " << t.seed << "\n"
    << "convs_per_stage = " << detail::join_counts(t.net.convs_per_stage) << "\n"
    << "channels_per_stage = " << detail::join_counts(t.net.channels_per_stage) << "\n"
    << "bn_momentum = " << format_real(t.net.bn_momentum) << "\n"
    << "bn_epsilon = " << format_real(t.net.bn_epsilon) << "\n"
    << "batch_size = " << t.batch_size << "\n"
    << "epochs_max = " << t.epochs_max << "\n"
    << "patience = " << t.patience << "\n"
    << "lr = " << format_real(t.lr) << "\n"
    << "beta1 = " << format_real(t.beta1) << "\n"
    << "beta2 = " << format_real(t.beta2) << "\n"
    << "epsilon = " << format_real(t.epsilon) << "\n"
    << "augment = " << (t.augment ? "true" : "false") << "\n"
    << "retina_threshold = " << unsigned{t.retina_threshold} << "\n"
    << "input_scale = " << t.input_scale << "\n"
    << "boost = " << (rc.boost ? "true" : "false") << "\n"
    << "loc_penalty = " << format_real(rc.loc_penalty) << "\n"
    << "eval_threads = " << rc.eval_threads << "\n";
  return o.str();
}

} // namespace fundseg

#endif
