#ifndef FUNDSEG_TESTS_SUPPORT_HPP
#define FUNDSEG_TESTS_SUPPORT_HPP

#include <fundseg/fundseg.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace testsupport {

using fundseg::Tensor;

// Test-side randomness comes from the standard library so the oracles never
// share code with the library's generator.
inline Tensor random_tensor(std::mt19937_64& rng, fundseg::Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = d(rng);
  return t;
}

inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Central difference of f w.r.t. every entry of `t`; returns the largest
// |a - fd| / max(|a|, |fd|, 1e-8).
inline double fd_worst(Tensor& t, const Tensor& analytic, const std::function<double()>& f, double h = 1e-5) {
  double worst = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double keep = t[i];
    t[i] = keep + h;
    const double up = f();
    t[i] = keep - h;
    const double down = f();
    t[i] = keep;
    const double fd = (up - down) / (2 * h);
    const double a = analytic[i];
    worst = std::max(worst, std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8}));
  }
  return worst;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("fundseg_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

/// Relative path -> contents for every regular file below `root`.
inline std::map<std::string, std::string> tree_contents(const std::filesystem::path& root) {
  std::map<std::string, std::string> out;
  for (auto& e : std::filesystem::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[std::filesystem::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

inline fundseg::MaskImage random_mask(std::mt19937_64& rng, std::size_t w, std::size_t h, double p = 0.5) {
  std::bernoulli_distribution d(p);
  fundseg::MaskImage m(w, h);
  for (auto& b : m.bits) b = d(rng) ? 1 : 0;
  return m;
}

} // namespace testsupport

#endif
