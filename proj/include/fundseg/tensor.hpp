#ifndef FUNDSEG_TENSOR_HPP
#define FUNDSEG_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"

namespace fundseg {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Dense row-major array of doubles. The data length always equals the
/// product of the dims.
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    if (shape_.empty()) throw ShapeError("tensor needs at least one dim");
    std::size_t n = 1;
    for (auto d : shape_) {
      if (d == 0) throw ShapeError("invalid shape " + shape_str(shape_));
      n *= d;
    }
    data_.assign(n, fill);
  }

  static Tensor from(Shape shape, std::vector<double> values) {
    Tensor t(std::move(shape));
    if (values.size() != t.size())
      throw ShapeError("value count " + std::to_string(values.size()) + " does not match " +
                       shape_str(t.shape_));
    t.data_ = std::move(values);
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  double* raw() noexcept { return data_.data(); }
  const double* raw() const noexcept { return data_.data(); }

  double& operator[](std::size_t flat) noexcept { return data_[flat]; }
  double operator[](std::size_t flat) const noexcept { return data_[flat]; }

  /// Row-major flat offset of a coordinate; bounds-checked.
  std::size_t offset(std::span<const std::size_t> idx) const {
    if (idx.size() != shape_.size())
      throw IndexError("rank " + std::to_string(idx.size()) + " index into " + shape_str(shape_));
    std::size_t off = 0;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] >= shape_[i])
        throw IndexError("coordinate " + std::to_string(idx[i]) + " out of range for axis " +
                         std::to_string(i) + " of " + shape_str(shape_));
      off = off * shape_[i] + idx[i];
    }
    return off;
  }

  double get(std::initializer_list<std::size_t> idx) const {
    return data_[offset({idx.begin(), idx.size()})];
  }
  double get(std::span<const std::size_t> idx) const { return data_[offset(idx)]; }
  void set(std::initializer_list<std::size_t> idx, double v) {
    data_[offset({idx.begin(), idx.size()})] = v;
  }
  void set(std::span<const std::size_t> idx, double v) { data_[offset(idx)] = v; }

  /// Unchecked 4-D accessor for [N,C,H,W] tensors.
  double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Tensor&) const = default;

private:
  Shape shape_;
  std::vector<double> data_;
};

inline void require_rank4(const Tensor& t, const char* what) {
  if (t.rank() != 4) throw ShapeError(std::string(what) + " expects [N,C,H,W], got " + shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

/// xorshift64* generator seeded through splitmix64.
///
/// Normal deviates use the cosine branch of Box-Muller, consuming exactly two
/// uniforms per call (no cached second deviate): u1 = 1 - U, u2 = U, where
/// U = (next_u64() >> 11) * 2^-53. The output is reproducible bit-for-bit by
/// any implementation that follows these steps.
class Prng {
public:
  explicit Prng(std::uint64_t seed) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    z ^= z >> 31;
    state_ = z ? z : 0x9E3779B97F4A7C15ULL;
  }

  std::uint64_t next_u64() noexcept {
    state_ ^= state_ >> 12;
    state_ ^= state_ << 25;
    state_ ^= state_ >> 27;
    return state_ * 0x2545F4914F6CDD1DULL;
  }

  /// Uniform in [0, 1).
  double next_uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n); modulo reduction. n must be > 0.
  std::uint64_t next_below(std::uint64_t n) noexcept { return next_u64() % n; }

  double next_normal(double mean, double stddev) noexcept {
    const double u1 = 1.0 - next_uniform();
    const double u2 = next_uniform();
    const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    return mean + stddev * z;
  }

  /// Fisher-Yates permutation of 0..n-1, swapping from the top down.
  std::vector<std::size_t> shuffle(std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) {
      const auto j = static_cast<std::size_t>(next_below(i));
      std::swap(p[i - 1], p[j]);
    }
    return p;
  }

  std::uint64_t state() const noexcept { return state_; }

private:
  std::uint64_t state_;
};

} // namespace fundseg

#endif
