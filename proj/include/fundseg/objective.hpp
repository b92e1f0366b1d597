#ifndef FUNDSEG_OBJECTIVE_HPP
#define FUNDSEG_OBJECTIVE_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <vector>

#include "model.hpp"

namespace fundseg {

inline constexpr double kProbClamp = 1e-7;

struct LossReport {
  double total = 0.0;
  std::array<double, kNumClasses> per_class{};
};

namespace detail {
inline void require_class_stack(const Tensor& O, const Tensor& T, const char* what) {
  require_rank4(O, what);
  require_same_shape(O, T, what);
  if (O.dim(1) != kNumClasses)
    throw ShapeError(std::string(what) + " expects " + std::to_string(kNumClasses) + " channels, got " +
                     std::to_string(O.dim(1)));
}
} // namespace detail

/// Pixel-wise binary cross-entropy. Each class averages over (N, H, W); the
/// total is the mean over classes, which equals the mean over every element.
inline LossReport bce_loss(const Tensor& O, const Tensor& T) {
  detail::require_class_stack(O, T, "bce_loss");
  const std::size_t N = O.dim(0), plane = O.dim(2) * O.dim(3);
  LossReport r;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    double s = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t base = (n * kNumClasses + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double o = std::clamp(O[base + i], kProbClamp, 1.0 - kProbClamp);
        const double t = T[base + i];
        s -= t * std::log(o) + (1.0 - t) * std::log(1.0 - o);
      }
    }
    r.per_class[c] = s / static_cast<double>(N * plane);
  }
  double tot = 0.0;
  for (double v : r.per_class) tot += v;
  r.total = tot / static_cast<double>(kNumClasses);
  return r;
}

/// d(total)/dO. Zero wherever the probability clamp is active.
inline Tensor bce_grad(const Tensor& O, const Tensor& T) {
  detail::require_class_stack(O, T, "bce_grad");
  const double count = static_cast<double>(O.size());
  Tensor g(O.shape());
  for (std::size_t i = 0; i < O.size(); ++i) {
    const double o = O[i];
    if (o < kProbClamp || o > 1.0 - kProbClamp) continue;
    g[i] = (o - T[i]) / (o * (1.0 - o)) / count;
  }
  return g;
}

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t t = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

inline AdamState adam_init(std::span<const std::reference_wrapper<Tensor>> params, double lr = 1e-3,
                           double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8) {
  AdamState s;
  s.lr = lr;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.epsilon = epsilon;
  for (const Tensor& p : params) {
    s.m.emplace_back(p.shape());
    s.v.emplace_back(p.shape());
  }
  return s;
}

inline AdamState adam_init(Network& net, double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                           double epsilon = 1e-8) {
  auto params = net.parameters();
  return adam_init(params, lr, beta1, beta2, epsilon);
}

/// One bias-corrected Adam update applied in place.
inline void adam_step(AdamState& s, std::span<const std::reference_wrapper<Tensor>> params,
                      std::span<const Tensor> grads) {
  if (params.size() != grads.size() || params.size() != s.m.size())
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " parameters, " +
                     std::to_string(grads.size()) + " gradients, " + std::to_string(s.m.size()) + " moments");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(params[i].get(), grads[i], "adam_step");
    require_same_shape(params[i].get(), s.m[i], "adam_step");
  }
  ++s.t;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].get();
    Tensor& m = s.m[i];
    Tensor& v = s.v[i];
    const Tensor& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * g[j];
      v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      p[j] -= s.lr * mhat / (std::sqrt(vhat) + s.epsilon);
    }
  }
}

inline void adam_step(AdamState& s, Network& net, const ParamGrads& grads) {
  auto params = net.parameters();
  adam_step(s, params, grads);
}

} // namespace fundseg

#endif
