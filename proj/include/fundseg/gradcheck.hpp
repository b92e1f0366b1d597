#ifndef FUNDSEG_GRADCHECK_HPP
#define FUNDSEG_GRADCHECK_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "objective.hpp"

namespace fundseg {

inline constexpr double kFdStep = 1e-5;
inline constexpr double kGradTolerance = 1e-4;

/// |a - b| / max(|a|, |b|, 1e-8)
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Central differences of `loss` w.r.t. the selected entries of `values`,
/// compared with `analytic`. Returns the largest relative error.
inline double fd_max_rel_error(const std::function<double()>& loss, std::span<double> values,
                               std::span<const double> analytic, std::span<const std::size_t> which,
                               double h = kFdStep) {
  double worst = 0.0;
  for (std::size_t i : which) {
    const double keep = values[i];
    values[i] = keep + h;
    const double up = loss();
    values[i] = keep - h;
    const double down = loss();
    values[i] = keep;
    worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * h)));
  }
  return worst;
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

struct GradcheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;

  bool ok() const { return max_rel_error < kGradTolerance; }
};

namespace detail {

inline Tensor random_tensor(Prng& p, Shape shape, double stddev = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = p.next_normal(0.0, stddev);
  return t;
}

inline double weighted_sum(const Tensor& y, const Tensor& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
  return s;
}

} // namespace detail

/// Finite-difference check of every layer's backward pass on random
/// 2x3x6x6 inputs (loss = sum(r * layer(x)) with random r), plus the
/// end-to-end BCE of the desk network on a 2x3x8x8 batch over 50 sampled
/// parameters.
inline std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed) {
  using detail::random_tensor;
  using detail::weighted_sum;
  Prng prng(seed);
  std::vector<GradcheckResult> out;
  const Shape xs{2, 3, 6, 6};

  { // convolution: input, weights, bias
    Tensor x = random_tensor(prng, xs);
    ConvParams p(3, 4, true);
    p.weight = random_tensor(prng, p.weight.shape(), 0.5);
    p.bias = random_tensor(prng, {4}, 0.5);
    const Tensor r = random_tensor(prng, {2, 4, 6, 6});
    auto loss = [&] { return weighted_sum(conv2d_forward(x, p).first, r); };
    auto [y, cache] = conv2d_forward(x, p);
    const ConvGrads g = conv2d_backward(cache, p, r);
    double e = fd_max_rel_error(loss, x.data(), g.input.data(), all_indices(x.size()));
    e = std::max(e, fd_max_rel_error(loss, p.weight.data(), g.weight.data(), all_indices(p.weight.size())));
    e = std::max(e, fd_max_rel_error(loss, p.bias.data(), g.bias.data(), all_indices(p.bias.size())));
    out.push_back({"conv2d", e, x.size() + p.weight.size() + p.bias.size()});
  }

  for (Mode mode : {Mode::train, Mode::infer}) { // batch norm
    Tensor x = random_tensor(prng, xs);
    BnParams p(3);
    p.gamma = random_tensor(prng, {3}, 1.0);
    p.beta = random_tensor(prng, {3}, 1.0);
    p.running_mean = random_tensor(prng, {3}, 0.3);
    for (std::size_t c = 0; c < 3; ++c) p.running_var[c] = 0.5 + prng.next_uniform();
    const Tensor r = random_tensor(prng, xs);
    // a scratch copy absorbs the running-stat updates of train mode
    auto loss = [&] {
      BnParams scratch = p;
      return weighted_sum(batchnorm_forward(x, scratch, mode).first, r);
    };
    BnParams scratch = p;
    auto [y, cache] = batchnorm_forward(x, scratch, mode);
    const BnGrads g = batchnorm_backward(cache, p, r);
    double e = fd_max_rel_error(loss, x.data(), g.input.data(), all_indices(x.size()));
    e = std::max(e, fd_max_rel_error(loss, p.gamma.data(), g.gamma.data(), all_indices(3)));
    e = std::max(e, fd_max_rel_error(loss, p.beta.data(), g.beta.data(), all_indices(3)));
    out.push_back({mode == Mode::train ? "batchnorm(train)" : "batchnorm(infer)", e, x.size() + 6});
  }

  { // ReLU, inputs kept away from the kink
    Tensor x = random_tensor(prng, xs);
    for (auto& v : x.data())
      if (std::abs(v) < 1e-2) v = v < 0 ? -1e-2 : 1e-2;
    const Tensor r = random_tensor(prng, xs);
    auto loss = [&] { return weighted_sum(relu(x).first, r); };
    const Tensor g = relu_backward(relu(x).second, r);
    out.push_back({"relu", fd_max_rel_error(loss, x.data(), g.data(), all_indices(x.size())), x.size()});
  }

  { // max pooling
    Tensor x = random_tensor(prng, xs);
    const Tensor r = random_tensor(prng, {2, 3, 3, 3});
    auto loss = [&] { return weighted_sum(maxpool2_forward(x).values, r); };
    const Tensor g = maxpool2_backward(maxpool2_forward(x).indices, r);
    out.push_back({"maxpool2", fd_max_rel_error(loss, x.data(), g.data(), all_indices(x.size())), x.size()});
  }

  { // unpooling w.r.t. its values, indices fixed
    const Tensor src = random_tensor(prng, xs);
    const PoolIndices idx = maxpool2_forward(src).indices;
    Tensor v = random_tensor(prng, {2, 3, 3, 3});
    const Tensor r = random_tensor(prng, xs);
    auto loss = [&] { return weighted_sum(maxunpool2_forward(v, idx, 6, 6), r); };
    const Tensor g = maxunpool2_backward(idx, r);
    out.push_back({"maxunpool2", fd_max_rel_error(loss, v.data(), g.data(), all_indices(v.size())), v.size()});
  }

  { // pool followed by unpool, through both backward passes
    Tensor x = random_tensor(prng, xs);
    const Tensor r = random_tensor(prng, xs);
    auto loss = [&] {
      PoolResult pr = maxpool2_forward(x);
      return weighted_sum(maxunpool2_forward(pr.values, pr.indices, 6, 6), r);
    };
    const PoolIndices idx = maxpool2_forward(x).indices;
    const Tensor g = maxpool2_backward(idx, maxunpool2_backward(idx, r));
    out.push_back({"maxpool2+maxunpool2", fd_max_rel_error(loss, x.data(), g.data(), all_indices(x.size())), x.size()});
  }

  { // sigmoid
    Tensor x = random_tensor(prng, xs, 2.0);
    const Tensor r = random_tensor(prng, xs);
    auto loss = [&] { return weighted_sum(sigmoid(x).first, r); };
    const Tensor g = sigmoid_backward(sigmoid(x).second, r);
    out.push_back({"sigmoid", fd_max_rel_error(loss, x.data(), g.data(), all_indices(x.size())), x.size()});
  }

  { // end to end: BCE of the desk network in train mode
    Network net = build_network(NetConfig::desk(), prng);
    const Tensor x = random_tensor(prng, {2, 3, 8, 8});
    Tensor t({2, kNumClasses, 8, 8});
    for (auto& v : t.data()) v = prng.next_uniform() < 0.3 ? 1.0 : 0.0;

    Network work = net;
    auto [probs, cache] = forward(work, x, Mode::train);
    const ParamGrads grads = backward(work, cache, bce_grad(probs, t));

    auto params = net.parameters();
    std::size_t total = 0;
    for (const Tensor& p : params) total += p.size();
    double worst = 0.0;
    constexpr std::size_t kSamples = 50;
    for (std::size_t s = 0; s < kSamples; ++s) {
      std::size_t flat = static_cast<std::size_t>(prng.next_below(total));
      std::size_t which = 0;
      while (flat >= params[which].get().size()) flat -= params[which++].get().size();
      Tensor& p = params[which].get();
      auto loss = [&] {
        Network scratch = net;
        return bce_loss(forward(scratch, x, Mode::train).first, t).total;
      };
      const std::size_t one[1] = {flat};
      worst = std::max(worst, fd_max_rel_error(loss, p.data(), grads[which].data(), one));
    }
    out.push_back({"network(bce)", worst, kSamples});
  }
  return out;
}

} // namespace fundseg

#endif
