#ifndef FUNDSEG_LAYERS_HPP
#define FUNDSEG_LAYERS_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace fundseg {

enum class Mode { train, infer };

// ---------------------------------------------------------------------------
// Convolution: 3x3 cross-correlation, zero padding 1, stride 1.
// ---------------------------------------------------------------------------

/// Filter bank of one convolution. `bias` may be left empty for a bias-free
/// convolution (used ahead of batch normalization).
struct ConvParams {
  Tensor weight; // [out_ch, in_ch, 3, 3]
  Tensor bias;   // [out_ch] or empty

  ConvParams() = default;
  ConvParams(std::size_t in_ch, std::size_t out_ch, bool with_bias = true)
      : weight({out_ch, in_ch, 3, 3}), bias(with_bias ? Tensor({out_ch}) : Tensor()) {}

  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t out_channels() const { return weight.dim(0); }
  bool has_bias() const noexcept { return !bias.empty(); }
};

struct ConvCache {
  Tensor input;
};

struct ConvGrads {
  Tensor input;
  Tensor weight;
  Tensor bias; // empty when the convolution has no bias
};

inline std::pair<Tensor, ConvCache> conv2d_forward(const Tensor& x, const ConvParams& p) {
  require_rank4(x, "conv2d_forward");
  const std::size_t n_batch = x.dim(0), cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (p.weight.rank() != 4 || p.weight.dim(2) != 3 || p.weight.dim(3) != 3)
    throw ShapeError("conv weights must be [out,in,3,3], got " + shape_str(p.weight.shape()));
  if (p.in_channels() != cin)
    throw ShapeError("conv expects " + std::to_string(p.in_channels()) + " input channels, got " +
                     std::to_string(cin));
  const std::size_t cout = p.out_channels();
  Tensor y({n_batch, cout, H, W});
  const double* in = x.raw();
  const double* wt = p.weight.raw();
  double* out = y.raw();
  const std::size_t plane = H * W;

  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t co = 0; co < cout; ++co) {
      double* op = out + (n * cout + co) * plane;
      if (p.has_bias()) std::fill(op, op + plane, p.bias[co]);
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* ip = in + (n * cin + ci) * plane;
        const double* k = wt + (co * cin + ci) * 9;
        for (std::size_t kh = 0; kh < 3; ++kh) {
          const std::size_t h_lo = kh == 0 ? 1 : 0, h_hi = kh == 2 ? H - 1 : H;
          for (std::size_t kw = 0; kw < 3; ++kw) {
            const double kv = k[kh * 3 + kw];
            const std::size_t w_lo = kw == 0 ? 1 : 0, w_hi = kw == 2 ? W - 1 : W;
            for (std::size_t h = h_lo; h < h_hi; ++h) {
              double* orow = op + h * W;
              const double* irow = ip + (h + kh - 1) * W + (kw - 1);
              for (std::size_t w = w_lo; w < w_hi; ++w) orow[w] += kv * irow[w];
            }
          }
        }
      }
    }
  }
  return {std::move(y), ConvCache{x}};
}

inline ConvGrads conv2d_backward(const ConvCache& cache, const ConvParams& p, const Tensor& grad_out) {
  const Tensor& x = cache.input;
  const std::size_t n_batch = x.dim(0), cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t cout = p.out_channels();
  if (grad_out.shape() != Shape{n_batch, cout, H, W})
    throw ShapeError("conv2d_backward grad " + shape_str(grad_out.shape()) + " does not match output [" +
                     std::to_string(n_batch) + "," + std::to_string(cout) + "," + std::to_string(H) + "," +
                     std::to_string(W) + "]");
  ConvGrads g{Tensor(x.shape()), Tensor(p.weight.shape()), p.has_bias() ? Tensor({cout}) : Tensor()};
  const std::size_t plane = H * W;
  const double* in = x.raw();
  const double* go = grad_out.raw();
  const double* wt = p.weight.raw();
  double* gi = g.input.raw();
  double* gw = g.weight.raw();

  for (std::size_t n = 0; n < n_batch; ++n) {
    for (std::size_t co = 0; co < cout; ++co) {
      const double* gop = go + (n * cout + co) * plane;
      if (p.has_bias()) {
        double s = 0.0;
        for (std::size_t i = 0; i < plane; ++i) s += gop[i];
        g.bias[co] += s;
      }
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* ip = in + (n * cin + ci) * plane;
        double* gip = gi + (n * cin + ci) * plane;
        const double* k = wt + (co * cin + ci) * 9;
        double* gk = gw + (co * cin + ci) * 9;
        for (std::size_t kh = 0; kh < 3; ++kh) {
          const std::size_t h_lo = kh == 0 ? 1 : 0, h_hi = kh == 2 ? H - 1 : H;
          for (std::size_t kw = 0; kw < 3; ++kw) {
            const double kv = k[kh * 3 + kw];
            const std::size_t w_lo = kw == 0 ? 1 : 0, w_hi = kw == 2 ? W - 1 : W;
            double acc = 0.0;
            for (std::size_t h = h_lo; h < h_hi; ++h) {
              const double* grow = gop + h * W;
              const std::size_t src = (h + kh - 1) * W + (kw - 1);
              const double* irow = ip + src;
              double* girow = gip + src;
              for (std::size_t w = w_lo; w < w_hi; ++w) {
                acc += grow[w] * irow[w];
                girow[w] += kv * grow[w];
              }
            }
            gk[kh * 3 + kw] += acc;
          }
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Batch normalization over (N, H, W) per channel.
// ---------------------------------------------------------------------------

struct BnParams {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  BnParams() = default;
  explicit BnParams(std::size_t ch, double momentum_ = 0.1, double epsilon_ = 1e-5)
      : gamma({ch}, 1.0), beta({ch}, 0.0), running_mean({ch}, 0.0), running_var({ch}, 1.0),
        momentum(momentum_), epsilon(epsilon_) {}

  std::size_t channels() const { return gamma.size(); }
};

struct BnCache {
  Tensor xhat;
  std::vector<double> inv_std;
  Mode mode = Mode::train;
};

struct BnGrads {
  Tensor input;
  Tensor gamma;
  Tensor beta;
};

namespace detail {

inline std::pair<Tensor, BnCache> bn_apply(const Tensor& x, const BnParams& p, const std::vector<double>& mean,
                                           const std::vector<double>& var, Mode mode) {
  const std::size_t n_batch = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
  BnCache cache{Tensor(x.shape()), std::vector<double>(C), mode};
  Tensor y(x.shape());
  for (std::size_t c = 0; c < C; ++c) {
    const double inv_std = 1.0 / std::sqrt(var[c] + p.epsilon);
    cache.inv_std[c] = inv_std;
    const double g = p.gamma[c], b = p.beta[c];
    for (std::size_t n = 0; n < n_batch; ++n) {
      const std::size_t base = (n * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double xh = (x[base + i] - mean[c]) * inv_std;
        cache.xhat[base + i] = xh;
        y[base + i] = g * xh + b;
      }
    }
  }
  return {std::move(y), std::move(cache)};
}

inline void bn_check(const Tensor& x, const BnParams& p) {
  require_rank4(x, "batchnorm_forward");
  if (p.channels() != x.dim(1))
    throw ShapeError("batchnorm has " + std::to_string(p.channels()) + " channels, input has " +
                     std::to_string(x.dim(1)));
}

} // namespace detail

/// Train mode normalizes with the batch mean and population variance and
/// folds them into the running statistics; infer mode uses the running
/// statistics only.
inline std::pair<Tensor, BnCache> batchnorm_forward(const Tensor& x, BnParams& p, Mode mode) {
  detail::bn_check(x, p);
  const std::size_t n_batch = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
  std::vector<double> mean(C), var(C);
  if (mode == Mode::infer) {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = p.running_mean[c];
      var[c] = p.running_var[c];
    }
    return detail::bn_apply(x, p, mean, var, mode);
  }
  const double count = static_cast<double>(n_batch * plane);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t n = 0; n < n_batch; ++n) {
      const double* xp = x.raw() + (n * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) s += xp[i];
    }
    mean[c] = s / count;
    double ss = 0.0;
    for (std::size_t n = 0; n < n_batch; ++n) {
      const double* xp = x.raw() + (n * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) ss += (xp[i] - mean[c]) * (xp[i] - mean[c]);
    }
    var[c] = ss / count;
    p.running_mean[c] = (1.0 - p.momentum) * p.running_mean[c] + p.momentum * mean[c];
    p.running_var[c] = (1.0 - p.momentum) * p.running_var[c] + p.momentum * var[c];
  }
  return detail::bn_apply(x, p, mean, var, mode);
}

/// Inference with running statistics; never touches the parameters.
inline std::pair<Tensor, BnCache> batchnorm_forward(const Tensor& x, const BnParams& p) {
  detail::bn_check(x, p);
  std::vector<double> mean(p.running_mean.data().begin(), p.running_mean.data().end());
  std::vector<double> var(p.running_var.data().begin(), p.running_var.data().end());
  return detail::bn_apply(x, p, mean, var, Mode::infer);
}

inline BnGrads batchnorm_backward(const BnCache& cache, const BnParams& p, const Tensor& grad_out) {
  require_same_shape(cache.xhat, grad_out, "batchnorm_backward");
  const std::size_t n_batch = grad_out.dim(0), C = grad_out.dim(1), plane = grad_out.dim(2) * grad_out.dim(3);
  const double count = static_cast<double>(n_batch * plane);
  BnGrads g{Tensor(grad_out.shape()), Tensor({C}), Tensor({C})};

  for (std::size_t c = 0; c < C; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t n = 0; n < n_batch; ++n) {
      const std::size_t base = (n * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += grad_out[base + i];
        sum_dy_xhat += grad_out[base + i] * cache.xhat[base + i];
      }
    }
    g.beta[c] = sum_dy;
    g.gamma[c] = sum_dy_xhat;
    const double scale = p.gamma[c] * cache.inv_std[c];
    for (std::size_t n = 0; n < n_batch; ++n) {
      const std::size_t base = (n * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        if (cache.mode == Mode::train)
          g.input[base + i] =
              scale * (grad_out[base + i] - sum_dy / count - cache.xhat[base + i] * sum_dy_xhat / count);
        else
          g.input[base + i] = scale * grad_out[base + i];
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

struct ReluCache {
  Tensor input;
};

/// NaN passes through so a diverged network cannot look healthy.
inline std::pair<Tensor, ReluCache> relu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] <= 0.0 ? 0.0 : x[i];
  return {std::move(y), ReluCache{x}};
}

/// Subgradient at exactly 0 is taken as 0.
inline Tensor relu_backward(const ReluCache& cache, const Tensor& grad_out) {
  require_same_shape(cache.input, grad_out, "relu_backward");
  Tensor g(grad_out.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = cache.input[i] > 0.0 ? grad_out[i] : 0.0;
  return g;
}

// ---------------------------------------------------------------------------
// 2x2 / stride 2 max pooling with stored argmax indices, and the matching
// index-driven unpooling.
// ---------------------------------------------------------------------------

/// For every pooled cell, the flat row-major index of the winning element
/// within its channel's input plane (in_h x in_w).
struct PoolIndices {
  std::size_t batch = 0, channels = 0, out_h = 0, out_w = 0;
  std::size_t in_h = 0, in_w = 0;
  std::vector<std::size_t> flat;

  bool operator==(const PoolIndices&) const = default;
};

struct PoolResult {
  Tensor values;
  PoolIndices indices;
};

/// Ties resolve to the smallest flat index (scan order top-left, top-right,
/// bottom-left, bottom-right with strict `>`).
inline PoolResult maxpool2_forward(const Tensor& x) {
  require_rank4(x, "maxpool2_forward");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 || W % 2)
    throw ShapeError("maxpool2 needs even spatial dims, got " + std::to_string(H) + "x" + std::to_string(W));
  const std::size_t h = H / 2, w = W / 2;
  PoolResult r{Tensor({N, C, h, w}), PoolIndices{N, C, h, w, H, W, std::vector<std::size_t>(N * C * h * w)}};
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const double* ip = x.raw() + nc * H * W;
    for (std::size_t oh = 0; oh < h; ++oh) {
      for (std::size_t ow = 0; ow < w; ++ow) {
        std::size_t best = (2 * oh) * W + 2 * ow;
        const std::size_t cand[3] = {best + 1, best + W, best + W + 1};
        for (auto c : cand)
          if (ip[c] > ip[best]) best = c;
        const std::size_t o = nc * h * w + oh * w + ow;
        r.values[o] = ip[best];
        r.indices.flat[o] = best;
      }
    }
  }
  return r;
}

inline Tensor maxpool2_backward(const PoolIndices& idx, const Tensor& grad_out) {
  if (grad_out.shape() != Shape{idx.batch, idx.channels, idx.out_h, idx.out_w})
    throw ShapeError("maxpool2_backward grad " + shape_str(grad_out.shape()) + " does not match pooled shape");
  Tensor g({idx.batch, idx.channels, idx.in_h, idx.in_w});
  const std::size_t in_plane = idx.in_h * idx.in_w, out_plane = idx.out_h * idx.out_w;
  for (std::size_t nc = 0; nc < idx.batch * idx.channels; ++nc)
    for (std::size_t i = 0; i < out_plane; ++i)
      g[nc * in_plane + idx.flat[nc * out_plane + i]] += grad_out[nc * out_plane + i];
  return g;
}

/// Scatters each value to its recorded position in an out_h x out_w plane;
/// every other cell is zero.
inline Tensor maxunpool2_forward(const Tensor& v, const PoolIndices& idx, std::size_t out_h, std::size_t out_w) {
  require_rank4(v, "maxunpool2_forward");
  if (v.shape() != Shape{idx.batch, idx.channels, idx.out_h, idx.out_w})
    throw ShapeError("unpool values " + shape_str(v.shape()) + " do not match the stored indices");
  if (idx.flat.size() != v.size()) throw IndexError("corrupt pool indices: wrong count");
  const std::size_t in_plane = v.dim(2) * v.dim(3), out_plane = out_h * out_w;
  Tensor y({v.dim(0), v.dim(1), out_h, out_w});
  for (std::size_t nc = 0; nc < v.dim(0) * v.dim(1); ++nc) {
    for (std::size_t i = 0; i < in_plane; ++i) {
      const std::size_t target = idx.flat[nc * in_plane + i];
      if (target >= out_plane)
        throw IndexError("corrupt pool indices: " + std::to_string(target) + " outside a " +
                         std::to_string(out_h) + "x" + std::to_string(out_w) + " plane");
      y[nc * out_plane + target] = v[nc * in_plane + i];
    }
  }
  return y;
}

/// Adjoint of the scatter: gathers the gradient at the scattered cells.
inline Tensor maxunpool2_backward(const PoolIndices& idx, const Tensor& grad_out) {
  require_rank4(grad_out, "maxunpool2_backward");
  if (grad_out.dim(0) != idx.batch || grad_out.dim(1) != idx.channels)
    throw ShapeError("maxunpool2_backward grad " + shape_str(grad_out.shape()) + " does not match indices");
  const std::size_t out_plane = grad_out.dim(2) * grad_out.dim(3), in_plane = idx.out_h * idx.out_w;
  Tensor g({idx.batch, idx.channels, idx.out_h, idx.out_w});
  for (std::size_t nc = 0; nc < idx.batch * idx.channels; ++nc)
    for (std::size_t i = 0; i < in_plane; ++i) {
      const std::size_t src = idx.flat[nc * in_plane + i];
      if (src >= out_plane) throw IndexError("corrupt pool indices in unpool backward");
      g[nc * in_plane + i] = grad_out[nc * out_plane + src];
    }
  return g;
}

// ---------------------------------------------------------------------------
// Sigmoid and the inference-only channel softmax.
// ---------------------------------------------------------------------------

inline double stable_sigmoid(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct SigmoidCache {
  Tensor output;
};

inline std::pair<Tensor, SigmoidCache> sigmoid(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = stable_sigmoid(x[i]);
  SigmoidCache cache{y};
  return {std::move(y), std::move(cache)};
}

inline Tensor sigmoid_backward(const SigmoidCache& cache, const Tensor& grad_out) {
  require_same_shape(cache.output, grad_out, "sigmoid_backward");
  Tensor g(grad_out.shape());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double y = cache.output[i];
    g[i] = grad_out[i] * y * (1.0 - y);
  }
  return g;
}

/// Per pixel softmax across channels, max-subtracted.
inline Tensor channel_softmax(const Tensor& x) {
  require_rank4(x, "channel_softmax");
  const std::size_t N = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor y(x.shape());
  std::vector<double> e(C);
  for (std::size_t n = 0; n < N; ++n) {
    const std::size_t base = n * C * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < C; ++c) m = std::max(m, x[base + c * plane + i]);
      double s = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        e[c] = std::exp(x[base + c * plane + i] - m);
        s += e[c];
      }
      for (std::size_t c = 0; c < C; ++c) y[base + c * plane + i] = e[c] / s;
    }
  }
  return y;
}

} // namespace fundseg

#endif
