#ifndef FUNDSEG_MODEL_HPP
#define FUNDSEG_MODEL_HPP

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "layers.hpp"
#include "tensor.hpp"

namespace fundseg {

/// Number of output classes: MA, HEM, EX, SE, OD, retinal disk, background.
inline constexpr std::size_t kNumClasses = 7;

struct NetConfig {
  std::vector<std::size_t> convs_per_stage{2, 2};
  std::vector<std::size_t> channels_per_stage{8, 16};
  std::size_t in_channels = 3;
  std::size_t out_channels = kNumClasses;
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;

  std::size_t stages() const noexcept { return convs_per_stage.size(); }

  /// Desk-scale default: two stages of two convolutions, widths 8 and 16.
  static NetConfig desk() { return {}; }

  /// VGG16-topology encoder: 13 convolutions across five pooling stages.
  static NetConfig full() {
    NetConfig c;
    c.convs_per_stage = {2, 2, 3, 3, 3};
    c.channels_per_stage = {64, 128, 256, 512, 512};
    return c;
  }

  void validate() const {
    if (convs_per_stage.empty()) throw ConfigError("network needs at least one stage");
    if (channels_per_stage.size() != convs_per_stage.size())
      throw ConfigError("convs_per_stage and channels_per_stage differ in length");
    for (auto v : convs_per_stage)
      if (v == 0) throw ConfigError("every stage needs at least one convolution");
    for (auto v : channels_per_stage)
      if (v == 0) throw ConfigError("channel widths must be positive");
    if (in_channels == 0 || out_channels == 0) throw ConfigError("in/out channels must be positive");
    if (!(bn_epsilon > 0.0)) throw ConfigError("bn_epsilon must be positive");
    if (!(bn_momentum >= 0.0 && bn_momentum <= 1.0)) throw ConfigError("bn_momentum must lie in [0,1]");
    if (convs_per_stage.size() > 16) throw ConfigError("too many stages");
  }

  bool operator==(const NetConfig&) const = default;
};

/// conv (bias-free) -> batch norm -> ReLU
struct ConvBlock {
  ConvParams conv;
  BnParams bn;
};

/// Symmetric encoder-decoder. `encoder[s]` runs before pooling stage s;
/// `decoder[s]` runs after unpooling back to the resolution of stage s.
/// Decoders are applied deepest first. The last block of decoder stage s
/// narrows to the width of stage s-1 (or stays at stage 0's width).
struct Network {
  NetConfig config;
  std::vector<std::vector<ConvBlock>> encoder;
  std::vector<std::vector<ConvBlock>> decoder;
  ConvParams head; // final conv to out_channels, followed by sigmoid

  std::size_t encoder_conv_count() const {
    std::size_t n = 0;
    for (auto& s : encoder) n += s.size();
    return n;
  }
  std::size_t decoder_conv_count() const {
    std::size_t n = 0;
    for (auto& s : decoder) n += s.size();
    return n;
  }
  std::size_t conv_count() const { return encoder_conv_count() + decoder_conv_count() + 1; }

  /// Calls `fn(name, tensor, trainable)` for every tensor of the network in
  /// the canonical order used by gradients, optimizer state and checkpoints.
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn&& fn) {
    auto blocks = [&](auto& stages, const char* prefix) {
      for (std::size_t s = 0; s < stages.size(); ++s)
        for (std::size_t k = 0; k < stages[s].size(); ++k) {
          const std::string base = std::string(prefix) + std::to_string(s) + "." + std::to_string(k) + ".";
          auto& b = stages[s][k];
          fn(base + "conv.weight", b.conv.weight, true);
          if (b.conv.has_bias()) fn(base + "conv.bias", b.conv.bias, true);
          fn(base + "bn.gamma", b.bn.gamma, true);
          fn(base + "bn.beta", b.bn.beta, true);
          fn(base + "bn.running_mean", b.bn.running_mean, false);
          fn(base + "bn.running_var", b.bn.running_var, false);
        }
    };
    blocks(self.encoder, "enc");
    blocks(self.decoder, "dec");
    fn(std::string("head.conv.weight"), self.head.weight, true);
    if (self.head.has_bias()) fn(std::string("head.conv.bias"), self.head.bias, true);
  }

  std::vector<std::reference_wrapper<Tensor>> parameters() {
    std::vector<std::reference_wrapper<Tensor>> out;
    visit(*this, [&](const std::string&, Tensor& t, bool trainable) {
      if (trainable) out.emplace_back(t);
    });
    return out;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    visit(*this, [&](const std::string& n, const Tensor&, bool trainable) {
      if (trainable) out.push_back(n);
    });
    return out;
  }
};

inline Network build_network(const NetConfig& cfg, Prng& prng) {
  cfg.validate();
  Network net;
  net.config = cfg;
  const std::size_t S = cfg.stages();
  auto make_conv = [&](std::size_t in, std::size_t out, bool bias) {
    ConvParams p(in, out, bias);
    const double stddev = std::sqrt(2.0 / static_cast<double>(in * 9));
    for (auto& w : p.weight.data()) w = prng.next_normal(0.0, stddev);
    return p;
  };
  auto make_block = [&](std::size_t in, std::size_t out) {
    return ConvBlock{make_conv(in, out, false), BnParams(out, cfg.bn_momentum, cfg.bn_epsilon)};
  };

  net.encoder.resize(S);
  for (std::size_t s = 0; s < S; ++s) {
    std::size_t in = s == 0 ? cfg.in_channels : cfg.channels_per_stage[s - 1];
    for (std::size_t k = 0; k < cfg.convs_per_stage[s]; ++k) {
      net.encoder[s].push_back(make_block(in, cfg.channels_per_stage[s]));
      in = cfg.channels_per_stage[s];
    }
  }
  net.decoder.resize(S);
  for (std::size_t s = S; s-- > 0;) {
    const std::size_t width = cfg.channels_per_stage[s];
    const std::size_t narrow = s == 0 ? width : cfg.channels_per_stage[s - 1];
    const std::size_t k_max = cfg.convs_per_stage[s];
    for (std::size_t k = 0; k < k_max; ++k)
      net.decoder[s].push_back(make_block(width, k + 1 == k_max ? narrow : width));
  }
  net.head = make_conv(cfg.channels_per_stage[0], cfg.out_channels, true);
  return net;
}

/// Gradients parallel to `Network::parameters()`.
using ParamGrads = std::vector<Tensor>;

struct BlockCache {
  ConvCache conv;
  BnCache bn;
  ReluCache relu;
};

struct ForwardCache {
  std::vector<std::vector<BlockCache>> encoder;
  std::vector<std::vector<BlockCache>> decoder;
  std::vector<PoolIndices> pools;
  std::vector<std::pair<std::size_t, std::size_t>> pre_pool_sizes;
  ConvCache head;
  SigmoidCache out;
  std::size_t orig_h = 0, orig_w = 0, padded_h = 0, padded_w = 0;
  bool consumed = false;
};

namespace detail {

template <typename Block>
Tensor run_block(Block& b, const Tensor& x, Mode mode, BlockCache& cache) {
  auto [c, cc] = conv2d_forward(x, b.conv);
  auto [n, bc] = [&] {
    if constexpr (std::is_const_v<Block>)
      return batchnorm_forward(c, b.bn);
    else
      return batchnorm_forward(c, b.bn, mode);
  }();
  auto [r, rc] = relu(n);
  cache = BlockCache{std::move(cc), std::move(bc), std::move(rc)};
  return std::move(r);
}

/// Writes the block's gradients into grads[slot..] in Network::visit order
/// (weight, [bias], gamma, beta).
inline Tensor back_block(const ConvBlock& b, const BlockCache& cache, const Tensor& grad, ParamGrads& grads,
                         std::size_t slot) {
  Tensor g = relu_backward(cache.relu, grad);
  BnGrads bg = batchnorm_backward(cache.bn, b.bn, g);
  ConvGrads cg = conv2d_backward(cache.conv, b.conv, bg.input);
  grads[slot++] = std::move(cg.weight);
  if (b.conv.has_bias()) grads[slot++] = std::move(cg.bias);
  grads[slot++] = std::move(bg.gamma);
  grads[slot] = std::move(bg.beta);
  return std::move(cg.input);
}

inline std::size_t block_slots(const ConvBlock& b) { return b.conv.has_bias() ? 4 : 3; }

} // namespace detail

namespace detail {

template <typename Net>
std::pair<Tensor, ForwardCache> forward_impl(Net& net, const Tensor& x, Mode mode) {
  require_rank4(x, "forward");
  if (x.dim(1) != net.config.in_channels)
    throw ShapeError("network expects " + std::to_string(net.config.in_channels) + " input channels, got " +
                     std::to_string(x.dim(1)));
  const std::size_t S = net.config.stages();
  const std::size_t unit = std::size_t{1} << S;
  ForwardCache cache;
  cache.orig_h = x.dim(2);
  cache.orig_w = x.dim(3);
  cache.padded_h = (cache.orig_h + unit - 1) / unit * unit;
  cache.padded_w = (cache.orig_w + unit - 1) / unit * unit;
  const std::size_t N = x.dim(0);

  Tensor cur;
  if (cache.padded_h == cache.orig_h && cache.padded_w == cache.orig_w) {
    cur = x;
  } else {
    cur = Tensor({N, x.dim(1), cache.padded_h, cache.padded_w});
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < x.dim(1); ++c)
        for (std::size_t h = 0; h < cache.orig_h; ++h)
          for (std::size_t w = 0; w < cache.orig_w; ++w) cur.at(n, c, h, w) = x.at(n, c, h, w);
  }

  cache.encoder.resize(S);
  for (std::size_t s = 0; s < S; ++s) {
    cache.encoder[s].resize(net.encoder[s].size());
    for (std::size_t k = 0; k < net.encoder[s].size(); ++k)
      cur = run_block(net.encoder[s][k], cur, mode, cache.encoder[s][k]);
    cache.pre_pool_sizes.emplace_back(cur.dim(2), cur.dim(3));
    PoolResult pr = maxpool2_forward(cur);
    cur = std::move(pr.values);
    cache.pools.push_back(std::move(pr.indices));
  }

  cache.decoder.resize(S);
  for (std::size_t s = S; s-- > 0;) {
    const auto [ph, pw] = cache.pre_pool_sizes[s];
    if (cache.pools[s].in_h != ph || cache.pools[s].in_w != pw)
      throw ShapeError("decoder unpool target does not match the recorded encoder size");
    cur = maxunpool2_forward(cur, cache.pools[s], ph, pw);
    cache.decoder[s].resize(net.decoder[s].size());
    for (std::size_t k = 0; k < net.decoder[s].size(); ++k)
      cur = run_block(net.decoder[s][k], cur, mode, cache.decoder[s][k]);
  }

  auto [logits, hc] = conv2d_forward(cur, net.head);
  cache.head = std::move(hc);
  auto [probs, sc] = sigmoid(logits);
  cache.out = std::move(sc);

  if (cache.padded_h == cache.orig_h && cache.padded_w == cache.orig_w) return {std::move(probs), std::move(cache)};
  const std::size_t C = probs.dim(1);
  Tensor cropped({N, C, cache.orig_h, cache.orig_w});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < cache.orig_h; ++h)
        for (std::size_t w = 0; w < cache.orig_w; ++w) cropped.at(n, c, h, w) = probs.at(n, c, h, w);
  return {std::move(cropped), std::move(cache)};
}

} // namespace detail

/// Runs the network on a [N, in_channels, H, W] batch and returns per-class
/// sigmoid probabilities [N, out_channels, H, W]. Inputs whose sides are not
/// multiples of 2^stages are zero-padded on the right/bottom and the output
/// is cropped back. Train mode updates batch-norm running statistics.
inline std::pair<Tensor, ForwardCache> forward(Network& net, const Tensor& x, Mode mode) {
  return detail::forward_impl(net, x, mode);
}

/// Infer-mode forward on a shared, read-only network.
inline std::pair<Tensor, ForwardCache> forward(const Network& net, const Tensor& x) {
  return detail::forward_impl(net, x, Mode::infer);
}

/// Gradient of a scalar objective w.r.t. every trainable parameter, given
/// its gradient w.r.t. the probabilities returned by `forward`. A cache can
/// be consumed only once.
inline ParamGrads backward(const Network& net, ForwardCache& cache, const Tensor& grad_probs) {
  if (cache.consumed) throw UsageError("forward cache already consumed by a backward pass");
  cache.consumed = true;
  const std::size_t N = cache.out.output.dim(0), C = cache.out.output.dim(1);
  if (grad_probs.shape() != Shape{N, C, cache.orig_h, cache.orig_w})
    throw ShapeError("backward grad " + shape_str(grad_probs.shape()) + " does not match the network output");

  ParamGrads grads(net.parameter_names().size());
  std::size_t slot = 0;
  std::vector<std::vector<std::size_t>> enc_slot(net.encoder.size()), dec_slot(net.decoder.size());
  for (std::size_t s = 0; s < net.encoder.size(); ++s)
    for (auto& b : net.encoder[s]) {
      enc_slot[s].push_back(slot);
      slot += detail::block_slots(b);
    }
  for (std::size_t s = 0; s < net.decoder.size(); ++s)
    for (auto& b : net.decoder[s]) {
      dec_slot[s].push_back(slot);
      slot += detail::block_slots(b);
    }

  Tensor g;
  if (cache.padded_h == cache.orig_h && cache.padded_w == cache.orig_w) {
    g = grad_probs;
  } else {
    g = Tensor({N, C, cache.padded_h, cache.padded_w});
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t h = 0; h < cache.orig_h; ++h)
          for (std::size_t w = 0; w < cache.orig_w; ++w) g.at(n, c, h, w) = grad_probs.at(n, c, h, w);
  }

  g = sigmoid_backward(cache.out, g);
  ConvGrads hg = conv2d_backward(cache.head, net.head, g);
  grads[slot++] = std::move(hg.weight);
  if (net.head.has_bias()) grads[slot] = std::move(hg.bias);
  g = std::move(hg.input);

  // decoders ran deepest first, so stage 0 is unwound first
  for (std::size_t s = 0; s < net.decoder.size(); ++s) {
    for (std::size_t k = net.decoder[s].size(); k-- > 0;)
      g = detail::back_block(net.decoder[s][k], cache.decoder[s][k], g, grads, dec_slot[s][k]);
    g = maxunpool2_backward(cache.pools[s], g);
  }
  for (std::size_t s = net.encoder.size(); s-- > 0;) {
    g = maxpool2_backward(cache.pools[s], g);
    for (std::size_t k = net.encoder[s].size(); k-- > 0;)
      g = detail::back_block(net.encoder[s][k], cache.encoder[s][k], g, grads, enc_slot[s][k]);
  }
  return grads;
}

} // namespace fundseg

#endif
