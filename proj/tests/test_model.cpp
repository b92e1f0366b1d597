#include <gtest/gtest.h>

#include "support.hpp"

using namespace fundseg;
using testsupport::random_tensor;

namespace {

Network desk_net(std::uint64_t seed = 1) {
  Prng p(seed);
  return build_network(NetConfig::desk(), p);
}

std::vector<double> flatten_params(Network& net) {
  std::vector<double> out;
  Network::visit(net, [&](const std::string&, const Tensor& t, bool) {
    out.insert(out.end(), t.data().begin(), t.data().end());
  });
  return out;
}

} // namespace

TEST(Network, DeskConvCount) {
  const Network net = desk_net();
  EXPECT_EQ(net.encoder_conv_count(), 4u);
  EXPECT_EQ(net.decoder_conv_count(), 4u);
  EXPECT_EQ(net.conv_count(), 9u);
}

TEST(Network, FullConfigHasThirteenEncoderConvs) {
  Prng p(1);
  const Network net = build_network(NetConfig::full(), p);
  EXPECT_EQ(net.encoder_conv_count(), 13u);
  EXPECT_EQ(net.decoder_conv_count(), 13u);
  for (std::size_t s = 0; s < 5; ++s) EXPECT_EQ(net.decoder[s].size(), net.encoder[s].size());
  EXPECT_EQ(net.head.out_channels(), 7u);
}

TEST(Network, DecoderMirrorsEncoderWidths) {
  const Network net = desk_net();
  EXPECT_EQ(net.encoder[0][0].conv.in_channels(), 3u);
  EXPECT_EQ(net.encoder[1].back().conv.out_channels(), 16u);
  EXPECT_EQ(net.decoder[1].back().conv.out_channels(), 8u);
  EXPECT_EQ(net.decoder[0].back().conv.out_channels(), 8u);
  EXPECT_EQ(net.head.in_channels(), 8u);
}

TEST(Network, InvalidConfig) {
  NetConfig c = NetConfig::desk();
  c.channels_per_stage = {8};
  Prng p(1);
  EXPECT_THROW(build_network(c, p), ConfigError);
}

TEST(Network, SameSeedSameParameters) {
  Network a = desk_net(9), b = desk_net(9), c = desk_net(10);
  EXPECT_EQ(flatten_params(a), flatten_params(b));
  EXPECT_NE(flatten_params(a), flatten_params(c));
}

TEST(Network, HeInitScale) {
  Prng p(3);
  NetConfig cfg;
  cfg.convs_per_stage = {1};
  cfg.channels_per_stage = {64};
  const Network net = build_network(cfg, p);
  const Tensor& w = net.encoder[0][0].conv.weight; // fan in 3*9
  double ss = 0.0;
  for (double v : w.data()) ss += v * v;
  EXPECT_NEAR(std::sqrt(ss / static_cast<double>(w.size())), std::sqrt(2.0 / 27.0), 0.01);
}

TEST(Network, ZeroParametersGiveHalf) {
  Network net = desk_net();
  for (Tensor& t : net.parameters()) t.fill(0.0);
  std::mt19937_64 rng(1);
  for (Mode m : {Mode::train, Mode::infer}) {
    const Tensor y = forward(net, random_tensor(rng, {2, 3, 8, 8}), m).first;
    for (double v : y.data()) ASSERT_EQ(v, 0.5);
  }
}

TEST(Network, OutputShape) {
  Network net = desk_net();
  std::mt19937_64 rng(2);
  EXPECT_EQ(forward(net, random_tensor(rng, {1, 3, 36, 36}), Mode::train).first.shape(), (Shape{1, 7, 36, 36}));
  EXPECT_EQ(forward(net, random_tensor(rng, {1, 3, 35, 35}), Mode::train).first.shape(), (Shape{1, 7, 35, 35}));
}

TEST(Network, PaddingMatchesExplicitPad) {
  // a 35x35 input behaves like the 36x36 zero-padded input, cropped
  const Network net = desk_net(4);
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor(rng, {1, 3, 35, 35}, 0, 1);
  Tensor padded({1, 3, 36, 36}, 0.0);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 35; ++i)
      for (std::size_t j = 0; j < 35; ++j) padded.at(0, c, i, j) = x.at(0, c, i, j);
  const Tensor a = forward(net, x).first, b = forward(net, padded).first;
  for (std::size_t c = 0; c < 7; ++c)
    for (std::size_t i = 0; i < 35; ++i)
      for (std::size_t j = 0; j < 35; ++j) ASSERT_EQ(a.at(0, c, i, j), b.at(0, c, i, j));
}

TEST(Network, SpatialSymmetrySweep) {
  const Network net = desk_net(5);
  for (std::size_t h = 2; h <= 40; ++h)
    for (std::size_t w = 2; w <= 40; ++w) {
      const Tensor y = forward(net, Tensor({1, 3, h, w}, 0.5)).first;
      ASSERT_EQ(y.shape(), (Shape{1, 7, h, w})) << h << "x" << w;
    }
}

TEST(Network, InferIndependentOfBatch) {
  Network trained = desk_net(6);
  std::mt19937_64 rng(4);
  // give the running stats something other than their initial values
  for (int i = 0; i < 3; ++i) forward(trained, random_tensor(rng, {2, 3, 8, 8}), Mode::train);
  const Tensor batch = random_tensor(rng, {3, 3, 8, 8});
  const Tensor all = forward(std::as_const(trained), batch).first;
  for (std::size_t n = 0; n < 3; ++n) {
    Tensor one({1, 3, 8, 8});
    std::copy_n(batch.data().begin() + static_cast<long>(n * 192), 192, one.data().begin());
    const Tensor y = forward(std::as_const(trained), one).first;
    for (std::size_t i = 0; i < y.size(); ++i) ASSERT_EQ(y[i], all[n * y.size() + i]);
  }
  // infer mode does not move the running statistics
  const Network before = trained;
  forward(trained, batch, Mode::infer);
  Network copy = before;
  EXPECT_EQ(flatten_params(trained), flatten_params(copy));
}

TEST(Network, ZeroGradProbs) {
  Network net = desk_net();
  std::mt19937_64 rng(5);
  auto [y, cache] = forward(net, random_tensor(rng, {2, 3, 8, 8}), Mode::train);
  for (const Tensor& g : backward(net, cache, Tensor(y.shape(), 0.0)))
    for (double v : g.data()) ASSERT_EQ(v, 0.0);
}

TEST(Network, GradientsParallelParameters) {
  Network net = desk_net();
  std::mt19937_64 rng(6);
  auto [y, cache] = forward(net, random_tensor(rng, {1, 3, 8, 8}), Mode::train);
  const ParamGrads g = backward(net, cache, Tensor(y.shape(), 1.0));
  const auto params = net.parameters();
  ASSERT_EQ(g.size(), params.size());
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(g[i].shape(), params[i].get().shape());
}

TEST(Network, CacheSingleUse) {
  Network net = desk_net();
  auto [y, cache] = forward(net, Tensor({1, 3, 4, 4}, 0.2), Mode::train);
  backward(net, cache, Tensor(y.shape(), 1.0));
  EXPECT_THROW(backward(net, cache, Tensor(y.shape(), 1.0)), UsageError);
}

TEST(Network, GradientsDeterministic) {
  std::mt19937_64 rng(7);
  const Tensor x = random_tensor(rng, {2, 3, 8, 8});
  const Tensor gp = random_tensor(rng, {2, 7, 8, 8});
  Network a = desk_net(), b = desk_net();
  auto [ya, ca] = forward(a, x, Mode::train);
  auto [yb, cb] = forward(b, x, Mode::train);
  const ParamGrads ga = backward(a, ca, gp), gb = backward(b, cb, gp);
  for (std::size_t i = 0; i < ga.size(); ++i) ASSERT_EQ(ga[i], gb[i]);
}

// Independent end-to-end check: central differences of BCE(forward(x)) on
// 50 randomly sampled parameter entries, odd input size included.
TEST(Network, EndToEndFiniteDifference) {
  for (std::size_t side : {8u, 7u}) {
    const Network base = desk_net(11);
    std::mt19937_64 rng(8 + side);
    const Tensor x = random_tensor(rng, {2, 3, side, side});
    Tensor t({2, 7, side, side});
    for (auto& v : t.data()) v = rng() % 3 == 0 ? 1.0 : 0.0;

    Network work = base;
    auto [probs, cache] = forward(work, x, Mode::train);
    const ParamGrads g = backward(work, cache, bce_grad(probs, t));

    Network probe = base;
    auto params = probe.parameters();
    double worst = 0.0;
    for (int s = 0; s < 50; ++s) {
      const std::size_t which = rng() % params.size();
      Tensor& p = params[which].get();
      const std::size_t k = rng() % p.size();
      auto loss = [&] {
        Network scratch = probe;
        return bce_loss(forward(scratch, x, Mode::train).first, t).total;
      };
      const double keep = p[k];
      p[k] = keep + 1e-5;
      const double up = loss();
      p[k] = keep - 1e-5;
      const double down = loss();
      p[k] = keep;
      const double fd = (up - down) / 2e-5, a = g[which][k];
      worst = std::max(worst, std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8}));
    }
    EXPECT_LT(worst, 1e-4) << "side " << side;
  }
}

TEST(GradcheckSuite, AllLayersPass) {
  const auto results = run_gradcheck_suite(1);
  EXPECT_GE(results.size(), 8u);
  for (auto& r : results) EXPECT_TRUE(r.ok()) << r.name << " " << r.max_rel_error;
}

TEST(Checkpoint, RoundTripBytes) {
  Network net = desk_net(12);
  std::mt19937_64 rng(9);
  forward(net, random_tensor(rng, {2, 3, 8, 8}), Mode::train); // non-default running stats
  Checkpoint ck{net, 17, {0.1, 0.2, 1.0 / 3.0, 0.4, 0.5, 0.6, 0.7}};
  const auto dir = testsupport::scratch_dir("ckpt");
  save_checkpoint(ck, dir / "a.fseg");
  const Checkpoint back = load_checkpoint(dir / "a.fseg");
  save_checkpoint(back, dir / "b.fseg");
  EXPECT_EQ(testsupport::slurp(dir / "a.fseg"), testsupport::slurp(dir / "b.fseg"));
  EXPECT_EQ(back.epoch, 17u);
  EXPECT_EQ(back.per_class_val_loss, ck.per_class_val_loss);
  EXPECT_EQ(back.net.config, net.config);
  const Tensor x = random_tensor(rng, {1, 3, 8, 8});
  EXPECT_EQ(forward(std::as_const(net), x).first, forward(back.net, x).first);
}

TEST(Checkpoint, CustomConfigRoundTrip) {
  NetConfig c;
  c.convs_per_stage = {1, 3, 2};
  c.channels_per_stage = {4, 6, 5};
  c.bn_momentum = 0.25;
  Prng p(2);
  const Checkpoint ck{build_network(c, p), 3, {}};
  const Checkpoint back = decode_checkpoint(encode_checkpoint(ck));
  EXPECT_EQ(back.net.config, c);
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(ck));
}

TEST(Checkpoint, TruncatedRejected) {
  const auto bytes = encode_checkpoint(Checkpoint{desk_net(), 1, {}});
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<long>(cut));
    EXPECT_THROW(decode_checkpoint(part), FormatError) << cut;
  }
}

TEST(Checkpoint, CorruptionRejected) {
  auto bytes = encode_checkpoint(Checkpoint{desk_net(), 1, {}});
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(decode_checkpoint(trailing), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 99;
  EXPECT_THROW(decode_checkpoint(bad_version), FormatError);
}

TEST(Checkpoint, MissingFile) {
  EXPECT_THROW(load_checkpoint("/nonexistent/x.fseg"), IoError);
}
