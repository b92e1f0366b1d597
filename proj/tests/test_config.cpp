#include <gtest/gtest.h>

#include "support.hpp"

using namespace fundseg;

TEST(Config, DefaultsWhenEmpty) {
  const RunConfig rc = parse_run_config("");
  EXPECT_EQ(rc.train.seed, 1u);
  EXPECT_EQ(rc.train.net, NetConfig::desk());
  EXPECT_EQ(rc.train.lr, 1e-3);
  EXPECT_EQ(rc.train.beta1, 0.9);
  EXPECT_EQ(rc.train.beta2, 0.999);
  EXPECT_EQ(rc.train.epsilon, 1e-8);
  EXPECT_TRUE(rc.train.augment);
  EXPECT_TRUE(rc.boost);
  EXPECT_EQ(rc.train.retina_threshold, 20);
  EXPECT_EQ(rc.train.input_scale, 1u);
}

TEST(Config, ParsesEveryKey) {
  const RunConfig rc = parse_run_config(
      "# comment line\n"
      "seed = 9\n"
      "convs_per_stage = 1,2,3\n"
      "channels_per_stage = 4, 5, 6\n"
      "bn_momentum = 0.2\n"
      "bn_epsilon = 1e-4\n"
      "batch_size = 2   # trailing comment\n"
      "epochs_max = 7\n"
      "patience = 3\n"
      "lr = 0.01\n"
      "beta1 = 0.8\n"
      "beta2 = 0.99\n"
      "epsilon = 1e-7\n"
      "augment = false\n"
      "retina_threshold = 30\n"
      "input_scale = 8\n"
      "boost = false\n"
      "loc_penalty = 12.5\n"
      "eval_threads = 4\n");
  const TrainConfig& t = rc.train;
  EXPECT_EQ(t.seed, 9u);
  EXPECT_EQ(t.net.convs_per_stage, (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_EQ(t.net.channels_per_stage, (std::vector<std::size_t>{4, 5, 6}));
  EXPECT_EQ(t.net.bn_momentum, 0.2);
  EXPECT_EQ(t.net.bn_epsilon, 1e-4);
  EXPECT_EQ(t.batch_size, 2u);
  EXPECT_EQ(t.epochs_max, 7u);
  EXPECT_EQ(t.patience, 3u);
  EXPECT_EQ(t.lr, 0.01);
  EXPECT_EQ(t.beta1, 0.8);
  EXPECT_EQ(t.beta2, 0.99);
  EXPECT_EQ(t.epsilon, 1e-7);
  EXPECT_FALSE(t.augment);
  EXPECT_EQ(t.retina_threshold, 30);
  EXPECT_EQ(t.input_scale, 8u);
  EXPECT_FALSE(rc.boost);
  EXPECT_EQ(rc.loc_penalty, 12.5);
  EXPECT_EQ(rc.eval_threads, 4u);
  EXPECT_EQ(rc.pipeline().threads, 4u);
  EXPECT_EQ(rc.pipeline().input_scale, 8u);
}

TEST(Config, EchoParsesBack) {
  const RunConfig rc = parse_run_config("seed = 3\nconvs_per_stage = 2,1\nchannels_per_stage = 5,7\nlr = 0.1\n");
  const RunConfig again = parse_run_config(to_text(rc));
  EXPECT_EQ(to_text(again), to_text(rc));
  EXPECT_EQ(again.train.net, rc.train.net);
  EXPECT_EQ(again.train.lr, 0.1);
}

TEST(Config, EveryKeyDocumentedAndEchoed) {
  const std::string help = config_help(), echo = to_text(RunConfig{});
  std::size_t n = 0;
  for (auto& k : kConfigKeys) {
    EXPECT_NE(help.find(std::string(k.name) + ":"), std::string::npos) << k.name;
    EXPECT_NE(echo.find(std::string(k.name) + " = "), std::string::npos) << k.name;
    ++n;
  }
  EXPECT_EQ(n, split(echo, '\n').size() - 1);
}

TEST(Config, Rejections) {
  auto rejects = [](const std::string& text, const std::string& needle) {
    try {
      parse_run_config(text, "cfg");
    } catch (const ConfigError& e) {
      return std::string(e.what()).find(needle) != std::string::npos;
    }
    return false;
  };
  EXPECT_TRUE(rejects("lrr = 0.1\n", "unknown key 'lrr'"));
  EXPECT_TRUE(rejects("seed = 1\nseed = 2\n", "duplicate"));
  EXPECT_TRUE(rejects("seed\n", "line 1"));
  EXPECT_TRUE(rejects("lr = fast\n", "lr"));
  EXPECT_TRUE(rejects("augment = maybe\n", "augment"));
  EXPECT_TRUE(rejects("input_scale = 4\n", "input_scale"));
  EXPECT_TRUE(rejects("batch_size = 0\n", "batch_size"));
  EXPECT_TRUE(rejects("convs_per_stage = 2,2,2\n", "differ"));
  EXPECT_TRUE(rejects("retina_threshold = 300\n", "retina_threshold"));
  EXPECT_TRUE(rejects("eval_threads = 0\n", "eval_threads"));
  EXPECT_TRUE(rejects("beta1 = 1\n", "betas"));
  EXPECT_THROW(load_run_config("/nonexistent/cfg.txt"), IoError);
}
