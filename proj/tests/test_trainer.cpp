#include <gtest/gtest.h>

#include "plab/trainer.hpp"
#include "test_util.hpp"

using namespace plab;
using namespace plab::testing;

TEST(TrainHead, SeparableBlobsReachFullTrainingAccuracy) {
  Rng rng(1);
  const LabeledData D = separable_blobs(rng, 200, 3);
  const Encoder id = Mlp::identity(3);
  const LinearHead h = train_head(id, D, TrainConfig{100, 0.1, Schedule::cosine, 0, 1});
  EXPECT_GE(accuracy(id, h, D), 0.99);
}

TEST(TrainHead, RejectsZeroEpochsAndBadLr) {
  Rng rng(2);
  const FeatureData Z = random_features(rng, 10, 3, 2);
  EXPECT_THROW(train_head(Z, TrainConfig{0, 0.1, Schedule::cosine, 0, 0}), Error);
  EXPECT_THROW(train_head(Z, TrainConfig{5, 0.0, Schedule::cosine, 0, 0}), Error);
}

TEST(TrainHead, SameSeedBitIdentical) {
  Rng rng(3);
  const FeatureData Z = random_features(rng, 50, 4, 3);
  for (std::size_t batch : {0u, 8u}) {
    const TrainConfig cfg{20, 0.1, Schedule::cosine, batch, 9};
    EXPECT_EQ(train_head(Z, cfg), train_head(Z, cfg));
  }
}

TEST(TrainHead, FullBatchLossDecreasesMonotonically) {
  Rng rng(4);
  const FeatureData Z = random_features(rng, 60, 5, 3);
  std::vector<double> trace;
  train_head(Z, TrainConfig{200, 0.01, Schedule::constant, 0, 0}, std::nullopt, &trace);
  double prev = ce_loss(LinearHead::zeros(3, 5), Z);
  for (double l : trace) {
    EXPECT_LT(l, prev);
    prev = l;
  }
}

TEST(TrainHead, NonFiniteLossReportsEpoch) {
  FeatureData Z{Matrix{{1e308, 1e308}, {-1e308, 1e308}}, {0, 1}, 2};
  try {
    train_head(Z, TrainConfig{3, 10.0, Schedule::constant, 0, 0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos) << e.what();
  }
}

TEST(Schedule, CosineEndpoints) {
  const TrainConfig cfg{100, 0.1, Schedule::cosine, 0, 0};
  EXPECT_EQ(lr_at(cfg, 0), 0.1);
  EXPECT_LE(lr_at(cfg, 99), 0.01 * 0.1);
  for (std::size_t e = 1; e < 100; ++e) EXPECT_LT(lr_at(cfg, e), lr_at(cfg, e - 1));
  EXPECT_EQ(lr_at(TrainConfig{100, 0.3, Schedule::constant, 0, 0}, 57), 0.3);
}

TEST(Accuracy, TieRulePredictsClassZero) {
  Rng rng(5);
  LabeledData D{sample_gaussian(rng, 100, 3, 0.0, 1.0), Labels(100), 10};
  for (std::size_t i = 0; i < 100; ++i) D.y[i] = static_cast<std::uint32_t>(i % 10);
  EXPECT_EQ(accuracy(Mlp::identity(3), LinearHead::zeros(10, 3), D), 0.1);
}

TEST(Accuracy, PerfectHead) {
  const FeatureData Z{Matrix{{2.0}, {-2.0}, {3.0}}, {1, 0, 1}, 2};
  EXPECT_EQ(accuracy(LinearHead(Matrix{{-1.0}, {1.0}}, Vec{0, 0}), Z), 1.0);
}

TEST(Accuracy, MatchesPerSampleArgmax) {
  Rng rng(6);
  const FeatureData Z = random_features(rng, 200, 4, 5);
  const LinearHead h = random_head(rng, 5, 4);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < Z.size(); ++i) {
    std::size_t best = 0;
    double bv = -1e300;
    for (std::size_t j = 0; j < 5; ++j) {
      double s = h.b[j];
      for (std::size_t k = 0; k < 4; ++k) s += h.W(j, k) * Z.Z(i, k);
      if (s > bv) {
        bv = s;
        best = j;
      }
    }
    hit += best == Z.y[i];
  }
  EXPECT_EQ(accuracy(h, Z), static_cast<double>(hit) / 200.0);
}

TEST(Pretrain, FrozenDeterministicAndLinearlySeparable) {
  Rng rng(7);
  const LabeledData D = separable_blobs(rng, 200, 4);
  const std::vector<std::size_t> dims{4, 8, 3};
  const TrainConfig cfg{100, 0.1, Schedule::cosine, 0, 3};
  const Encoder f = pretrain_encoder(D, dims, cfg);
  EXPECT_TRUE(f.frozen());
  EXPECT_EQ(f, pretrain_encoder(D, dims, cfg));

  Rng init(cfg.seed, 0xE1C);
  const JointModel joint = train_joint(Mlp::random(dims, init), LinearHead::zeros(2, 3), D, cfg);
  const double joint_acc = accuracy(joint.encoder, joint.head, D);
  const double fresh = accuracy(f, train_head(f, D, cfg), D);
  EXPECT_GE(fresh, 0.95 * joint_acc);
  EXPECT_THROW(pretrain_encoder(D, std::vector<std::size_t>{5, 3}, cfg), DimensionError);
}

TEST(TrainJoint, RejectsFrozenEncoder) {
  Rng rng(8);
  const LabeledData D = separable_blobs(rng, 20, 2);
  EXPECT_THROW(train_joint(Mlp::identity(2), LinearHead::zeros(2, 2), D, TrainConfig{}), Error);
}

TEST(Decoder, IdentityEncoderLinearDecoderReconstructs) {
  Rng rng(9);
  const LabeledData D = random_labeled(rng, 100, 3, 2);
  const Encoder id = Mlp::identity(3);
  const std::vector<std::size_t> dims{3, 3};
  const Decoder g = train_decoder(id, D, dims, TrainConfig{2000, 0.1, Schedule::constant, 0, 1});
  EXPECT_LE(reconstruction_mse(id, g, D.X), 1e-8);
}

TEST(Decoder, BeatsMeanPredictorOnHeldOutData) {
  Rng rng(10);
  const Encoder f = random_encoder(rng, {4, 12, 3});
  const LabeledData train = random_labeled(rng, 300, 4, 2);
  const LabeledData test = random_labeled(rng, 300, 4, 2);
  const Encoder before = f;
  const std::vector<std::size_t> dims{3, 16, 4};
  const Decoder g = train_decoder(f, train, dims, TrainConfig{1000, 0.05, Schedule::cosine, 0, 2});
  double var = 0.0;
  for (std::size_t j = 0; j < 4; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < 300; ++i) m += test.X(i, j) / 300.0;
    for (std::size_t i = 0; i < 300; ++i) var += (test.X(i, j) - m) * (test.X(i, j) - m);
  }
  var /= 1200.0;
  EXPECT_LT(reconstruction_mse(f, g, test.X), var);
  EXPECT_EQ(f, before);
  EXPECT_THROW(train_decoder(f, train, std::vector<std::size_t>{2, 4}, TrainConfig{}), DimensionError);
}

TEST(Autoencoder, ReturnsFrozenPairAndRespectsDims) {
  Rng rng(11);
  const LabeledData D = random_labeled(rng, 50, 4, 2);
  const Encoder f = random_encoder(rng, {4, 2});
  const std::vector<std::size_t> dims{2, 4};
  const AutoEncoder ae = train_autoencoder(f, D, dims, TrainConfig{50, 0.05, Schedule::cosine, 0, 1});
  EXPECT_TRUE(ae.encoder.frozen());
  EXPECT_TRUE(ae.decoder.frozen());
  EXPECT_NE(ae.encoder, f);
  EXPECT_THROW(train_autoencoder(f, D, std::vector<std::size_t>{3, 4}, TrainConfig{}), DimensionError);
}
