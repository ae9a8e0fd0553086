#include <gtest/gtest.h>

#include <cmath>

#include "dcp/errors.hpp"
#include "dcp/losses.hpp"
#include "dcp/ops.hpp"
#include "toy.hpp"

using namespace dcp;

namespace {

LossHead identity_head(std::size_t channels, std::size_t classes) {
  LossHead h;
  h.attach_layer = 1;
  h.bn = BatchNormParams::identity(channels);
  h.theta = Tensor({channels, classes, 1, 1});
  return h;
}

}  // namespace

TEST(HeadInput, NegativeMapsGiveZeroFeatures) {
  const LossHead h = identity_head(3, 2);
  const Tensor f = head_input(Tensor({2, 3, 4, 4}, -1.5), h, BnConfig{0.0, 0.1});
  ASSERT_EQ(f.shape(), (Tensor::Shape{2, 3, 1, 1}));
  for (double v : f.data()) EXPECT_EQ(v, 0.0);
}

TEST(HeadInput, ConstantPositiveMapsPassThrough) {
  const LossHead h = identity_head(2, 2);
  Tensor o({1, 2, 3, 3});
  for (std::size_t q = 0; q < 9; ++q) {
    o[q] = 0.75;
    o[9 + q] = 2.5;
  }
  const Tensor f = head_input(o, h, BnConfig{0.0, 0.1});
  EXPECT_DOUBLE_EQ(f[0], 0.75);
  EXPECT_DOUBLE_EQ(f[1], 2.5);
}

TEST(HeadInput, MatchesOpComposition) {
  Rng rng(1);
  for (int inst = 0; inst < 10; ++inst) {
    LossHead h = identity_head(4, 3);
    for (std::size_t j = 0; j < 4; ++j) {
      h.bn->gamma[j] = rng.uniform(0.5, 2);
      h.bn->beta[j] = rng.normal();
      h.bn->running_mean[j] = rng.normal();
      h.bn->running_var[j] = rng.uniform(0.5, 2);
    }
    const Tensor o = oracle::random_tensor({3, 4, 5, 5}, rng);
    BatchNormParams bn = *h.bn;
    const Tensor want = avgpool_global(relu(batch_norm(o, bn, BnMode::Frozen)));
    EXPECT_TRUE(head_input(o, h) == want);
  }
}

TEST(HeadInput, ChannelMismatchIsDimensionError) {
  const LossHead h = identity_head(3, 2);
  EXPECT_THROW(head_input(Tensor({1, 4, 2, 2}), h), DimensionError);
}

TEST(DiscriminationLoss, Examples) {
  Rng rng(2);
  const Tensor f = oracle::random_tensor({5, 4, 1, 1}, rng);
  const std::vector<int> y{0, 1, 2, 0, 1};
  EXPECT_NEAR(discrimination_loss(f, Tensor({4, 3, 1, 1}), y), std::log(3.0), 1e-15);

  Tensor one({1, 4, 1, 1}, 0.0);
  one[0] = 1.0;
  Tensor steer({4, 3, 1, 1}, 0.0);
  steer[0 * 3 + 2] = 1000.0;
  EXPECT_NEAR(discrimination_loss(one, steer, std::vector<int>{2}), 0.0, 1e-12);
}

TEST(DiscriminationLoss, MatchesComposition) {
  Rng rng(3);
  for (int inst = 0; inst < 10; ++inst) {
    const Tensor f = oracle::random_tensor({6, 4, 1, 1}, rng);
    const Tensor th = oracle::random_tensor({4, 5, 1, 1}, rng);
    std::vector<int> y(6);
    for (int& v : y) v = static_cast<int>(rng.below(5));
    EXPECT_EQ(discrimination_loss(f, th, y), softmax_cross_entropy(linear(f, th), y));
    EXPECT_NEAR(discrimination_loss(f, th, y), oracle::direct_cross_entropy(linear(f, th), y), 1e-10);
  }
}

TEST(DiscriminationLoss, MidpointConvexInTheta) {
  Rng rng(4);
  const Tensor f = oracle::random_tensor({8, 4, 1, 1}, rng);
  std::vector<int> y(8);
  for (int& v : y) v = static_cast<int>(rng.below(3));
  for (int i = 0; i < 100; ++i) {
    const Tensor a = oracle::random_tensor({4, 3, 1, 1}, rng, 2.0);
    const Tensor b = oracle::random_tensor({4, 3, 1, 1}, rng, 2.0);
    const double t = rng.uniform(0.01, 0.99);
    Tensor mid(a.shape());
    for (std::size_t q = 0; q < a.size(); ++q) mid[q] = t * a[q] + (1 - t) * b[q];
    EXPECT_LE(discrimination_loss(f, mid, y),
              t * discrimination_loss(f, a, y) + (1 - t) * discrimination_loss(f, b, y) + 1e-12);
  }
}

TEST(JointLoss, LambdaZeroIsDiscriminationOnly) {
  Rng rng(5);
  LossHead h = identity_head(3, 4);
  h.theta = oracle::random_tensor({3, 4, 1, 1}, rng);
  const Tensor o = oracle::random_tensor({2, 3, 4, 4}, rng);
  const Tensor ob = oracle::random_tensor({2, 3, 4, 4}, rng);
  const std::vector<int> y{1, 3};
  const JointLossValue v = joint_loss(o, o, {0.0, &h, &ob}, y);
  EXPECT_EQ(v.total, discrimination_loss(head_input(o, h), h.theta, y));
}

TEST(JointLoss, BaselineWeightsGiveZeroReconstruction) {
  Rng rng(6);
  LossHead h = identity_head(3, 2);
  const Tensor o = oracle::random_tensor({2, 3, 4, 4}, rng);
  const JointLossValue v = joint_loss(o, o, {1.0, &h, &o}, std::vector<int>{0, 1});
  EXPECT_EQ(v.reconstruction, 0.0);
}

TEST(JointLoss, AdditiveAcrossLambdaSweep) {
  Rng rng(7);
  LossHead h = identity_head(3, 4);
  h.theta = oracle::random_tensor({3, 4, 1, 1}, rng);
  const Tensor o = oracle::random_tensor({3, 3, 4, 4}, rng);
  const Tensor ob = oracle::random_tensor({3, 3, 4, 4}, rng);
  const Tensor out = relu(o);
  const std::vector<int> y{1, 3, 0};
  const double recon = mse_feature_loss(ob, o);
  const double disc = discrimination_loss(head_input(out, h), h.theta, y);
  for (double lambda : {0.0, 0.1, 0.5, 1.0, 5.0, 10.0}) {
    const JointLossValue v = joint_loss(o, out, {lambda, &h, &ob}, y);
    EXPECT_LE(std::abs(v.total - (lambda * recon + disc)), 1e-12) << lambda;
  }
}

TEST(JointLoss, MissingBaselineIsContractError) {
  LossHead h = identity_head(3, 2);
  const Tensor o({1, 3, 2, 2});
  EXPECT_THROW(joint_loss(o, o, {1.0, &h, nullptr}, std::vector<int>{0}), ContractError);
}

TEST(LayerObjective, AdditiveAcrossLambdaSweep) {
  const toy::Problem p = toy::problem(2, 11);
  const double recon = p.objective(1.0).evaluate(p.weights(), false).value.reconstruction;
  const double disc = p.objective(1.0).evaluate(p.weights(), false).value.discrimination;
  for (double lambda : {0.0, 0.1, 0.5, 1.0, 5.0, 10.0}) {
    const auto r = p.objective(lambda).evaluate(p.weights(), false);
    EXPECT_LE(std::abs(r.value.total - (lambda * recon + disc)), 1e-12) << lambda;
  }
}

TEST(LayerObjective, ZeroWeightsGiveUniformHeadLogits) {
  // No BN in the block and an identity head BN: W = 0 zeroes the head features.
  toy::Problem p = toy::problem(2, 12);
  for (Block& b : p.model.blocks) b.bn.reset();
  p.model.heads[0].bn = BatchNormParams::identity(p.model.heads[0].input_channels());
  const Tensor zero(p.weights().shape(), 0.0);
  const auto r = p.objective(0.7).evaluate(zero, false);
  double ss = 0;
  for (double v : p.cache->baseline_output.data()) ss += v * v;
  const double recon = ss / (2.0 * static_cast<double>(p.cache->baseline_output.size()));
  EXPECT_NEAR(r.value.discrimination, std::log(3.0), 1e-12);
  EXPECT_NEAR(r.value.reconstruction, recon, 1e-12);
  EXPECT_NEAR(r.value.total, 0.7 * recon + std::log(3.0), 1e-12);
}

TEST(LayerObjective, GradientMatchesFiniteDifferences) {
  for (std::size_t layer : {2u, 3u, 4u}) {
    const toy::Problem p = toy::problem(layer, 20 + layer);
    const LayerObjective obj = p.objective(1.0, 5);  // several chunks
    const Tensor w = p.weights();
    const Tensor g = obj.evaluate(w, true).grad;
    const Tensor fd = oracle::fd_gradient(
        [&](const Tensor& v) { return obj.evaluate(v, false).value.total; }, w);
    EXPECT_LE(oracle::max_rel_error(g, fd), 1e-4) << "layer " << layer;
  }
}

TEST(LayerObjective, ChunkingDoesNotChangeTheValue) {
  const toy::Problem p = toy::problem(3, 30, 13);
  const double whole = p.objective(1.0, 64).evaluate(p.weights(), false).value.total;
  const double split = p.objective(1.0, 4).evaluate(p.weights(), false).value.total;
  EXPECT_NEAR(whole, split, 1e-12);
}

TEST(LayerObjective, MidpointDiagnosticIsFinite) {
  const toy::Problem p = toy::problem(2, 31);
  Rng rng(1);
  const LayerObjective obj = p.objective();
  const Tensor w2 = oracle::random_tensor(p.weights().shape(), rng, 0.3);
  EXPECT_TRUE(std::isfinite(midpoint_gap(obj, p.weights(), w2, 0.5)));
}
