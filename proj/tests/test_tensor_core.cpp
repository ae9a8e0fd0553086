#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "dcp/conv.hpp"
#include "dcp/errors.hpp"
#include "dcp/ops.hpp"
#include "dcp/tape.hpp"
#include "oracles.hpp"

using namespace dcp;

namespace {

constexpr double kFdTol = 1e-4;
constexpr int kInstances = 20;

// Taped gradient of sum(R * op(inputs)) with respect to every parameter node.
struct Probe {
  GradTape tape;
  std::vector<NodeId> params;
};

ConvParams random_conv(Rng& rng, std::size_t n, std::size_t c, std::size_t k, bool masks,
                       bool bias) {
  ConvParams p = ConvParams::dense(oracle::random_tensor({n, c, k, k}, rng), 1);
  if (bias) {
    for (std::size_t j = 0; j < n; ++j) p.bias.push_back(rng.normal());
  }
  if (masks) {
    for (std::size_t q = 0; q < n * c; ++q) p.kernel_mask[q] = rng.below(4) != 0;
    p.channel_mask[rng.below(c)] = 0;
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k2 = 0; k2 < c; ++k2)
        if (!p.channel_live(k2)) p.kernel_mask[j * c + k2] = 0;
    p.enforce_masks();
  }
  return p;
}

}  // namespace

TEST(Conv2d, IdentityKernel) {
  const Tensor x({1, 1, 1, 1}, 2.0);
  const ConvParams p = ConvParams::dense(Tensor({1, 1, 1, 1}, 1.0));
  EXPECT_EQ(conv2d(x, p, {1, 0})[0], 2.0);
}

TEST(Conv2d, DiagonalKernelMatchesNaiveLoop) {
  const Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  const ConvParams p = ConvParams::dense(Tensor({1, 1, 2, 2}, {1, 0, 0, 1}));
  const Tensor out = conv2d(x, p, {1, 0});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0], 5.0);
  EXPECT_EQ(out[0], oracle::naive_conv(x, p, 1, 0)[0]);
}

TEST(Conv2d, AllChannelsMaskedGivesZero) {
  Rng rng(3);
  const Tensor x = oracle::random_tensor({2, 3, 5, 5}, rng);
  ConvParams p = ConvParams::dense(oracle::random_tensor({4, 3, 3, 3}, rng));
  std::fill(p.channel_mask.begin(), p.channel_mask.end(), 0);
  std::fill(p.kernel_mask.begin(), p.kernel_mask.end(), 0);
  const Tensor out = conv2d(x, p, {1, 1});
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, RandomCasesMatchNaiveLoop) {
  Rng rng(4);
  for (int inst = 0; inst < 10; ++inst) {
    const std::size_t stride = 1 + inst % 2, pad = inst % 3 == 0 ? 0 : 1;
    const Tensor x = oracle::random_tensor({2, 3, 6, 5}, rng);
    const ConvParams p = random_conv(rng, 4, 3, 3, inst % 2 == 1, inst % 3 == 1);
    const Tensor got = conv2d(x, p, {stride, pad});
    const Tensor want = oracle::naive_conv(x, p, stride, pad);
    ASSERT_EQ(got.shape(), want.shape());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Conv2d, KernelLargerThanPaddedInputIsDimensionError) {
  const Tensor x({1, 1, 2, 2}, 1.0);
  const ConvParams p = ConvParams::dense(Tensor({1, 1, 5, 5}, 1.0));
  EXPECT_THROW(conv2d(x, p, {1, 1}), DimensionError);
}

TEST(Conv2d, ChannelMismatchIsDimensionError) {
  const Tensor x({1, 2, 4, 4}, 1.0);
  const ConvParams p = ConvParams::dense(Tensor({1, 3, 3, 3}, 1.0));
  EXPECT_THROW(conv2d(x, p, {1, 1}), DimensionError);
}

TEST(Conv2d, NonFiniteOutputIsNumericError) {
  Tensor x({1, 1, 3, 3}, 1.0);
  x[4] = std::numeric_limits<double>::infinity();
  const ConvParams p = ConvParams::dense(Tensor({1, 1, 3, 3}, 1.0));
  EXPECT_THROW(conv2d(x, p, {1, 1}), NumericError);
}

TEST(Conv2d, MaskedEqualsCompactedBitForBit) {
  Rng rng(5);
  for (int inst = 0; inst < 10; ++inst) {
    const Tensor x = oracle::random_tensor({3, 6, 7, 7}, rng);
    ConvParams p = ConvParams::dense(oracle::random_tensor({5, 6, 3, 3}, rng));
    std::vector<std::size_t> live;
    for (std::size_t k = 0; k < 6; ++k) {
      if (rng.below(2) || k == 0) {
        live.push_back(k);
      } else {
        p.channel_mask[k] = 0;
        for (std::size_t j = 0; j < 5; ++j) p.kernel_mask[j * 6 + k] = 0;
      }
    }
    p.enforce_masks();
    // Physically drop the dead channels from both the weights and the input.
    Tensor xc({3, live.size(), 7, 7}), wc({5, live.size(), 3, 3});
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t a = 0; a < live.size(); ++a)
        for (std::size_t q = 0; q < 49; ++q)
          xc[(i * live.size() + a) * 49 + q] = x[(i * 6 + live[a]) * 49 + q];
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t a = 0; a < live.size(); ++a)
        for (std::size_t q = 0; q < 9; ++q)
          wc[(j * live.size() + a) * 9 + q] = p.weights[(j * 6 + live[a]) * 9 + q];
    const Tensor masked = conv2d(x, p, {1, 1});
    const Tensor compact = conv2d(xc, ConvParams::dense(wc), {1, 1});
    EXPECT_TRUE(masked == compact) << "instance " << inst;
  }
}

TEST(Conv2dBackward, ZeroUpstreamGivesZeroGradients) {
  Rng rng(6);
  const Tensor x = oracle::random_tensor({2, 3, 4, 4}, rng);
  const ConvParams p = ConvParams::dense(oracle::random_tensor({2, 3, 3, 3}, rng));
  const ConvGradients g = conv2d_backward(x, p, {1, 1}, Tensor({2, 2, 4, 4}, 0.0));
  for (double v : g.weights.data()) EXPECT_EQ(v, 0.0);
  for (double v : g.input.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2dBackward, ScalarCaseByHand) {
  GradTape tape;
  const NodeId x = tape.parameter(Tensor({1, 1, 1, 1}, 2.0));
  const ConvParams p = ConvParams::dense(Tensor({1, 1, 1, 1}, 1.0));
  const NodeId w = tape.parameter(p.weights);
  const NodeId o = ad::conv2d(tape, x, w, p, {1, 0});
  const ConvGradients g = conv2d_backward(tape, o, Tensor({1, 1, 1, 1}, 1.0));
  EXPECT_EQ(g.weights[0], 2.0);
  EXPECT_EQ(g.input[0], 1.0);
  tape.backward(o);
  EXPECT_EQ(tape.grad(w)[0], 2.0);
  EXPECT_EQ(tape.grad(x)[0], 1.0);
}

TEST(Conv2dBackward, MissingRecordIsContractError) {
  GradTape tape;
  const NodeId x = tape.parameter(Tensor({1, 1, 2, 2}, 1.0));
  const NodeId r = ad::relu(tape, x);
  EXPECT_THROW(conv2d_backward(tape, x, Tensor({1, 1, 2, 2}, 1.0)), ContractError);
  EXPECT_THROW(conv2d_backward(tape, r, Tensor({1, 1, 2, 2}, 1.0)), ContractError);
}

TEST(Conv2dBackward, MatchesFiniteDifferences) {
  Rng rng(7);
  for (int inst = 0; inst < kInstances; ++inst) {
    const std::size_t stride = 1 + inst % 2, pad = inst % 3 == 2 ? 0 : 1;
    const Tensor x = oracle::random_tensor({2, 3, 4, 4}, rng);
    ConvParams p = random_conv(rng, 3, 3, 3, inst % 4 == 3, inst % 2 == 0);
    const Tensor out0 = conv2d(x, p, {stride, pad});
    const Tensor r = oracle::random_tensor(out0.shape(), rng);

    GradTape tape;
    const NodeId xn = tape.parameter(x);
    const NodeId wn = tape.parameter(p.weights);
    NodeId bn;
    if (!p.bias.empty()) bn = tape.parameter(Tensor({1, p.filters(), 1, 1}, p.bias));
    const NodeId o = ad::conv2d(tape, xn, wn, p, {stride, pad}, bn);
    tape.backward(o, r);

    auto f_x = [&](const Tensor& v) { return oracle::dot(r, conv2d(v, p, {stride, pad})); };
    auto f_w = [&](const Tensor& v) {
      ConvParams q = p;
      q.weights = v;
      return oracle::dot(r, conv2d(x, q, {stride, pad}));
    };
    EXPECT_LE(oracle::max_rel_error(tape.grad(xn), oracle::fd_gradient(f_x, x)), kFdTol);
    // Dead kernels get zero gradient; compare on the masked function.
    Tensor fd_w = oracle::fd_gradient(f_w, p.weights);
    for (std::size_t q = 0; q < p.filters() * p.channels(); ++q)
      if (!p.kernel_mask[q]) std::fill_n(fd_w.raw() + q * 9, 9, 0.0);
    EXPECT_LE(oracle::max_rel_error(tape.grad(wn), fd_w), kFdTol);
    if (bn.valid()) {
      auto f_b = [&](const Tensor& v) {
        ConvParams q = p;
        q.bias.assign(v.data().begin(), v.data().end());
        return oracle::dot(r, conv2d(x, q, {stride, pad}));
      };
      EXPECT_LE(oracle::max_rel_error(tape.grad(bn),
                                      oracle::fd_gradient(f_b, Tensor({1, p.filters(), 1, 1}, p.bias))),
                kFdTol);
    }
  }
}

TEST(BatchNorm, FrozenIdentity) {
  Rng rng(8);
  const Tensor x = oracle::random_tensor({2, 3, 2, 2}, rng);
  BatchNormParams bn = BatchNormParams::identity(3);
  const Tensor y = batch_norm(x, bn, BnMode::Frozen, BnConfig{0.0, 0.1});
  EXPECT_TRUE(y == x);
}

TEST(BatchNorm, ConstantChannelGivesBeta) {
  BatchNormParams bn = BatchNormParams::identity(2);
  bn.beta = {0.5, -1.5};
  Tensor x({3, 2, 2, 2});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t q = 0; q < 4; ++q) {
      x[(i * 2) * 4 + q] = 7.0;
      x[(i * 2 + 1) * 4 + q] = -2.0;
    }
  const Tensor y = batch_norm(x, bn, BnMode::Train);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t q = 0; q < 4; ++q) {
      EXPECT_DOUBLE_EQ(y[(i * 2) * 4 + q], 0.5);
      EXPECT_DOUBLE_EQ(y[(i * 2 + 1) * 4 + q], -1.5);
    }
}

TEST(BatchNorm, TrainModeStatistics) {
  Rng rng(9);
  const Tensor x = oracle::random_tensor({8, 3, 4, 4}, rng, 3.0);
  BatchNormParams bn = BatchNormParams::identity(3);
  bn.gamma = {0.5, 2.0, 1.5};
  bn.beta = {1.0, -1.0, 0.25};
  const Tensor y = batch_norm(x, bn, BnMode::Train);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, ss = 0;
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t q = 0; q < 16; ++q) s += y[(i * 3 + c) * 16 + q];
    const double mean = s / 128;
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t q = 0; q < 16; ++q) {
        const double d = y[(i * 3 + c) * 16 + q] - mean;
        ss += d * d;
      }
    EXPECT_NEAR(mean, bn.beta[c], 1e-5);
    EXPECT_NEAR(std::sqrt(ss / 128), bn.gamma[c], 1e-5);
  }
}

TEST(BatchNorm, RunningStatsUseMomentum) {
  Tensor x({2, 1, 1, 2}, {1, 3, 5, 7});
  BatchNormParams bn = BatchNormParams::identity(1);
  batch_norm(x, bn, BnMode::Train, BnConfig{1e-5, 0.1});
  EXPECT_NEAR(bn.running_mean[0], 0.1 * 4.0, 1e-15);
  // unbiased variance of {1,3,5,7} is 20/3
  EXPECT_NEAR(bn.running_var[0], 0.9 + 0.1 * 20.0 / 3.0, 1e-15);
}

TEST(BatchNorm, Errors) {
  Tensor x({2, 2, 1, 1}, 1.0);
  BatchNormParams bn = BatchNormParams::identity(2);
  EXPECT_THROW(batch_norm(x, bn, BnMode::Train, BnConfig{-1e-5, 0.1}), ConfigError);
  BatchNormParams empty;
  empty.gamma = {1, 1};
  empty.beta = {0, 0};
  EXPECT_THROW(batch_norm(x, empty, BnMode::Frozen), ContractError);
  BatchNormParams three = BatchNormParams::identity(3);
  EXPECT_THROW(batch_norm(x, three, BnMode::Frozen), DimensionError);
}

TEST(BatchNormBackward, MatchesFiniteDifferences) {
  Rng rng(10);
  for (int inst = 0; inst < kInstances; ++inst) {
    const BnMode mode = inst % 2 == 0 ? BnMode::Train : BnMode::Frozen;
    const Tensor x = oracle::random_tensor({4, 3, 3, 3}, rng, 2.0);
    BatchNormParams bn = BatchNormParams::identity(3);
    for (std::size_t c = 0; c < 3; ++c) {
      bn.gamma[c] = rng.uniform(0.5, 2.0);
      bn.beta[c] = rng.normal();
      bn.running_mean[c] = rng.normal();
      bn.running_var[c] = rng.uniform(0.5, 2.0);
    }
    const Tensor r = oracle::random_tensor(x.shape(), rng);
    auto forward = [&](const Tensor& xv, const BatchNormParams& p) {
      BatchNormParams copy = p;
      return oracle::dot(r, batch_norm(xv, copy, mode));
    };
    GradTape tape;
    BatchNormParams work = bn;
    const NodeId xn = tape.parameter(x);
    const NodeId g = tape.parameter(channel_tensor(bn.gamma));
    const NodeId b = tape.parameter(channel_tensor(bn.beta));
    tape.backward(ad::batch_norm(tape, xn, g, b, work, mode), r);
    EXPECT_LE(oracle::max_rel_error(tape.grad(xn),
                                    oracle::fd_gradient([&](const Tensor& v) { return forward(v, bn); }, x)),
              kFdTol);
    auto f_gamma = [&](const Tensor& v) {
      BatchNormParams p = bn;
      p.gamma.assign(v.data().begin(), v.data().end());
      return forward(x, p);
    };
    auto f_beta = [&](const Tensor& v) {
      BatchNormParams p = bn;
      p.beta.assign(v.data().begin(), v.data().end());
      return forward(x, p);
    };
    EXPECT_LE(oracle::max_rel_error(tape.grad(g), oracle::fd_gradient(f_gamma, channel_tensor(bn.gamma))),
              kFdTol);
    EXPECT_LE(oracle::max_rel_error(tape.grad(b), oracle::fd_gradient(f_beta, channel_tensor(bn.beta))),
              kFdTol);
  }
}

TEST(Elementwise, Examples) {
  const Tensor y = relu(Tensor({1, 3, 1, 1}, {-1, 0, 2}));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_EQ(y[2], 2.0);
  const Tensor p = avgpool_global(Tensor({2, 3, 4, 4}, 3.0));
  ASSERT_EQ(p.shape(), (Tensor::Shape{2, 3, 1, 1}));
  for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 3.0);
  Tensor eye({3, 3, 1, 1});
  for (std::size_t i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  const Tensor f({2, 3, 1, 1}, {1, -2, 3, 4, 5, -6});
  EXPECT_TRUE(linear(f, eye) == f);
  EXPECT_THROW(linear(f, Tensor({2, 3, 1, 1})), DimensionError);
}

TEST(ElementwiseBackward, MatchesFiniteDifferences) {
  Rng rng(11);
  for (int inst = 0; inst < kInstances; ++inst) {
    const Tensor x = oracle::random_tensor({2, 3, 3, 2}, rng);
    const Tensor x2 = oracle::random_tensor({2, 3, 3, 2}, rng);
    const Tensor f = oracle::random_tensor({3, 4, 1, 1}, rng);
    const Tensor theta = oracle::random_tensor({4, 5, 1, 1}, rng);
    const Tensor bias = oracle::random_tensor({1, 5, 1, 1}, rng);
    const double factor = rng.normal();
    {
      const Tensor r = oracle::random_tensor(x.shape(), rng);
      GradTape t;
      const NodeId a = t.parameter(x);
      t.backward(ad::relu(t, a), r);
      EXPECT_LE(oracle::max_rel_error(
                    t.grad(a), oracle::fd_gradient([&](const Tensor& v) { return oracle::dot(r, relu(v)); }, x)),
                kFdTol);
    }
    {
      const Tensor r = oracle::random_tensor({2, 3, 1, 1}, rng);
      GradTape t;
      const NodeId a = t.parameter(x);
      t.backward(ad::avgpool_global(t, a), r);
      EXPECT_LE(oracle::max_rel_error(
                    t.grad(a),
                    oracle::fd_gradient([&](const Tensor& v) { return oracle::dot(r, avgpool_global(v)); }, x)),
                kFdTol);
    }
    {
      const Tensor r = oracle::random_tensor({3, 5, 1, 1}, rng);
      GradTape t;
      const NodeId fn = t.parameter(f), tn = t.parameter(theta), bn = t.parameter(bias);
      t.backward(ad::linear(t, fn, tn, bn), r);
      EXPECT_LE(oracle::max_rel_error(t.grad(fn), oracle::fd_gradient([&](const Tensor& v) {
                                        return oracle::dot(r, linear(v, theta, &bias));
                                      }, f)),
                kFdTol);
      EXPECT_LE(oracle::max_rel_error(t.grad(tn), oracle::fd_gradient([&](const Tensor& v) {
                                        return oracle::dot(r, linear(f, v, &bias));
                                      }, theta)),
                kFdTol);
      EXPECT_LE(oracle::max_rel_error(t.grad(bn), oracle::fd_gradient([&](const Tensor& v) {
                                        return oracle::dot(r, linear(f, theta, &v));
                                      }, bias)),
                kFdTol);
    }
    {
      const Tensor r = oracle::random_tensor(x.shape(), rng);
      GradTape t;
      const NodeId a = t.parameter(x), b = t.parameter(x2);
      t.backward(ad::add(t, a, ad::scale(t, b, factor)), r);
      auto sum = [&](const Tensor& u, const Tensor& v) {
        double s = 0;
        for (std::size_t i = 0; i < u.size(); ++i) s += r[i] * (u[i] + factor * v[i]);
        return s;
      };
      EXPECT_LE(oracle::max_rel_error(t.grad(a), oracle::fd_gradient([&](const Tensor& v) { return sum(v, x2); }, x)),
                kFdTol);
      EXPECT_LE(oracle::max_rel_error(t.grad(b), oracle::fd_gradient([&](const Tensor& v) { return sum(x, v); }, x2)),
                kFdTol);
    }
  }
}

TEST(SoftmaxCrossEntropy, Examples) {
  const std::vector<int> y{2};
  EXPECT_NEAR(softmax_cross_entropy(Tensor({1, 4, 1, 1}, 0.0), y), std::log(4.0), 1e-15);
  Tensor sat({1, 4, 1, 1}, 0.0);
  sat[2] = 1000.0;
  EXPECT_NEAR(softmax_cross_entropy(sat, y), 0.0, 1e-12);
  EXPECT_THROW(softmax_cross_entropy(Tensor({1, 4, 1, 1}), std::vector<int>{4}), InputError);
  EXPECT_THROW(softmax_cross_entropy(Tensor({1, 4, 1, 1}), std::vector<int>{-1}), InputError);
}

TEST(SoftmaxCrossEntropy, MatchesDirectFormula) {
  Rng rng(12);
  for (int inst = 0; inst < 20; ++inst) {
    const Tensor z = oracle::random_tensor({3, 5, 1, 1}, rng, 2.0);
    const std::vector<int> y{static_cast<int>(rng.below(5)), static_cast<int>(rng.below(5)),
                             static_cast<int>(rng.below(5))};
    EXPECT_NEAR(softmax_cross_entropy(z, y), oracle::direct_cross_entropy(z, y), 1e-10);
  }
}

TEST(SoftmaxCrossEntropyBackward, MatchesFiniteDifferences) {
  Rng rng(13);
  for (int inst = 0; inst < kInstances; ++inst) {
    const Tensor z = oracle::random_tensor({4, 6, 1, 1}, rng, 2.0);
    std::vector<int> y(4);
    for (int& v : y) v = static_cast<int>(rng.below(6));
    GradTape t;
    const NodeId zn = t.parameter(z);
    t.backward(ad::softmax_cross_entropy(t, zn, y));
    EXPECT_LE(oracle::max_rel_error(
                  t.grad(zn), oracle::fd_gradient([&](const Tensor& v) { return softmax_cross_entropy(v, y); }, z)),
              kFdTol);
  }
}

TEST(MseFeatureLoss, Examples) {
  Rng rng(14);
  const Tensor a = oracle::random_tensor({2, 3, 2, 2}, rng);
  const Tensor b = oracle::random_tensor({2, 3, 2, 2}, rng);
  EXPECT_EQ(mse_feature_loss(a, a), 0.0);
  EXPECT_DOUBLE_EQ(mse_feature_loss(Tensor({1, 1, 1, 1}, 3.0), Tensor({1, 1, 1, 1}, 1.0)), 2.0);
  Tensor a2 = a, b2 = b;
  for (double& v : a2.data()) v *= 2;
  for (double& v : b2.data()) v *= 2;
  EXPECT_NEAR(mse_feature_loss(a2, b2), 4.0 * mse_feature_loss(a, b), 1e-12);
  EXPECT_THROW(mse_feature_loss(a, Tensor({2, 3, 2, 1})), DimensionError);
}

TEST(MseFeatureLossBackward, MatchesFiniteDifferences) {
  Rng rng(15);
  for (int inst = 0; inst < kInstances; ++inst) {
    const Tensor a = oracle::random_tensor({2, 2, 3, 3}, rng);
    const Tensor b = oracle::random_tensor({2, 2, 3, 3}, rng);
    GradTape t;
    const NodeId an = t.parameter(a), bn = t.parameter(b);
    t.backward(ad::mse_feature_loss(t, an, bn));
    EXPECT_LE(oracle::max_rel_error(
                  t.grad(an), oracle::fd_gradient([&](const Tensor& v) { return mse_feature_loss(v, b); }, a)),
              kFdTol);
    EXPECT_LE(oracle::max_rel_error(
                  t.grad(bn), oracle::fd_gradient([&](const Tensor& v) { return mse_feature_loss(a, v); }, b)),
              kFdTol);
  }
}

TEST(Convexity, ReconstructionLossIsMidpointConvexInWeights) {
  Rng rng(16);
  const Tensor x = oracle::random_tensor({2, 3, 5, 5}, rng);
  const Tensor target = oracle::random_tensor({2, 4, 5, 5}, rng);
  auto loss = [&](const Tensor& w) {
    return mse_feature_loss(target, conv2d(x, ConvParams::dense(w), {1, 1}));
  };
  for (int i = 0; i < 100; ++i) {
    const Tensor w1 = oracle::random_tensor({4, 3, 3, 3}, rng);
    const Tensor w2 = oracle::random_tensor({4, 3, 3, 3}, rng);
    const double th = rng.uniform(0.01, 0.99);
    Tensor mid(w1.shape());
    for (std::size_t q = 0; q < mid.size(); ++q) mid[q] = th * w1[q] + (1 - th) * w2[q];
    EXPECT_LE(loss(mid), th * loss(w1) + (1 - th) * loss(w2) + 1e-9);
  }
}

TEST(Convexity, CrossEntropyIsMidpointConvexInLogits) {
  Rng rng(17);
  const std::vector<int> y{0, 3, 1, 4};
  for (int i = 0; i < 100; ++i) {
    const Tensor z1 = oracle::random_tensor({4, 5, 1, 1}, rng, 3.0);
    const Tensor z2 = oracle::random_tensor({4, 5, 1, 1}, rng, 3.0);
    const double th = rng.uniform(0.01, 0.99);
    Tensor mid(z1.shape());
    for (std::size_t q = 0; q < mid.size(); ++q) mid[q] = th * z1[q] + (1 - th) * z2[q];
    EXPECT_LE(softmax_cross_entropy(mid, y),
              th * softmax_cross_entropy(z1, y) + (1 - th) * softmax_cross_entropy(z2, y) + 1e-9);
  }
}

TEST(GradTape, VisitsEveryRecordOnceInReverse) {
  Rng rng(18);
  GradTape t;
  const NodeId x = t.parameter(oracle::random_tensor({2, 2, 2, 2}, rng));
  const NodeId a = ad::relu(t, x);
  const NodeId b = ad::add(t, a, a);  // diamond
  const NodeId c = ad::avgpool_global(t, b);
  const NodeId d = ad::scale(t, ad::avgpool_global(t, c), 2.0);
  t.backward(ad::mse_feature_loss(t, t.constant(Tensor({2, 2, 1, 1}, 0.0)), d));
  for (std::uint32_t v : t.visit_counts()) EXPECT_EQ(v, 1u);
  EXPECT_EQ(t.visit_counts().size(), t.record_count());
}

TEST(GradTape, ConstantsHaveNoGradient) {
  GradTape t;
  const NodeId c = t.constant(Tensor({1, 1, 1, 1}, 1.0));
  const NodeId p = t.parameter(Tensor({1, 1, 1, 1}, 2.0));
  t.backward(ad::add(t, c, p));
  EXPECT_FALSE(t.requires_grad(c));
  EXPECT_THROW(t.grad(c), ContractError);
  EXPECT_EQ(t.grad(p)[0], 1.0);
}
