#pragma once

#include <span>
#include <vector>

#include "dcp/tape.hpp"
#include "dcp/tensor.hpp"

namespace dcp {

enum class BnMode { Train, Frozen };

struct BnConfig {
  double epsilon = 1e-5;
  double momentum = 0.1;
};

/// Per-channel affine batch normalization with running statistics.
struct BatchNormParams {
  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;

  static BatchNormParams identity(std::size_t channels);
  std::size_t channels() const { return gamma.size(); }
};

// Plain forward functions. Every output is freshly allocated and checked for
// NaN/Inf. Shapes are never broadcast implicitly.

/// Train mode normalizes with batch statistics and folds them into the running
/// statistics; frozen mode uses the running statistics only.
Tensor batch_norm(const Tensor& x, BatchNormParams& bn, BnMode mode, const BnConfig& config = {});
/// Frozen-mode batch normalization; never touches the running statistics.
Tensor batch_norm(const Tensor& x, const BatchNormParams& bn, const BnConfig& config = {});
Tensor relu(const Tensor& x);
/// [N, c, h, w] -> [N, c, 1, 1] spatial mean.
Tensor avgpool_global(const Tensor& x);
/// features [N, d, 1, 1] x theta [d, m, 1, 1] -> logits [N, m, 1, 1]; bias is
/// optional ([1, m, 1, 1]).
Tensor linear(const Tensor& features, const Tensor& theta, const Tensor* bias = nullptr);
/// Mean negative log-likelihood of the labels under softmax(logits).
double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);
/// (1 / (2 N n h w)) * sum ||baseline - output||^2.
double mse_feature_loss(const Tensor& baseline, const Tensor& output);

namespace ad {

NodeId batch_norm(GradTape& tape, NodeId x, NodeId gamma, NodeId beta, BatchNormParams& bn,
                  BnMode mode, const BnConfig& config = {});
NodeId relu(GradTape& tape, NodeId x);
NodeId avgpool_global(GradTape& tape, NodeId x);
NodeId linear(GradTape& tape, NodeId features, NodeId theta, NodeId bias = {});
NodeId softmax_cross_entropy(GradTape& tape, NodeId logits, std::span<const int> labels);
NodeId mse_feature_loss(GradTape& tape, NodeId baseline, NodeId output);
NodeId add(GradTape& tape, NodeId a, NodeId b);
NodeId scale(GradTape& tape, NodeId a, double factor);

}  // namespace ad

/// Per-channel vector as a [1, c, 1, 1] tensor.
Tensor channel_tensor(std::span<const double> values);

}  // namespace dcp
