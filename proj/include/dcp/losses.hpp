#pragma once

#include <span>

#include "dcp/head.hpp"
#include "dcp/ops.hpp"
#include "dcp/tensor.hpp"

namespace dcp {

/// F = AvgPool(ReLU(BN(O))) as [N, n_p, 1, 1]; heads without BN skip the
/// BN/ReLU pair. BN runs frozen.
Tensor head_input(const Tensor& o_p, const LossHead& head, const BnConfig& bn = {});

/// Softmax cross-entropy of theta^T F (+ bias) against the labels.
double discrimination_loss(const Tensor& features, const Tensor& theta,
                           std::span<const int> labels, const Tensor* bias = nullptr);

/// Pieces of the selection objective for one layer.
struct JointLossSpec {
  double lambda = 1.0;
  const LossHead* head = nullptr;
  const Tensor* baseline_outputs = nullptr;  // O^b of the layer under selection
};

struct JointLossValue {
  double total = 0.0;
  double reconstruction = 0.0;
  double discrimination = 0.0;
};

/// lambda * MSE(O^b, O) + head loss at the head's attach layer.
/// `layer_output` is the conv output of the layer under selection and
/// `head_layer_output` the block output the head reads.
JointLossValue joint_loss(const Tensor& layer_output, const Tensor& head_layer_output,
                          const JointLossSpec& spec, std::span<const int> labels,
                          const BnConfig& bn = {});

}  // namespace dcp
