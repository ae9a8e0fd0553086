#include "dcp/losses.hpp"

#include <string>

#include "dcp/errors.hpp"

namespace dcp {

double SoftmaxCrossEntropyCriterion::evaluate(const Tensor& logits,
                                              std::span<const int> labels) const {
  return softmax_cross_entropy(logits, labels);
}

NodeId SoftmaxCrossEntropyCriterion::apply(GradTape& tape, NodeId logits,
                                           std::span<const int> labels) const {
  return ad::softmax_cross_entropy(tape, logits, labels);
}

std::shared_ptr<const HeadCriterion> default_criterion() {
  static const auto shared = std::make_shared<const SoftmaxCrossEntropyCriterion>();
  return shared;
}

std::shared_ptr<const HeadCriterion> criterion_by_name(const std::string& name) {
  if (name == "softmax_cross_entropy") {
    return default_criterion();
  }
  throw ConfigError("unknown head criterion '" + name + "'");
}

Tensor head_input(const Tensor& o_p, const LossHead& head, const BnConfig& bn) {
  if (o_p.dim(1) != head.input_channels()) {
    throw DimensionError("head at layer " + std::to_string(head.attach_layer) + " expects " +
                         std::to_string(head.input_channels()) + " channels, got " +
                         shape_string(o_p.shape()));
  }
  if (!head.bn) {
    return avgpool_global(o_p);
  }
  return avgpool_global(relu(batch_norm(o_p, *head.bn, bn)));
}

double discrimination_loss(const Tensor& features, const Tensor& theta,
                           std::span<const int> labels, const Tensor* bias) {
  return softmax_cross_entropy(linear(features, theta, bias), labels);
}

JointLossValue joint_loss(const Tensor& layer_output, const Tensor& head_layer_output,
                          const JointLossSpec& spec, std::span<const int> labels,
                          const BnConfig& bn) {
  if (spec.baseline_outputs == nullptr || spec.baseline_outputs->empty()) {
    throw ContractError("joint_loss: baseline outputs are not cached");
  }
  if (spec.head == nullptr) {
    throw ContractError("joint_loss: no loss head given");
  }
  if (!(spec.lambda >= 0.0)) {
    throw ConfigError("lambda must be non-negative");
  }
  JointLossValue v;
  v.reconstruction = mse_feature_loss(*spec.baseline_outputs, layer_output);
  const Tensor f = head_input(head_layer_output, *spec.head, bn);
  const Tensor logits = linear(f, spec.head->theta, spec.head->has_bias() ? &spec.head->bias : nullptr);
  v.discrimination = spec.head->criterion->evaluate(logits, labels);
  v.total = spec.lambda * v.reconstruction + v.discrimination;
  return v;
}

}  // namespace dcp
