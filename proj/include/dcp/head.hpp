#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>

#include "dcp/ops.hpp"
#include "dcp/tape.hpp"
#include "dcp/tensor.hpp"

namespace dcp {

/// Loss applied to a head's logits. Softmax cross-entropy is the only one
/// shipped; margin-based criteria can be added by implementing this interface.
class HeadCriterion {
 public:
  virtual ~HeadCriterion() = default;
  virtual std::string name() const = 0;
  virtual double evaluate(const Tensor& logits, std::span<const int> labels) const = 0;
  virtual NodeId apply(GradTape& tape, NodeId logits, std::span<const int> labels) const = 0;
};

class SoftmaxCrossEntropyCriterion final : public HeadCriterion {
 public:
  std::string name() const override { return "softmax_cross_entropy"; }
  double evaluate(const Tensor& logits, std::span<const int> labels) const override;
  NodeId apply(GradTape& tape, NodeId logits, std::span<const int> labels) const override;
};

std::shared_ptr<const HeadCriterion> default_criterion();
/// Looks a criterion up by name; throws ConfigError for unknown names.
std::shared_ptr<const HeadCriterion> criterion_by_name(const std::string& name);

/// Classifier attached to the output of layer `attach_layer`.
///
/// Auxiliary heads compute AvgPool(ReLU(BN(O))) and feed it to theta; the
/// network's own classifier has no BN/ReLU (its input is already activated)
/// and carries a bias.
struct LossHead {
  int attach_layer = 0;
  int p_index = 0;
  std::optional<BatchNormParams> bn;
  Tensor theta;  // [n_p, m, 1, 1]
  Tensor bias;   // [1, m, 1, 1] or empty
  std::shared_ptr<const HeadCriterion> criterion = default_criterion();

  std::size_t input_channels() const { return theta.dim(0); }
  std::size_t classes() const { return theta.dim(1); }
  bool has_bias() const { return !bias.empty(); }
};

}  // namespace dcp
