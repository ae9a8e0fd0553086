#pragma once

#include <any>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "dcp/tensor.hpp"

namespace dcp {

enum class OpKind {
  Leaf,
  Conv2d,
  BatchNorm,
  Relu,
  AvgPoolGlobal,
  Linear,
  SoftmaxCrossEntropy,
  MseFeatureLoss,
  Add,
  Scale,
};

const char* op_name(OpKind kind);

/// Handle to a value recorded on a GradTape.
struct NodeId {
  std::size_t index = std::numeric_limits<std::size_t>::max();
  bool valid() const { return index != std::numeric_limits<std::size_t>::max(); }
  friend bool operator==(NodeId, NodeId) = default;
};

class GradTape;

struct OpRecord {
  using BackwardFn = std::function<void(GradTape&, const OpRecord&, const Tensor& upstream)>;

  OpKind kind = OpKind::Leaf;
  std::vector<NodeId> inputs;
  NodeId output;
  BackwardFn backward;
  /// Op-specific data the backward pass needs beyond the input values.
  std::any saved;
};

/// Reverse-mode tape. Records are appended in execution order, which is a
/// topological order of the computation, so backward walks them in reverse.
/// A tape is single-owner and must not be shared between concurrent forwards.
class GradTape {
 public:
  NodeId constant(Tensor value);
  NodeId parameter(Tensor value);

  /// Appends an op record; the output requires grad iff any input does.
  NodeId record(OpKind kind, std::vector<NodeId> inputs, Tensor output,
                OpRecord::BackwardFn backward, std::any saved = {});

  const Tensor& value(NodeId id) const;
  bool requires_grad(NodeId id) const;
  bool has_grad(NodeId id) const;
  /// Gradient accumulated by the last backward(); zero-filled if the node
  /// requires grad but received no contribution.
  Tensor grad(NodeId id) const;

  /// Adds `g` into the gradient of `id`; a no-op for nodes that do not require grad.
  void accumulate(NodeId id, const Tensor& g);

  /// Backpropagates from a single-element output with seed 1.
  void backward(NodeId output);
  void backward(NodeId output, const Tensor& upstream);

  /// Record that produced `id`, or nullptr for leaves.
  const OpRecord* producer(NodeId id) const;

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t record_count() const { return records_.size(); }
  /// How many times each record was visited by the last backward().
  const std::vector<std::uint32_t>& visit_counts() const { return visits_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::size_t producer = std::numeric_limits<std::size_t>::max();
  };

  const Node& node(NodeId id) const;
  Node& node(NodeId id);

  std::vector<Node> nodes_;
  std::vector<OpRecord> records_;
  std::vector<std::uint32_t> visits_;
};

}  // namespace dcp
