#include "dcp/tape.hpp"

#include <string>

#include "dcp/errors.hpp"

namespace dcp {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::BatchNorm: return "batch_norm";
    case OpKind::Relu: return "relu";
    case OpKind::AvgPoolGlobal: return "avgpool_global";
    case OpKind::Linear: return "linear";
    case OpKind::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::MseFeatureLoss: return "mse_feature_loss";
    case OpKind::Add: return "add";
    case OpKind::Scale: return "scale";
  }
  return "unknown";
}

NodeId GradTape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false});
  return NodeId{nodes_.size() - 1};
}

NodeId GradTape::parameter(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, true});
  return NodeId{nodes_.size() - 1};
}

NodeId GradTape::record(OpKind kind, std::vector<NodeId> inputs, Tensor output,
                        OpRecord::BackwardFn backward, std::any saved) {
  bool needs_grad = false;
  for (NodeId in : inputs) {
    needs_grad = needs_grad || node(in).requires_grad;
  }
  nodes_.push_back(Node{std::move(output), {}, needs_grad, records_.size()});
  const NodeId out{nodes_.size() - 1};
  records_.push_back(OpRecord{kind, std::move(inputs), out, std::move(backward), std::move(saved)});
  return out;
}

const GradTape::Node& GradTape::node(NodeId id) const {
  if (id.index >= nodes_.size()) {
    throw ContractError("tape node " + std::to_string(id.index) + " does not exist");
  }
  return nodes_[id.index];
}

GradTape::Node& GradTape::node(NodeId id) {
  if (id.index >= nodes_.size()) {
    throw ContractError("tape node " + std::to_string(id.index) + " does not exist");
  }
  return nodes_[id.index];
}

const Tensor& GradTape::value(NodeId id) const { return node(id).value; }

bool GradTape::requires_grad(NodeId id) const { return node(id).requires_grad; }

bool GradTape::has_grad(NodeId id) const { return !node(id).grad.empty(); }

Tensor GradTape::grad(NodeId id) const {
  const Node& n = node(id);
  if (!n.requires_grad) {
    throw ContractError("node " + std::to_string(id.index) + " does not require grad");
  }
  if (n.grad.empty()) {
    return Tensor(n.value.shape(), 0.0);
  }
  return n.grad;
}

void GradTape::accumulate(NodeId id, const Tensor& g) {
  Node& n = node(id);
  if (!n.requires_grad) {
    return;
  }
  if (g.shape() != n.value.shape()) {
    throw DimensionError("gradient shape " + shape_string(g.shape()) + " does not match value " +
                         shape_string(n.value.shape()));
  }
  require_finite(g, "gradient");
  if (n.grad.empty()) {
    n.grad = g;
    return;
  }
  auto dst = n.grad.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    dst[i] += src[i];
  }
}

void GradTape::backward(NodeId output) {
  if (value(output).size() != 1) {
    throw DimensionError("backward() without upstream needs a single-element output, got " +
                         shape_string(value(output).shape()));
  }
  backward(output, Tensor(value(output).shape(), 1.0));
}

void GradTape::backward(NodeId output, const Tensor& upstream) {
  for (Node& n : nodes_) {
    n.grad = Tensor();
  }
  visits_.assign(records_.size(), 0);
  accumulate(output, upstream);
  if (!node(output).requires_grad) {
    return;
  }
  const std::size_t last = node(output).producer;
  if (last == std::numeric_limits<std::size_t>::max()) {
    return;
  }
  for (std::size_t r = last + 1; r-- > 0;) {
    const OpRecord& rec = records_[r];
    Node& out = nodes_[rec.output.index];
    if (!out.requires_grad || out.grad.empty()) {
      continue;
    }
    ++visits_[r];
    rec.backward(*this, rec, out.grad);
  }
}

const OpRecord* GradTape::producer(NodeId id) const {
  const Node& n = node(id);
  if (n.producer == std::numeric_limits<std::size_t>::max()) {
    return nullptr;
  }
  return &records_[n.producer];
}

}  // namespace dcp
