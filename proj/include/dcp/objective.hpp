#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "dcp/losses.hpp"
#include "dcp/model.hpp"
#include "dcp/tensor.hpp"

namespace dcp {

/// Instrumentation shared by everything that pushes samples through a
/// network prefix on behalf of channel selection.
struct FeatureCounters {
  std::uint64_t prefix_sample_layers = 0;  // samples x layers pushed through a prefix
  std::uint64_t cache_hits = 0;
  std::uint64_t cache_misses = 0;
};

/// Inputs of one layer on the selection subset, from the stage-start model,
/// plus the baseline conv output the layer should reconstruct.
struct FeatureCache {
  std::uint64_t key = 0;  // seed, subset and stage
  Tensor input;           // a_{l-1}
  std::vector<std::pair<std::size_t, Tensor>> skips;  // earlier activations read by residual adds
  Tensor baseline_output;                             // O^b, pre-BN
};

/// Where a LayerObjective gets its features from: a prebuilt cache, or a
/// fresh prefix forward of both models for every evaluation.
struct FeatureSource {
  std::shared_ptr<const FeatureCache> cache;
  // Used only when `cache` is empty.
  std::shared_ptr<const NetworkModel> stage_model;
  std::shared_ptr<const NetworkModel> baseline;
  std::shared_ptr<const Tensor> images;
  FeatureCounters* counters = nullptr;
};

/// Activations of stage-start model and baseline needed by `layer`, gathered
/// into a cache.
FeatureCache build_feature_cache(const InferenceTrace& stage_trace,
                                 const InferenceTrace& baseline_trace, const NetworkModel& model,
                                 std::size_t layer, std::size_t head_layer, std::uint64_t key);

/// Activation indices below `layer - 1` that residual adds in
/// layers layer..head_layer read.
std::vector<std::size_t> skip_sources(const NetworkModel& model, std::size_t layer,
                                      std::size_t head_layer);

/// Joint loss of one layer's weights on the selection subset: the layer's
/// conv output is compared with O^b, and the block output travels through
/// the following frozen layers to the head at `head_layer`.
class LayerObjective {
 public:
  struct Result {
    JointLossValue value;
    Tensor grad;  // dL/dW, empty unless requested
  };

  LayerObjective(const NetworkModel& model, std::size_t layer, std::size_t head_layer,
                 FeatureSource source, std::vector<int> labels, double lambda,
                 std::size_t chunk = 64);

  std::size_t layer() const { return layer_; }
  std::size_t head_layer() const { return head_layer_; }
  std::size_t samples() const { return labels_.size(); }
  double lambda() const { return lambda_; }
  /// Masks, bias and geometry of the layer under selection.
  const ConvParams& layout() const { return blocks_.front().conv; }

  /// The same objective with different masks on the layer under selection.
  LayerObjective with_layout(const ConvParams& layout) const;

  /// Mean joint loss over every subset sample.
  Result evaluate(const Tensor& w, bool need_grad) const;
  /// Mean joint loss over the listed subset samples.
  Result evaluate(const Tensor& w, std::span<const std::size_t> samples, bool need_grad) const;

  std::uint64_t evaluations() const { return evaluations_; }

 private:
  struct Features {
    Tensor input;
    std::vector<std::pair<std::size_t, Tensor>> skips;
    Tensor baseline_output;
  };

  Features gather(std::span<const std::size_t> idx) const;
  void run_chunk(const Tensor& w, std::span<const std::size_t> idx, double weight, bool need_grad,
                 Result& acc) const;

  std::size_t layer_;
  std::size_t head_layer_;
  mutable std::vector<Block> blocks_;  // layer..head_layer
  mutable LossHead head_;
  FeatureSource source_;
  std::vector<int> labels_;
  double lambda_;
  std::size_t chunk_;
  mutable std::uint64_t evaluations_ = 0;
};

/// L(tW1 + (1-t)W2) - (t L(W1) + (1-t) L(W2)); positive values are
/// violations of midpoint convexity.
double midpoint_gap(const LayerObjective& objective, const Tensor& w1, const Tensor& w2,
                    double t);

}  // namespace dcp
