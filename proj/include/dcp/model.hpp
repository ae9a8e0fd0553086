#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dcp/conv.hpp"
#include "dcp/head.hpp"
#include "dcp/ops.hpp"
#include "dcp/tape.hpp"
#include "dcp/tensor.hpp"

namespace dcp {

/// One conv block: conv -> optional BN -> optional residual add -> ReLU.
struct LayerSpec {
  std::size_t out_channels = 0;
  std::optional<std::size_t> in_channels;  // checked against the previous layer when given
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;
  bool batch_norm = true;
  bool bias = false;
  /// Activation index added before the ReLU (0 = network input, l = output of layer l).
  std::optional<std::size_t> residual_from;
  /// Overrides the default prunability rule.
  std::optional<bool> prunable;
};

struct ArchSpec {
  std::size_t in_channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t classes = 10;
  std::vector<LayerSpec> layers;

  /// Throws ConfigError on degenerate or inconsistent descriptions.
  void validate() const;
};

void to_json(nlohmann::json& j, const LayerSpec& s);
void from_json(const nlohmann::json& j, LayerSpec& s);
void to_json(nlohmann::json& j, const ArchSpec& s);
void from_json(const nlohmann::json& j, ArchSpec& s);

enum class ModelRole { Baseline, Working };

struct Block {
  LayerSpec spec;
  ConvParams conv;
  std::optional<BatchNormParams> bn;

  ConvGeometry geometry() const { return {spec.stride, spec.pad}; }
};

/// Ordered conv blocks, the final classifier and any auxiliary loss heads.
/// Layers are numbered 1..L; activation 0 is the network input.
struct NetworkModel {
  ArchSpec arch;
  std::vector<Block> blocks;
  LossHead classifier;
  std::vector<LossHead> heads;  // sorted by attach_layer
  ModelRole role = ModelRole::Working;

  std::size_t layer_count() const { return blocks.size(); }
  Block& block(std::size_t layer) { return blocks.at(layer - 1); }
  const Block& block(std::size_t layer) const { return blocks.at(layer - 1); }

  /// {L_1, ..., L_P, L_{P+1} = L}.
  std::vector<int> head_points() const;
  /// Head attached at `layer`, or the classifier when `layer` is the last one.
  const LossHead& head_at(std::size_t layer) const;
  LossHead& head_at(std::size_t layer);

  /// Whether layer `layer` takes part in channel selection.
  bool prunable(std::size_t layer) const;
  /// Whether activation `index` feeds a residual add somewhere.
  bool feeds_residual(std::size_t index) const;
  /// Output spatial size of each layer (index 0 is the input).
  std::vector<std::pair<std::size_t, std::size_t>> spatial_sizes() const;
};

/// Randomly initialized network with all masks live: fan-in scaled normal
/// conv weights, zero biases, BN gamma 1 / beta 0.
NetworkModel build_network(const ArchSpec& arch, std::uint64_t seed);

/// Number of channels with at least one nonzero weight.
std::size_t l20_channel_norm(const ConvParams& params);
/// Number of kernels with nonzero Frobenius norm.
std::size_t l20_kernel_norm(const ConvParams& params);
/// ceil((1 - eta) * c).
std::size_t channel_budget(std::size_t c, double eta);
/// ceil(rate * count) with a guard against representation error in `rate`.
std::size_t ceil_fraction(double rate, std::size_t count);

/// Validates masks and zeroes every masked weight.
void apply_masks(NetworkModel& model);
/// Filter j of `layer` can be removed because every consumer ignores it.
bool filter_removable(const NetworkModel& model, std::size_t layer, std::size_t filter);
/// Physically drops dead channels and the filters that produced them.
/// Auxiliary heads are training-only and are not carried over.
NetworkModel compact_model(const NetworkModel& model);

struct LayerStats {
  int layer_id = 0;
  std::size_t live_filters = 0;
  std::size_t live_channels = 0;
  std::size_t live_kernels = 0;
  std::size_t params = 0;
  std::size_t macs = 0;        // live kernels only
  std::size_t dense_macs = 0;  // live filters x live channels
};

struct ModelStats {
  std::size_t param_count = 0;
  std::size_t mac_count = 0;
  std::size_t dense_mac_count = 0;
  std::vector<LayerStats> layers;
  std::size_t classifier_params = 0;
  std::size_t classifier_macs = 0;
};

/// MACs of conv and linear layers; BN/ReLU/pooling are not counted.
ModelStats count_stats(const NetworkModel& model);

// ---------------------------------------------------------------------------
// Forward passes

struct BlockParamNodes {
  NodeId weight, bias, gamma, beta;
};

struct HeadParamNodes {
  NodeId gamma, beta, theta, bias;
};

BlockParamNodes bind_block(GradTape& tape, const Block& block, bool requires_grad);
HeadParamNodes bind_head(GradTape& tape, const LossHead& head, bool requires_grad);

struct BlockNodes {
  NodeId conv_output;
  NodeId output;
};

/// Runs one block; `residual` must be valid iff the block has a residual input.
BlockNodes apply_block(GradTape& tape, Block& block, const BlockParamNodes& params, NodeId input,
                       NodeId residual, BnMode mode, const BnConfig& bn = {});
/// Logits of a head given the output of its attach layer.
NodeId apply_head(GradTape& tape, LossHead& head, const HeadParamNodes& params,
                  NodeId layer_output, BnMode mode, const BnConfig& bn = {});

struct NetworkForward {
  std::vector<NodeId> activations;   // a_0..a_L
  std::vector<NodeId> conv_outputs;  // index l-1 for layer l
  NodeId logits;
  std::vector<NodeId> head_logits;   // parallel to model.heads
  std::vector<BlockParamNodes> block_params;
  HeadParamNodes classifier_params;
  std::vector<HeadParamNodes> head_params;
};

NetworkForward forward_network(GradTape& tape, NetworkModel& model, const Tensor& input,
                               BnMode mode, bool with_heads, bool requires_grad,
                               const BnConfig& bn = {});

/// Frozen-BN inference keeping every activation and conv output.
struct InferenceTrace {
  std::vector<Tensor> activations;   // a_0..a_last
  std::vector<Tensor> conv_outputs;  // layer l at index l-1
};

InferenceTrace infer_trace(const NetworkModel& model, const Tensor& input, std::size_t last_layer,
                           const BnConfig& bn = {});
/// Frozen-BN logits of the final classifier.
Tensor infer_logits(const NetworkModel& model, const Tensor& input, const BnConfig& bn = {});
/// Logits of a head from its attach layer's output (frozen BN).
Tensor head_logits(const LossHead& head, const Tensor& layer_output, const BnConfig& bn = {});

}  // namespace dcp
