#include "dcp/objective.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "dcp/errors.hpp"

namespace dcp {

std::vector<std::size_t> skip_sources(const NetworkModel& model, std::size_t layer,
                                      std::size_t head_layer) {
  std::vector<std::size_t> out;
  for (std::size_t l = layer; l <= head_layer; ++l) {
    const auto& r = model.block(l).spec.residual_from;
    if (r && *r + 1 < layer && std::find(out.begin(), out.end(), *r) == out.end()) {
      out.push_back(*r);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

FeatureCache build_feature_cache(const InferenceTrace& stage_trace,
                                 const InferenceTrace& baseline_trace, const NetworkModel& model,
                                 std::size_t layer, std::size_t head_layer, std::uint64_t key) {
  if (stage_trace.activations.size() < layer || baseline_trace.conv_outputs.size() < layer) {
    throw ContractError("feature cache for layer " + std::to_string(layer) +
                        " needs traces that reach it");
  }
  FeatureCache cache;
  cache.key = key;
  cache.input = stage_trace.activations[layer - 1];
  for (std::size_t r : skip_sources(model, layer, head_layer)) {
    cache.skips.emplace_back(r, stage_trace.activations[r]);
  }
  cache.baseline_output = baseline_trace.conv_outputs[layer - 1];
  return cache;
}

LayerObjective::LayerObjective(const NetworkModel& model, std::size_t layer,
                               std::size_t head_layer, FeatureSource source,
                               std::vector<int> labels, double lambda, std::size_t chunk)
    : layer_(layer),
      head_layer_(head_layer),
      head_(model.head_at(head_layer)),
      source_(std::move(source)),
      labels_(std::move(labels)),
      lambda_(lambda),
      chunk_(std::max<std::size_t>(chunk, 1)) {
  if (layer < 1 || head_layer < layer || head_layer > model.layer_count()) {
    throw ContractError("objective for layer " + std::to_string(layer) + " with head at " +
                        std::to_string(head_layer) + " is out of range");
  }
  if (!(lambda >= 0.0)) {
    throw ConfigError("lambda must be non-negative");
  }
  if (labels_.empty()) {
    throw ConfigError("selection subset is empty");
  }
  if (!source_.cache && (!source_.stage_model || !source_.baseline || !source_.images)) {
    throw ContractError("objective needs either a feature cache or models to recompute from");
  }
  if (source_.cache && source_.cache->baseline_output.empty()) {
    throw ContractError("feature cache has no baseline outputs");
  }
  for (std::size_t l = layer; l <= head_layer; ++l) {
    blocks_.push_back(model.block(l));
  }
}

LayerObjective LayerObjective::with_layout(const ConvParams& layout) const {
  if (layout.weights.shape() != blocks_.front().conv.weights.shape()) {
    throw DimensionError("replacement layout does not match layer " + std::to_string(layer_));
  }
  LayerObjective copy = *this;
  copy.blocks_.front().conv = layout;
  copy.evaluations_ = 0;
  return copy;
}

LayerObjective::Features LayerObjective::gather(std::span<const std::size_t> idx) const {
  Features f;
  if (source_.cache) {
    const FeatureCache& c = *source_.cache;
    f.input = c.input.gather_batch(idx);
    for (const auto& [r, t] : c.skips) {
      f.skips.emplace_back(r, t.gather_batch(idx));
    }
    f.baseline_output = c.baseline_output.gather_batch(idx);
    if (source_.counters) {
      ++source_.counters->cache_hits;
    }
    return f;
  }
  const Tensor x = source_.images->gather_batch(idx);
  InferenceTrace stage = infer_trace(*source_.stage_model, x, layer_ - 1);
  const InferenceTrace base = infer_trace(*source_.baseline, x, layer_);
  f.input = std::move(stage.activations[layer_ - 1]);
  for (std::size_t r : skip_sources(*source_.stage_model, layer_, head_layer_)) {
    f.skips.emplace_back(r, std::move(stage.activations[r]));
  }
  f.baseline_output = base.conv_outputs[layer_ - 1];
  if (source_.counters) {
    ++source_.counters->cache_misses;
    source_.counters->prefix_sample_layers += idx.size() * (2 * layer_ - 1);
  }
  return f;
}

void LayerObjective::run_chunk(const Tensor& w, std::span<const std::size_t> idx, double weight,
                               bool need_grad, Result& acc) const {
  Features f = gather(idx);
  std::vector<int> labels(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    labels[i] = labels_[idx[i]];
  }

  GradTape tape;
  std::vector<NodeId> act(head_layer_ + 1);
  act[layer_ - 1] = tape.constant(std::move(f.input));
  for (auto& [r, t] : f.skips) {
    act[r] = tape.constant(std::move(t));
  }
  NodeId conv_out, w_node;
  for (std::size_t l = layer_; l <= head_layer_; ++l) {
    Block& block = blocks_[l - layer_];
    BlockParamNodes params = bind_block(tape, block, false);
    if (l == layer_) {
      w_node = need_grad ? tape.parameter(w) : tape.constant(w);
      params.weight = w_node;
    }
    const NodeId residual =
        block.spec.residual_from ? act.at(*block.spec.residual_from) : NodeId{};
    const BlockNodes nodes =
        apply_block(tape, block, params, act[l - 1], residual, BnMode::Frozen);
    if (l == layer_) {
      conv_out = nodes.conv_output;
    }
    act[l] = nodes.output;
  }
  const HeadParamNodes hp = bind_head(tape, head_, false);
  const NodeId logits = apply_head(tape, head_, hp, act[head_layer_], BnMode::Frozen);
  const NodeId disc = head_.criterion->apply(tape, logits, labels);
  const NodeId recon =
      ad::mse_feature_loss(tape, tape.constant(std::move(f.baseline_output)), conv_out);
  const NodeId total = ad::add(tape, ad::scale(tape, recon, lambda_), disc);

  acc.value.reconstruction += weight * tape.value(recon).item();
  acc.value.discrimination += weight * tape.value(disc).item();
  acc.value.total += weight * tape.value(total).item();
  if (need_grad) {
    tape.backward(total, Tensor(tape.value(total).shape(), weight));
    const Tensor g = tape.grad(w_node);
    for (std::size_t i = 0; i < g.size(); ++i) {
      acc.grad[i] += g[i];
    }
  }
}

LayerObjective::Result LayerObjective::evaluate(const Tensor& w, bool need_grad) const {
  std::vector<std::size_t> all(labels_.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return evaluate(w, all, need_grad);
}

LayerObjective::Result LayerObjective::evaluate(const Tensor& w,
                                                std::span<const std::size_t> samples,
                                                bool need_grad) const {
  if (w.shape() != layout().weights.shape()) {
    throw DimensionError("objective for layer " + std::to_string(layer_) + " expects weights " +
                         shape_string(layout().weights.shape()) + ", got " +
                         shape_string(w.shape()));
  }
  if (samples.empty()) {
    throw ContractError("objective evaluated on no samples");
  }
  ++evaluations_;
  Result acc;
  if (need_grad) {
    acc.grad = Tensor(w.shape(), 0.0);
  }
  const double total = static_cast<double>(samples.size());
  for (std::size_t begin = 0; begin < samples.size(); begin += chunk_) {
    const std::size_t count = std::min(chunk_, samples.size() - begin);
    run_chunk(w, samples.subspan(begin, count), static_cast<double>(count) / total, need_grad,
              acc);
  }
  if (!std::isfinite(acc.value.total)) {
    throw NumericError("joint loss of layer " + std::to_string(layer_) + " is not finite");
  }
  if (need_grad) {
    require_finite(acc.grad, "joint-loss gradient");
  }
  return acc;
}

double midpoint_gap(const LayerObjective& objective, const Tensor& w1, const Tensor& w2,
                    double t) {
  Tensor mid(w1.shape());
  for (std::size_t i = 0; i < mid.size(); ++i) {
    mid[i] = t * w1[i] + (1.0 - t) * w2[i];
  }
  const double l1 = objective.evaluate(w1, false).value.total;
  const double l2 = objective.evaluate(w2, false).value.total;
  return objective.evaluate(mid, false).value.total - (t * l1 + (1.0 - t) * l2);
}

}  // namespace dcp
