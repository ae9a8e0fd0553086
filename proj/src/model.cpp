#include "dcp/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dcp/errors.hpp"
#include "dcp/rng.hpp"

namespace dcp {

using nlohmann::json;

void to_json(json& j, const LayerSpec& s) {
  j = json{{"out_channels", s.out_channels},
           {"kernel", s.kernel},
           {"stride", s.stride},
           {"pad", s.pad},
           {"batch_norm", s.batch_norm},
           {"bias", s.bias}};
  if (s.in_channels) {
    j["in_channels"] = *s.in_channels;
  }
  if (s.residual_from) {
    j["residual_from"] = *s.residual_from;
  }
  if (s.prunable) {
    j["prunable"] = *s.prunable;
  }
}

void from_json(const json& j, LayerSpec& s) {
  s = LayerSpec{};
  s.out_channels = j.at("out_channels").get<std::size_t>();
  s.kernel = j.value("kernel", std::size_t{3});
  s.stride = j.value("stride", std::size_t{1});
  s.pad = j.value("pad", s.kernel / 2);
  s.batch_norm = j.value("batch_norm", true);
  s.bias = j.value("bias", !s.batch_norm);
  if (j.contains("in_channels")) {
    s.in_channels = j.at("in_channels").get<std::size_t>();
  }
  if (j.contains("residual_from")) {
    s.residual_from = j.at("residual_from").get<std::size_t>();
  }
  if (j.contains("prunable")) {
    s.prunable = j.at("prunable").get<bool>();
  }
}

void to_json(json& j, const ArchSpec& s) {
  j = json{{"in_channels", s.in_channels},
           {"height", s.height},
           {"width", s.width},
           {"classes", s.classes},
           {"layers", s.layers}};
}

void from_json(const json& j, ArchSpec& s) {
  s = ArchSpec{};
  s.in_channels = j.value("in_channels", std::size_t{3});
  s.height = j.value("height", std::size_t{32});
  s.width = j.value("width", std::size_t{32});
  s.classes = j.at("classes").get<std::size_t>();
  s.layers = j.at("layers").get<std::vector<LayerSpec>>();
}

void ArchSpec::validate() const {
  if (classes == 0) {
    throw ConfigError("architecture needs at least one class");
  }
  if (in_channels == 0 || height == 0 || width == 0) {
    throw ConfigError("architecture input shape must be positive");
  }
  if (layers.empty()) {
    throw ConfigError("architecture has no layers");
  }
  std::vector<std::size_t> channels{in_channels}, heights{height}, widths{width};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string where = "layer " + std::to_string(i + 1) + ": ";
    if (l.out_channels == 0 || l.kernel == 0 || l.stride == 0) {
      throw ConfigError(where + "out_channels, kernel and stride must be positive");
    }
    if (l.in_channels && *l.in_channels != channels.back()) {
      throw ConfigError(where + "in_channels " + std::to_string(*l.in_channels) +
                        " does not match previous output " + std::to_string(channels.back()));
    }
    if (heights.back() + 2 * l.pad < l.kernel || widths.back() + 2 * l.pad < l.kernel) {
      throw ConfigError(where + "kernel does not fit the padded input");
    }
    const std::size_t h = (heights.back() + 2 * l.pad - l.kernel) / l.stride + 1;
    const std::size_t w = (widths.back() + 2 * l.pad - l.kernel) / l.stride + 1;
    if (l.residual_from) {
      const std::size_t r = *l.residual_from;
      if (r > i) {
        throw ConfigError(where + "residual source must be an earlier activation");
      }
      if (channels[r] != l.out_channels || heights[r] != h || widths[r] != w) {
        throw ConfigError(where + "residual source has mismatched width or spatial size");
      }
    }
    channels.push_back(l.out_channels);
    heights.push_back(h);
    widths.push_back(w);
  }
}

std::vector<int> NetworkModel::head_points() const {
  std::vector<int> points;
  for (const LossHead& h : heads) {
    points.push_back(h.attach_layer);
  }
  points.push_back(static_cast<int>(layer_count()));
  return points;
}

const LossHead& NetworkModel::head_at(std::size_t layer) const {
  for (const LossHead& h : heads) {
    if (static_cast<std::size_t>(h.attach_layer) == layer) {
      return h;
    }
  }
  if (layer == layer_count()) {
    return classifier;
  }
  throw ContractError("no loss head at layer " + std::to_string(layer));
}

LossHead& NetworkModel::head_at(std::size_t layer) {
  return const_cast<LossHead&>(std::as_const(*this).head_at(layer));
}

bool NetworkModel::feeds_residual(std::size_t index) const {
  return std::any_of(blocks.begin(), blocks.end(), [index](const Block& b) {
    return b.spec.residual_from && *b.spec.residual_from == index;
  });
}

bool NetworkModel::prunable(std::size_t layer) const {
  const Block& b = block(layer);
  if (b.spec.prunable) {
    return *b.spec.prunable;
  }
  // Raw image channels are never pruned; inputs that also travel along a skip
  // connection cannot be removed without breaking the residual add.
  return layer > 1 && !feeds_residual(layer - 1);
}

std::vector<std::pair<std::size_t, std::size_t>> NetworkModel::spatial_sizes() const {
  std::vector<std::pair<std::size_t, std::size_t>> sizes{{arch.height, arch.width}};
  for (const Block& b : blocks) {
    const auto [h, w] = sizes.back();
    sizes.emplace_back(conv_output_extent(h, b.conv.kernel_h(), b.geometry()),
                       conv_output_extent(w, b.conv.kernel_w(), b.geometry()));
  }
  return sizes;
}

NetworkModel build_network(const ArchSpec& arch, std::uint64_t seed) {
  arch.validate();
  NetworkModel model;
  model.arch = arch;
  std::size_t in = arch.in_channels;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& spec = arch.layers[i];
    Rng rng(derive_seed(seed, i + 1));
    Tensor w({spec.out_channels, in, spec.kernel, spec.kernel});
    const double stddev = std::sqrt(2.0 / static_cast<double>(in * spec.kernel * spec.kernel));
    for (double& v : w.data()) {
      v = rng.normal(0.0, stddev);
    }
    Block block;
    block.spec = spec;
    block.spec.in_channels = in;
    block.conv = ConvParams::dense(std::move(w), static_cast<int>(i + 1));
    if (spec.bias) {
      block.conv.bias.assign(spec.out_channels, 0.0);
    }
    if (spec.batch_norm) {
      block.bn = BatchNormParams::identity(spec.out_channels);
    }
    model.blocks.push_back(std::move(block));
    in = spec.out_channels;
  }
  Rng rng(derive_seed(seed, 0));
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  model.classifier.attach_layer = static_cast<int>(arch.layers.size());
  model.classifier.theta = Tensor({in, arch.classes, 1, 1});
  for (double& v : model.classifier.theta.data()) {
    v = rng.uniform(-bound, bound);
  }
  model.classifier.bias = Tensor({1, arch.classes, 1, 1}, 0.0);
  return model;
}

std::size_t l20_channel_norm(const ConvParams& params) {
  const std::size_t n = params.filters(), c = params.channels();
  const std::size_t area = params.kernel_h() * params.kernel_w();
  std::size_t count = 0;
  for (std::size_t k = 0; k < c; ++k) {
    bool nonzero = false;
    for (std::size_t j = 0; j < n && !nonzero; ++j) {
      const double* w = params.weights.raw() + (j * c + k) * area;
      nonzero = std::any_of(w, w + area, [](double v) { return v != 0.0; });
    }
    count += nonzero ? 1 : 0;
  }
  return count;
}

std::size_t l20_kernel_norm(const ConvParams& params) {
  const std::size_t kernels = params.filters() * params.channels();
  const std::size_t area = params.kernel_h() * params.kernel_w();
  std::size_t count = 0;
  for (std::size_t q = 0; q < kernels; ++q) {
    const double* w = params.weights.raw() + q * area;
    count += std::any_of(w, w + area, [](double v) { return v != 0.0; }) ? 1 : 0;
  }
  return count;
}

std::size_t ceil_fraction(double rate, std::size_t count) {
  // (1 - 0.3) * 10 evaluates to 7.000000000000001; treat such spill as exact.
  const double x = rate * static_cast<double>(count);
  return static_cast<std::size_t>(std::ceil(x - 1e-9));
}

std::size_t channel_budget(std::size_t c, double eta) {
  if (c == 0) {
    throw ConfigError("channel_budget needs c >= 1");
  }
  if (!(eta > 0.0 && eta < 1.0)) {
    throw ConfigError("pruning rate must lie in (0, 1), got " + std::to_string(eta));
  }
  return ceil_fraction(1.0 - eta, c);
}

void apply_masks(NetworkModel& model) {
  for (Block& b : model.blocks) {
    b.conv.check_masks();
    if (std::none_of(b.conv.channel_mask.begin(), b.conv.channel_mask.end(),
                     [](std::uint8_t m) { return m != 0; })) {
      throw ContractError("layer " + std::to_string(b.conv.layer_id) +
                          " has every input channel masked");
    }
    b.conv.enforce_masks();
  }
}

bool filter_removable(const NetworkModel& model, std::size_t layer, std::size_t filter) {
  // Both operands of a residual add keep their full width.
  if (layer >= model.layer_count() || model.feeds_residual(layer) ||
      model.block(layer).spec.residual_from) {
    return false;
  }
  return !model.block(layer + 1).conv.channel_live(filter);
}

NetworkModel compact_model(const NetworkModel& model) {
  NetworkModel masked = model;
  apply_masks(masked);
  NetworkModel out;
  out.arch = model.arch;
  out.classifier = model.classifier;
  out.role = model.role;
  const std::size_t layers = model.layer_count();

  // Filters kept per layer, and input channels kept per layer.
  std::vector<std::vector<std::size_t>> keep_filters(layers + 1), keep_channels(layers + 1);
  for (std::size_t l = 1; l <= layers; ++l) {
    const ConvParams& conv = masked.block(l).conv;
    for (std::size_t j = 0; j < conv.filters(); ++j) {
      if (!filter_removable(masked, l, j)) {
        keep_filters[l].push_back(j);
      }
    }
    if (keep_filters[l].empty()) {
      throw ContractError("layer " + std::to_string(l) + " would lose every filter");
    }
  }
  for (std::size_t l = 1; l <= layers; ++l) {
    const ConvParams& conv = masked.block(l).conv;
    for (std::size_t k = 0; k < conv.channels(); ++k) {
      const bool producer_kept =
          l == 1 || std::binary_search(keep_filters[l - 1].begin(), keep_filters[l - 1].end(), k);
      if (producer_kept) {
        keep_channels[l].push_back(k);
      }
    }
  }

  for (std::size_t l = 1; l <= layers; ++l) {
    const Block& src = masked.block(l);
    const ConvParams& conv = src.conv;
    const auto& fs = keep_filters[l];
    const auto& cs = keep_channels[l];
    const std::size_t area = conv.kernel_h() * conv.kernel_w();
    Block dst;
    dst.spec = src.spec;
    dst.spec.out_channels = fs.size();
    dst.spec.in_channels = cs.size();
    dst.conv.layer_id = conv.layer_id;
    dst.conv.weights = Tensor({fs.size(), cs.size(), conv.kernel_h(), conv.kernel_w()});
    dst.conv.channel_mask.resize(cs.size());
    dst.conv.kernel_mask.resize(fs.size() * cs.size());
    for (std::size_t a = 0; a < fs.size(); ++a) {
      for (std::size_t b = 0; b < cs.size(); ++b) {
        std::copy_n(conv.weights.raw() + (fs[a] * conv.channels() + cs[b]) * area, area,
                    dst.conv.weights.raw() + (a * cs.size() + b) * area);
        dst.conv.kernel_mask[a * cs.size() + b] = conv.kernel_live(fs[a], cs[b]) ? 1 : 0;
      }
    }
    for (std::size_t b = 0; b < cs.size(); ++b) {
      dst.conv.channel_mask[b] = conv.channel_live(cs[b]) ? 1 : 0;
    }
    if (!conv.bias.empty()) {
      for (std::size_t j : fs) {
        dst.conv.bias.push_back(conv.bias[j]);
      }
    }
    if (src.bn) {
      BatchNormParams bn;
      for (std::size_t j : fs) {
        bn.gamma.push_back(src.bn->gamma[j]);
        bn.beta.push_back(src.bn->beta[j]);
        bn.running_mean.push_back(src.bn->running_mean[j]);
        bn.running_var.push_back(src.bn->running_var[j]);
      }
      dst.bn = std::move(bn);
    }
    out.blocks.push_back(std::move(dst));
    out.arch.layers[l - 1].out_channels = fs.size();
    out.arch.layers[l - 1].in_channels = cs.size();
  }
  return out;
}

ModelStats count_stats(const NetworkModel& model) {
  ModelStats stats;
  const auto sizes = model.spatial_sizes();
  for (std::size_t l = 1; l <= model.layer_count(); ++l) {
    const Block& b = model.block(l);
    const ConvParams& conv = b.conv;
    LayerStats ls;
    ls.layer_id = static_cast<int>(l);
    const std::size_t area = conv.kernel_h() * conv.kernel_w();
    const std::size_t positions = sizes[l].first * sizes[l].second;
    for (std::size_t k = 0; k < conv.channels(); ++k) {
      ls.live_channels += conv.channel_live(k) ? 1 : 0;
    }
    for (std::size_t j = 0; j < conv.filters(); ++j) {
      if (filter_removable(model, l, j)) {
        continue;
      }
      ++ls.live_filters;
      for (std::size_t k = 0; k < conv.channels(); ++k) {
        ls.live_kernels += conv.kernel_live(j, k) ? 1 : 0;
      }
    }
    ls.params = ls.live_kernels * area + (conv.bias.empty() ? 0 : ls.live_filters) +
                (b.bn ? 2 * ls.live_filters : 0);
    ls.macs = ls.live_kernels * area * positions;
    ls.dense_macs = ls.live_filters * ls.live_channels * area * positions;
    stats.param_count += ls.params;
    stats.mac_count += ls.macs;
    stats.dense_mac_count += ls.dense_macs;
    stats.layers.push_back(ls);
  }
  const LossHead& c = model.classifier;
  stats.classifier_params = c.theta.size() + c.bias.size();
  stats.classifier_macs = c.theta.size();
  stats.param_count += stats.classifier_params;
  stats.mac_count += stats.classifier_macs;
  stats.dense_mac_count += stats.classifier_macs;
  return stats;
}

// ---------------------------------------------------------------------------

BlockParamNodes bind_block(GradTape& tape, const Block& block, bool requires_grad) {
  auto bind = [&](Tensor t) {
    return requires_grad ? tape.parameter(std::move(t)) : tape.constant(std::move(t));
  };
  BlockParamNodes nodes;
  nodes.weight = bind(block.conv.weights);
  if (!block.conv.bias.empty()) {
    nodes.bias = bind(Tensor({1, block.conv.bias.size(), 1, 1}, block.conv.bias));
  }
  if (block.bn) {
    nodes.gamma = bind(channel_tensor(block.bn->gamma));
    nodes.beta = bind(channel_tensor(block.bn->beta));
  }
  return nodes;
}

HeadParamNodes bind_head(GradTape& tape, const LossHead& head, bool requires_grad) {
  auto bind = [&](Tensor t) {
    return requires_grad ? tape.parameter(std::move(t)) : tape.constant(std::move(t));
  };
  HeadParamNodes nodes;
  if (head.bn) {
    nodes.gamma = bind(channel_tensor(head.bn->gamma));
    nodes.beta = bind(channel_tensor(head.bn->beta));
  }
  nodes.theta = bind(head.theta);
  if (head.has_bias()) {
    nodes.bias = bind(head.bias);
  }
  return nodes;
}

BlockNodes apply_block(GradTape& tape, Block& block, const BlockParamNodes& params, NodeId input,
                       NodeId residual, BnMode mode, const BnConfig& bn) {
  if (block.spec.residual_from.has_value() != residual.valid()) {
    throw ContractError("layer " + std::to_string(block.conv.layer_id) +
                        ": residual input does not match the block definition");
  }
  BlockNodes out;
  out.conv_output = ad::conv2d(tape, input, params.weight, block.conv, block.geometry(),
                               params.bias);
  NodeId h = out.conv_output;
  if (block.bn) {
    h = ad::batch_norm(tape, h, params.gamma, params.beta, *block.bn, mode, bn);
  }
  if (residual.valid()) {
    h = ad::add(tape, h, residual);
  }
  out.output = ad::relu(tape, h);
  return out;
}

NodeId apply_head(GradTape& tape, LossHead& head, const HeadParamNodes& params,
                  NodeId layer_output, BnMode mode, const BnConfig& bn) {
  if (tape.value(layer_output).dim(1) != head.input_channels()) {
    throw DimensionError("head at layer " + std::to_string(head.attach_layer) + " expects " +
                         std::to_string(head.input_channels()) + " channels, got " +
                         shape_string(tape.value(layer_output).shape()));
  }
  NodeId h = layer_output;
  if (head.bn) {
    h = ad::batch_norm(tape, h, params.gamma, params.beta, *head.bn, mode, bn);
    h = ad::relu(tape, h);
  }
  h = ad::avgpool_global(tape, h);
  return ad::linear(tape, h, params.theta, params.bias);
}

NetworkForward forward_network(GradTape& tape, NetworkModel& model, const Tensor& input,
                               BnMode mode, bool with_heads, bool requires_grad,
                               const BnConfig& bn) {
  NetworkForward fwd;
  fwd.activations.push_back(tape.constant(input));
  for (std::size_t l = 1; l <= model.layer_count(); ++l) {
    Block& block = model.block(l);
    fwd.block_params.push_back(bind_block(tape, block, requires_grad));
    const NodeId residual =
        block.spec.residual_from ? fwd.activations[*block.spec.residual_from] : NodeId{};
    const BlockNodes nodes = apply_block(tape, block, fwd.block_params.back(),
                                         fwd.activations.back(), residual, mode, bn);
    fwd.conv_outputs.push_back(nodes.conv_output);
    fwd.activations.push_back(nodes.output);
  }
  fwd.classifier_params = bind_head(tape, model.classifier, requires_grad);
  fwd.logits = apply_head(tape, model.classifier, fwd.classifier_params, fwd.activations.back(),
                          mode, bn);
  if (with_heads) {
    for (LossHead& head : model.heads) {
      fwd.head_params.push_back(bind_head(tape, head, requires_grad));
      fwd.head_logits.push_back(apply_head(tape, head, fwd.head_params.back(),
                                           fwd.activations.at(head.attach_layer), mode, bn));
    }
  }
  return fwd;
}

namespace {

Tensor add_tensors(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("residual add: shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    out[i] = a[i] + b[i];
  }
  return out;
}

}  // namespace

InferenceTrace infer_trace(const NetworkModel& model, const Tensor& input, std::size_t last_layer,
                           const BnConfig& bn) {
  if (last_layer > model.layer_count()) {
    throw ContractError("infer_trace past the last layer");
  }
  InferenceTrace trace;
  trace.activations.push_back(input);
  for (std::size_t l = 1; l <= last_layer; ++l) {
    const Block& block = model.block(l);
    Tensor o = conv2d(trace.activations.back(), block.conv, block.geometry());
    Tensor h = block.bn ? batch_norm(o, *block.bn, bn) : o;
    if (block.spec.residual_from) {
      h = add_tensors(h, trace.activations.at(*block.spec.residual_from));
    }
    trace.conv_outputs.push_back(std::move(o));
    trace.activations.push_back(relu(h));
  }
  return trace;
}

Tensor head_logits(const LossHead& head, const Tensor& layer_output, const BnConfig& bn) {
  if (layer_output.dim(1) != head.input_channels()) {
    throw DimensionError("head input channel mismatch");
  }
  Tensor h = layer_output;
  if (head.bn) {
    h = relu(batch_norm(h, *head.bn, bn));
  }
  const Tensor pooled = avgpool_global(h);
  return linear(pooled, head.theta, head.has_bias() ? &head.bias : nullptr);
}

Tensor infer_logits(const NetworkModel& model, const Tensor& input, const BnConfig& bn) {
  const InferenceTrace trace = infer_trace(model, input, model.layer_count(), bn);
  return head_logits(model.classifier, trace.activations.back(), bn);
}

}  // namespace dcp
