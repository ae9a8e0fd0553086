#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "dcp/tape.hpp"
#include "dcp/tensor.hpp"

namespace dcp {

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

/// Weights of one convolution (n filters x c channels x kh x kw) with channel
/// and kernel liveness masks.
///
/// A dead channel k removes input feature map k from every filter; a dead
/// kernel (j, k) removes only the connection between channel k and filter j.
/// channel_mask[k] == 0 implies kernel_mask[j, k] == 0 for all j.
struct ConvParams {
  Tensor weights;
  std::vector<double> bias;                 // empty when the layer has no bias
  std::vector<std::uint8_t> channel_mask;   // length c
  std::vector<std::uint8_t> kernel_mask;    // n * c, row-major by filter
  int layer_id = 0;

  /// Fully live parameters around the given weights.
  static ConvParams dense(Tensor weights, int layer_id = 0);

  std::size_t filters() const { return weights.dim(0); }
  std::size_t channels() const { return weights.dim(1); }
  std::size_t kernel_h() const { return weights.dim(2); }
  std::size_t kernel_w() const { return weights.dim(3); }

  bool channel_live(std::size_t k) const { return channel_mask[k] != 0; }
  bool kernel_live(std::size_t j, std::size_t k) const {
    return kernel_mask[j * channels() + k] != 0;
  }

  /// Throws ContractError if the masks disagree with each other or the weights.
  void check_masks() const;
  /// Zeroes every weight that sits in a dead kernel.
  void enforce_masks();
  /// Marks a channel dead iff all of its kernels are dead.
  void derive_channel_mask();
};

/// Output spatial extent for one axis; throws DimensionError if the kernel
/// does not fit in the padded input.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, const ConvGeometry& g);

// Accumulation order is fixed: each output element sums channel-major, then
// kernel row, then kernel column, skipping dead channels. The masked and the
// physically compacted layer therefore produce bit-identical outputs.

/// O[i, j] = sum_k X[i, k] * W[j, k] (+ bias[j]).
Tensor conv2d(const Tensor& x, const ConvParams& params, const ConvGeometry& geometry);

struct ConvGradients {
  Tensor weights;
  Tensor input;
  std::vector<double> bias;
};

ConvGradients conv2d_backward(const Tensor& x, const ConvParams& params,
                              const ConvGeometry& geometry, const Tensor& upstream);

/// Backward through the conv2d record that produced `output` on the tape.
/// Throws ContractError when `output` was not produced by a conv2d record.
ConvGradients conv2d_backward(const GradTape& tape, NodeId output, const Tensor& upstream);

namespace ad {

/// Taped convolution. `weights` holds the weight tensor; masks and bias
/// presence come from `layout`. `bias` may be invalid.
NodeId conv2d(GradTape& tape, NodeId x, NodeId weights, const ConvParams& layout,
              const ConvGeometry& geometry, NodeId bias = {});

}  // namespace ad

}  // namespace dcp
