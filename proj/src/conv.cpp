#include "dcp/conv.hpp"

#include <algorithm>
#include <string>

#include "dcp/errors.hpp"

#ifdef DCP_HAVE_OPENMP
#include <omp.h>
#endif

namespace dcp {

ConvParams ConvParams::dense(Tensor weights, int layer_id) {
  ConvParams p;
  p.channel_mask.assign(weights.dim(1), 1);
  p.kernel_mask.assign(weights.dim(0) * weights.dim(1), 1);
  p.weights = std::move(weights);
  p.layer_id = layer_id;
  return p;
}

void ConvParams::check_masks() const {
  const std::size_t n = filters();
  const std::size_t c = channels();
  if (channel_mask.size() != c || kernel_mask.size() != n * c) {
    throw ContractError("mask sizes do not match weights " + shape_string(weights.shape()));
  }
  if (!bias.empty() && bias.size() != n) {
    throw ContractError("bias length does not match filter count");
  }
  for (std::size_t k = 0; k < c; ++k) {
    if (channel_live(k)) {
      continue;
    }
    for (std::size_t j = 0; j < n; ++j) {
      if (kernel_live(j, k)) {
        throw ContractError("layer " + std::to_string(layer_id) + ": channel " +
                            std::to_string(k) + " is dead but kernel (" + std::to_string(j) +
                            "," + std::to_string(k) + ") is live");
      }
    }
  }
}

void ConvParams::enforce_masks() {
  const std::size_t n = filters();
  const std::size_t c = channels();
  const std::size_t area = kernel_h() * kernel_w();
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < c; ++k) {
      if (!kernel_live(j, k)) {
        std::fill_n(weights.raw() + (j * c + k) * area, area, 0.0);
      }
    }
  }
}

void ConvParams::derive_channel_mask() {
  const std::size_t n = filters();
  for (std::size_t k = 0; k < channels(); ++k) {
    bool any = false;
    for (std::size_t j = 0; j < n && !any; ++j) {
      any = kernel_live(j, k);
    }
    channel_mask[k] = any ? 1 : 0;
  }
}

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, const ConvGeometry& g) {
  if (g.stride == 0) {
    throw DimensionError("convolution stride must be positive");
  }
  if (in + 2 * g.pad < kernel) {
    throw DimensionError("kernel extent " + std::to_string(kernel) +
                         " does not fit padded input " + std::to_string(in + 2 * g.pad));
  }
  return (in + 2 * g.pad - kernel) / g.stride + 1;
}

namespace {

struct Dims {
  std::size_t batch, channels, in_h, in_w, filters, kh, kw, out_h, out_w, stride, pad;
  std::size_t rows() const { return channels * kh * kw; }
  std::size_t positions() const { return out_h * out_w; }
  std::size_t in_plane() const { return in_h * in_w; }
};

struct MaskView {
  const std::uint8_t* channel;
  const std::uint8_t* kernel;
};

Dims make_dims(const Tensor& x, const Tensor& w, const ConvGeometry& g) {
  if (x.dim(1) != w.dim(1)) {
    throw DimensionError("conv2d input " + shape_string(x.shape()) + " has " +
                         std::to_string(x.dim(1)) + " channels but weights " +
                         shape_string(w.shape()) + " expect " + std::to_string(w.dim(1)));
  }
  Dims d{};
  d.batch = x.dim(0);
  d.channels = x.dim(1);
  d.in_h = x.dim(2);
  d.in_w = x.dim(3);
  d.filters = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.out_h = conv_output_extent(d.in_h, d.kh, g);
  d.out_w = conv_output_extent(d.in_w, d.kw, g);
  d.stride = g.stride;
  d.pad = g.pad;
  return d;
}

void check_masks_shape(const Dims& d, const std::vector<std::uint8_t>& channel,
                       const std::vector<std::uint8_t>& kernel) {
  if (channel.size() != d.channels || kernel.size() != d.filters * d.channels) {
    throw DimensionError("conv2d mask sizes do not match weights");
  }
}

// Rows of the unfolded input that belong to live channels, in canonical order.
std::vector<std::size_t> live_rows(const Dims& d, const MaskView& m) {
  std::vector<std::size_t> rows;
  rows.reserve(d.rows());
  const std::size_t area = d.kh * d.kw;
  for (std::size_t k = 0; k < d.channels; ++k) {
    if (m.channel[k] == 0) {
      continue;
    }
    for (std::size_t q = 0; q < area; ++q) {
      rows.push_back(k * area + q);
    }
  }
  return rows;
}

// Weights with dead kernels zeroed, laid out [filter][row].
std::vector<double> effective_weights(const Dims& d, const double* w, const MaskView& m) {
  const std::size_t area = d.kh * d.kw;
  std::vector<double> we(w, w + d.filters * d.rows());
  for (std::size_t j = 0; j < d.filters; ++j) {
    for (std::size_t k = 0; k < d.channels; ++k) {
      if (m.kernel[j * d.channels + k] == 0) {
        std::fill_n(we.data() + j * d.rows() + k * area, area, 0.0);
      }
    }
  }
  return we;
}

// Unfolds one sample into col[row][position] for live channels only.
void im2col(const Dims& d, const double* x, const MaskView& m, double* col) {
  const std::size_t p_count = d.positions();
  for (std::size_t k = 0; k < d.channels; ++k) {
    if (m.channel[k] == 0) {
      continue;
    }
    const double* plane = x + k * d.in_plane();
    for (std::size_t r = 0; r < d.kh; ++r) {
      for (std::size_t s = 0; s < d.kw; ++s) {
        double* dst = col + ((k * d.kh + r) * d.kw + s) * p_count;
        for (std::size_t oy = 0; oy < d.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * d.stride + r) -
                                    static_cast<std::ptrdiff_t>(d.pad);
          double* row = dst + oy * d.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.in_h)) {
            std::fill_n(row, d.out_w, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(iy) * d.in_w;
          for (std::size_t ox = 0; ox < d.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * d.stride + s) -
                                      static_cast<std::ptrdiff_t>(d.pad);
            row[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(d.in_w))
                          ? 0.0
                          : src[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

// Scatters col gradients back onto one sample's input gradient.
void col2im(const Dims& d, const double* gcol, const MaskView& m, double* gx) {
  const std::size_t p_count = d.positions();
  for (std::size_t k = 0; k < d.channels; ++k) {
    if (m.channel[k] == 0) {
      continue;
    }
    double* plane = gx + k * d.in_plane();
    for (std::size_t r = 0; r < d.kh; ++r) {
      for (std::size_t s = 0; s < d.kw; ++s) {
        const double* src = gcol + ((k * d.kh + r) * d.kw + s) * p_count;
        for (std::size_t oy = 0; oy < d.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * d.stride + r) -
                                    static_cast<std::ptrdiff_t>(d.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(d.in_h)) {
            continue;
          }
          double* row = plane + static_cast<std::size_t>(iy) * d.in_w;
          for (std::size_t ox = 0; ox < d.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * d.stride + s) -
                                      static_cast<std::ptrdiff_t>(d.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(d.in_w)) {
              row[static_cast<std::size_t>(ix)] += src[oy * d.out_w + ox];
            }
          }
        }
      }
    }
  }
}

void forward_sample(const Dims& d, const double* we, const std::vector<std::size_t>& rows,
                    const double* col, const double* bias, double* out) {
  const std::size_t p_count = d.positions();
  const std::size_t row_len = d.rows();
  std::fill_n(out, d.filters * p_count, 0.0);
  std::size_t j = 0;
  for (; j + 4 <= d.filters; j += 4) {
    double* o0 = out + j * p_count;
    double* o1 = o0 + p_count;
    double* o2 = o1 + p_count;
    double* o3 = o2 + p_count;
    const double* w0 = we + j * row_len;
    const double* w1 = w0 + row_len;
    const double* w2 = w1 + row_len;
    const double* w3 = w2 + row_len;
    for (std::size_t row : rows) {
      const double a0 = w0[row], a1 = w1[row], a2 = w2[row], a3 = w3[row];
      const double* c = col + row * p_count;
      for (std::size_t p = 0; p < p_count; ++p) {
        const double v = c[p];
        o0[p] += a0 * v;
        o1[p] += a1 * v;
        o2[p] += a2 * v;
        o3[p] += a3 * v;
      }
    }
  }
  for (; j < d.filters; ++j) {
    double* o = out + j * p_count;
    const double* w = we + j * row_len;
    for (std::size_t row : rows) {
      const double a = w[row];
      const double* c = col + row * p_count;
      for (std::size_t p = 0; p < p_count; ++p) {
        o[p] += a * c[p];
      }
    }
  }
  if (bias != nullptr) {
    for (std::size_t f = 0; f < d.filters; ++f) {
      double* o = out + f * p_count;
      for (std::size_t p = 0; p < p_count; ++p) {
        o[p] += bias[f];
      }
    }
  }
}

Tensor forward_impl(const Tensor& x, const Tensor& w, const std::vector<double>& bias,
                    const std::vector<std::uint8_t>& channel,
                    const std::vector<std::uint8_t>& kernel, const ConvGeometry& g) {
  const Dims d = make_dims(x, w, g);
  check_masks_shape(d, channel, kernel);
  if (!bias.empty() && bias.size() != d.filters) {
    throw DimensionError("conv2d bias length does not match filter count");
  }
  const MaskView m{channel.data(), kernel.data()};
  const std::vector<std::size_t> rows = live_rows(d, m);
  const std::vector<double> we = effective_weights(d, w.raw(), m);
  Tensor out({d.batch, d.filters, d.out_h, d.out_w});
  const std::size_t col_size = d.rows() * d.positions();
  const double* bias_ptr = bias.empty() ? nullptr : bias.data();

#pragma omp parallel
  {
    std::vector<double> col(col_size, 0.0);
#pragma omp for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(d.batch); ++i) {
      const std::size_t n = static_cast<std::size_t>(i);
      im2col(d, x.raw() + n * x.sample_size(), m, col.data());
      forward_sample(d, we.data(), rows, col.data(), bias_ptr,
                     out.raw() + n * out.sample_size());
    }
  }
  require_finite(out, "conv2d output");
  return out;
}

constexpr std::size_t kReduceChunk = 8;

ConvGradients backward_impl(const Tensor& x, const Tensor& w, bool has_bias,
                            const std::vector<std::uint8_t>& channel,
                            const std::vector<std::uint8_t>& kernel, const ConvGeometry& g,
                            const Tensor& upstream, bool need_input_grad,
                            bool need_weight_grad) {
  const Dims d = make_dims(x, w, g);
  check_masks_shape(d, channel, kernel);
  if (upstream.shape() != Tensor::Shape{d.batch, d.filters, d.out_h, d.out_w}) {
    throw DimensionError("conv2d upstream gradient " + shape_string(upstream.shape()) +
                         " does not match output shape");
  }
  const MaskView m{channel.data(), kernel.data()};
  const std::vector<std::size_t> rows = live_rows(d, m);
  const std::vector<double> we = effective_weights(d, w.raw(), m);
  const std::size_t p_count = d.positions();
  const std::size_t row_len = d.rows();
  const std::size_t wsize = d.filters * row_len;

  ConvGradients grads;
  grads.weights = Tensor(w.shape(), 0.0);
  if (need_input_grad) {
    grads.input = Tensor(x.shape(), 0.0);
  }
  if (has_bias) {
    grads.bias.assign(d.filters, 0.0);
  }

  // Weight gradients are reduced per fixed-size sample chunk and then summed in
  // chunk order, so the result does not depend on the thread count.
  const std::size_t chunks = (d.batch + kReduceChunk - 1) / kReduceChunk;
  std::vector<double> partial(need_weight_grad ? chunks * wsize : 0, 0.0);

#pragma omp parallel
  {
    std::vector<double> col(row_len * p_count, 0.0);
    std::vector<double> colt(row_len * p_count, 0.0);
    std::vector<double> gcol(row_len * p_count, 0.0);
#pragma omp for schedule(static)
    for (std::ptrdiff_t ci = 0; ci < static_cast<std::ptrdiff_t>(chunks); ++ci) {
      const std::size_t chunk = static_cast<std::size_t>(ci);
      const std::size_t end = std::min(d.batch, (chunk + 1) * kReduceChunk);
      for (std::size_t n = chunk * kReduceChunk; n < end; ++n) {
        const double* up = upstream.raw() + n * upstream.sample_size();
        if (need_weight_grad) {
          im2col(d, x.raw() + n * x.sample_size(), m, col.data());
          // Transpose to [position][row] so the weight-gradient update is an
          // axpy over rows with positions accumulated in order.
          for (std::size_t row : rows) {
            const double* src = col.data() + row * p_count;
            for (std::size_t p = 0; p < p_count; ++p) {
              colt[p * row_len + row] = src[p];
            }
          }
          // Rows of dead channels stay zero in colt, so a dense axpy is exact.
          double* gw = partial.data() + chunk * wsize;
          for (std::size_t j = 0; j < d.filters; ++j) {
            double* gwj = gw + j * row_len;
            const double* upj = up + j * p_count;
            for (std::size_t p = 0; p < p_count; ++p) {
              const double gv = upj[p];
              const double* ct = colt.data() + p * row_len;
              for (std::size_t r = 0; r < row_len; ++r) {
                gwj[r] += gv * ct[r];
              }
            }
          }
        }
        if (need_input_grad) {
          for (std::size_t row : rows) {
            double* gc = gcol.data() + row * p_count;
            std::fill_n(gc, p_count, 0.0);
            for (std::size_t j = 0; j < d.filters; ++j) {
              const double a = we[j * row_len + row];
              if (a == 0.0) {
                continue;
              }
              const double* upj = up + j * p_count;
              for (std::size_t p = 0; p < p_count; ++p) {
                gc[p] += a * upj[p];
              }
            }
          }
          col2im(d, gcol.data(), m, grads.input.raw() + n * x.sample_size());
        }
      }
    }
  }

  double* gw = grads.weights.raw();
  for (std::size_t chunk = 0; chunk < chunks && need_weight_grad; ++chunk) {
    const double* src = partial.data() + chunk * wsize;
    for (std::size_t i = 0; i < wsize; ++i) {
      gw[i] += src[i];
    }
  }
  // A dead kernel does not influence the output.
  const std::size_t area = d.kh * d.kw;
  for (std::size_t j = 0; j < d.filters; ++j) {
    for (std::size_t k = 0; k < d.channels; ++k) {
      if (m.kernel[j * d.channels + k] == 0) {
        std::fill_n(gw + j * row_len + k * area, area, 0.0);
      }
    }
  }
  if (has_bias) {
    for (std::size_t n = 0; n < d.batch; ++n) {
      const double* up = upstream.raw() + n * upstream.sample_size();
      for (std::size_t j = 0; j < d.filters; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < p_count; ++p) {
          s += up[j * p_count + p];
        }
        grads.bias[j] += s;
      }
    }
  }
  require_finite(grads.weights, "conv2d weight gradient");
  if (need_input_grad) {
    require_finite(grads.input, "conv2d input gradient");
  }
  return grads;
}

struct ConvSaved {
  ConvGeometry geometry;
  std::vector<std::uint8_t> channel_mask;
  std::vector<std::uint8_t> kernel_mask;
  bool has_bias = false;
};

}  // namespace

Tensor conv2d(const Tensor& x, const ConvParams& params, const ConvGeometry& geometry) {
  return forward_impl(x, params.weights, params.bias, params.channel_mask, params.kernel_mask,
                      geometry);
}

ConvGradients conv2d_backward(const Tensor& x, const ConvParams& params,
                              const ConvGeometry& geometry, const Tensor& upstream) {
  return backward_impl(x, params.weights, !params.bias.empty(), params.channel_mask,
                       params.kernel_mask, geometry, upstream, true, true);
}

ConvGradients conv2d_backward(const GradTape& tape, NodeId output, const Tensor& upstream) {
  const OpRecord* rec = tape.producer(output);
  if (rec == nullptr || rec->kind != OpKind::Conv2d) {
    throw ContractError("no conv2d record on the tape for node " + std::to_string(output.index));
  }
  const auto& saved = std::any_cast<const ConvSaved&>(rec->saved);
  return backward_impl(tape.value(rec->inputs[0]), tape.value(rec->inputs[1]), saved.has_bias,
                       saved.channel_mask, saved.kernel_mask, saved.geometry, upstream, true,
                       true);
}

namespace ad {

NodeId conv2d(GradTape& tape, NodeId x, NodeId weights, const ConvParams& layout,
              const ConvGeometry& geometry, NodeId bias) {
  std::vector<double> bias_values;
  std::vector<NodeId> inputs{x, weights};
  if (bias.valid()) {
    const Tensor& b = tape.value(bias);
    bias_values.assign(b.data().begin(), b.data().end());
    inputs.push_back(bias);
  }
  Tensor out = forward_impl(tape.value(x), tape.value(weights), bias_values, layout.channel_mask,
                            layout.kernel_mask, geometry);
  ConvSaved saved{geometry, layout.channel_mask, layout.kernel_mask, bias.valid()};
  return tape.record(
      OpKind::Conv2d, std::move(inputs), std::move(out),
      [](GradTape& t, const OpRecord& rec, const Tensor& up) {
        const auto& s = std::any_cast<const ConvSaved&>(rec.saved);
        const bool need_x = t.requires_grad(rec.inputs[0]);
        const bool need_w = t.requires_grad(rec.inputs[1]);
        ConvGradients g = backward_impl(t.value(rec.inputs[0]), t.value(rec.inputs[1]),
                                        s.has_bias, s.channel_mask, s.kernel_mask, s.geometry,
                                        up, need_x, need_w);
        if (need_x) {
          t.accumulate(rec.inputs[0], g.input);
        }
        if (need_w) {
          t.accumulate(rec.inputs[1], g.weights);
        }
        if (s.has_bias) {
          const Tensor::Shape bs = t.value(rec.inputs[2]).shape();
          t.accumulate(rec.inputs[2], Tensor(bs, std::move(g.bias)));
        }
      },
      std::move(saved));
}

}  // namespace ad

}  // namespace dcp
