#include "dcp/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dcp/errors.hpp"

namespace dcp {

BatchNormParams BatchNormParams::identity(std::size_t channels) {
  return BatchNormParams{std::vector<double>(channels, 1.0), std::vector<double>(channels, 0.0),
                         std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
}

Tensor channel_tensor(std::span<const double> values) {
  return Tensor({1, values.size(), 1, 1}, std::vector<double>(values.begin(), values.end()));
}

namespace {

void check_bn_config(const BnConfig& config) {
  if (!(config.epsilon >= 0.0)) {
    throw ConfigError("batch-norm epsilon must be non-negative");
  }
  if (!(config.momentum >= 0.0 && config.momentum <= 1.0)) {
    throw ConfigError("batch-norm momentum must lie in [0, 1]");
  }
}

struct BnSaved {
  BnMode mode;
  Tensor xhat;
  std::vector<double> inv_std;
};

// Shared forward for the plain and taped variants.
Tensor bn_forward(const Tensor& x, std::span<const double> gamma, std::span<const double> beta,
                  BatchNormParams& bn, BnMode mode, const BnConfig& config, BnSaved* saved) {
  check_bn_config(config);
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.plane_size();
  if (gamma.size() != c || beta.size() != c) {
    throw DimensionError("batch_norm parameters have " + std::to_string(gamma.size()) +
                         " channels, input " + shape_string(x.shape()));
  }
  if (bn.running_mean.size() != c || bn.running_var.size() != c) {
    throw ContractError("batch_norm running statistics are not populated for " +
                        std::to_string(c) + " channels");
  }
  const std::size_t count = n * plane;
  std::vector<double> mean(c, 0.0), inv_std(c, 0.0);
  if (mode == BnMode::Train) {
    if (count == 0) {
      throw DimensionError("batch_norm in train mode needs a non-empty batch");
    }
    std::vector<double> var(c, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double* p = x.raw() + (i * c + ch) * plane;
        for (std::size_t q = 0; q < plane; ++q) {
          s += p[q];
        }
      }
      const double mu = s / static_cast<double>(count);
      double v = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double* p = x.raw() + (i * c + ch) * plane;
        for (std::size_t q = 0; q < plane; ++q) {
          const double d = p[q] - mu;
          v += d * d;
        }
      }
      mean[ch] = mu;
      var[ch] = v / static_cast<double>(count);
      inv_std[ch] = 1.0 / std::sqrt(var[ch] + config.epsilon);
      const double unbiased =
          count > 1 ? var[ch] * static_cast<double>(count) / static_cast<double>(count - 1)
                    : var[ch];
      bn.running_mean[ch] = (1.0 - config.momentum) * bn.running_mean[ch] + config.momentum * mu;
      bn.running_var[ch] =
          (1.0 - config.momentum) * bn.running_var[ch] + config.momentum * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = bn.running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(bn.running_var[ch] + config.epsilon);
    }
  }
  Tensor out(x.shape());
  Tensor xhat(saved != nullptr ? x.shape() : Tensor::Shape{0, 0, 0, 0});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (i * c + ch) * plane;
      const double* p = x.raw() + off;
      double* o = out.raw() + off;
      for (std::size_t q = 0; q < plane; ++q) {
        const double h = (p[q] - mean[ch]) * inv_std[ch];
        o[q] = gamma[ch] * h + beta[ch];
        if (saved != nullptr) {
          xhat[off + q] = h;
        }
      }
    }
  }
  require_finite(out, "batch_norm output");
  if (saved != nullptr) {
    saved->mode = mode;
    saved->xhat = std::move(xhat);
    saved->inv_std = std::move(inv_std);
  }
  return out;
}

void check_labels(std::span<const int> labels, std::size_t n, std::size_t m) {
  if (n == 0) {
    throw DimensionError("softmax_cross_entropy needs at least one sample");
  }
  if (labels.size() != n) {
    throw DimensionError("softmax_cross_entropy got " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(n) + " samples");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= m) {
      throw InputError("label " + std::to_string(y) + " outside [0, " + std::to_string(m) + ")");
    }
  }
}

void check_logits_shape(const Tensor& logits) {
  if (logits.dim(2) != 1 || logits.dim(3) != 1) {
    throw DimensionError("logits must have shape [N, m, 1, 1], got " +
                         shape_string(logits.shape()));
  }
}

// Row-wise softmax probabilities and the mean NLL.
double softmax_rows(const Tensor& logits, std::span<const int> labels, std::vector<double>* probs) {
  const std::size_t n = logits.dim(0), m = logits.dim(1);
  if (probs != nullptr) {
    probs->assign(n * m, 0.0);
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = logits.raw() + i * m;
    const double zmax = *std::max_element(z, z + m);
    double s = 0.0;
    for (std::size_t t = 0; t < m; ++t) {
      s += std::exp(z[t] - zmax);
    }
    const double lse = zmax + std::log(s);
    total += lse - z[labels[i]];
    if (probs != nullptr) {
      for (std::size_t t = 0; t < m; ++t) {
        (*probs)[i * m + t] = std::exp(z[t] - lse);
      }
    }
  }
  return total / static_cast<double>(n);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
}

void check_linear(const Tensor& f, const Tensor& theta, const Tensor* bias) {
  if (f.dim(2) != 1 || f.dim(3) != 1 || theta.dim(2) != 1 || theta.dim(3) != 1) {
    throw DimensionError("linear expects [N,d,1,1] features and [d,m,1,1] weights");
  }
  if (f.dim(1) != theta.dim(0)) {
    throw DimensionError("linear: features " + shape_string(f.shape()) + " vs weights " +
                         shape_string(theta.shape()));
  }
  if (bias != nullptr && bias->shape() != Tensor::Shape{1, theta.dim(1), 1, 1}) {
    throw DimensionError("linear: bias shape " + shape_string(bias->shape()));
  }
}

}  // namespace

Tensor batch_norm(const Tensor& x, BatchNormParams& bn, BnMode mode, const BnConfig& config) {
  return bn_forward(x, bn.gamma, bn.beta, bn, mode, config, nullptr);
}

Tensor batch_norm(const Tensor& x, const BatchNormParams& bn, const BnConfig& config) {
  // Frozen mode only reads the running statistics.
  auto& stats = const_cast<BatchNormParams&>(bn);
  return bn_forward(x, bn.gamma, bn.beta, stats, BnMode::Frozen, config, nullptr);
}

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = x[i] > 0.0 ? x[i] : 0.0;
  }
  require_finite(out, "relu output");
  return out;
}

Tensor avgpool_global(const Tensor& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.plane_size();
  if (plane == 0) {
    throw DimensionError("avgpool_global on empty spatial extent");
  }
  Tensor out({n, c, 1, 1});
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    const double* p = x.raw() + i * plane;
    for (std::size_t q = 0; q < plane; ++q) {
      s += p[q];
    }
    out[i] = s / static_cast<double>(plane);
  }
  require_finite(out, "avgpool_global output");
  return out;
}

Tensor linear(const Tensor& features, const Tensor& theta, const Tensor* bias) {
  check_linear(features, theta, bias);
  const std::size_t n = features.dim(0), d = features.dim(1), m = theta.dim(1);
  Tensor out({n, m, 1, 1});
  for (std::size_t i = 0; i < n; ++i) {
    double* o = out.raw() + i * m;
    if (bias != nullptr) {
      std::copy_n(bias->raw(), m, o);
    }
    for (std::size_t k = 0; k < d; ++k) {
      const double f = features[i * d + k];
      const double* th = theta.raw() + k * m;
      for (std::size_t t = 0; t < m; ++t) {
        o[t] += f * th[t];
      }
    }
  }
  require_finite(out, "linear output");
  return out;
}

double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  check_logits_shape(logits);
  check_labels(labels, logits.dim(0), logits.dim(1));
  const double loss = softmax_rows(logits, labels, nullptr);
  if (!std::isfinite(loss)) {
    throw NumericError("softmax_cross_entropy is not finite");
  }
  return loss;
}

double mse_feature_loss(const Tensor& baseline, const Tensor& output) {
  check_same_shape(baseline, output, "mse_feature_loss");
  if (output.size() == 0) {
    throw DimensionError("mse_feature_loss on empty tensors");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < output.size(); ++i) {
    const double d = baseline[i] - output[i];
    s += d * d;
  }
  const double loss = s / (2.0 * static_cast<double>(output.size()));
  if (!std::isfinite(loss)) {
    throw NumericError("mse_feature_loss is not finite");
  }
  return loss;
}

namespace ad {

NodeId batch_norm(GradTape& tape, NodeId x, NodeId gamma, NodeId beta, BatchNormParams& bn,
                  BnMode mode, const BnConfig& config) {
  BnSaved saved;
  Tensor out = bn_forward(tape.value(x), tape.value(gamma).data(), tape.value(beta).data(), bn,
                          mode, config, &saved);
  return tape.record(
      OpKind::BatchNorm, {x, gamma, beta}, std::move(out),
      [](GradTape& t, const OpRecord& rec, const Tensor& up) {
        const auto& s = std::any_cast<const BnSaved&>(rec.saved);
        const Tensor& g = t.value(rec.inputs[1]);
        const std::size_t n = up.dim(0), c = up.dim(1), plane = up.plane_size();
        const double count = static_cast<double>(n * plane);
        Tensor dgamma({1, c, 1, 1}), dbeta({1, c, 1, 1});
        Tensor dx(up.shape());
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t off = (i * c + ch) * plane;
            for (std::size_t q = 0; q < plane; ++q) {
              sum_dy += up[off + q];
              sum_dy_xhat += up[off + q] * s.xhat[off + q];
            }
          }
          dgamma[ch] = sum_dy_xhat;
          dbeta[ch] = sum_dy;
          const double scale = g[ch] * s.inv_std[ch];
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t off = (i * c + ch) * plane;
            for (std::size_t q = 0; q < plane; ++q) {
              if (s.mode == BnMode::Train) {
                dx[off + q] = scale * (up[off + q] - sum_dy / count -
                                       s.xhat[off + q] * sum_dy_xhat / count);
              } else {
                dx[off + q] = scale * up[off + q];
              }
            }
          }
        }
        t.accumulate(rec.inputs[0], dx);
        t.accumulate(rec.inputs[1], dgamma);
        t.accumulate(rec.inputs[2], dbeta);
      },
      std::move(saved));
}

NodeId relu(GradTape& tape, NodeId x) {
  return tape.record(OpKind::Relu, {x}, dcp::relu(tape.value(x)),
                     [](GradTape& t, const OpRecord& rec, const Tensor& up) {
                       const Tensor& in = t.value(rec.inputs[0]);
                       Tensor dx(in.shape());
                       for (std::size_t i = 0; i < in.size(); ++i) {
                         dx[i] = in[i] > 0.0 ? up[i] : 0.0;
                       }
                       t.accumulate(rec.inputs[0], dx);
                     });
}

NodeId avgpool_global(GradTape& tape, NodeId x) {
  return tape.record(OpKind::AvgPoolGlobal, {x}, dcp::avgpool_global(tape.value(x)),
                     [](GradTape& t, const OpRecord& rec, const Tensor& up) {
                       const Tensor& in = t.value(rec.inputs[0]);
                       const std::size_t plane = in.plane_size();
                       const double inv = 1.0 / static_cast<double>(plane);
                       Tensor dx(in.shape());
                       for (std::size_t i = 0; i < up.size(); ++i) {
                         std::fill_n(dx.raw() + i * plane, plane, up[i] * inv);
                       }
                       t.accumulate(rec.inputs[0], dx);
                     });
}

NodeId linear(GradTape& tape, NodeId features, NodeId theta, NodeId bias) {
  const Tensor* b = bias.valid() ? &tape.value(bias) : nullptr;
  Tensor out = dcp::linear(tape.value(features), tape.value(theta), b);
  std::vector<NodeId> inputs{features, theta};
  if (bias.valid()) {
    inputs.push_back(bias);
  }
  return tape.record(
      OpKind::Linear, std::move(inputs), std::move(out),
      [](GradTape& t, const OpRecord& rec, const Tensor& up) {
        const Tensor& f = t.value(rec.inputs[0]);
        const Tensor& th = t.value(rec.inputs[1]);
        const std::size_t n = f.dim(0), d = f.dim(1), m = th.dim(1);
        if (t.requires_grad(rec.inputs[0])) {
          Tensor df(f.shape());
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t k = 0; k < d; ++k) {
              double s = 0.0;
              for (std::size_t c = 0; c < m; ++c) {
                s += up[i * m + c] * th[k * m + c];
              }
              df[i * d + k] = s;
            }
          }
          t.accumulate(rec.inputs[0], df);
        }
        if (t.requires_grad(rec.inputs[1])) {
          Tensor dth(th.shape());
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t k = 0; k < d; ++k) {
              const double fv = f[i * d + k];
              for (std::size_t c = 0; c < m; ++c) {
                dth[k * m + c] += fv * up[i * m + c];
              }
            }
          }
          t.accumulate(rec.inputs[1], dth);
        }
        if (rec.inputs.size() > 2) {
          Tensor db({1, m, 1, 1});
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < m; ++c) {
              db[c] += up[i * m + c];
            }
          }
          t.accumulate(rec.inputs[2], db);
        }
      });
}

NodeId softmax_cross_entropy(GradTape& tape, NodeId logits, std::span<const int> labels) {
  const Tensor& z = tape.value(logits);
  check_logits_shape(z);
  check_labels(labels, z.dim(0), z.dim(1));
  std::vector<double> probs;
  const double loss = softmax_rows(z, labels, &probs);
  if (!std::isfinite(loss)) {
    throw NumericError("softmax_cross_entropy is not finite");
  }
  std::vector<int> saved_labels(labels.begin(), labels.end());
  return tape.record(
      OpKind::SoftmaxCrossEntropy, {logits}, Tensor::scalar(loss),
      [probs = std::move(probs), labels = std::move(saved_labels)](
          GradTape& t, const OpRecord& rec, const Tensor& up) {
        const Tensor& zin = t.value(rec.inputs[0]);
        const std::size_t n = zin.dim(0), m = zin.dim(1);
        const double scale = up.item() / static_cast<double>(n);
        Tensor dz(zin.shape());
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t c = 0; c < m; ++c) {
            dz[i * m + c] = probs[i * m + c] * scale;
          }
          dz[i * m + static_cast<std::size_t>(labels[i])] -= scale;
        }
        t.accumulate(rec.inputs[0], dz);
      });
}

NodeId mse_feature_loss(GradTape& tape, NodeId baseline, NodeId output) {
  const double loss = dcp::mse_feature_loss(tape.value(baseline), tape.value(output));
  return tape.record(OpKind::MseFeatureLoss, {baseline, output}, Tensor::scalar(loss),
                     [](GradTape& t, const OpRecord& rec, const Tensor& up) {
                       const Tensor& b = t.value(rec.inputs[0]);
                       const Tensor& o = t.value(rec.inputs[1]);
                       const double scale = up.item() / static_cast<double>(o.size());
                       Tensor d_out(o.shape());
                       for (std::size_t i = 0; i < o.size(); ++i) {
                         d_out[i] = (o[i] - b[i]) * scale;
                       }
                       if (t.requires_grad(rec.inputs[0])) {
                         Tensor d_base(b.shape());
                         for (std::size_t i = 0; i < b.size(); ++i) {
                           d_base[i] = -d_out[i];
                         }
                         t.accumulate(rec.inputs[0], d_base);
                       }
                       t.accumulate(rec.inputs[1], d_out);
                     });
}

NodeId add(GradTape& tape, NodeId a, NodeId b) {
  const Tensor& va = tape.value(a);
  const Tensor& vb = tape.value(b);
  check_same_shape(va, vb, "add");
  Tensor out(va.shape());
  for (std::size_t i = 0; i < va.size(); ++i) {
    out[i] = va[i] + vb[i];
  }
  require_finite(out, "add output");
  return tape.record(OpKind::Add, {a, b}, std::move(out),
                     [](GradTape& t, const OpRecord& rec, const Tensor& up) {
                       t.accumulate(rec.inputs[0], up);
                       t.accumulate(rec.inputs[1], up);
                     });
}

NodeId scale(GradTape& tape, NodeId a, double factor) {
  const Tensor& va = tape.value(a);
  Tensor out(va.shape());
  for (std::size_t i = 0; i < va.size(); ++i) {
    out[i] = va[i] * factor;
  }
  require_finite(out, "scale output");
  return tape.record(OpKind::Scale, {a}, std::move(out),
                     [factor](GradTape& t, const OpRecord& rec, const Tensor& up) {
                       Tensor d(up.shape());
                       for (std::size_t i = 0; i < up.size(); ++i) {
                         d[i] = up[i] * factor;
                       }
                       t.accumulate(rec.inputs[0], d);
                     });
}

}  // namespace ad

}  // namespace dcp
