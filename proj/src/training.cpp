#include "dcp/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "dcp/dataset.hpp"
#include "dcp/errors.hpp"
#include "dcp/rng.hpp"

namespace dcp {

double TrainSchedule::lr_at(std::size_t epoch) const {
  double rate = lr;
  for (std::size_t m : milestones) {
    if (epoch >= m) {
      rate *= lr_decay;
    }
  }
  return rate;
}

void TrainSchedule::validate() const {
  if (batch == 0) {
    throw ConfigError("training batch size must be positive");
  }
  if (!(lr > 0.0) || !(momentum >= 0.0 && momentum < 1.0) || !(weight_decay >= 0.0)) {
    throw ConfigError("training needs lr > 0, momentum in [0, 1) and weight_decay >= 0");
  }
  if (!std::is_sorted(milestones.begin(), milestones.end())) {
    throw ConfigError("learning-rate milestones must be increasing");
  }
}

void to_json(nlohmann::json& j, const TrainSchedule& s) {
  j = nlohmann::json{{"epochs", s.epochs},   {"batch", s.batch},
                     {"lr", s.lr},           {"momentum", s.momentum},
                     {"weight_decay", s.weight_decay}, {"milestones", s.milestones},
                     {"lr_decay", s.lr_decay}, {"flip", s.flip},
                     {"head_weights", s.head_weights}};
}

void from_json(const nlohmann::json& j, TrainSchedule& s) {
  TrainSchedule d;
  s.epochs = j.value("epochs", d.epochs);
  s.batch = j.value("batch", d.batch);
  s.lr = j.value("lr", d.lr);
  s.momentum = j.value("momentum", d.momentum);
  s.weight_decay = j.value("weight_decay", d.weight_decay);
  s.milestones = j.value("milestones", d.milestones);
  s.lr_decay = j.value("lr_decay", d.lr_decay);
  s.flip = j.value("flip", d.flip);
  s.head_weights = j.value("head_weights", d.head_weights);
}

namespace {

// A trainable tensor somewhere in the model, flattened for the optimizer.
struct Slot {
  double* data;
  std::size_t size;
};

std::vector<Slot> slots_of(NetworkModel& model, bool with_heads) {
  std::vector<Slot> out;
  auto vec = [&](std::vector<double>& v) { out.push_back({v.data(), v.size()}); };
  auto ten = [&](Tensor& t) { out.push_back({t.raw(), t.size()}); };
  auto head = [&](LossHead& h) {
    if (h.bn) {
      vec(h.bn->gamma);
      vec(h.bn->beta);
    }
    ten(h.theta);
    if (h.has_bias()) {
      ten(h.bias);
    }
  };
  for (Block& b : model.blocks) {
    ten(b.conv.weights);
    if (!b.conv.bias.empty()) {
      vec(b.conv.bias);
    }
    if (b.bn) {
      vec(b.bn->gamma);
      vec(b.bn->beta);
    }
  }
  head(model.classifier);
  if (with_heads) {
    for (LossHead& h : model.heads) {
      head(h);
    }
  }
  return out;
}

// Gradients in the same order as slots_of.
std::vector<Tensor> grads_of(const GradTape& tape, const NetworkForward& fwd,
                             const NetworkModel& model, bool with_heads) {
  std::vector<Tensor> out;
  auto head = [&](const HeadParamNodes& p, const LossHead& h) {
    if (h.bn) {
      out.push_back(tape.grad(p.gamma));
      out.push_back(tape.grad(p.beta));
    }
    out.push_back(tape.grad(p.theta));
    if (h.has_bias()) {
      out.push_back(tape.grad(p.bias));
    }
  };
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const BlockParamNodes& p = fwd.block_params[l];
    out.push_back(tape.grad(p.weight));
    if (!model.blocks[l].conv.bias.empty()) {
      out.push_back(tape.grad(p.bias));
    }
    if (model.blocks[l].bn) {
      out.push_back(tape.grad(p.gamma));
      out.push_back(tape.grad(p.beta));
    }
  }
  head(fwd.classifier_params, model.classifier);
  if (with_heads) {
    for (std::size_t h = 0; h < model.heads.size(); ++h) {
      head(fwd.head_params[h], model.heads[h]);
    }
  }
  return out;
}

}  // namespace

TrainLog train_network(NetworkModel& model, const Tensor& images, std::span<const int> labels,
                       const TrainSchedule& schedule, std::uint64_t seed, bool with_heads) {
  schedule.validate();
  const std::size_t n = images.dim(0);
  if (n == 0 || labels.size() != n) {
    throw InputError("training needs a non-empty image set with one label per image");
  }
  if (!schedule.head_weights.empty() && schedule.head_weights.size() != model.heads.size()) {
    throw ConfigError("head_weights lists " + std::to_string(schedule.head_weights.size()) +
                      " weights for " + std::to_string(model.heads.size()) + " heads");
  }
  apply_masks(model);
  const std::vector<Slot> slots = slots_of(model, with_heads);
  std::vector<std::vector<double>> velocity;
  for (const Slot& s : slots) {
    velocity.emplace_back(s.size, 0.0);
  }

  TrainLog log;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  bool first = true;
  for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    const double lr = schedule.lr_at(epoch);
    rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    for (std::size_t begin = 0; begin < n; begin += schedule.batch) {
      const std::size_t count = std::min(schedule.batch, n - begin);
      if (count < 2 && begin > 0) {
        break;  // a single-sample batch has no BN variance
      }
      const std::span<const std::size_t> idx(order.data() + begin, count);
      Tensor x = images.gather_batch(idx);
      if (schedule.flip) {
        std::vector<std::uint8_t> flip(count);
        for (auto& f : flip) {
          f = static_cast<std::uint8_t>(rng.below(2));
        }
        flip_horizontal(x, flip);
      }
      std::vector<int> y(count);
      for (std::size_t i = 0; i < count; ++i) {
        y[i] = labels[idx[i]];
      }

      GradTape tape;
      const NetworkForward fwd =
          forward_network(tape, model, x, BnMode::Train, with_heads, true);
      NodeId loss = model.classifier.criterion->apply(tape, fwd.logits, y);
      if (with_heads) {
        for (std::size_t h = 0; h < model.heads.size(); ++h) {
          NodeId term = model.heads[h].criterion->apply(tape, fwd.head_logits[h], y);
          if (!schedule.head_weights.empty()) {
            term = ad::scale(tape, term, schedule.head_weights[h]);
          }
          loss = ad::add(tape, loss, term);
        }
      }
      const double value = tape.value(loss).item();
      if (!std::isfinite(value)) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) +
                           "; lower the learning rate");
      }
      if (first) {
        log.initial_loss = value;
        first = false;
      }
      loss_sum += value * static_cast<double>(count);
      tape.backward(loss);
      const std::vector<Tensor> grads = grads_of(tape, fwd, model, with_heads);
      for (std::size_t s = 0; s < slots.size(); ++s) {
        double* p = slots[s].data;
        const double* g = grads[s].raw();
        std::vector<double>& v = velocity[s];
        for (std::size_t i = 0; i < slots[s].size; ++i) {
          v[i] = schedule.momentum * v[i] + g[i] + schedule.weight_decay * p[i];
          p[i] -= lr * v[i];
        }
      }
      for (Block& b : model.blocks) {
        b.conv.enforce_masks();
      }
    }
    log.epochs.push_back({epoch, lr, loss_sum / static_cast<double>(n)});
  }
  return log;
}

double top1_error(const NetworkModel& model, const Tensor& images, std::span<const int> labels,
                  std::size_t chunk) {
  const std::size_t n = images.dim(0);
  if (n == 0 || labels.size() != n) {
    throw InputError("evaluation needs a non-empty image set with one label per image");
  }
  std::size_t wrong = 0;
  for (std::size_t begin = 0; begin < n; begin += chunk) {
    const std::size_t count = std::min(chunk, n - begin);
    const Tensor logits = infer_logits(model, images.slice_batch(begin, count));
    const std::size_t m = logits.dim(1);
    for (std::size_t i = 0; i < count; ++i) {
      const double* row = logits.raw() + i * m;
      const auto best = static_cast<int>(std::max_element(row, row + m) - row);
      wrong += best != labels[begin + i] ? 1 : 0;
    }
  }
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(n);
}

double mean_loss(const NetworkModel& model, const Tensor& images, std::span<const int> labels,
                 std::size_t chunk) {
  const std::size_t n = images.dim(0);
  double total = 0.0;
  for (std::size_t begin = 0; begin < n; begin += chunk) {
    const std::size_t count = std::min(chunk, n - begin);
    const Tensor logits = infer_logits(model, images.slice_batch(begin, count));
    total += model.classifier.criterion->evaluate(logits, labels.subspan(begin, count)) *
             static_cast<double>(count);
  }
  return total / static_cast<double>(n);
}

}  // namespace dcp
