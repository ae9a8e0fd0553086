#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "dcp/model.hpp"

namespace dcp {

/// SGD with momentum and weight decay; the learning rate is multiplied by
/// `lr_decay` at every milestone epoch.
struct TrainSchedule {
  std::size_t epochs = 10;
  std::size_t batch = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<std::size_t> milestones;
  double lr_decay = 0.1;
  bool flip = false;
  /// Weight of each auxiliary head loss; empty means 1 for all.
  std::vector<double> head_weights;

  double lr_at(std::size_t epoch) const;
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainSchedule& s);
void from_json(const nlohmann::json& j, TrainSchedule& s);

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;  // mean training loss over the epoch
};

struct TrainLog {
  double initial_loss = 0.0;  // loss of the first minibatch before any update
  std::vector<EpochLog> epochs;
};

/// Trains every parameter of the model (and its heads when `with_heads`) on
/// the summed head losses plus the final loss. Masks stay enforced.
TrainLog train_network(NetworkModel& model, const Tensor& images, std::span<const int> labels,
                       const TrainSchedule& schedule, std::uint64_t seed, bool with_heads);

/// Top-1 error in percent with frozen BN.
double top1_error(const NetworkModel& model, const Tensor& images, std::span<const int> labels,
                  std::size_t chunk = 250);

/// Mean final-classifier loss with frozen BN.
double mean_loss(const NetworkModel& model, const Tensor& images, std::span<const int> labels,
                 std::size_t chunk = 250);

}  // namespace dcp
