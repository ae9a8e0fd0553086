#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dcp/dataset.hpp"
#include "dcp/model.hpp"
#include "dcp/objective.hpp"
#include "dcp/selection.hpp"
#include "dcp/training.hpp"

namespace dcp {

enum class PruneMode { DCP, AdaptDCP, DKPOnly, DCPDKP, AdaptDKP };

const char* mode_name(PruneMode mode);
/// Accepts "dcp", "adapt-dcp", "dkp", "dkp-only", "dcp+dkp", "adapt-dkp".
PruneMode parse_mode(const std::string& name);

struct PruneConfig {
  PruneMode mode = PruneMode::DCP;
  double eta = 0.5;
  double eta_kernel = 0.5;  // kernel rate applied after channel selection in DCP+DKP
  double eta_min = 0.4;
  double lambda = 1.0;
  double epsilon = 1e-4;
  std::size_t B = 2;
  std::size_t B_kernel = 0;  // 0: n kernels per pick
  std::size_t heads = 1;     // P
  /// Stopping rule of the adaptive modes; condition2 unless overridden.
  StopKind adaptive_stop = StopKind::Condition2;
  PickCriterion criterion = PickCriterion::GradientNorm;
  SubproblemConfig subproblem{0.01, 10, 64};
  std::size_t subset = 1000;  // N_s
  std::size_t chunk = 64;
  bool warm_start = true;
  bool feature_reuse = true;
  /// DKP modes also run channel selection at the matching budget and report
  /// both final losses.
  bool compare_with_dcp = true;
  TrainSchedule head_finetune;
  TrainSchedule final_finetune;
  std::uint64_t seed = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const PruneConfig& c);
/// Missing keys keep their defaults; unknown keys raise ConfigError.
void from_json(const nlohmann::json& j, PruneConfig& c);

/// Layers {L_1, ..., L_P}: floor(p * L / (P + 1)).
std::vector<int> head_layers(std::size_t layers, std::size_t heads);

/// Adds P auxiliary heads (BN identity, random theta, no bias).
/// Throws ConfigError when P is not below the number of prunable layers.
NetworkModel insert_heads(const NetworkModel& model, std::size_t heads, std::uint64_t seed);

/// Memoizes the head fine-tune per (architecture, weights, schedule, seed, P).
class FinetuneCache {
 public:
  /// Checkpoints go to `dir` when given; otherwise results live in memory.
  explicit FinetuneCache(std::string dir = {});

  NetworkModel get_or_train(const NetworkModel& with_heads, const Dataset& data,
                            const TrainSchedule& schedule, std::uint64_t seed,
                            TrainLog* log = nullptr);

  std::size_t requests() const { return requests_; }
  std::size_t trainings() const { return trainings_; }
  std::size_t hits() const { return hits_; }
  /// One line per request: "train <key>" or "hit <key>".
  const std::vector<std::string>& events() const { return events_; }

 private:
  std::string dir_;
  std::vector<std::string> events_;
  std::map<std::uint64_t, std::pair<NetworkModel, TrainLog>> memory_;
  std::size_t requests_ = 0, trainings_ = 0, hits_ = 0;
};

/// Fine-tunes body and heads once on the unweighted sum of all head losses.
NetworkModel finetune_with_heads(const NetworkModel& with_heads, const Dataset& data,
                                 const TrainSchedule& schedule, std::uint64_t seed,
                                 TrainLog* log = nullptr);

struct LayerOutcome {
  int layer_id = 0;
  int stage = 0;
  int head_layer = 0;
  std::string granularity;
  std::size_t groups = 0;  // candidate channels or kernels
  std::size_t limit = 0;   // budget or cap
  std::size_t selected = 0;
  std::size_t live_channels = 0;
  std::size_t live_kernels = 0;
  std::string stop_reason;
  std::vector<double> loss_history;
  std::optional<double> dcp_loss;  // shadow channel selection, DKP modes only
  std::optional<double> dkp_loss;
  std::uint64_t evaluations = 0;

  nlohmann::json to_json() const;
};

struct StageTiming {
  int stage = 0;
  double seconds = 0.0;
  std::vector<int> layers;
};

struct PruneRun {
  NetworkModel model;  // masked, heads still attached
  std::vector<LayerOutcome> layers;
  std::vector<TraceRecord> traces;
  std::vector<StageTiming> stages;
  FeatureCounters counters;
};

/// Stage-wise selection. `model` is the fine-tuned network with heads and
/// `baseline` the frozen copy providing reconstruction targets.
PruneRun run_stagewise_pruning(const NetworkModel& model, const NetworkModel& baseline,
                               const Dataset& data, const PruneConfig& config);

struct FinetuneResult {
  NetworkModel model;
  TrainLog log;
};

/// Compacts the masked model, drops the heads and trains on the full
/// training split.
FinetuneResult final_finetune(const NetworkModel& pruned, const Dataset& data,
                              const TrainSchedule& schedule, std::uint64_t seed);

struct PipelineResult {
  NetworkModel finetuned;  // with heads
  NetworkModel pruned;     // masked, before the final fine-tune
  NetworkModel final_model;
  PruneRun run;
  TrainLog head_log;
  TrainLog final_log;
  double seconds_finetune = 0.0;
  double seconds_selection = 0.0;
  double seconds_final = 0.0;
  double error_before_finetune = 0.0;
  double error_after_finetune = 0.0;

  nlohmann::json manifest(const PruneConfig& config, const FinetuneCache& cache) const;
};

/// Heads, memoized fine-tune, stage-wise selection and final fine-tune.
PipelineResult run_pipeline(const NetworkModel& baseline, const Dataset& data,
                            const PruneConfig& config, FinetuneCache& cache);

}  // namespace dcp
