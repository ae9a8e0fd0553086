#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dcp/objective.hpp"
#include "dcp/tensor.hpp"

namespace dcp {

enum class StopKind { Budget, Condition1, Condition2 };

struct StopPolicy {
  StopKind kind = StopKind::Budget;
  std::size_t kappa = 0;  // budget only
  double epsilon = 1e-4;
  double eta_min = 0.0;   // condition2 only

  /// Throws ConfigError for missing or out-of-range fields.
  void validate() const;
};

const char* stop_kind_name(StopKind kind);
StopKind parse_stop_kind(const std::string& name);

/// Greedy iteration record. `selected` keeps insertion order.
struct SelectionState {
  std::vector<std::size_t> selected;
  std::vector<std::vector<std::size_t>> picks;  // J_1, J_2, ...
  std::size_t t = 0;
  std::vector<double> loss_history;             // L(W^0), L(W^1), ...
  Tensor w;
};

struct StopCheck {
  bool stop = false;
  std::string reason;
};

/// Stopping rule for a state over `groups` candidate groups.
StopCheck check_stop(const SelectionState& state, const StopPolicy& policy, std::size_t groups);

/// ceil((1 - eta_min) * groups), the condition-2 cap.
std::size_t condition2_cap(const StopPolicy& policy, std::size_t groups);

/// ||G_{:,k}||_F for every input channel k of a gradient [n, c, kh, kw].
std::vector<double> channel_grad_norms(const Tensor& grad);
/// ||G_{j,k}||_F, row-major by filter.
std::vector<double> kernel_grad_norms(const Tensor& grad);
/// Gradient-norm scores of the objective at `w`.
std::vector<double> channel_grad_norms(const LayerObjective& objective, const Tensor& w);
std::vector<double> kernel_grad_norms(const LayerObjective& objective, const Tensor& w);

/// The B largest norms among indices not in `excluded`, largest first; ties
/// go to the lower index.
std::vector<std::size_t> pick_top_B(std::span<const double> norms,
                                    std::span<const std::size_t> excluded, std::size_t B);

enum class Granularity { Channel, Kernel };

struct SubproblemConfig {
  double gamma = 0.01;
  std::size_t epochs = 10;
  std::size_t batch = 64;
};

/// Plain SGD on the coordinates of the groups flagged in `active`; all other
/// coordinates stay untouched.
Tensor solve_subproblem(const LayerObjective& objective, Tensor w,
                        std::span<const std::uint8_t> active, Granularity granularity,
                        const SubproblemConfig& config, std::uint64_t seed);

enum class PickCriterion { GradientNorm, Random };

struct SelectionOptions {
  Granularity granularity = Granularity::Channel;
  std::size_t B = 2;
  StopPolicy policy;
  SubproblemConfig subproblem;
  PickCriterion criterion = PickCriterion::GradientNorm;
  /// Newly selected groups start from these weights instead of zero.
  Tensor warm_start;
  /// Groups allowed to be picked; empty means every group.
  std::vector<std::uint8_t> eligible;
  std::uint64_t seed = 0;
};

struct TraceRecord {
  int layer_id = 0;
  std::string granularity;
  std::size_t t = 0;
  std::size_t selected = 0;
  double loss = 0.0;
  std::vector<std::size_t> picks;
  std::string stop_reason;  // empty while the loop continues

  nlohmann::json to_json(std::size_t channels) const;
};

struct SelectionResult {
  SelectionState state;
  std::vector<std::size_t> selected;  // sorted
  Tensor weights;
  std::string stop_reason;
  std::vector<TraceRecord> trace;
  std::vector<std::uint8_t> channel_mask;
  std::vector<std::uint8_t> kernel_mask;
};

/// Greedy group selection at either granularity.
SelectionResult greedy_select(const LayerObjective& objective, const SelectionOptions& options);

/// Channel selection (B defaults to 2).
SelectionResult greedy_select_channels(const LayerObjective& objective, SelectionOptions options);
/// Kernel selection (B = 0 means one channel's worth of kernels, n).
SelectionResult greedy_select_kernels(const LayerObjective& objective, SelectionOptions options);

/// ceil((1 - eta) * n * live_channels), the kernel budget of a layer.
std::size_t kernel_budget(std::size_t filters, std::size_t live_channels, double eta);
/// Kernels of live channels only; the candidate set for kernel selection
/// after channel selection.
std::vector<std::uint8_t> live_kernel_candidates(const ConvParams& conv);

/// Writes a selection result into the layer's weights and masks.
void commit_selection(ConvParams& conv, const SelectionResult& result);

}  // namespace dcp
