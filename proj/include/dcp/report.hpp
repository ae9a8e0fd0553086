#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "dcp/model.hpp"

namespace dcp {

struct ModelMetrics {
  double top1_error = 0.0;  // percent
  std::size_t params = 0;
  std::size_t macs = 0;
  std::size_t dense_macs = 0;
};

ModelMetrics make_metrics(const NetworkModel& model, double top1_error);

/// Baseline versus pruned model. Reductions are always recomputed from the
/// two stats, never copied from elsewhere.
struct RunReport {
  std::string name;
  std::string mode;
  ModelMetrics baseline;
  ModelMetrics pruned;
  std::vector<LayerStats> baseline_layers;
  std::vector<LayerStats> pruned_layers;
  double seconds = 0.0;
  nlohmann::json config;

  double error_gap() const { return pruned.top1_error - baseline.top1_error; }
  double param_reduction_pct() const;
  double flops_reduction_pct() const;
  double dense_flops_reduction_pct() const;

  nlohmann::json to_json() const;
  static RunReport from_json(const nlohmann::json& j);
};

RunReport make_report(const std::string& name, const std::string& mode,
                      const NetworkModel& baseline, double baseline_error,
                      const NetworkModel& pruned, double pruned_error);

/// Header plus one row per report.
std::string report_csv(const std::vector<RunReport>& reports);
/// Per-layer MACs of every report, one row per (run, layer).
std::string layer_csv(const std::vector<RunReport>& reports);

}  // namespace dcp
