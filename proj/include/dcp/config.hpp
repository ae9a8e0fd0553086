#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <json.hpp>

#include "dcp/dataset.hpp"
#include "dcp/model.hpp"
#include "dcp/pipeline.hpp"
#include "dcp/training.hpp"

namespace dcp {

/// Either a DCPD file or generator parameters.
struct DataSpec {
  std::string path;
  std::optional<SynthOptions> synth;
  bool normalize = true;
};

/// Everything a CLI run needs, read from one JSON file.
///
/// {
///   "data":  {"path": "train.dcpd"} | {"synth": {...}},  "normalize": true
///   "arch":  {"in_channels", "height", "width", "classes", "layers": [...]},
///   "train": baseline schedule,
///   "prune": pruning config,
///   "seed":  1,
///   "out_dir": "runs/demo",
///   "baseline": "runs/demo/baseline.dcpk"   (optional)
/// }
struct RunConfig {
  DataSpec data;
  ArchSpec arch;
  TrainSchedule train;
  PruneConfig prune;
  std::uint64_t seed = 1;
  std::string out_dir = "run";
  std::string baseline;  // empty: <out_dir>/baseline.dcpk

  std::string baseline_path() const;
};

void to_json(nlohmann::json& j, const SynthOptions& s);
void from_json(const nlohmann::json& j, SynthOptions& s);
void to_json(nlohmann::json& j, const RunConfig& c);

/// Parses and validates; throws ConfigError on schema violations.
RunConfig parse_run_config(const nlohmann::json& j);
/// Reads the file first; an unreadable file is a ConfigError as well.
RunConfig load_run_config(const std::string& path);

/// Applies `name=value` the way the CLI flags and --sweep do. Known names:
/// seed, mode, eta, eta_min, eta_kernel, lambda, B, epsilon, heads, subset,
/// gamma, adaptive_stop.
void apply_override(RunConfig& config, const std::string& name, const std::string& value);

/// Loads or generates the data and normalizes it once if requested.
Dataset load_data(const DataSpec& spec);

}  // namespace dcp
