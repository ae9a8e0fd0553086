#include "dcp/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "dcp/errors.hpp"

namespace dcp {

using nlohmann::json;

std::string RunConfig::baseline_path() const {
  return baseline.empty() ? out_dir + "/baseline.dcpk" : baseline;
}

void to_json(json& j, const SynthOptions& s) {
  j = json{{"classes", s.classes},       {"n_train", s.n_train}, {"n_test", s.n_test},
           {"channels", s.channels},     {"height", s.height},   {"width", s.width},
           {"separability", s.separability}, {"texture", s.texture}, {"noise", s.noise},
           {"seed", s.seed}};
}

void from_json(const json& j, SynthOptions& s) {
  SynthOptions d;
  s.classes = j.value("classes", d.classes);
  s.n_train = j.value("n_train", d.n_train);
  s.n_test = j.value("n_test", d.n_test);
  s.channels = j.value("channels", d.channels);
  s.height = j.value("height", d.height);
  s.width = j.value("width", d.width);
  s.separability = j.value("separability", d.separability);
  s.texture = j.value("texture", d.texture);
  s.noise = j.value("noise", d.noise);
  s.seed = j.value("seed", d.seed);
}

void to_json(json& j, const RunConfig& c) {
  json data{{"normalize", c.data.normalize}};
  if (c.data.synth) {
    data["synth"] = *c.data.synth;
  } else {
    data["path"] = c.data.path;
  }
  j = json{{"data", data},   {"arch", c.arch}, {"train", c.train}, {"prune", c.prune},
           {"seed", c.seed}, {"out_dir", c.out_dir}};
  if (!c.baseline.empty()) {
    j["baseline"] = c.baseline;
  }
}

RunConfig parse_run_config(const json& j) {
  static const std::set<std::string> known{"data", "arch", "train", "prune",
                                           "seed", "out_dir", "baseline"};
  if (!j.is_object()) {
    throw ConfigError("config must be a JSON object");
  }
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  RunConfig c;
  try {
    if (!j.contains("data")) {
      throw ConfigError("config is missing 'data'");
    }
    const json& d = j.at("data");
    if (d.contains("synth")) {
      c.data.synth = d.at("synth").get<SynthOptions>();
    } else if (d.contains("path") && d.at("path").is_string() &&
               !d.at("path").get<std::string>().empty()) {
      c.data.path = d.at("path").get<std::string>();
    } else {
      throw ConfigError("config 'data' needs a dataset 'path' or 'synth' parameters");
    }
    c.data.normalize = d.value("normalize", true);
    if (!j.contains("arch")) {
      throw ConfigError("config is missing 'arch'");
    }
    c.arch = j.at("arch").get<ArchSpec>();
    if (j.contains("train")) c.train = j.at("train").get<TrainSchedule>();
    if (j.contains("prune")) from_json(j.at("prune"), c.prune);
    c.seed = j.value("seed", c.seed);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.baseline = j.value("baseline", std::string{});
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config has a missing or mistyped field: ") + e.what());
  }
  if (!j.contains("prune") || !j.at("prune").contains("seed")) {
    c.prune.seed = c.seed;
  }
  c.arch.validate();
  c.train.validate();
  c.prune.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) {
    throw ConfigError("cannot read config file '" + path + "'");
  }
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

namespace {

double to_double(const std::string& name, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("value '" + v + "' for " + name + " is not a number");
  }
}

std::size_t to_count(const std::string& name, const std::string& v) {
  const double d = to_double(name, v);
  if (d < 0 || d != static_cast<double>(static_cast<std::size_t>(d))) {
    throw ConfigError("value '" + v + "' for " + name + " is not a non-negative integer");
  }
  return static_cast<std::size_t>(d);
}

}  // namespace

void apply_override(RunConfig& c, const std::string& name, const std::string& value) {
  PruneConfig& p = c.prune;
  if (name == "seed") {
    c.seed = to_count(name, value);
    p.seed = c.seed;
  } else if (name == "mode") {
    p.mode = parse_mode(value);
  } else if (name == "eta") {
    p.eta = to_double(name, value);
  } else if (name == "eta_min" || name == "eta-min") {
    p.eta_min = to_double(name, value);
  } else if (name == "eta_kernel") {
    p.eta_kernel = to_double(name, value);
  } else if (name == "lambda") {
    p.lambda = to_double(name, value);
  } else if (name == "B" || name == "b") {
    p.B = to_count(name, value);
  } else if (name == "epsilon") {
    p.epsilon = to_double(name, value);
  } else if (name == "heads") {
    p.heads = to_count(name, value);
  } else if (name == "subset") {
    p.subset = to_count(name, value);
  } else if (name == "gamma") {
    p.subproblem.gamma = to_double(name, value);
  } else if (name == "adaptive_stop") {
    p.adaptive_stop = parse_stop_kind(value);
  } else {
    throw ConfigError("unknown parameter '" + name + "'");
  }
  p.validate();
}

Dataset load_data(const DataSpec& spec) {
  Dataset ds = spec.synth ? synth_classification(*spec.synth) : load_dataset(spec.path);
  if (spec.normalize && !ds.normalization.applied) {
    normalize(ds);
  }
  return ds;
}

}  // namespace dcp
