#include "dcp/report.hpp"

#include <sstream>

#include "dcp/errors.hpp"

namespace dcp {

using nlohmann::json;

ModelMetrics make_metrics(const NetworkModel& model, double top1_error) {
  const ModelStats s = count_stats(model);
  return {top1_error, s.param_count, s.mac_count, s.dense_mac_count};
}

namespace {

double reduction(std::size_t before, std::size_t after) {
  if (before == 0) {
    return 0.0;
  }
  return 100.0 * (static_cast<double>(before) - static_cast<double>(after)) /
         static_cast<double>(before);
}

json layer_json(const LayerStats& l) {
  return {{"layer_id", l.layer_id},         {"live_filters", l.live_filters},
          {"live_channels", l.live_channels}, {"live_kernels", l.live_kernels},
          {"params", l.params},             {"macs", l.macs},
          {"dense_macs", l.dense_macs}};
}

LayerStats layer_from(const json& j) {
  LayerStats l;
  l.layer_id = j.at("layer_id").get<int>();
  l.live_filters = j.at("live_filters").get<std::size_t>();
  l.live_channels = j.at("live_channels").get<std::size_t>();
  l.live_kernels = j.at("live_kernels").get<std::size_t>();
  l.params = j.at("params").get<std::size_t>();
  l.macs = j.at("macs").get<std::size_t>();
  l.dense_macs = j.at("dense_macs").get<std::size_t>();
  return l;
}

json metrics_json(const ModelMetrics& m) {
  return {{"top1_error", m.top1_error},
          {"params", m.params},
          {"macs", m.macs},
          {"dense_macs", m.dense_macs}};
}

ModelMetrics metrics_from(const json& j) {
  return {j.at("top1_error").get<double>(), j.at("params").get<std::size_t>(),
          j.at("macs").get<std::size_t>(), j.at("dense_macs").get<std::size_t>()};
}

}  // namespace

double RunReport::param_reduction_pct() const { return reduction(baseline.params, pruned.params); }
double RunReport::flops_reduction_pct() const { return reduction(baseline.macs, pruned.macs); }
double RunReport::dense_flops_reduction_pct() const {
  return reduction(baseline.dense_macs, pruned.dense_macs);
}

json RunReport::to_json() const {
  json bl = json::array(), pl = json::array();
  for (const LayerStats& l : baseline_layers) bl.push_back(layer_json(l));
  for (const LayerStats& l : pruned_layers) pl.push_back(layer_json(l));
  return json{{"name", name},
              {"mode", mode},
              {"baseline", metrics_json(baseline)},
              {"pruned", metrics_json(pruned)},
              {"error_gap", error_gap()},
              {"param_reduction_pct", param_reduction_pct()},
              {"flops_reduction_pct", flops_reduction_pct()},
              {"dense_flops_reduction_pct", dense_flops_reduction_pct()},
              {"baseline_layers", bl},
              {"pruned_layers", pl},
              {"seconds", seconds},
              {"config", config}};
}

RunReport RunReport::from_json(const json& j) {
  RunReport r;
  try {
    r.name = j.at("name").get<std::string>();
    r.mode = j.at("mode").get<std::string>();
    r.baseline = metrics_from(j.at("baseline"));
    r.pruned = metrics_from(j.at("pruned"));
    for (const json& l : j.at("baseline_layers")) r.baseline_layers.push_back(layer_from(l));
    for (const json& l : j.at("pruned_layers")) r.pruned_layers.push_back(layer_from(l));
    r.seconds = j.value("seconds", 0.0);
    r.config = j.value("config", json::object());
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed run report: ") + e.what());
  }
  return r;
}

RunReport make_report(const std::string& name, const std::string& mode,
                      const NetworkModel& baseline, double baseline_error,
                      const NetworkModel& pruned, double pruned_error) {
  RunReport r;
  r.name = name;
  r.mode = mode;
  r.baseline = make_metrics(baseline, baseline_error);
  r.pruned = make_metrics(pruned, pruned_error);
  r.baseline_layers = count_stats(baseline).layers;
  r.pruned_layers = count_stats(pruned).layers;
  return r;
}

std::string report_csv(const std::vector<RunReport>& reports) {
  std::ostringstream out;
  out.precision(10);
  out << "name,mode,baseline_top1_err,pruned_top1_err,error_gap,baseline_params,pruned_params,"
         "param_reduction_pct,baseline_macs,pruned_macs,flops_reduction_pct,pruned_dense_macs,"
         "dense_flops_reduction_pct,seconds\n";
  for (const RunReport& r : reports) {
    out << r.name << ',' << r.mode << ',' << r.baseline.top1_error << ','
        << r.pruned.top1_error << ',' << r.error_gap() << ',' << r.baseline.params << ','
        << r.pruned.params << ',' << r.param_reduction_pct() << ',' << r.baseline.macs << ','
        << r.pruned.macs << ',' << r.flops_reduction_pct() << ',' << r.pruned.dense_macs << ','
        << r.dense_flops_reduction_pct() << ',' << r.seconds << '\n';
  }
  return out.str();
}

std::string layer_csv(const std::vector<RunReport>& reports) {
  std::ostringstream out;
  out << "name,layer_id,baseline_macs,pruned_macs,pruned_dense_macs,live_channels,"
         "live_kernels\n";
  for (const RunReport& r : reports) {
    for (std::size_t i = 0; i < r.pruned_layers.size() && i < r.baseline_layers.size(); ++i) {
      const LayerStats& b = r.baseline_layers[i];
      const LayerStats& p = r.pruned_layers[i];
      out << r.name << ',' << p.layer_id << ',' << b.macs << ',' << p.macs << ','
          << p.dense_macs << ',' << p.live_channels << ',' << p.live_kernels << '\n';
    }
  }
  return out.str();
}

}  // namespace dcp
