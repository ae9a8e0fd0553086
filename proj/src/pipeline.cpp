#include "dcp/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <set>

#include "dcp/checkpoint.hpp"
#include "dcp/errors.hpp"
#include "dcp/rng.hpp"

namespace dcp {

using nlohmann::json;

const char* mode_name(PruneMode mode) {
  switch (mode) {
    case PruneMode::DCP:
      return "dcp";
    case PruneMode::AdaptDCP:
      return "adapt-dcp";
    case PruneMode::DKPOnly:
      return "dkp-only";
    case PruneMode::DCPDKP:
      return "dcp+dkp";
    case PruneMode::AdaptDKP:
      return "adapt-dkp";
  }
  return "?";
}

PruneMode parse_mode(const std::string& name) {
  if (name == "dcp") return PruneMode::DCP;
  if (name == "adapt-dcp") return PruneMode::AdaptDCP;
  if (name == "dkp" || name == "dkp-only") return PruneMode::DKPOnly;
  if (name == "dcp+dkp") return PruneMode::DCPDKP;
  if (name == "adapt-dkp") return PruneMode::AdaptDKP;
  throw ConfigError("unknown pruning mode '" + name + "'");
}

void PruneConfig::validate() const {
  auto rate = [](double v, const char* what) {
    if (!(v > 0.0 && v < 1.0)) {
      throw ConfigError(std::string(what) + " must lie in (0, 1)");
    }
  };
  rate(eta, "eta");
  rate(eta_kernel, "eta_kernel");
  rate(eta_min, "eta_min");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
  if (!(epsilon >= 0.0)) throw ConfigError("epsilon must be non-negative");
  if (B == 0) throw ConfigError("B must be at least 1");
  if (adaptive_stop == StopKind::Budget) {
    throw ConfigError("adaptive modes need condition1 or condition2");
  }
  if (!(subproblem.gamma > 0.0) || subproblem.batch == 0) {
    throw ConfigError("subproblem needs gamma > 0 and a positive batch");
  }
  if (subset == 0) throw ConfigError("selection subset must not be empty");
  if (chunk == 0) throw ConfigError("chunk must be positive");
  head_finetune.validate();
  final_finetune.validate();
}

void to_json(json& j, const PruneConfig& c) {
  j = json{{"mode", mode_name(c.mode)},
           {"eta", c.eta},
           {"eta_kernel", c.eta_kernel},
           {"eta_min", c.eta_min},
           {"lambda", c.lambda},
           {"epsilon", c.epsilon},
           {"B", c.B},
           {"B_kernel", c.B_kernel},
           {"heads", c.heads},
           {"adaptive_stop", stop_kind_name(c.adaptive_stop)},
           {"criterion", c.criterion == PickCriterion::Random ? "random" : "gradient"},
           {"subproblem",
            {{"gamma", c.subproblem.gamma},
             {"epochs", c.subproblem.epochs},
             {"batch", c.subproblem.batch}}},
           {"subset", c.subset},
           {"chunk", c.chunk},
           {"warm_start", c.warm_start},
           {"feature_reuse", c.feature_reuse},
           {"compare_with_dcp", c.compare_with_dcp},
           {"head_finetune", c.head_finetune},
           {"final_finetune", c.final_finetune},
           {"seed", c.seed}};
}

void from_json(const json& j, PruneConfig& c) {
  static const std::set<std::string> known{
      "mode",   "eta",        "eta_kernel", "eta_min",       "lambda",        "epsilon",
      "B",      "B_kernel",   "heads",      "adaptive_stop", "criterion",     "subproblem",
      "subset", "chunk",      "warm_start", "feature_reuse", "compare_with_dcp",
      "head_finetune", "final_finetune", "seed"};
  if (!j.is_object()) {
    throw ConfigError("pruning config must be a JSON object");
  }
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) {
      throw ConfigError("unknown pruning config key '" + key + "'");
    }
  }
  try {
    if (j.contains("mode")) c.mode = parse_mode(j["mode"].get<std::string>());
    c.eta = j.value("eta", c.eta);
    c.eta_kernel = j.value("eta_kernel", c.eta_kernel);
    c.eta_min = j.value("eta_min", c.eta_min);
    c.lambda = j.value("lambda", c.lambda);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.B = j.value("B", c.B);
    c.B_kernel = j.value("B_kernel", c.B_kernel);
    c.heads = j.value("heads", c.heads);
    if (j.contains("adaptive_stop")) {
      c.adaptive_stop = parse_stop_kind(j["adaptive_stop"].get<std::string>());
    }
    if (j.contains("criterion")) {
      const auto name = j["criterion"].get<std::string>();
      if (name != "gradient" && name != "random") {
        throw ConfigError("criterion must be 'gradient' or 'random'");
      }
      c.criterion = name == "random" ? PickCriterion::Random : PickCriterion::GradientNorm;
    }
    if (j.contains("subproblem")) {
      const json& s = j["subproblem"];
      c.subproblem.gamma = s.value("gamma", c.subproblem.gamma);
      c.subproblem.epochs = s.value("epochs", c.subproblem.epochs);
      c.subproblem.batch = s.value("batch", c.subproblem.batch);
    }
    c.subset = j.value("subset", c.subset);
    c.chunk = j.value("chunk", c.chunk);
    c.warm_start = j.value("warm_start", c.warm_start);
    c.feature_reuse = j.value("feature_reuse", c.feature_reuse);
    c.compare_with_dcp = j.value("compare_with_dcp", c.compare_with_dcp);
    if (j.contains("head_finetune")) c.head_finetune = j["head_finetune"].get<TrainSchedule>();
    if (j.contains("final_finetune")) c.final_finetune = j["final_finetune"].get<TrainSchedule>();
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("pruning config has a mistyped value: ") + e.what());
  }
}

std::vector<int> head_layers(std::size_t layers, std::size_t heads) {
  std::vector<int> out;
  for (std::size_t p = 1; p <= heads; ++p) {
    out.push_back(static_cast<int>(p * layers / (heads + 1)));
  }
  return out;
}

NetworkModel insert_heads(const NetworkModel& model, std::size_t heads, std::uint64_t seed) {
  const std::size_t L = model.layer_count();
  std::size_t prunable = 0;
  for (std::size_t l = 1; l <= L; ++l) {
    prunable += model.prunable(l) ? 1 : 0;
  }
  if (heads >= prunable) {
    throw ConfigError("cannot insert " + std::to_string(heads) + " heads into a network with " +
                      std::to_string(prunable) + " prunable layers");
  }
  const std::vector<int> points = head_layers(L, heads);
  int prev = 0;
  for (int p : points) {
    if (p <= prev || p >= static_cast<int>(L)) {
      throw ConfigError("head positions collide for P=" + std::to_string(heads) +
                        " on a " + std::to_string(L) + "-layer network");
    }
    prev = p;
  }
  NetworkModel out = model;
  out.heads.clear();
  for (std::size_t p = 0; p < points.size(); ++p) {
    LossHead h;
    h.attach_layer = points[p];
    h.p_index = static_cast<int>(p + 1);
    const std::size_t n_p = out.block(points[p]).conv.filters();
    h.bn = BatchNormParams::identity(n_p);
    h.theta = Tensor({n_p, model.arch.classes, 1, 1});
    Rng rng(derive_seed(seed, 100 + p));
    const double bound = 1.0 / std::sqrt(static_cast<double>(n_p));
    for (double& v : h.theta.data()) {
      v = rng.uniform(-bound, bound);
    }
    out.heads.push_back(std::move(h));
  }
  out.classifier.p_index = static_cast<int>(points.size() + 1);
  return out;
}

NetworkModel finetune_with_heads(const NetworkModel& with_heads, const Dataset& data,
                                 const TrainSchedule& schedule, std::uint64_t seed,
                                 TrainLog* log) {
  NetworkModel m = with_heads;
  TrainLog l = train_network(m, data.train_images, data.train_labels, schedule, seed, true);
  if (log) {
    *log = std::move(l);
  }
  return m;
}

namespace {

struct Hasher {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= c[i];
      h *= 0x100000001b3ULL;
    }
  }
  void str(const std::string& s) { bytes(s.data(), s.size()); }
  void doubles(std::span<const double> v) { bytes(v.data(), v.size() * sizeof(double)); }
};

std::uint64_t finetune_key(const NetworkModel& m, const TrainSchedule& s, std::uint64_t seed) {
  Hasher h;
  h.str(json(m.arch).dump());
  for (const Block& b : m.blocks) {
    h.doubles(b.conv.weights.data());
    h.doubles(b.conv.bias);
    if (b.bn) {
      h.doubles(b.bn->gamma);
      h.doubles(b.bn->beta);
      h.doubles(b.bn->running_mean);
      h.doubles(b.bn->running_var);
    }
  }
  h.doubles(m.classifier.theta.data());
  h.doubles(m.classifier.bias.data());
  for (const LossHead& hd : m.heads) {
    h.bytes(&hd.attach_layer, sizeof hd.attach_layer);
    h.doubles(hd.theta.data());
  }
  h.str(json(s).dump());
  h.bytes(&seed, sizeof seed);
  const std::size_t P = m.heads.size();
  h.bytes(&P, sizeof P);
  return h.h;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

FinetuneCache::FinetuneCache(std::string dir) : dir_(std::move(dir)) {}

NetworkModel FinetuneCache::get_or_train(const NetworkModel& with_heads, const Dataset& data,
                                         const TrainSchedule& schedule, std::uint64_t seed,
                                         TrainLog* log) {
  ++requests_;
  const std::uint64_t key = finetune_key(with_heads, schedule, seed);
  if (auto it = memory_.find(key); it != memory_.end()) {
    ++hits_;
    events_.push_back("hit " + hex(key));
    if (log) *log = it->second.second;
    return it->second.first;
  }
  const std::string path = dir_.empty() ? "" : dir_ + "/finetune-" + hex(key) + ".dcpk";
  if (!path.empty() && std::filesystem::exists(path)) {
    json extra;
    NetworkModel m = load_checkpoint(path, &extra);
    TrainLog l;
    l.initial_loss = extra.value("initial_loss", 0.0);
    ++hits_;
    events_.push_back("hit " + hex(key));
    memory_.emplace(key, std::make_pair(m, l));
    if (log) *log = l;
    return m;
  }
  ++trainings_;
  events_.push_back("train " + hex(key));
  TrainLog l;
  NetworkModel m = finetune_with_heads(with_heads, data, schedule, seed, &l);
  if (!path.empty()) {
    std::filesystem::create_directories(dir_);
    save_checkpoint(m, path, json{{"initial_loss", l.initial_loss}, {"role", "finetuned"}});
  }
  memory_.emplace(key, std::make_pair(m, l));
  if (log) *log = l;
  return m;
}

json LayerOutcome::to_json() const {
  json j{{"layer_id", layer_id},         {"stage", stage},
         {"head_layer", head_layer},     {"granularity", granularity},
         {"groups", groups},             {"limit", limit},
         {"selected", selected},         {"live_channels", live_channels},
         {"live_kernels", live_kernels}, {"stop_reason", stop_reason},
         {"loss_history", loss_history}, {"evaluations", evaluations}};
  if (dcp_loss) j["dcp_loss"] = *dcp_loss;
  if (dkp_loss) j["dkp_loss"] = *dkp_loss;
  return j;
}

namespace {

StopPolicy adaptive_policy(const PruneConfig& c) {
  StopPolicy p;
  p.kind = c.adaptive_stop;
  p.epsilon = c.epsilon;
  p.eta_min = c.eta_min;
  return p;
}

StopPolicy budget_policy(std::size_t kappa) {
  StopPolicy p;
  p.kind = StopKind::Budget;
  p.kappa = kappa;
  return p;
}

std::size_t policy_limit(const StopPolicy& p, std::size_t groups) {
  switch (p.kind) {
    case StopKind::Budget:
      return std::min(p.kappa, groups);
    case StopKind::Condition2:
      return std::min(condition2_cap(p, groups), groups);
    case StopKind::Condition1:
      break;
  }
  return groups;
}

double final_loss(const SelectionResult& r) { return r.state.loss_history.back(); }

void record(LayerOutcome& out, const SelectionResult& r, const StopPolicy& p,
            std::size_t groups, const char* granularity) {
  out.granularity = granularity;
  out.groups = groups;
  out.limit = policy_limit(p, groups);
  out.selected = r.selected.size();
  out.stop_reason = r.stop_reason;
  out.loss_history = r.state.loss_history;
}

// Runs the configured selection for one layer and returns the committed conv.
ConvParams select_layer(const LayerObjective& objective, const ConvParams& conv,
                        const PruneConfig& config, std::uint64_t seed, LayerOutcome& out,
                        std::vector<TraceRecord>& traces) {
  const std::size_t n = conv.filters(), c = conv.channels();
  SelectionOptions opt;
  opt.B = config.B;
  opt.subproblem = config.subproblem;
  opt.criterion = config.criterion;
  opt.seed = seed;
  if (config.warm_start) {
    opt.warm_start = conv.weights;
  }
  auto keep = [&](const SelectionResult& r) {
    traces.insert(traces.end(), r.trace.begin(), r.trace.end());
  };

  ConvParams result = conv;
  const bool kernel_only = config.mode == PruneMode::DKPOnly || config.mode == PruneMode::AdaptDKP;
  if (!kernel_only) {
    opt.policy = config.mode == PruneMode::AdaptDCP ? adaptive_policy(config)
                                                    : budget_policy(channel_budget(c, config.eta));
    const SelectionResult r = greedy_select_channels(objective, opt);
    keep(r);
    record(out, r, opt.policy, c, "channel");
    commit_selection(result, r);
    if (config.mode == PruneMode::DCPDKP) {
      const LayerObjective kobj = objective.with_layout(result);
      SelectionOptions kopt = opt;
      kopt.B = config.B_kernel;
      kopt.eligible.clear();
      kopt.warm_start = config.warm_start ? result.weights : Tensor{};
      kopt.seed = derive_seed(seed, 2);
      kopt.policy = budget_policy(kernel_budget(n, r.selected.size(), config.eta_kernel));
      const SelectionResult kr = greedy_select_kernels(kobj, kopt);
      keep(kr);
      out.dcp_loss = final_loss(r);
      out.dkp_loss = final_loss(kr);
      record(out, kr, kopt.policy, n * r.selected.size(), "channel+kernel");
      out.evaluations += kobj.evaluations();
      commit_selection(result, kr);
    }
  } else {
    SelectionOptions kopt = opt;
    kopt.B = config.B_kernel;
    kopt.policy = config.mode == PruneMode::AdaptDKP ? adaptive_policy(config)
                                                     : budget_policy(kernel_budget(n, c, config.eta));
    const SelectionResult kr = greedy_select_kernels(objective, kopt);
    keep(kr);
    record(out, kr, kopt.policy, n * c, "kernel");
    out.dkp_loss = final_loss(kr);
    commit_selection(result, kr);
    if (config.compare_with_dcp) {
      SelectionOptions copt = opt;
      copt.policy = config.mode == PruneMode::AdaptDKP
                        ? adaptive_policy(config)
                        : budget_policy(channel_budget(c, config.eta));
      out.dcp_loss = final_loss(greedy_select_channels(objective, copt));
    }
  }
  out.evaluations += objective.evaluations();
  out.live_channels = 0;
  for (std::size_t k = 0; k < c; ++k) {
    out.live_channels += result.channel_live(k) ? 1 : 0;
  }
  out.live_kernels = l20_kernel_norm(result);
  return result;
}

}  // namespace

PruneRun run_stagewise_pruning(const NetworkModel& model, const NetworkModel& baseline,
                               const Dataset& data, const PruneConfig& config) {
  config.validate();
  if (model.layer_count() != baseline.layer_count()) {
    throw ContractError("baseline and working model have different depths");
  }
  PruneRun run;
  run.model = model;
  const std::size_t L = model.layer_count();
  const std::uint64_t subset_seed = derive_seed(config.seed, 0xd5);
  const std::vector<std::size_t> idx =
      sample_subset(data.train_images.dim(0), config.subset, subset_seed);
  const auto images = std::make_shared<const Tensor>(data.train_images.gather_batch(idx));
  std::vector<int> labels(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    labels[i] = data.train_labels[idx[i]];
  }
  const auto base = std::make_shared<const NetworkModel>(baseline);

  std::optional<InferenceTrace> base_trace;
  if (config.feature_reuse) {
    base_trace = infer_trace(*base, *images, L);
    run.counters.prefix_sample_layers += idx.size() * L;
  }

  const std::vector<int> points = model.head_points();
  std::size_t prev = 0;
  for (std::size_t p = 0; p < points.size(); ++p) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t hl = static_cast<std::size_t>(points[p]);
    StageTiming timing;
    timing.stage = static_cast<int>(p + 1);
    std::vector<std::size_t> layers;
    for (std::size_t l = prev + 1; l <= hl; ++l) {
      if (run.model.prunable(l)) {
        layers.push_back(l);
        timing.layers.push_back(static_cast<int>(l));
      }
    }
    prev = hl;
    if (layers.empty()) {
      run.stages.push_back(timing);
      continue;
    }
    // Every layer of the stage reads the model as it stood when the stage began.
    const auto stage_model = std::make_shared<const NetworkModel>(run.model);
    std::optional<InferenceTrace> stage_trace;
    if (config.feature_reuse) {
      stage_trace = infer_trace(*stage_model, *images, layers.back() - 1);
      run.counters.prefix_sample_layers += idx.size() * (layers.back() - 1);
    }
    std::vector<std::pair<std::size_t, ConvParams>> commits;
    for (std::size_t l : layers) {
      FeatureSource src;
      src.counters = &run.counters;
      if (config.feature_reuse) {
        Hasher key;
        key.bytes(&subset_seed, sizeof subset_seed);
        key.bytes(idx.data(), idx.size() * sizeof(std::size_t));
        key.bytes(&p, sizeof p);
        key.bytes(&l, sizeof l);
        src.cache = std::make_shared<const FeatureCache>(
            build_feature_cache(*stage_trace, *base_trace, *stage_model, l, hl, key.h));
      } else {
        src.stage_model = stage_model;
        src.baseline = base;
        src.images = images;
      }
      const LayerObjective objective(*stage_model, l, hl, src, labels, config.lambda,
                                     config.chunk);
      LayerOutcome out;
      out.layer_id = static_cast<int>(l);
      out.stage = timing.stage;
      out.head_layer = static_cast<int>(hl);
      commits.emplace_back(l, select_layer(objective, stage_model->block(l).conv, config,
                                           derive_seed(config.seed, 1000 + l), out,
                                           run.traces));
      run.layers.push_back(std::move(out));
    }
    for (auto& [l, conv] : commits) {
      run.model.block(l).conv = std::move(conv);
    }
    timing.seconds = seconds_since(t0);
    run.stages.push_back(timing);
  }
  apply_masks(run.model);
  return run;
}

FinetuneResult final_finetune(const NetworkModel& pruned, const Dataset& data,
                              const TrainSchedule& schedule, std::uint64_t seed) {
  FinetuneResult r;
  r.model = compact_model(pruned);
  r.model.role = ModelRole::Working;
  if (schedule.epochs == 0) {
    return r;
  }
  r.log = train_network(r.model, data.train_images, data.train_labels, schedule, seed, false);
  return r;
}

PipelineResult run_pipeline(const NetworkModel& baseline, const Dataset& data,
                            const PruneConfig& config, FinetuneCache& cache) {
  config.validate();
  PipelineResult res;
  auto t0 = std::chrono::steady_clock::now();
  const NetworkModel with_heads =
      insert_heads(baseline, config.heads, derive_seed(config.seed, 0x4ead));
  res.finetuned = cache.get_or_train(with_heads, data, config.head_finetune,
                                     derive_seed(config.seed, 0xf1), &res.head_log);
  res.seconds_finetune = seconds_since(t0);

  t0 = std::chrono::steady_clock::now();
  NetworkModel frozen = res.finetuned;
  frozen.role = ModelRole::Baseline;
  res.run = run_stagewise_pruning(res.finetuned, frozen, data, config);
  res.pruned = res.run.model;
  res.seconds_selection = seconds_since(t0);

  t0 = std::chrono::steady_clock::now();
  const NetworkModel compacted = compact_model(res.pruned);
  res.error_before_finetune = top1_error(compacted, data.test_images, data.test_labels);
  FinetuneResult fr =
      final_finetune(res.pruned, data, config.final_finetune, derive_seed(config.seed, 0xf2));
  res.final_model = std::move(fr.model);
  res.final_log = std::move(fr.log);
  res.error_after_finetune = top1_error(res.final_model, data.test_images, data.test_labels);
  res.seconds_final = seconds_since(t0);
  return res;
}

json PipelineResult::manifest(const PruneConfig& config, const FinetuneCache& cache) const {
  json stages = json::array();
  for (const StageTiming& s : run.stages) {
    stages.push_back({{"stage", s.stage}, {"seconds", s.seconds}, {"layers", s.layers}});
  }
  json layers = json::array();
  for (const LayerOutcome& o : run.layers) {
    layers.push_back(o.to_json());
  }
  json lr_log = json::array();
  for (const EpochLog& e : final_log.epochs) {
    lr_log.push_back({{"epoch", e.epoch}, {"lr", e.lr}, {"loss", e.loss}});
  }
  return json{{"config", config},
              {"stages", stages},
              {"layers", layers},
              {"feature_cache",
               {{"prefix_sample_layers", run.counters.prefix_sample_layers},
                {"hits", run.counters.cache_hits},
                {"misses", run.counters.cache_misses}}},
              {"finetune_cache",
               {{"requests", cache.requests()},
                {"trainings", cache.trainings()},
                {"hits", cache.hits()},
                {"events", cache.events()}}},
              {"seconds",
               {{"head_finetune", seconds_finetune},
                {"selection", seconds_selection},
                {"final_finetune", seconds_final}}},
              {"final_lr_log", lr_log}};
}

}  // namespace dcp
