#include "dcp/cli.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "dcp/checkpoint.hpp"
#include "dcp/config.hpp"
#include "dcp/errors.hpp"
#include "dcp/pipeline.hpp"
#include "dcp/report.hpp"
#include "dcp/rng.hpp"

namespace dcp {

namespace fs = std::filesystem;
using nlohmann::json;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const InputError*>(&e)) {
    return kExitArtifact;
  }
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  return kExitFailure;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (!path.parent_path().empty()) {
    fs::create_directories(path.parent_path());
  }
  std::ofstream f(path);
  if (!f || !(f << text)) {
    throw FormatError("cannot write " + path.string());
  }
}

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
};

struct PruneFlags {
  std::optional<std::string> mode;
  std::optional<double> eta, eta_min, lambda, epsilon;
  std::optional<std::size_t> b, heads;
  std::optional<std::string> baseline;
  std::string sweep;
};

RunConfig resolve(const CommonFlags& f) {
  RunConfig c = load_run_config(f.config);
  if (f.seed) apply_override(c, "seed", std::to_string(*f.seed));
  if (f.out_dir) c.out_dir = *f.out_dir;
  return c;
}

void check_input_shape(const ArchSpec& arch, const Dataset& ds) {
  if (arch.in_channels != ds.channels() || arch.height != ds.height() ||
      arch.width != ds.width() || arch.classes != ds.classes) {
    throw ConfigError("architecture expects " + std::to_string(arch.in_channels) + "x" +
                      std::to_string(arch.height) + "x" + std::to_string(arch.width) +
                      " inputs and " + std::to_string(arch.classes) +
                      " classes, which the dataset does not provide");
  }
}

// Structural equality of two architectures, ignoring filled-in defaults.
bool same_arch(const ArchSpec& a, const ArchSpec& b) {
  if (a.in_channels != b.in_channels || a.height != b.height || a.width != b.width ||
      a.classes != b.classes || a.layers.size() != b.layers.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    const LayerSpec &x = a.layers[i], &y = b.layers[i];
    if (x.out_channels != y.out_channels || x.kernel != y.kernel || x.stride != y.stride ||
        x.pad != y.pad || x.batch_norm != y.batch_norm || x.bias != y.bias ||
        x.residual_from != y.residual_from) {
      return false;
    }
  }
  return true;
}

int cmd_train(const CommonFlags& flags, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = resolve(flags);
  const Dataset ds = load_data(cfg.data);
  check_input_shape(cfg.arch, ds);
  NetworkModel model = build_network(cfg.arch, derive_seed(cfg.seed, 0xa));
  err << "training baseline: " << ds.train_labels.size() << " samples, " << cfg.train.epochs
      << " epochs\n";
  const TrainLog log =
      train_network(model, ds.train_images, ds.train_labels, cfg.train, derive_seed(cfg.seed, 0xb),
                    false);
  model.role = ModelRole::Baseline;
  const double test_error = top1_error(model, ds.test_images, ds.test_labels);
  const ModelStats stats = count_stats(model);
  json epochs = json::array();
  for (const EpochLog& e : log.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"lr", e.lr}, {"loss", e.loss}});
  }
  const json metrics{{"test_error", test_error}, {"params", stats.param_count},
                     {"macs", stats.mac_count},  {"seed", cfg.seed},
                     {"initial_loss", log.initial_loss}, {"epochs", epochs}};
  fs::create_directories(cfg.out_dir);
  save_checkpoint(model, cfg.baseline_path(), json{{"test_error", test_error}, {"seed", cfg.seed}});
  write_text(fs::path(cfg.out_dir) / "metrics.json", metrics.dump(2) + "\n");
  out << metrics.dump() << "\n";
  return kExitOk;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    parts.push_back(item);
  }
  return parts;
}

void write_run(const fs::path& dir, const RunReport& report, const PipelineResult& res,
               const PruneConfig& config, const FinetuneCache& cache) {
  fs::create_directories(dir);
  save_checkpoint(res.final_model, (dir / "pruned.dcpk").string(),
                  json{{"test_error", report.pruned.top1_error}});
  json metrics = report.to_json();
  metrics["error_before_finetune"] = res.error_before_finetune;
  write_text(dir / "metrics.json", metrics.dump(2) + "\n");
  write_text(dir / "manifest.json", res.manifest(config, cache).dump(2) + "\n");
  std::string traces;
  for (const TraceRecord& t : res.run.traces) {
    const std::size_t c = res.run.model.block(t.layer_id).conv.channels();
    traces += t.to_json(c).dump() + "\n";
  }
  write_text(dir / "traces.jsonl", traces);
  write_text(dir / "report.csv", report_csv({report}));
  write_text(dir / "layers.csv", layer_csv({report}));
}

int cmd_prune(const CommonFlags& flags, const PruneFlags& pf, std::ostream& out,
              std::ostream& err) {
  RunConfig cfg = resolve(flags);
  if (pf.mode) apply_override(cfg, "mode", *pf.mode);
  auto num = [&](const char* name, const std::optional<double>& v) {
    if (v) {
      std::ostringstream s;
      s.precision(17);
      s << *v;
      apply_override(cfg, name, s.str());
    }
  };
  num("eta", pf.eta);
  num("eta_min", pf.eta_min);
  num("lambda", pf.lambda);
  num("epsilon", pf.epsilon);
  if (pf.b) apply_override(cfg, "B", std::to_string(*pf.b));
  if (pf.heads) apply_override(cfg, "heads", std::to_string(*pf.heads));
  if (pf.baseline) cfg.baseline = *pf.baseline;

  std::string sweep_param;
  std::vector<std::string> sweep_values;
  if (!pf.sweep.empty()) {
    const auto eq = pf.sweep.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == pf.sweep.size()) {
      throw ConfigError("--sweep expects <param>=<v1,v2,...>");
    }
    sweep_param = pf.sweep.substr(0, eq);
    sweep_values = split(pf.sweep.substr(eq + 1), ',');
    for (const std::string& v : sweep_values) {
      RunConfig probe = cfg;
      apply_override(probe, sweep_param, v);
    }
  }

  const NetworkModel baseline = load_checkpoint(cfg.baseline_path());
  if (!same_arch(baseline.arch, cfg.arch)) {
    throw FormatError("checkpoint " + cfg.baseline_path() +
                      " does not match the architecture in the config");
  }
  if (!baseline.heads.empty()) {
    throw FormatError("checkpoint " + cfg.baseline_path() + " is not a plain baseline");
  }
  const Dataset ds = load_data(cfg.data);
  check_input_shape(cfg.arch, ds);
  const double baseline_error = top1_error(baseline, ds.test_images, ds.test_labels);
  FinetuneCache cache((fs::path(cfg.out_dir) / "cache").string());

  std::vector<std::pair<std::string, RunConfig>> runs;
  if (sweep_values.empty()) {
    runs.emplace_back("", cfg);
  } else {
    for (const std::string& v : sweep_values) {
      RunConfig c = cfg;
      apply_override(c, sweep_param, v);
      runs.emplace_back(sweep_param + "=" + v, c);
    }
  }
  json summary = json::array();
  for (const auto& [tag, rc] : runs) {
    err << "pruning" << (tag.empty() ? "" : " [" + tag + "]") << ": mode "
        << mode_name(rc.prune.mode) << "\n";
    const auto t0 = std::chrono::steady_clock::now();
    const PipelineResult res = run_pipeline(baseline, ds, rc.prune, cache);
    RunReport report = make_report(tag.empty() ? "run" : tag, mode_name(rc.prune.mode), baseline,
                                   baseline_error, res.final_model, res.error_after_finetune);
    report.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.config = rc;
    const fs::path dir = tag.empty() ? fs::path(rc.out_dir) : fs::path(rc.out_dir) / tag;
    write_run(dir, report, res, rc.prune, cache);
    summary.push_back({{"name", report.name},
                       {"dir", dir.string()},
                       {"pruned_top1_error", report.pruned.top1_error},
                       {"flops_reduction_pct", report.flops_reduction_pct()},
                       {"param_reduction_pct", report.param_reduction_pct()}});
  }
  out << summary.dump() << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& config, const std::string& data,
             const std::string& out_path, std::ostream& out) {
  DataSpec spec;
  if (!data.empty()) {
    spec.path = data;
  } else if (!config.empty()) {
    spec = load_run_config(config).data;
  } else {
    throw ConfigError("eval needs --config or --data");
  }
  const NetworkModel model = load_checkpoint(checkpoint);
  const Dataset ds = load_data(spec);
  check_input_shape(model.arch, ds);
  const double error = top1_error(model, ds.test_images, ds.test_labels);
  const ModelStats s = count_stats(model);
  const json metrics{{"checkpoint", checkpoint},
                     {"test_error", error},
                     {"params", s.param_count},
                     {"macs", s.mac_count},
                     {"dense_macs", s.dense_mac_count}};
  if (!out_path.empty()) {
    write_text(out_path, metrics.dump(2) + "\n");
  }
  out << metrics.dump() << "\n";
  return kExitOk;
}

int cmd_report(const std::string& run_dir, std::ostream& out) {
  if (!fs::is_directory(run_dir)) {
    throw FormatError("run directory '" + run_dir + "' does not exist");
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(run_dir)) {
    if (entry.is_regular_file() && entry.path().filename() == "metrics.json") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<RunReport> reports;
  for (const fs::path& p : files) {
    std::ifstream f(p);
    json j;
    try {
      j = json::parse(f);
    } catch (const json::exception& e) {
      throw FormatError(p.string() + ": " + e.what());
    }
    if (j.contains("pruned")) {
      RunReport r = RunReport::from_json(j);
      r.name = fs::relative(p.parent_path(), run_dir).string();
      reports.push_back(std::move(r));
    }
  }
  if (reports.empty()) {
    throw FormatError("no pruning runs found under '" + run_dir + "'");
  }
  const std::string csv = report_csv(reports);
  write_text(fs::path(run_dir) / "report.csv", csv);
  write_text(fs::path(run_dir) / "layers.csv", layer_csv(reports));
  out << csv;
  return kExitOk;
}

// CIFAR-10 binary batches: per record one label byte and 3072 pixel bytes
// (1024 red, 1024 green, 1024 blue, row-major 32x32).
Dataset convert_cifar(const std::vector<std::string>& train, const std::vector<std::string>& test) {
  auto read = [](const std::vector<std::string>& files, Tensor& images, std::vector<int>& labels) {
    std::vector<double> pixels;
    for (const std::string& path : files) {
      std::ifstream f(path, std::ios::binary);
      if (!f) throw FormatError("cannot open " + path);
      const std::string bytes((std::istreambuf_iterator<char>(f)),
                              std::istreambuf_iterator<char>());
      if (bytes.empty() || bytes.size() % 3073 != 0) {
        throw FormatError(path + " is not a CIFAR-10 binary batch");
      }
      for (std::size_t r = 0; r < bytes.size() / 3073; ++r) {
        const auto* rec = reinterpret_cast<const unsigned char*>(bytes.data()) + r * 3073;
        if (rec[0] > 9) throw FormatError(path + ": label out of range");
        labels.push_back(rec[0]);
        for (std::size_t q = 1; q < 3073; ++q) {
          pixels.push_back(rec[q] / 255.0);
        }
      }
    }
    images = Tensor({labels.size(), 3, 32, 32}, std::move(pixels), DType::Float32);
  };
  Dataset ds;
  ds.name = "cifar10";
  ds.classes = 10;
  read(train, ds.train_images, ds.train_labels);
  if (!test.empty()) {
    read(test, ds.test_images, ds.test_labels);
  } else {
    ds.test_images = Tensor({0, 3, 32, 32});
  }
  return ds;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Discrimination-aware channel and kernel pruning for small CNNs", "dcp"};
  app.require_subcommand(1);

  CommonFlags train_flags, prune_flags;
  PruneFlags pf;
  auto* train = app.add_subcommand("train", "Train a baseline network from scratch");
  train->add_option("--config", train_flags.config, "Run config (JSON)")->required();
  train->add_option("--seed", train_flags.seed, "Override the run seed");
  train->add_option("--out-dir", train_flags.out_dir, "Output directory");

  auto* prune = app.add_subcommand("prune", "Prune a trained baseline");
  prune->add_option("--config", prune_flags.config, "Run config (JSON)")->required();
  prune->add_option("--seed", prune_flags.seed, "Override the run seed");
  prune->add_option("--out-dir", prune_flags.out_dir, "Output directory");
  prune->add_option("--mode", pf.mode, "dcp | adapt-dcp | dkp-only | dcp+dkp | adapt-dkp");
  prune->add_option("--eta", pf.eta, "Pruning rate");
  prune->add_option("--eta-min", pf.eta_min, "Minimum pruning rate of the adaptive modes");
  prune->add_option("--lambda", pf.lambda, "Reconstruction weight");
  prune->add_option("--b", pf.b, "Groups added per greedy iteration");
  prune->add_option("--epsilon", pf.epsilon, "Relative loss-decrease tolerance");
  prune->add_option("--heads", pf.heads, "Number of auxiliary loss heads");
  prune->add_option("--baseline", pf.baseline, "Baseline checkpoint");
  prune->add_option("--sweep", pf.sweep, "param=v1,v2,... runs one pruning per value");

  std::string ckpt, eval_config, eval_data, eval_out;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a test split");
  eval->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  eval->add_option("--config", eval_config, "Run config naming the dataset");
  eval->add_option("--data", eval_data, "DCPD dataset file");
  eval->add_option("--out", eval_out, "Write metrics JSON here");

  std::string run_dir;
  auto* report = app.add_subcommand("report", "Aggregate pruning runs into CSV");
  report->add_option("--run-dir", run_dir, "Directory holding run outputs")->required();

  std::string synth_out;
  SynthOptions so;
  auto* synth = app.add_subcommand("synth", "Write a synthetic classification dataset");
  synth->add_option("--out", synth_out, "Output DCPD file")->required();
  synth->add_option("--classes", so.classes);
  synth->add_option("--n-train", so.n_train);
  synth->add_option("--n-test", so.n_test);
  synth->add_option("--height", so.height);
  synth->add_option("--width", so.width);
  synth->add_option("--separability", so.separability);
  synth->add_option("--texture", so.texture);
  synth->add_option("--noise", so.noise);
  synth->add_option("--seed", so.seed);

  std::vector<std::string> cifar_train, cifar_test;
  std::string convert_out;
  auto* convert = app.add_subcommand("convert", "Import CIFAR-10 binary batches");
  convert->add_option("--cifar-train", cifar_train, "data_batch_*.bin files")->required();
  convert->add_option("--cifar-test", cifar_test, "test_batch.bin");
  convert->add_option("--out", convert_out, "Output DCPD file")->required();

  std::vector<std::string> argv{"dcp"};
  argv.insert(argv.end(), args.begin(), args.end());
  std::vector<const char*> cargs;
  for (const std::string& a : argv) cargs.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargs.size()), cargs.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (*train) return cmd_train(train_flags, out, err);
    if (*prune) return cmd_prune(prune_flags, pf, out, err);
    if (*eval) return cmd_eval(ckpt, eval_config, eval_data, eval_out, out);
    if (*report) return cmd_report(run_dir, out);
    if (*synth) {
      save_dataset(synth_classification(so), synth_out);
      out << synth_out << "\n";
      return kExitOk;
    }
    if (*convert) {
      save_dataset(convert_cifar(cifar_train, cifar_test), convert_out);
      out << convert_out << "\n";
      return kExitOk;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return kExitFailure;
}

}  // namespace dcp
