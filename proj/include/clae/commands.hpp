#pragma once

// Command-line front end: pretrain, eval, attack-bench, gradcheck.
//
// Exit codes: 0 ok, 1 usage, 2 config / format / schema, 3 numeric failure,
// 4 I/O.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "clae/bench.hpp"
#include "clae/checkpoint.hpp"
#include "clae/config.hpp"
#include "clae/data.hpp"
#include "clae/errors.hpp"
#include "clae/eval.hpp"
#include "clae/gradcheck.hpp"
#include "clae/metrics.hpp"
#include "clae/trainer.hpp"

namespace clae {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitConfig = 2, kExitNumeric = 3, kExitIo = 4 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// --- datasets --------------------------------------------------------------

struct DataSplits {
  Dataset train;
  Dataset test;
};

inline Dataset take_first(const Dataset& ds, std::size_t n) {
  if (n == 0 || n >= ds.size()) return ds;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Dataset out;
  out.name = ds.name;
  out.shape = ds.shape;
  out.images = ds.gather(idx);
  out.labels = ds.gather_labels(idx);
  out.class_count = ds.class_count;
  return out;
}

inline std::filesystem::path data_root(const DatasetConfig& cfg) {
  if (!cfg.data_dir.empty()) return cfg.data_dir;
  if (const char* env = std::getenv("CLAE_DATA_DIR"); env != nullptr && *env != '\0') return env;
  throw ConfigError("dataset.kind=cifar10 needs dataset.data_dir or $CLAE_DATA_DIR");
}

inline DataSplits load_splits(const RunConfig& cfg) {
  DataSplits s;
  if (cfg.dataset.kind == DatasetKind::synthetic) {
    SyntheticSpec spec = cfg.dataset.synthetic;
    s.train = make_synthetic(spec, cfg.dataset.synthetic_seed);
    spec.per_class = cfg.dataset.synthetic_test_per_class;
    s.test = make_synthetic(spec, cfg.dataset.synthetic_seed + 1);
  } else {
    const auto root = data_root(cfg.dataset);
    s.train = load_cifar10(cifar10_split_files(root, true), cfg.dataset.subset);
    s.test = load_cifar10(cifar10_split_files(root, false), cfg.dataset.test_subset);
  }
  s.train = take_first(s.train, cfg.dataset.subset);
  s.test = take_first(s.test, cfg.dataset.test_subset);
  if (s.train.shape.size() != cfg.encoder.input_dim)
    throw ConfigError("encoder.input_dim=" + std::to_string(cfg.encoder.input_dim) +
                      " does not match the " + std::to_string(s.train.shape.size()) +
                      "-value images of dataset " + s.train.name);
  return s;
}

// --- shared options --------------------------------------------------------

struct CommonOptions {
  std::string config;
  std::string out;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<double> epsilon, alpha;
  std::optional<std::size_t> epochs, batch_size, subset;
  std::optional<std::string> dataset;
  bool force = false;
};

inline void add_common_options(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "JSON config file");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--set", o.sets, "dotted override key=value (repeatable)");
  cmd->add_option("--seed", o.seed, "master seed");
  cmd->add_option("--epsilon", o.epsilon, "attack budget (L-inf)");
  cmd->add_option("--alpha", o.alpha, "weight of the adversarial loss");
  cmd->add_option("--epochs", o.epochs, "pretraining epochs");
  cmd->add_option("--batch-size", o.batch_size, "batch size");
  cmd->add_option("--dataset", o.dataset, "cifar10 | synthetic")
      ->check(CLI::IsMember({"cifar10", "synthetic"}));
  cmd->add_option("--subset", o.subset, "use the first N training images");
  cmd->add_flag("--force", o.force, "reuse an existing output directory");
}

// Config file, then --set overrides, then the dedicated flags.
inline RunConfig resolve_config(const CommonOptions& o) {
  Json tree = o.config.empty() ? Json::object() : read_config_file(o.config);
  if (!tree.is_object()) throw ConfigError(o.config + ": top level must be an object");
  for (const auto& s : o.sets) apply_override(tree, s);
  auto put = [&tree](const std::string& key, Json value) {
    apply_override(tree, key + "=" + value.dump());
  };
  if (!o.out.empty()) put("out", o.out);
  if (o.seed) put("seed", *o.seed);
  if (o.epsilon) put("attack.epsilon", *o.epsilon);
  if (o.alpha) put("train.alpha", *o.alpha);
  if (o.epochs) put("train.epochs", *o.epochs);
  if (o.batch_size) put("train.batch_size", *o.batch_size);
  if (o.dataset) put("dataset.kind", *o.dataset);
  if (o.subset) put("dataset.subset", *o.subset);
  try {
    return run_config_from_json(tree);
  } catch (const Json::exception& e) {
    throw ConfigError(e.what());
  }
}

inline void prepare_out_dir(const std::filesystem::path& out, bool force) {
  namespace fs = std::filesystem;
  if (out.empty()) throw UsageError("an output directory is required (--out or \"out\" in the config)");
  if (fs::exists(out) && !(fs::is_directory(out) && fs::is_empty(out)) && !force)
    throw UsageError("output directory " + out.string() + " exists; pass --force to reuse it");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  for (const char* name : {"encoder.ckpt", "metrics.jsonl", "config.echo"}) fs::remove(out / name, ec);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("short write to " + path.string());
}

// --- commands --------------------------------------------------------------

inline int cmd_pretrain(const CommonOptions& o, std::ostream& log) {
  const RunConfig cfg = resolve_config(o);
  const std::filesystem::path out = cfg.out;
  const DataSplits data = load_splits(cfg);
  prepare_out_dir(out, o.force);
  write_text(out / "config.echo", config_echo(cfg));
  MetricsWriter metrics(out / "metrics.jsonl", run_id(cfg), false);
  const TrainConfig train = cfg.resolved_train();
  log << "pretrain: " << data.train.size() << " images, " << train.epochs << " epochs, batch "
      << train.batch_size << ", attack " << (train.attack_enabled ? to_string(train.attack.method) : "off")
      << " eps=" << train.attack.epsilon << " alpha=" << train.alpha << "\n";
  const TrainState state = pretrain(data.train, cfg.encoder, train, [&](const MetricEvent& e) {
    metrics.write(e);
    if (e.name == "epoch_mean_L_total")
      log << "epoch " << e.epoch << "  L_total " << e.value << "\n";
  });
  save_checkpoint(out / "encoder.ckpt", state.encoder);
  log << "wrote " << (out / "encoder.ckpt").string() << "\n";
  return kExitOk;
}

struct EvalOptions {
  std::string checkpoint;
  std::string method = "knn";
  std::string metrics;
};

inline nlohmann::json report_json(const EvalReport& r) {
  return nlohmann::json{{"method", r.method},   {"accuracy", r.accuracy},
                        {"correct", r.correct}, {"total", r.total},
                        {"config", r.config},   {"per_class_accuracy", r.per_class_accuracy}};
}

inline int cmd_eval(const CommonOptions& o, const EvalOptions& e, std::ostream& log) {
  if (e.checkpoint.empty()) throw UsageError("eval needs --checkpoint");
  const std::filesystem::path ckpt = e.checkpoint;
  const EncoderState encoder = load_checkpoint(ckpt);
  RunConfig cfg = resolve_config(o);
  if (o.config.empty()) cfg.encoder = encoder.config;
  if (!(cfg.encoder == encoder.config))
    throw SchemaError("checkpoint encoder config does not match the run config encoder section");
  const DataSplits data = load_splits(cfg);
  const FeatureBank train = extract_features(data.train, encoder);
  const FeatureBank test = extract_features(data.test, encoder);
  EvalReport report;
  if (e.method == "knn") {
    KnnConfig k = cfg.eval.knn_k > 0 ? KnnConfig{} : KnnConfig::for_bank_size(train.size());
    if (cfg.eval.knn_k > 0) k.k = cfg.eval.knn_k;
    k.temperature = cfg.eval.knn_temperature;
    k.weighted = cfg.eval.knn_weighted;
    report = knn_eval(train, test, k);
  } else if (e.method == "probe") {
    ProbeConfig p;
    p.epochs = cfg.eval.probe_epochs;
    p.learning_rate = cfg.eval.probe_lr;
    p.batch_size = cfg.eval.probe_batch_size;
    p.seed = cfg.seed;
    report = linear_probe(train, test, p);
  } else {
    throw UsageError("unknown eval method '" + e.method + "' (knn|probe)");
  }
  log << report.method << " accuracy " << report.accuracy << " (" << report.correct << "/"
      << report.total << ")  " << report.config << "\n";
  const std::filesystem::path mpath =
      e.metrics.empty() ? ckpt.parent_path() / "metrics.jsonl" : std::filesystem::path(e.metrics);
  MetricsWriter metrics(mpath, run_id(cfg), true);
  metrics.write(0, 0, "eval_" + report.method + "_accuracy", report.accuracy, report_json(report));
  return kExitOk;
}

struct BenchOptions {
  std::string checkpoint;
  std::vector<std::string> methods{"fgsm", "random"};
  std::vector<double> epsilons{0.03};
  std::size_t batches = 10;
  std::size_t steps = 1;
};

inline int cmd_attack_bench(const CommonOptions& o, const BenchOptions& b, std::ostream& log) {
  if (b.checkpoint.empty()) throw UsageError("attack-bench needs --checkpoint");
  BenchConfig bc;
  bc.methods.clear();
  for (const auto& m : b.methods) {
    try {
      bc.methods.push_back(parse_attack_method(m));
    } catch (const std::exception&) {
      throw UsageError("unknown attack method '" + m + "' (fgsm|r_fgsm|f_fgsm|pgd|random)");
    }
  }
  for (double eps : b.epsilons)
    if (!(eps >= 0.0)) throw UsageError("epsilons must be >= 0");
  const EncoderState encoder = load_checkpoint(b.checkpoint);
  CommonOptions co = o;
  RunConfig cfg = resolve_config(co);
  if (o.config.empty()) cfg.encoder = encoder.config;
  if (!(cfg.encoder == encoder.config))
    throw SchemaError("checkpoint encoder config does not match the run config encoder section");
  const DataSplits data = load_splits(cfg);
  bc.epsilons = b.epsilons;
  bc.batches = b.batches;
  bc.batch_size = o.batch_size.value_or(64);
  bc.pgd_steps = b.steps;
  bc.seed = cfg.seed;
  bc.loss = cfg.train.loss;
  const std::vector<BenchRow> rows = run_attack_bench(data.test, encoder, bc);
  log << format_bench_table(rows);
  return kExitOk;
}

struct GradcheckCliOptions {
  std::string scope = "all";
  std::size_t instances = 100;
  std::uint64_t seed = 0;
  std::string corrupt_op;
  double corrupt_scale = 1.5;
};

inline int cmd_gradcheck(const GradcheckCliOptions& g, std::ostream& log) {
  GradcheckOptions opts;
  opts.scope = parse_gradcheck_scope(g.scope);
  opts.instances = g.instances;
  opts.seed = g.seed;
  auto& fault = testing::gradient_fault();
  fault = testing::GradientFault{g.corrupt_op, g.corrupt_scale};
  GradcheckReport report;
  try {
    report = run_gradcheck(opts);
  } catch (...) {
    fault = {};
    throw;
  }
  fault = {};
  for (const auto& c : report.checks) log << format_outcome(c) << "\n";
  if (const CheckOutcome* w = report.worst())
    log << "worst: " << w->scope << "/" << w->name << " rel_error=" << w->worst_error << "\n";
  if (report.ok()) {
    log << "gradcheck passed (" << report.checks.size() << " checks)\n";
    return kExitOk;
  }
  for (const auto& c : report.checks)
    if (!c.ok) {
      log << "gradcheck FAILED in " << c.name << "; op:";
      for (const auto& s : c.suspects) log << " " << s;
      log << "\n";
      break;
    }
  return kExitNumeric;
}

// --- entry point -----------------------------------------------------------

inline int run_cli(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"clae: contrastive pretraining with adversarial augmentations"};
  app.require_subcommand(1);

  CommonOptions common;
  CLI::App* pre = app.add_subcommand("pretrain", "train an encoder and write a checkpoint");
  add_common_options(pre, common);

  CommonOptions eval_common;
  EvalOptions eval_opts;
  CLI::App* ev = app.add_subcommand("eval", "kNN or linear-probe accuracy of a checkpoint");
  add_common_options(ev, eval_common);
  ev->add_option("--checkpoint", eval_opts.checkpoint, "encoder.ckpt to evaluate")->required();
  ev->add_option("--method", eval_opts.method, "knn | probe")->check(CLI::IsMember({"knn", "probe"}));
  ev->add_option("--metrics", eval_opts.metrics, "metrics file to append to");

  CommonOptions bench_common;
  BenchOptions bench_opts;
  CLI::App* bench = app.add_subcommand("attack-bench", "compare attacks on fixed batches");
  add_common_options(bench, bench_common);
  bench->add_option("--checkpoint", bench_opts.checkpoint, "encoder.ckpt to attack")->required();
  bench->add_option("--methods", bench_opts.methods, "attack methods")->delimiter(',');
  bench->add_option("--epsilons", bench_opts.epsilons, "budgets")->delimiter(',');
  bench->add_option("--batches", bench_opts.batches, "number of fixed batches");
  bench->add_option("--steps", bench_opts.steps, "pgd steps");

  GradcheckCliOptions gc;
  CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  grad->add_option("--scope", gc.scope, "numerics | losses | encoder | attack | all")
      ->check(CLI::IsMember({"numerics", "losses", "encoder", "attack", "all"}));
  grad->add_option("--instances", gc.instances, "instances per check");
  grad->add_option("--seed", gc.seed, "seed");
  grad->add_option("--corrupt-op", gc.corrupt_op)->group("");
  grad->add_option("--corrupt-scale", gc.corrupt_scale)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (pre->parsed()) return cmd_pretrain(common, out);
    if (ev->parsed()) return cmd_eval(eval_common, eval_opts, out);
    if (bench->parsed()) return cmd_attack_bench(bench_common, bench_opts, out);
    if (grad->parsed()) return cmd_gradcheck(gc, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const SchemaError& e) {
    err << "schema error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ContractViolation& e) {
    err << "invalid argument: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericDomainError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "i/o error: " << e.what() << "\n";
    return kExitIo;
  }
  err << "usage error: no command\n";
  return kExitUsage;
}

}  // namespace clae
