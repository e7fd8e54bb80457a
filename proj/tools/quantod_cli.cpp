// quantod: train, score, threshold and evaluate quantile-NLL flow outlier
// detectors from the command line.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "quantod/quantod.hpp"

namespace fs = std::filesystem;
using namespace quantod;

namespace {

const std::vector<std::string> kTrainKeys = {"q",          "epochs",    "batch_size", "learning_rate", "weight_decay",
                                             "dropout",    "blocks",    "fc_layers",  "fc_neurons",    "clamp",
                                             "seed",       "standardize", "loss"};

/// A subcommand whose options are config keys. Flags override values from
/// --config; the merged settings are what the command sees.
struct Command {
  CLI::App* app = nullptr;
  std::string config_path;
  std::map<std::string, std::string> flag_values;
  std::map<std::string, CLI::Option*> flags;

  void option(const std::string& key, const std::string& help) {
    std::string flag = "--" + key;
    for (char& c : flag) {
      if (c == '_') c = '-';
    }
    flags[key] = app->add_option(flag, flag_values[key], help);
  }

  KeyValueConfig settings() const {
    KeyValueConfig kv;
    if (!config_path.empty()) {
      if (!fs::exists(config_path)) throw InputError("config file not found: " + config_path);
      kv = KeyValueConfig::load(config_path);
    }
    for (const auto& [key, opt] : flags) {
      if (opt->count() > 0) kv.set(key, flag_values.at(key));
    }
    return kv;
  }
};

Command make_command(CLI::App& root, const std::string& name, const std::string& help) {
  Command c;
  c.app = root.add_subcommand(name, help);
  return c;
}

void add_config_flag(Command& c) {
  c.app->add_option("--config", c.config_path, "key = value settings file; flags take precedence");
}

std::string required(const KeyValueConfig& kv, const std::string& key) {
  const auto v = kv.get(key);
  if (!v || v->empty()) throw ShapeError("missing required setting '" + key + "'");
  return *v;
}

std::string existing_input(const KeyValueConfig& kv, const std::string& key) {
  const std::string path = required(kv, key);
  if (!fs::exists(path)) throw InputError("input file not found: " + path);
  return path;
}

bool has_extension(const std::string& path, const std::string& ext) {
  return fs::path(path).extension() == ext;
}

FeatureSet read_features(const std::string& path, const KeyValueConfig& kv) {
  FeatureSet set = has_extension(path, ".csv") ? load_csv(path, kv.get_bool("csv_labels", false)) : load_features(path);
  set.validate();
  return set;
}

fs::path output_dir_of_file(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  return parent.empty() ? fs::path(".") : parent;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw InputError("cannot create output directory " + dir.string() + ": " + ec.message());
}

/// The canonical dump of what a run used; it can be passed back via --config.
void echo_config(const KeyValueConfig& kv, const fs::path& dir, const std::string& name) {
  ensure_dir(dir);
  kv.save((dir / (name + ".cfg")).string());
}

TrainConfig effective_train_config(KeyValueConfig& kv) {
  const TrainConfig cfg = train_config_from(kv);
  cfg.validate();
  put_train_config(cfg, kv);
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot open for writing: " + path.string());
  out << text;
}

// --- subcommands ---

int cmd_train(const Command& c) {
  KeyValueConfig kv = c.settings();
  const std::string train_path = existing_input(kv, "train");
  const fs::path out = required(kv, "out");
  const TrainConfig cfg = effective_train_config(kv);
  const FeatureSet data = read_features(train_path, kv);
  echo_config(kv, out, "train");

  TrainOptions opts;
  opts.checkpoint_path = (out / "model.qodm").string();
  opts.on_epoch = [&](const FlowModel&, const EpochRecord& e) {
    std::cerr << "epoch " << e.epoch << "/" << cfg.epochs << " loss " << e.loss << " min_ll " << e.min_ll
              << " median_ll " << e.median_ll << " (" << e.seconds << " s)\n";
  };
  const TrainResult result = train(data, cfg, opts);
  std::ostringstream log;
  result.log.write(log);
  write_text(out / "train_log.txt", log.str());
  std::cout << "model written to " << opts.checkpoint_path << '\n';
  return 0;
}

int cmd_score(const Command& c) {
  KeyValueConfig kv = c.settings();
  const std::string model_path = existing_input(kv, "model");
  const std::string features_path = existing_input(kv, "features");
  const std::string out = required(kv, "out");
  const FlowModel model = load_model(model_path);
  const ScoreSet scores = score(model, read_features(features_path, kv), model_path);
  echo_config(kv, output_dir_of_file(out), "score");
  if (has_extension(out, ".txt")) {
    write_scores_text(scores, out);
  } else {
    save_scores(scores, out);
  }
  std::cout << scores.size() << " scores written to " << out << '\n';
  return 0;
}

int cmd_threshold(const Command& c) {
  KeyValueConfig kv = c.settings();
  const std::string model_path = existing_input(kv, "model");
  const std::string calibration = existing_input(kv, "calibration");
  const std::string out = required(kv, "out");
  const double beta = kv.get_double("beta", 0.95);
  kv.set("beta", format_double(beta));
  const FlowModel model = load_model(model_path);
  const ScoreSet scores = score(model, read_features(calibration, kv), model_path);
  const Threshold t = select_threshold(scores.scores, beta, calibration);
  echo_config(kv, output_dir_of_file(out), "threshold");
  save_threshold(t, out);
  std::cout << std::setprecision(17) << "tau = " << t.tau << '\n';
  return 0;
}

int cmd_eval(const Command& c) {
  KeyValueConfig kv = c.settings();
  const std::string model_path = existing_input(kv, "model");
  const std::string calibration = existing_input(kv, "calibration");
  const std::string outliers = existing_input(kv, "outliers");
  const fs::path out = required(kv, "out");
  const double beta = kv.get_double("beta", 0.95);
  kv.set("beta", format_double(beta));
  const FlowModel model = load_model(model_path);
  const FeatureSet in = read_features(calibration, kv);
  const FeatureSet od = read_features(outliers, kv);
  const Evaluation e = evaluate_detailed(model, in, od, beta);
  echo_config(kv, out, "eval");

  std::ostringstream machine, table, curve;
  e.report.write_machine(machine);
  e.report.write_table(table);
  curve << std::setprecision(17) << "threshold fpr tpr precision\n";
  for (const auto& p : operating_points(e.inlier_scores.scores, e.outlier_scores.scores)) {
    curve << p.threshold << ' ' << p.fpr << ' ' << p.tpr << ' ' << p.precision << '\n';
  }
  write_text(out / "report.txt", machine.str());
  write_text(out / "report_table.txt", table.str());
  write_text(out / "curve.txt", curve.str());
  std::cout << table.str();
  return 0;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string cell;
  KeyValueConfig one;
  while (std::getline(ss, cell, ',')) {
    one.set("seeds", KeyValueConfig::trim(cell));
    seeds.push_back(one.get_uint("seeds", 0));
  }
  if (seeds.empty()) throw ShapeError("seeds is empty");
  return seeds;
}

int cmd_ablate(const Command& c) {
  KeyValueConfig kv = c.settings();
  kv.set("q_list", kv.get("q_list").value_or("mean,0.05"));
  kv.set("seeds", kv.get("seeds").value_or("0"));
  const auto settings = parse_loss_settings(*kv.get("q_list"));
  const auto seeds = parse_seeds(*kv.get("seeds"));
  const fs::path out = required(kv, "out");
  const TrainConfig cfg = effective_train_config(kv);
  kv.erase("seed");  // per-run seeds come from `seeds`

  std::function<AblationData(std::uint64_t)> data_for_seed;
  if (kv.contains("train")) {
    AblationData files;
    files.train = read_features(existing_input(kv, "train"), kv);
    files.inlier_val = read_features(existing_input(kv, "calibration"), kv);
    files.outlier = read_features(existing_input(kv, "outliers"), kv);
    data_for_seed = [files](std::uint64_t) { return files; };
  } else {
    const std::string task = kv.get("task").value_or("heavy-tail");
    if (task != "heavy-tail") throw ShapeError("unknown task '" + task + "'");
    kv.set("task", task);
    const auto dim = static_cast<std::uint32_t>(kv.get_uint("dim", 8));
    const auto n_train = kv.get_uint("n_train", 10000);
    const auto n_val = kv.get_uint("n_val", 5000);
    const auto n_out = kv.get_uint("n_out", 5000);
    const auto data_seed = kv.get_uint("data_seed", 0);
    kv.set("dim", std::to_string(dim));
    kv.set("n_train", std::to_string(n_train));
    kv.set("n_val", std::to_string(n_val));
    kv.set("n_out", std::to_string(n_out));
    kv.set("data_seed", std::to_string(data_seed));
    data_for_seed = [=](std::uint64_t seed) {
      return heavy_tail_data(dim, data_seed + seed, n_train, n_val, n_out);
    };
  }
  echo_config(kv, out, "ablate-q");

  std::ostringstream records;
  run_ablation(data_for_seed, cfg, settings, seeds, [&](const AblationRecord& r) {
    r.write(records);
    r.write(std::cout);
  });
  write_text(out / "ablation.txt", records.str());
  return 0;
}

int cmd_synth(const Command& c) {
  KeyValueConfig kv = c.settings();
  const std::string out = required(kv, "out");
  const auto n = kv.get_uint("n", 1000);
  DistSpec spec;
  if (const auto task = kv.get("task")) {
    const auto dim = static_cast<std::uint32_t>(kv.get_uint("dim", 8));
    const HeavyTailTask t = heavy_tail_task(dim, kv.get_uint("seed", 0));
    if (*task == "heavy-tail-inliers") {
      spec = t.inliers;
    } else if (*task == "heavy-tail-outliers") {
      spec = t.outliers;
    } else {
      throw ShapeError("unknown task '" + *task + "'");
    }
    kv.erase("task");
  } else {
    spec = dist_spec_from(kv);
  }
  put_dist_spec(spec, kv);
  kv.set("n", std::to_string(n));
  FeatureSet set = sample(spec, n);
  if (kv.get_bool("label", false) || kv.contains("label_value")) {
    set.labels = std::vector<std::uint32_t>(set.count(), static_cast<std::uint32_t>(kv.get_uint("label_value", 0)));
  }
  echo_config(kv, output_dir_of_file(out), "synth");
  if (has_extension(out, ".csv")) {
    save_csv(set, out);
  } else {
    save_features(set, out);
  }
  std::cout << set.count() << " x " << set.dim() << " features written to " << out << '\n';
  return 0;
}

int cmd_convert(const Command& c) {
  KeyValueConfig kv = c.settings();
  const std::string in = existing_input(kv, "in");
  const std::string out = required(kv, "out");
  const bool from_csv = has_extension(in, ".csv");
  const FeatureSet set = from_csv ? load_csv(in, kv.get_bool("csv_labels", false)) : load_features(in);
  if (has_extension(out, ".csv")) {
    save_csv(set, out);
  } else {
    save_features(set, out);
  }
  std::cout << set.count() << " x " << set.dim() << " features written to " << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantile-NLL normalizing-flow outlier detection"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "maximum worker threads")->check(CLI::PositiveNumber);

  Command train_cmd = make_command(app, "train", "fit a flow to inlier features");
  add_config_flag(train_cmd);
  train_cmd.option("train", "training features (.qodf or .csv)");
  train_cmd.option("out", "output directory (model.qodm, train_log.txt, train.cfg)");
  train_cmd.option("csv_labels", "CSV inputs carry a final label column");
  for (const auto& key : kTrainKeys) train_cmd.option(key, "training setting '" + key + "'");

  Command score_cmd = make_command(app, "score", "log-likelihood of every feature row");
  add_config_flag(score_cmd);
  score_cmd.option("model", "checkpoint (.qodm)");
  score_cmd.option("features", "features to score");
  score_cmd.option("out", "score file (.qods binary, or .txt)");
  score_cmd.option("csv_labels", "CSV inputs carry a final label column");

  Command threshold_cmd = make_command(app, "threshold", "TPR-beta threshold from calibration inliers");
  add_config_flag(threshold_cmd);
  threshold_cmd.option("model", "checkpoint (.qodm)");
  threshold_cmd.option("calibration", "held-out inlier features");
  threshold_cmd.option("beta", "target inlier detection rate (default 0.95)");
  threshold_cmd.option("out", "threshold file");
  threshold_cmd.option("csv_labels", "CSV inputs carry a final label column");

  Command eval_cmd = make_command(app, "eval", "FPR95, AUROC and AUPR on inlier/outlier features");
  add_config_flag(eval_cmd);
  eval_cmd.option("model", "checkpoint (.qodm)");
  eval_cmd.option("calibration", "held-out inlier features");
  eval_cmd.option("outliers", "outlier features");
  eval_cmd.option("beta", "target inlier detection rate (default 0.95)");
  eval_cmd.option("out", "output directory (report.txt, report_table.txt, curve.txt)");
  eval_cmd.option("csv_labels", "CSV inputs carry a final label column");

  Command ablate_cmd = make_command(app, "ablate-q", "compare loss settings over seeds");
  add_config_flag(ablate_cmd);
  ablate_cmd.option("q_list", "comma-separated settings, e.g. mean,0.05,0.5");
  ablate_cmd.option("seeds", "comma-separated seeds (default 0)");
  ablate_cmd.option("out", "output directory (ablation.txt)");
  ablate_cmd.option("task", "synthetic task when no files are given (heavy-tail)");
  ablate_cmd.option("dim", "synthetic feature dimension (default 8)");
  ablate_cmd.option("n_train", "synthetic training samples (default 10000)");
  ablate_cmd.option("n_val", "synthetic held-out inliers (default 5000)");
  ablate_cmd.option("n_out", "synthetic outliers (default 5000)");
  ablate_cmd.option("data_seed", "offset added to each seed for data generation");
  ablate_cmd.option("train", "training features instead of the synthetic task");
  ablate_cmd.option("calibration", "held-out inlier features");
  ablate_cmd.option("outliers", "outlier features");
  ablate_cmd.option("csv_labels", "CSV inputs carry a final label column");
  for (const auto& key : kTrainKeys) {
    if (key != "q" && key != "loss" && key != "seed") ablate_cmd.option(key, "training setting '" + key + "'");
  }

  Command synth_cmd = make_command(app, "synth", "sample a feature file from a distribution");
  add_config_flag(synth_cmd);
  synth_cmd.option("dist", "standard-normal | mixture | uniform-box | student-t");
  synth_cmd.option("task", "heavy-tail-inliers | heavy-tail-outliers");
  synth_cmd.option("dim", "feature dimension");
  synth_cmd.option("seed", "sampling seed");
  synth_cmd.option("n", "number of samples (default 1000)");
  synth_cmd.option("lo", "uniform-box lower corner");
  synth_cmd.option("hi", "uniform-box upper corner");
  synth_cmd.option("dof", "student-t degrees of freedom");
  synth_cmd.option("scale", "student-t scale");
  synth_cmd.option("label_value", "attach this label to every row");
  synth_cmd.option("out", "output file (.qodf or .csv)");

  Command convert_cmd = make_command(app, "convert", "CSV <-> QODF");
  add_config_flag(convert_cmd);
  convert_cmd.option("in", "input file (.csv or .qodf)");
  convert_cmd.option("out", "output file (.csv or .qodf)");
  convert_cmd.option("csv_labels", "CSV input carries a final label column");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ExitCode::kShape);
  }

  set_max_threads(threads);
  const std::vector<std::pair<const Command*, int (*)(const Command&)>> dispatch = {
      {&train_cmd, cmd_train}, {&score_cmd, cmd_score}, {&threshold_cmd, cmd_threshold},
      {&eval_cmd, cmd_eval},   {&ablate_cmd, cmd_ablate}, {&synth_cmd, cmd_synth},
      {&convert_cmd, cmd_convert}};
  try {
    for (const auto& [cmd, fn] : dispatch) {
      if (cmd->app->parsed()) return fn(*cmd);
    }
  } catch (const Error& e) {
    std::cerr << "quantod: " << e.what() << '\n';
    return static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    std::cerr << "quantod: internal error: " << e.what() << '\n';
    return 1;
  }
  return static_cast<int>(ExitCode::kShape);
}
